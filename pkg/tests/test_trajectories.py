"""Integrator, classification, and ensemble statistics.

Two layouts are used.  The small one (arm 400, separation 800, ell = 100)
is cheap but its arms never separate beyond ~2.6 ell, so every arm
assignment falls inside the 4-ell margin band and is flagged ambiguous;
the outputs still separate to 11.3 ell by the final probe and classify
cleanly.  The production-scale layout (arm 3200, separation 1920,
ell = 160) resolves everything and is used for the physics smoke tests.

Exact single-branch facts used below: in one dispersive Gaussian branch
the flow is rc(t) + u0 * |w(t)| / ell^2 with w = ell^2 + i t, so a
trajectory started exactly at the packet centers rides them in a straight
line at speed k, and an offset start scales radially by |w|/ell^2.
"""
import math

import numpy as np
import pytest

from hardyflux import field, modes, trajectories
from hardyflux._kernels import eval_field
from hardyflux.geometry import build_layout, with_delta
from hardyflux.trajectories import (BiTrajectory, Controls, classify_arms,
                                    classify_outputs, integrate, record_grid,
                                    run_ensemble, sample_initial, scan_delta)

ELL = 100.0


@pytest.fixture(scope="module")
def small():
    return build_layout(400.0, 800.0, 1.0, ELL, 1.0)


@pytest.fixture(scope="module")
def fig_scale():
    return build_layout(3200.0, 1920.0, 1.0, 160.0, 1.0)


@pytest.fixture(scope="module")
def small_run(small):
    return run_ensemble(250, small, mode="annihilate", seed=11, keep=250)


def test_kernel_matches_field_current(small):
    """The compiled field agrees with the reference implementation."""
    tl = field.evolve_wave(small, "annihilate")
    rng = np.random.default_rng(3)
    sc = np.empty((8, 5), dtype=complex)
    for t in (100.0, 300.0, 500.0, 700.0):
        state = tl.state_at(t)
        arrays = field.state_arrays(state)
        centers = [p.center(t) for p in state.packets["A"].values()]
        centers_b = [p.center(t) for p in state.packets["B"].values()]
        for _ in range(20):
            r1 = centers[rng.integers(len(centers))] + rng.normal(size=2) * ELL
            r2 = centers_b[rng.integers(len(centers_b))] \
                + rng.normal(size=2) * ELL
            ref = field.current(state, r1, r2, t)
            rho, j1x, j1y, j2x, j2y, _ = eval_field(
                r1[0], r1[1], r2[0], r2[1], t, *arrays, sc)
            assert rho == pytest.approx(ref.rho, rel=1e-12, abs=0.0)
            got = np.array([j1x, j1y, j2x, j2y])
            assert np.allclose(got, ref.j, rtol=1e-12,
                               atol=1e-12 * max(abs(ref.j).max(), 1e-300))


def test_center_start_rides_centers(small):
    tl = field.evolve_wave(small, "none")
    s0 = field.initial_state(tl)
    pa = s0.packets["A"]["a0"]
    pb = s0.packets["B"]["b0"]
    start = np.concatenate([pa.center(0.0), pb.center(0.0)])
    traj = integrate(start, tl)
    assert traj.status == "completed"
    pre = traj.times <= small.t_input
    assert pre.sum() >= 5
    for t, pos in zip(traj.times[pre], traj.positions[pre]):
        want = np.concatenate([pa.center(t), pb.center(t)])
        assert np.max(np.abs(pos - want)) <= 1e-9 * ELL


def test_offset_start_follows_spreading_map(small):
    tl = field.evolve_wave(small, "none")
    s0 = field.initial_state(tl)
    pa = s0.packets["A"]["a0"]
    pb = s0.packets["B"]["b0"]
    u0 = np.array([0.3 * ELL, -0.2 * ELL, 0.25 * ELL, 0.1 * ELL])
    start = np.concatenate([pa.center(0.0), pb.center(0.0)]) + u0
    traj = integrate(start, tl)
    pre = (traj.times > 0) & (traj.times <= small.t_input)
    for t, pos in zip(traj.times[pre], traj.positions[pre]):
        scale = abs(pa.w(t)) / ELL ** 2
        want = np.concatenate([pa.center(t), pb.center(t)]) + u0 * scale
        assert np.max(np.abs(pos - want)) <= 1e-9 * np.max(np.abs(want))


def test_start_outside_support_aborts(small):
    tl = field.evolve_wave(small, "annihilate")
    start = np.array([50 * ELL, 50 * ELL, -50 * ELL, 30 * ELL])
    traj = integrate(start, tl)
    assert traj.status == "node_abort"
    assert traj.times[0] == 0.0 and traj.times.size == 1
    assert np.array_equal(traj.positions[0], start)


def test_record_grid_contains_probes_and_boundaries(small):
    tl = field.evolve_wave(small, "annihilate")
    grid = record_grid(tl, Controls())
    assert grid[0] == 0.0
    for t in (small.t_arm_probe, small.t_final_probe) + tl.boundaries:
        assert t in grid
    assert np.all(np.diff(grid) > 0)


def test_sample_initial_moments_and_determinism(small):
    tl = field.evolve_wave(small, "annihilate")
    s0 = field.initial_state(tl)
    n = 100_000
    pts = sample_initial(n, s0, seed=5)
    again = sample_initial(n, s0, seed=5)
    assert np.array_equal(pts, again)
    centers = np.concatenate([s0.packets["A"]["a0"].center(0.0),
                              s0.packets["B"]["b0"].center(0.0)])
    sigma = ELL / math.sqrt(2.0)
    assert np.max(np.abs(pts.mean(axis=0) - centers)) < 5 * sigma / math.sqrt(n)
    var = pts.var(axis=0)
    assert np.max(np.abs(var - ELL ** 2 / 2)) < 3 * math.sqrt(2.0 / n) * var.max()
    with pytest.raises(ValueError):
        sample_initial(4, tl.state_at(300.0), seed=0)


def test_small_run_counts_and_statuses(small, small_run):
    stats, kept = small_run
    assert stats.n_sampled == 250
    assert stats.n_sampled == (stats.n_completed + stats.n_annihilated
                               + stats.n_aborted)
    assert stats.n_annihilated > 0
    assert stats.n_aborted <= 0.05 * stats.n_sampled
    assert stats.survival == 0.75
    assert {t.status for t in kept} <= {"completed", "annihilated",
                                        "node_abort"}
    # arms never separate past the margin band on this layout
    assert stats.n_ambiguous_arm == stats.n_completed
    assert stats.arm_fractions == {}


def test_annihilated_trajectories_end_in_dominance(small, small_run):
    """Termination at t_ann is exactly the dominance-region membership."""
    _, kept = small_run
    t_ann = small.t_annihilation
    seen = 0
    for traj in kept:
        if traj.status == "node_abort":
            continue
        mask, _ = trajectories._dominance_mask(
            traj.positions[traj.times == t_ann], small, t_ann, 0.0)
        if traj.status == "annihilated":
            assert traj.times[-1] == t_ann
            assert mask[0]
            assert traj.arm_class == ("a2", "b2")
            assert traj.output_class is None
            seen += 1
        else:
            assert traj.times[-1] == small.t_final_probe
            assert not mask[0]
    assert seen > 0


def test_no_crossing_in_configuration_space(small_run):
    """Distinct flux lines never meet at equal times (4D separation)."""
    _, kept = small_run
    rng = np.random.default_rng(7)
    pairs = {tuple(sorted(rng.choice(len(kept), 2, replace=False)))
             for _ in range(150)}
    smallest = np.inf
    for i, j in list(pairs)[:100]:
        a, b = kept[i], kept[j]
        m = min(a.times.size, b.times.size)
        assert np.array_equal(a.times[:m], b.times[:m])
        d = np.linalg.norm(a.positions[:m] - b.positions[:m], axis=1)
        smallest = min(smallest, d.min())
    assert smallest > 1e-6 * ELL


def test_same_seed_is_bitwise_identical(small):
    s1, k1 = run_ensemble(80, small, seed=3, keep=80)
    s2, k2 = run_ensemble(80, small, seed=3, keep=80)
    assert s1.to_jsonable() == s2.to_jsonable()
    for a, b in zip(k1, k2):
        assert np.array_equal(a.positions, b.positions)
        assert a.status == b.status
    s3, _ = run_ensemble(80, small, seed=4, keep=0)
    assert s3.to_jsonable() != s1.to_jsonable()


def test_mode_none_sends_everything_to_the_bright_port(small):
    stats, kept = run_ensemble(150, small, mode="none", seed=2, keep=150)
    assert stats.n_annihilated == 0
    assert stats.survival is None
    assert stats.output_fractions["A1,B1"] == 1.0
    assert stats.max_born_deviation <= 1e-12
    done = [t for t in kept if t.status == "completed"]
    assert all(t.output_class == ("A1", "B1") for t in done)
    assert not any(t.output_ambiguous for t in done)


def test_mode_dephase_equipartitions_outputs(small):
    stats, _ = run_ensemble(200, small, mode="dephase", phi=math.pi,
                            seed=9, keep=0)
    assert stats.n_annihilated == 0
    assert stats.born == pytest.approx({"A1,B1": 0.25, "A1,B2": 0.25,
                                        "A2,B1": 0.25, "A2,B2": 0.25})
    n = stats.n_classified
    band = 3 * math.sqrt(0.25 * 0.75 / n)
    for p in stats.output_fractions.values():
        assert abs(p - 0.25) <= band


def test_equivariance_smoke_production_scale(fig_scale):
    stats, _ = run_ensemble(300, fig_scale, mode="annihilate", seed=1, keep=0)
    assert stats.n_aborted == 0
    assert stats.n_ambiguous_arm == 0
    assert stats.n_ambiguous_output == 0
    assert stats.n_ambiguous_annihilation == 0
    frac = stats.annihilated_fraction
    assert abs(frac - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / stats.n_sampled)
    n = stats.n_classified
    for key, p in stats.born.items():
        got = stats.output_fractions[key]
        assert abs(got - p) <= 3 * math.sqrt(p * (1 - p) / n)
    # no completed trajectory may take both inner arms
    assert stats.arm_counts.get("a2,b2", 0) == 0


def test_abort_budget_enforced(small):
    broken = Controls(max_steps=5)
    with pytest.raises(RuntimeError, match="abort budget"):
        run_ensemble(50, small, seed=3, controls=broken, keep=0)


def test_step_halving_keeps_classifications(fig_scale):
    fine = Controls(points_per_fringe=160.0, coarse_cap_fraction=1.0 / 12.0)
    s1, k1 = run_ensemble(60, fig_scale, seed=21, keep=60)
    s2, k2 = run_ensemble(60, fig_scale, seed=21, controls=fine, keep=60)
    assert s1.n_sampled == s2.n_sampled
    for a, b in zip(k1, k2):
        assert a.status == b.status
        assert a.arm_class == b.arm_class
        assert a.output_class == b.output_class


def test_classify_wrappers_match_ensemble_labels(fig_scale):
    _, kept = run_ensemble(40, fig_scale, seed=13, keep=40)
    tested = 0
    for traj in kept:
        if traj.status != "completed":
            continue
        arms, amb_a = classify_arms(traj, fig_scale)
        outs, amb_o = classify_outputs(traj, fig_scale)
        assert (arms, amb_a) == (traj.arm_class, traj.arm_ambiguous)
        assert (outs, amb_o) == (traj.output_class, traj.output_ambiguous)
        tested += 1
    assert tested > 10


def test_delayed_arm_forces_topology(fig_scale):
    """With one interferometer lengthened by 10 ell, every trajectory that
    exits through the delayed-side dark port rode (a1, b2)."""
    lay = build_layout(4200.0, 2520.0, 1.0, 210.0, 1.0, delta_l=2100.0)
    stats, _ = run_ensemble(200, lay, seed=6, keep=0)
    cases = 0
    for out_key in ("A2,B1", "A2,B2"):
        table = stats.arm_given_output.get(out_key, {})
        assert set(table) <= {"a1,b2"}
        cases += sum(table.values())
    assert cases >= 20

    mirror = with_delta(lay, -2100.0)
    stats2, _ = run_ensemble(200, mirror, seed=6, keep=0)
    cases = 0
    for out_key in ("A1,B2", "A2,B2"):
        table = stats2.arm_given_output.get(out_key, {})
        assert set(table) <= {"a2,b1"}
        cases += sum(table.values())
    assert cases >= 20


def test_scan_point_matches_direct_run(small):
    res = scan_delta(small, [0.0], n=100, seed=17)
    stats, _ = run_ensemble(100, small, seed=17, keep=0)
    point = res.points[0]
    assert res.parameter == "delta_l"
    assert point.value == 0.0
    assert point.n_completed == stats.n_completed
    assert point.output_fractions == stats.output_fractions
    # unresolvable arms on the small layout: no qualifying cases
    assert point.n_cases == 0 and point.fraction is None
    js = res.to_jsonable()
    assert js["points"][0]["n_completed"] == stats.n_completed


def test_empty_ensemble(small):
    stats, kept = run_ensemble(0, small, seed=0)
    assert stats.n_sampled == 0
    assert stats.annihilated_fraction is None
    assert stats.output_fractions == {} and stats.arm_fractions == {}
    assert stats.max_born_deviation is None
    assert kept == []
