"""Bi-trajectory integration, classification, and ensemble statistics.

Trajectories are flux lines of the configuration-space current: dr/dt =
J/rho in 4D, integrated with RK4 under two step caps.  Inside interference
zones (second branch weight above switch_ratio at the current point) the
flight per step is capped at a fraction of the density fringe wavelength
2 pi / (sqrt(2) k); elsewhere at a fraction of the packet length.  Steps
land exactly on record times and event boundaries.

At the annihilation event, trajectories whose particles are both nearest
the inner-arm packet centers terminate with status annihilated.  Surviving
trajectories are classified by nearest packet center at the mid-arm and
final probe times, with an ambiguity band around equidistance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import field, modes
from ._kernels import advance_ensemble
from .geometry import ARM_LABELS, OUT_LABELS, Layout, effective_layout, with_delta

_STATUS_NAMES = {0: "completed", 1: "annihilated", 2: "node_abort",
                 3: "node_abort"}
_ANNIHILATED = 1


@dataclass(frozen=True)
class Controls:
    """Integrator tuning; defaults are the converged production values."""

    # 80 points per fringe is where step-halving stops changing any
    # classification (0 flips in 500 paired trajectories at 80 vs 160;
    # endpoint errors shrink ~16x per halving, so the h^4 regime holds).
    points_per_fringe: float = 80.0
    coarse_cap_fraction: float = 1.0 / 6.0    # of the packet length
    switch_ratio: float = 1e-12
    ambiguity_band: float = 4.0               # margin in packet lengths
    record_points: int = 60
    max_halvings: int = 30
    max_steps: int = 20_000_000
    keep_trajectories: int = 200

    def fine_cap(self, k: float) -> float:
        return 2.0 * math.pi / (math.sqrt(2.0) * k) / self.points_per_fringe

    def coarse_cap(self, ell: float) -> float:
        return ell * self.coarse_cap_fraction


@dataclass
class BiTrajectory:
    traj_id: int
    times: np.ndarray          # (m,)
    positions: np.ndarray      # (m, 4): x1, y1, x2, y2
    status: str
    arm_class: tuple | None = None
    output_class: tuple | None = None
    arm_ambiguous: bool = False
    output_ambiguous: bool = False


@dataclass
class EnsembleStats:
    n_sampled: int
    n_annihilated: int
    n_completed: int
    n_aborted: int
    n_classified: int
    n_ambiguous_arm: int
    n_ambiguous_output: int
    n_ambiguous_annihilation: int
    output_fractions: dict
    arm_counts: dict
    arm_fractions: dict
    arm_given_output: dict
    born: dict
    max_born_deviation: float | None
    survival: float | None
    mode: str
    phi: float
    seed: int
    total_steps: int

    @property
    def annihilated_fraction(self) -> float | None:
        if self.n_sampled == 0:
            return None
        return self.n_annihilated / self.n_sampled

    def to_jsonable(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "n_sampled", "n_annihilated", "n_completed", "n_aborted",
            "n_classified", "n_ambiguous_arm", "n_ambiguous_output",
            "n_ambiguous_annihilation", "output_fractions", "arm_counts",
            "arm_fractions", "arm_given_output", "born",
            "max_born_deviation", "survival", "mode", "phi", "seed",
            "total_steps")}
        out["annihilated_fraction"] = self.annihilated_fraction
        return out


@dataclass
class ScanPoint:
    value: float
    n_completed: int
    n_cases: int               # completed, output (A2, B2), unambiguous
    n_a1b2: int
    n_a2b1: int
    n_other: int
    n_forbidden_arms: int      # completed trajectories on arms (a2, b2)
    fraction: float | None     # of (a1, b2) arms among the cases
    ci_half: float | None      # Wilson 95% half-width
    output_fractions: dict

    def to_jsonable(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ScanResult:
    parameter: str             # "delta_l" or "velocity"
    points: list
    n_per_point: int
    seed: int
    mode: str

    def to_jsonable(self) -> dict:
        return {"parameter": self.parameter, "n_per_point": self.n_per_point,
                "seed": self.seed, "mode": self.mode,
                "points": [p.to_jsonable() for p in self.points]}


def sample_initial(n: int, state: field.WaveState, seed: int) -> np.ndarray:
    """n draws from |psi|^2 of the single-term pre-input state, (n, 4)."""
    terms = state.terms()
    if len(terms) != 1:
        raise ValueError("initial sampling requires the single-term state "
                         "before the input splitters")
    pa, pb, _ = terms[0]
    t0 = state.t_lo
    rng = np.random.default_rng(seed)
    out = np.empty((n, 4))
    for j, p in enumerate((pa, pb)):
        sigma = abs(p.w(t0)) / (math.sqrt(2.0) * p.ell)
        out[:, 2 * j:2 * j + 2] = p.center(t0) + rng.normal(
            scale=sigma, size=(n, 2))
    return out


def record_grid(timeline: field.WaveTimeline, controls: Controls) -> np.ndarray:
    lay = timeline.layout
    times = {0.0, lay.t_arm_probe, lay.t_final_probe}
    times.update(timeline.boundaries)
    times.update(np.linspace(0.0, timeline.t_end,
                             controls.record_points).tolist())
    return np.array(sorted(times))


def _nearest(points: np.ndarray, centers: np.ndarray):
    """points (m, 2), centers (2, 2) -> (index, |d_far - d_near|)."""
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    idx = np.argmin(d, axis=1)
    margin = np.abs(d[:, 1] - d[:, 0])
    return idx, margin


def _classify_at(positions: np.ndarray, layout: Layout, labels: dict,
                 t: float, band: float):
    """Nearest-branch-center pair labels and an ambiguity flag, vectorized."""
    pair_idx = np.empty((positions.shape[0], 2), dtype=np.int64)
    ambiguous = np.zeros(positions.shape[0], dtype=bool)
    for j, side in enumerate(("A", "B")):
        centers = layout.branch_centers(labels[side], t)
        idx, margin = _nearest(positions[:, 2 * j:2 * j + 2], centers)
        pair_idx[:, j] = idx
        ambiguous |= margin < band
    return pair_idx, ambiguous


def _dominance_mask(pos: np.ndarray, layout: Layout, t: float, band: float):
    """Both particles nearest the inner-arm centers; margin below band is
    counted as ambiguous but the nearest center still decides."""
    mask = np.ones(pos.shape[0], dtype=bool)
    ambiguous = np.zeros(pos.shape[0], dtype=bool)
    for j, side in enumerate(("A", "B")):
        centers = layout.branch_centers(ARM_LABELS[side], t)
        idx, margin = _nearest(pos[:, 2 * j:2 * j + 2], centers)
        mask &= idx == 1
        ambiguous |= margin < band
    return mask, ambiguous


def run_ensemble(n: int, layout: Layout, mode: str = "annihilate",
                 phi: float = math.pi, seed: int = 0,
                 controls: Controls | None = None,
                 keep: int | None = None):
    """Sample, integrate, classify; returns (EnsembleStats, [BiTrajectory]).

    Deterministic given (layout, n, mode, phi, seed, controls); the kept
    subsample is the first `keep` trajectory ids.
    """
    controls = controls or Controls()
    timeline = field.evolve_wave(layout, mode, phi)
    rec_times = record_grid(timeline, controls)
    nrec = rec_times.size
    i_arm = int(np.searchsorted(rec_times, layout.t_arm_probe))
    i_fin = int(np.searchsorted(rec_times, layout.t_final_probe))
    assert rec_times[i_arm] == layout.t_arm_probe
    assert rec_times[i_fin] == layout.t_final_probe

    pos = sample_initial(n, field.initial_state(timeline), seed)
    rec_store = np.full((n, nrec, 4), np.nan)
    status = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=np.int64)
    steps_out = np.zeros(n, dtype=np.int64)
    if n:
        rec_store[:, 0, :] = pos

    floor = field.rho_floor(layout)
    fine = controls.fine_cap(layout.wavenumber)
    coarse = controls.coarse_cap(layout.packet_length)
    band = controls.ambiguity_band * layout.packet_length
    t_ann = layout.t_annihilation if mode == "annihilate" else None
    n_amb_ann = 0

    for state in timeline.states:
        t0, t1 = state.t_lo, state.t_hi
        if t1 <= t0 or not n or not alive.any():
            pass
        else:
            pa, pb, tia, tib, tc, k, ell = field.state_arrays(state)
            lo = int(np.searchsorted(rec_times, t0, side="right"))
            hi = int(np.searchsorted(rec_times, t1, side="right"))
            advance_ensemble(pos, alive, t0, t1, pa, pb, tia, tib, tc, k,
                             ell, fine, coarse, controls.switch_ratio, floor,
                             controls.max_halvings, controls.max_steps,
                             rec_times[lo:hi], rec_store[:, lo:hi, :],
                             status, steps_out)
        if t_ann is not None and t1 == t_ann and n:
            live = alive == 1
            hit, amb = _dominance_mask(pos, layout, t_ann, band)
            n_amb_ann = int((amb & live).sum())
            hit &= live
            status[hit] = _ANNIHILATED
            alive[hit] = 0

    completed = (alive == 1) & (status == 0)
    n_completed = int(completed.sum())
    n_annihilated = int((status == _ANNIHILATED).sum())
    n_aborted = n - n_completed - n_annihilated
    if n_aborted > 0.01 * n:
        raise RuntimeError(
            f"node-abort budget exceeded: {n_aborted}/{n} trajectories")

    arm_pairs = np.full((n, 2), -1, dtype=np.int64)
    out_pairs = np.full((n, 2), -1, dtype=np.int64)
    arm_amb = np.zeros(n, dtype=bool)
    out_amb = np.zeros(n, dtype=bool)
    if n_completed:
        idx_c = np.nonzero(completed)[0]
        arm_pos = rec_store[idx_c, i_arm, :]
        fin_pos = rec_store[idx_c, i_fin, :]
        pi_arm, amb_a = _classify_at(arm_pos, layout, ARM_LABELS,
                                     layout.t_arm_probe, band)
        pi_out, amb_o = _classify_at(fin_pos, layout, OUT_LABELS,
                                     layout.t_final_probe, band)
        arm_pairs[idx_c] = pi_arm
        out_pairs[idx_c] = pi_out
        arm_amb[idx_c] = amb_a
        out_amb[idx_c] = amb_o

    classified = completed & ~out_amb
    n_classified = int(classified.sum())
    born = modes.born_probabilities(timeline.states[-1].ket)
    output_fractions = {}
    arm_given_output = {}
    max_dev = None
    if n_classified:
        for ia, la in enumerate(OUT_LABELS["A"]):
            for ib, lb in enumerate(OUT_LABELS["B"]):
                chan = classified & (out_pairs[:, 0] == ia) & \
                    (out_pairs[:, 1] == ib)
                key = f"{la},{lb}"
                output_fractions[key] = int(chan.sum()) / n_classified
                table = {}
                for ja, aa in enumerate(ARM_LABELS["A"]):
                    for jb, ab in enumerate(ARM_LABELS["B"]):
                        cnt = int((chan & ~arm_amb
                                   & (arm_pairs[:, 0] == ja)
                                   & (arm_pairs[:, 1] == jb)).sum())
                        if cnt:
                            table[f"{aa},{ab}"] = cnt
                arm_given_output[key] = table
        max_dev = max(abs(output_fractions[p] - born[p]) for p in born)
    arm_counts = {}
    arm_fractions = {}
    arm_ok = completed & ~arm_amb
    n_arm_ok = int(arm_ok.sum())
    if n_arm_ok:
        for ja, aa in enumerate(ARM_LABELS["A"]):
            for jb, ab in enumerate(ARM_LABELS["B"]):
                cnt = int((arm_ok & (arm_pairs[:, 0] == ja)
                           & (arm_pairs[:, 1] == jb)).sum())
                arm_counts[f"{aa},{ab}"] = cnt
                arm_fractions[f"{aa},{ab}"] = cnt / n_arm_ok

    stats = EnsembleStats(
        n_sampled=n, n_annihilated=n_annihilated, n_completed=n_completed,
        n_aborted=n_aborted, n_classified=n_classified,
        n_ambiguous_arm=int((completed & arm_amb).sum()),
        n_ambiguous_output=int((completed & out_amb).sum()),
        n_ambiguous_annihilation=n_amb_ann,
        output_fractions=output_fractions, arm_counts=arm_counts,
        arm_fractions=arm_fractions,
        arm_given_output=arm_given_output, born=born,
        max_born_deviation=max_dev, survival=timeline.survival, mode=mode,
        phi=phi, seed=seed, total_steps=int(steps_out.sum()))

    keep = controls.keep_trajectories if keep is None else keep
    kept = []
    for i in range(min(keep, n)):
        valid = ~np.isnan(rec_store[i, :, 0])
        arm_class = None
        out_class = None
        if completed[i]:
            arm_class = (ARM_LABELS["A"][arm_pairs[i, 0]],
                         ARM_LABELS["B"][arm_pairs[i, 1]])
            out_class = (OUT_LABELS["A"][out_pairs[i, 0]],
                         OUT_LABELS["B"][out_pairs[i, 1]])
        elif status[i] == _ANNIHILATED:
            arm_class = (ARM_LABELS["A"][1], ARM_LABELS["B"][1])
        kept.append(BiTrajectory(
            traj_id=i, times=rec_times[valid].copy(),
            positions=rec_store[i, valid, :].copy(),
            status=_STATUS_NAMES[int(status[i])], arm_class=arm_class,
            output_class=out_class, arm_ambiguous=bool(arm_amb[i]),
            output_ambiguous=bool(out_amb[i])))
    return stats, kept


def integrate(start, timeline: field.WaveTimeline,
              controls: Controls | None = None,
              traj_id: int = 0) -> BiTrajectory:
    """Integrate one trajectory from a 4D start point at t = 0."""
    controls = controls or Controls()
    layout = timeline.layout
    rec_times = record_grid(timeline, controls)
    pos = np.asarray(start, dtype=float).reshape(1, 4).copy()
    rec_store = np.full((1, rec_times.size, 4), np.nan)
    rec_store[:, 0, :] = pos
    status = np.zeros(1, dtype=np.int64)
    alive = np.ones(1, dtype=np.int64)
    steps_out = np.zeros(1, dtype=np.int64)
    floor = field.rho_floor(layout)
    fine = controls.fine_cap(layout.wavenumber)
    coarse = controls.coarse_cap(layout.packet_length)
    band = controls.ambiguity_band * layout.packet_length
    t_ann = layout.t_annihilation if timeline.mode == "annihilate" else None
    for state in timeline.states:
        t0, t1 = state.t_lo, state.t_hi
        if t1 <= t0 or not alive[0]:
            pass
        else:
            pa, pb, tia, tib, tc, k, ell = field.state_arrays(state)
            lo = int(np.searchsorted(rec_times, t0, side="right"))
            hi = int(np.searchsorted(rec_times, t1, side="right"))
            advance_ensemble(pos, alive, t0, t1, pa, pb, tia, tib, tc, k,
                             ell, fine, coarse, controls.switch_ratio, floor,
                             controls.max_halvings, controls.max_steps,
                             rec_times[lo:hi], rec_store[:, lo:hi, :],
                             status, steps_out)
        if t_ann is not None and t1 == t_ann and alive[0]:
            if _dominance_mask(pos, layout, t_ann, band)[0][0]:
                status[0] = _ANNIHILATED
                alive[0] = 0
    valid = ~np.isnan(rec_store[0, :, 0])
    final = "completed" if alive[0] else _STATUS_NAMES[int(status[0])]
    return BiTrajectory(traj_id=traj_id, times=rec_times[valid].copy(),
                        positions=rec_store[0, valid, :].copy(), status=final)


def _position_at(traj: BiTrajectory, t: float) -> np.ndarray:
    i = int(np.searchsorted(traj.times, t))
    if i >= traj.times.size or traj.times[i] != t:
        raise ValueError(f"trajectory has no sample at t={t}")
    return traj.positions[i]


def classify_arms(traj: BiTrajectory, layout: Layout,
                  controls: Controls | None = None):
    """(arm_A, arm_B) at the mid-arm probe, plus an ambiguity flag."""
    controls = controls or Controls()
    t = layout.t_arm_probe
    pos = _position_at(traj, t)[None, :]
    band = controls.ambiguity_band * layout.packet_length
    pair, amb = _classify_at(pos, layout, ARM_LABELS, t, band)
    return ((ARM_LABELS["A"][pair[0, 0]], ARM_LABELS["B"][pair[0, 1]]),
            bool(amb[0]))


def classify_outputs(traj: BiTrajectory, layout: Layout,
                     controls: Controls | None = None):
    """(output_A, output_B) at the final probe, plus an ambiguity flag."""
    controls = controls or Controls()
    t = layout.t_final_probe
    pos = _position_at(traj, t)[None, :]
    band = controls.ambiguity_band * layout.packet_length
    pair, amb = _classify_at(pos, layout, OUT_LABELS, t, band)
    return ((OUT_LABELS["A"][pair[0, 0]], OUT_LABELS["B"][pair[0, 1]]),
            bool(amb[0]))


def _wilson(successes: int, total: int, z: float = 1.96):
    if total == 0:
        return None, None
    p = successes / total
    denom = 1.0 + z * z / total
    center = (p + z * z / (2 * total)) / denom
    half = z * math.sqrt(p * (1 - p) / total
                         + z * z / (4 * total * total)) / denom
    return center, half


def _topology_point(value: float, stats: EnsembleStats) -> ScanPoint:
    table = stats.arm_given_output.get("A2,B2", {})
    n_a1b2 = table.get("a1,b2", 0)
    n_a2b1 = table.get("a2,b1", 0)
    n_cases = sum(table.values())
    n_other = n_cases - n_a1b2 - n_a2b1
    fraction = n_a1b2 / n_cases if n_cases else None
    _, half = _wilson(n_a1b2, n_cases)
    return ScanPoint(value=value, n_completed=stats.n_completed,
                     n_cases=n_cases, n_a1b2=n_a1b2, n_a2b1=n_a2b1,
                     n_other=n_other,
                     n_forbidden_arms=stats.arm_counts.get("a2,b2", 0),
                     fraction=fraction, ci_half=half,
                     output_fractions=stats.output_fractions)


def scan_delta(layout: Layout, deltas, n: int, mode: str = "annihilate",
               seed: int = 0, controls: Controls | None = None) -> ScanResult:
    """Topology fraction of the (A2, B2) channel per output-arm extension.

    Point i runs with seed + i, so a single-point scan reproduces
    run_ensemble(n, layout, seed=seed) exactly.
    """
    points = []
    for i, delta in enumerate(deltas):
        stats, _ = run_ensemble(n, with_delta(layout, float(delta)),
                                mode=mode, seed=seed + i, controls=controls,
                                keep=0)
        points.append(_topology_point(float(delta), stats))
    return ScanResult(parameter="delta_l", points=points, n_per_point=n,
                      seed=seed, mode=mode)


def scan_frames(layout: Layout, velocities, n: int, mode: str = "annihilate",
                seed: int = 0, controls: Controls | None = None) -> ScanResult:
    """As scan_delta, but per boost velocity via the effective layout."""
    points = []
    for i, v in enumerate(velocities):
        stats, _ = run_ensemble(n, effective_layout(layout, float(v)),
                                mode=mode, seed=seed + i, controls=controls,
                                keep=0)
        points.append(_topology_point(float(v), stats))
    return ScanResult(parameter="velocity", points=points, n_per_point=n,
                      seed=seed, mode=mode)
