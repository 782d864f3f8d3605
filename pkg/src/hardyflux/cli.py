"""Scenario runner: resolve a configuration, run the experiment, write files.

Scenarios: fig1 (symmetric layout), fig2/fig3 (one output arm extended by
ten packet lengths), scan (sweep of the extension), frames (sweep of the
observer velocity mapped onto effective layouts), and modes-only (the
discrete mode algebra with no trajectories).

Exit codes: 0 all checks pass, 2 a frozen amplitude fixture failed,
3 a statistical check failed (equivariance, topology, endpoint, or the
node-abort budget), 4 bad configuration.
"""
from __future__ import annotations

import argparse
import math
import os
import sys

import numba
import numpy as np

from . import modes, report
from .geometry import (
    ConfigError,
    build_layout,
    layout_from_config,
    run_options_from_config,
    with_delta,
)
from .trajectories import Controls, run_ensemble, scan_delta, scan_frames

EXIT_OK = 0
EXIT_FIXTURE = 2
EXIT_STAT = 3
EXIT_CONFIG = 4

DEFAULT_SEED = 1
SCAN_POINTS = 11
SCAN_SPAN_LENGTHS = 10.0
FRAME_VELOCITIES = (-0.1, -0.05, 0.05, 0.1)

# Layout parameters per scenario.  Arm separation stays >= 8 packet lengths;
# the frames layout uses a much larger separation so the boosted crossing
# delay (first order in v times the transverse extent) reaches several
# packet lengths at |v| = 0.05.
SCENARIOS = {
    "fig1": dict(layout=dict(arm_length=3200.0, arm_separation=1920.0,
                             speed=1.0, packet_length=160.0, wavenumber=1.0,
                             delta_l=0.0), n=10_000),
    "fig2": dict(layout=dict(arm_length=4200.0, arm_separation=2520.0,
                             speed=1.0, packet_length=210.0, wavenumber=1.0,
                             delta_l=2100.0), n=1_200),
    "fig3": dict(layout=dict(arm_length=4200.0, arm_separation=2520.0,
                             speed=1.0, packet_length=210.0, wavenumber=1.0,
                             delta_l=-2100.0), n=1_200),
    "scan": dict(layout=dict(arm_length=4200.0, arm_separation=2520.0,
                             speed=1.0, packet_length=210.0, wavenumber=1.0,
                             delta_l=0.0), n=5_000),
    "frames": dict(layout=dict(arm_length=4400.0, arm_separation=24_200.0,
                               speed=1.0, packet_length=220.0, wavenumber=1.0,
                               delta_l=0.0), n=5_000),
    "modes-only": dict(layout=dict(arm_length=3200.0, arm_separation=1920.0,
                                   speed=1.0, packet_length=160.0,
                                   wavenumber=1.0, delta_l=0.0), n=0),
}

# Frozen reference states for the modes report (matching the test suite).
_SQ3 = math.sqrt(3.0)
_SQ12 = math.sqrt(12.0)
REF_POST_INPUT = {"a1,b1": -0.5, "a1,b2": 0.5j, "a2,b1": 0.5j, "a2,b2": 0.5}
REF_AFTER_ANNIHILATION = {"a1,b1": -1 / _SQ3, "a1,b2": 1j / _SQ3,
                          "a2,b1": 1j / _SQ3}
REF_FINAL = {"A1,B1": -3 / _SQ12, "A1,B2": -1j / _SQ12, "A2,B1": -1j / _SQ12,
             "A2,B2": -1 / _SQ12}
REF_FINAL_NONE = {"A1,B1": 1j}
BORN_FINAL = {"A1,B1": 0.75, "A1,B2": 1 / 12, "A2,B1": 1 / 12,
              "A2,B2": 1 / 12}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hardyflux",
        description="Bi-trajectory simulation of two entangled "
                    "Mach-Zehnder interferometers")
    p.add_argument("--scenario", required=True, choices=sorted(SCENARIOS))
    p.add_argument("--config", help="INI file; see configs/example.ini")
    p.add_argument("--n", type=int, help="trajectory count")
    p.add_argument("--seed", type=int, help="ensemble seed")
    p.add_argument("--mode", choices=("annihilate", "dephase", "none"),
                   help="inner-arm event applied between the splitters")
    p.add_argument("--phi", type=float, help="dephasing angle (mode=dephase)")
    p.add_argument("--delta-l", type=float, dest="delta_l",
                   help="output-arm extension override (fig scenarios)")
    p.add_argument("--v", type=float, nargs="+",
                   help="frame velocities (frames scenario)")
    p.add_argument("--jobs", type=int, help="thread cap for the integrator")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--svg", action=argparse.BooleanOptionalAction,
                   default=True, help="emit figures (--no-svg to skip)")
    return p


def resolve(args) -> dict:
    """Merge scenario defaults, config file, and flags into one run config."""
    defaults = SCENARIOS[args.scenario]
    file_layout = None
    file_run: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        file_run = run_options_from_config(text)
        if "[layout]" in text:
            file_layout = layout_from_config(text)

    layout = file_layout or build_layout(**defaults["layout"])
    if args.delta_l is not None:
        if args.scenario not in ("fig1", "fig2", "fig3"):
            raise ConfigError("--delta-l applies to fig scenarios only")
        layout = with_delta(layout, args.delta_l)
    if args.v is not None and args.scenario != "frames":
        raise ConfigError("--v applies to the frames scenario only")

    def pick(flag, key, fallback):
        if flag is not None:
            return flag
        return file_run.get(key, fallback)

    n = pick(args.n, "n", defaults["n"])
    if n < 0:
        raise ConfigError("n must be non-negative")
    jobs = pick(args.jobs, "jobs", None)
    if jobs is not None and jobs < 1:
        raise ConfigError("jobs must be at least 1")
    mode = pick(args.mode, "mode", "annihilate")
    if mode not in ("annihilate", "dephase", "none"):
        raise ConfigError(f"unknown mode {mode!r}")
    keep = file_run.get("keep", Controls.keep_trajectories)

    cfg = {
        "scenario": args.scenario,
        "n": n,
        "seed": pick(args.seed, "seed", DEFAULT_SEED),
        "mode": mode,
        "phi": pick(args.phi, "phi", math.pi),
        "jobs": jobs,
        "keep": keep,
    }
    cfg.update(layout.config_dict())
    if args.scenario == "scan":
        span = SCAN_SPAN_LENGTHS * layout.packet_length
        cfg["deltas"] = np.linspace(-span, span, SCAN_POINTS).tolist()
    if args.scenario == "frames":
        cfg["velocities"] = [float(v) for v in (args.v or FRAME_VELOCITIES)]
    cfg["_layout"] = layout        # not serialized; popped before writing
    return cfg


def _echo_config(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def _fixture_check(name: str, ket, expected: dict) -> bool:
    want = modes.TwoParticleKet.from_dict(expected)
    ok = modes.phase_invariant_equal(ket, want, tol=1e-12)
    print(f"fixture {name}: {'PASS' if ok else 'FAIL'}")
    if not ok:
        print(f"  expected {dict(want.nonzero_items())}")
        print(f"  got      {dict(ket.nonzero_items())}")
    return ok


def cmd_modes(cfg: dict, outdir: str) -> int:
    layout = cfg["_layout"]
    schedule = layout.event_schedule(cfg["mode"], cfg["phi"])
    ket = modes.TwoParticleKet.initial()
    stages = [{"event": None, "ket": modes.ket_to_jsonable(ket)}]
    print(f"mode={cfg['mode']}  initial {ket!r}")
    survival = None
    for event in schedule.events:
        ket, surv = modes.apply_event(ket, event)
        if surv is not None:
            survival = surv
        stages.append({"event": {"kind": event.kind, "side": event.side,
                                 "time": event.time, "phi": event.phi},
                       "ket": modes.ket_to_jsonable(ket)})
        tag = f"{event.kind}" + (f"[{event.side}]" if event.side else "")
        print(f"after {tag:20s} {ket!r}")
    born = modes.born_probabilities(ket)
    print("born table:")
    for pair, prob in born.items():
        print(f"  {pair}  {prob:.12f}")
    if survival is not None:
        print(f"survival {survival:.12f}")

    post_input = modes.evolve(modes.TwoParticleKet.initial(),
                              list(schedule.events[:2]))[-1]
    ok = _fixture_check("post-input state", post_input, REF_POST_INPUT)
    if cfg["mode"] == "annihilate":
        mid = modes.evolve(modes.TwoParticleKet.initial(),
                           list(schedule.events[:3]))[-1]
        ok &= _fixture_check("post-annihilation state", mid,
                             REF_AFTER_ANNIHILATION)
        ok &= _fixture_check("final state", ket, REF_FINAL)
        ok &= abs(survival - 0.75) <= 1e-12
        for pair, want in BORN_FINAL.items():
            ok &= abs(born[pair] - want) <= 1e-12
    elif cfg["mode"] == "none":
        ok &= _fixture_check("final state", ket, REF_FINAL_NONE)
        ok &= abs(born["A1,B1"] - 1.0) <= 1e-12
    else:
        ok &= abs(sum(born.values()) - 1.0) <= 1e-12

    config = _echo_config(cfg)
    payload = {
        "config": config,
        "config_hash": report.config_hash(config),
        "seed": cfg["seed"],
        "units": report.UNITS_NOTE,
        "schedule": schedule.to_jsonable(),
        "stages": stages,
        "born": born,
        "survival": survival,
        "fixtures_ok": bool(ok),
    }
    path = os.path.join(outdir, "modes.json")
    report._dump_json(payload, path)
    print(f"wrote {path}")
    return EXIT_OK if ok else EXIT_FIXTURE


def _sigma_line(label: str, got: float, want: float, n: int) -> float:
    sigma = math.sqrt(want * (1.0 - want) / n) if n else float("inf")
    if sigma > 0:
        dev = abs(got - want) / sigma
    else:
        dev = 0.0 if got == want else float("inf")
    print(f"  {label}  {got:.5f}  (born {want:.5f})  {dev:.1f} sigma")
    return dev


def _topology_violations(stats, side: str) -> tuple[int, int]:
    """(qualifying count, violations) for the conditional-topology claim.

    side 'A': every trajectory leaving through A2 must have arms (a1, b2);
    side 'B': every trajectory leaving through B2 must have arms (a2, b1).
    """
    want = "a1,b2" if side == "A" else "a2,b1"
    pick = (lambda pair: pair.startswith("A2")) if side == "A" \
        else (lambda pair: pair.endswith("B2"))
    qualifying = violations = 0
    for out_pair, arms in stats.arm_given_output.items():
        if not pick(out_pair):
            continue
        for arm_pair, count in arms.items():
            qualifying += count
            if arm_pair != want:
                violations += count
    return qualifying, violations


def cmd_simulate(cfg: dict, outdir: str, svg: bool) -> int:
    layout = cfg["_layout"]
    controls = Controls(keep_trajectories=cfg["keep"])
    try:
        stats, kept = run_ensemble(cfg["n"], layout, mode=cfg["mode"],
                                   phi=cfg["phi"], seed=cfg["seed"],
                                   controls=controls, keep=cfg["keep"])
    except RuntimeError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_STAT
    print(f"n={stats.n_sampled} completed={stats.n_completed} "
          f"annihilated={stats.n_annihilated} aborted={stats.n_aborted} "
          f"ambiguous arm/output={stats.n_ambiguous_arm}"
          f"/{stats.n_ambiguous_output}")

    rc = EXIT_OK
    if stats.n_classified:
        print("output fractions:")
        worst = max(_sigma_line(pair, stats.output_fractions.get(pair, 0.0),
                                want, stats.n_classified)
                    for pair, want in stats.born.items())
        equiv = worst <= 3.0
        print(f"equivariance within 3 sigma: {'PASS' if equiv else 'FAIL'}")
        if not equiv:
            rc = EXIT_STAT
        if stats.mode == "annihilate":
            forbidden = stats.arm_counts.get("a2,b2", 0)
            print(f"completed (a2,b2) arms: {forbidden}  "
                  f"{'PASS' if forbidden == 0 else 'FAIL'}")
            if forbidden:
                rc = EXIT_STAT
        ell = layout.packet_length
        for side, sign in (("A", 1.0), ("B", -1.0)):
            if sign * layout.delta_l >= 5.0 * ell:
                qual, bad = _topology_violations(stats, side)
                label = "A2" if side == "A" else "B2"
                ok = bad == 0 and qual >= 50
                print(f"topology via {label}: {qual} qualifying, "
                      f"{bad} violations  {'PASS' if ok else 'FAIL'}")
                if not ok:
                    rc = EXIT_STAT

    config = _echo_config(cfg)
    prefix = os.path.join(outdir, cfg["scenario"])
    paths = [f"{prefix}_stats.json", f"{prefix}_trajectories.csv"]
    report.write_stats_json(paths[0], stats, config)
    report.write_trajectories_csv(paths[1], kept, config)
    if svg:
        paths.append(f"{prefix}_simulate.svg")
        title = (f"{cfg['scenario']}  mode={cfg['mode']}  n={cfg['n']}  "
                 f"seed={cfg['seed']}")
        report.simulate_figure(paths[-1], layout, kept, config, cfg["seed"],
                               title=title)
    print("wrote " + " ".join(paths))
    return rc


def _print_scan(result, scale: float, unit: str) -> None:
    for p in result.points:
        frac = "   --  " if p.fraction is None else f"{p.fraction:7.4f}"
        ci = "" if p.ci_half is None else f" +- {p.ci_half:.4f}"
        print(f"  {unit}={p.value / scale:+7.3f}  cases={p.n_cases:5d}  "
              f"fraction(a1,b2)={frac}{ci}")


def _endpoint_ok(point, want: float) -> bool:
    return point.n_cases > 0 and point.fraction == want


def frames_consistent(result, z: float = 3.0) -> bool:
    """Pairwise agreement of output fractions across frame velocities."""
    channels = sorted({ch for p in result.points
                       for ch in p.output_fractions})
    pts = [p for p in result.points if p.n_completed]
    for ch in channels:
        for i, p1 in enumerate(pts):
            for p2 in pts[i + 1:]:
                f1 = p1.output_fractions.get(ch, 0.0)
                f2 = p2.output_fractions.get(ch, 0.0)
                pool = 0.5 * (f1 + f2)
                sigma = math.sqrt(max(pool * (1 - pool), 1e-12)
                                  * (1 / p1.n_completed + 1 / p2.n_completed))
                if abs(f1 - f2) > z * sigma:
                    return False
    return True


def cmd_scan(cfg: dict, outdir: str, svg: bool) -> int:
    layout = cfg["_layout"]
    deltas = np.array(cfg["deltas"])
    try:
        result = scan_delta(layout, deltas, cfg["n"], mode=cfg["mode"],
                            seed=cfg["seed"])
    except RuntimeError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_STAT
    _print_scan(result, layout.packet_length, "delta/ell")

    rc = EXIT_OK
    ell = layout.packet_length
    lo, hi = result.points[0], result.points[-1]
    if lo.value <= -5.0 * ell and hi.value >= 5.0 * ell:
        ok = _endpoint_ok(lo, 0.0) and _endpoint_ok(hi, 1.0)
        print(f"endpoint fractions 0.0/1.0: {'PASS' if ok else 'FAIL'}")
        if not ok:
            rc = EXIT_STAT

    config = _echo_config(cfg)
    prefix = os.path.join(outdir, "scan")
    paths = [f"{prefix}.json"]
    report.write_scan_json(paths[0], result, config)
    if svg:
        paths.append(f"{prefix}.svg")
        report.scan_figure(paths[-1], result, config, ell=ell)
    print("wrote " + " ".join(paths))
    return rc


def cmd_frames(cfg: dict, outdir: str, svg: bool) -> int:
    layout = cfg["_layout"]
    try:
        result = scan_frames(layout, cfg["velocities"], cfg["n"],
                             mode=cfg["mode"], seed=cfg["seed"])
    except RuntimeError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_STAT
    _print_scan(result, 1.0, "v")

    rc = EXIT_OK
    for p in result.points:
        want = 1.0 if p.value > 0 else 0.0
        if not _endpoint_ok(p, want):
            rc = EXIT_STAT
    print(f"topology flips with sign(v): {'PASS' if rc == EXIT_OK else 'FAIL'}")
    agree = frames_consistent(result)
    print(f"output fractions frame-independent within 3 sigma: "
          f"{'PASS' if agree else 'FAIL'}")
    if not agree:
        rc = EXIT_STAT

    config = _echo_config(cfg)
    prefix = os.path.join(outdir, "frames")
    paths = [f"{prefix}.json"]
    report.write_scan_json(paths[0], result, config)
    if svg:
        paths.append(f"{prefix}.svg")
        report.scan_figure(paths[-1], result, config)
    print("wrote " + " ".join(paths))
    return rc


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:          # argparse exits 2 on usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg["jobs"] is not None:
        numba.set_num_threads(min(cfg["jobs"], numba.config.NUMBA_NUM_THREADS))
    os.makedirs(args.out, exist_ok=True)
    if args.scenario == "modes-only":
        return cmd_modes(cfg, args.out)
    if args.scenario == "scan":
        return cmd_scan(cfg, args.out, args.svg)
    if args.scenario == "frames":
        return cmd_frames(cfg, args.out, args.svg)
    return cmd_simulate(cfg, args.out, args.svg)


if __name__ == "__main__":
    sys.exit(main())
