"""Two-particle wave built from dispersive Gaussian branch packets.

Between discrete events the wavefunction is a sum of product terms

    Psi(r1, r2, t) = sum_t c_t phi_{a(t)}(r1, t) phi_{b(t)}(r2, t)

whose coefficients c_t are the mode-algebra amplitudes and whose factors are
unit-norm 2D Gaussian packets gliding along the layout polylines:

    phi(r, t) = (pi l^2)^{-1/2} (l^2 / w) exp[ -|r - rc|^2 / (2 w)
                + i k u.(r - rc) + i Theta_c(t) ]
    w(t)      = l^2 + i (t - t_birth)
    Theta_c   = theta_ref + k^2 (t - t_ref) / 2

with hbar = m = 1, so each factor solves the free Schroedinger equation
exactly and the group velocity is k (the layout speed must equal k).
Events update the term structure instantaneously: splitters apply the mode
unitaries with the freshly born packets sitting on the vertex, mirrors turn
a packet onto the next polyline segment with a pi/2 phase kick, and the
annihilation/dephasing events touch only the coefficients.  Packet moduli
are unchanged by mirrors, and distinct branch packets are orthogonal both
in position and in momentum (k*l >= 50), so the term coefficients remain
exactly the mode-algebra amplitudes at all times.
"""
from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from . import modes
from .geometry import (ARM_LABELS, INPUT_LABELS, OUT_LABELS, ConfigError,
                       Layout)

# fraction of l^2 the total flight time may use; keeps dispersion below 2%
FLIGHT_TIME_BUDGET = 0.2
# absolute density floor relative to the peak of the initial product state
RHO_FLOOR_FACTOR = 1e-12


class NodeProximityError(RuntimeError):
    """Current evaluated where the density is below the node floor."""


@dataclass(frozen=True)
class GaussianPacket:
    """One branch factor; normalized for all t."""

    label: str
    center_ref: np.ndarray     # position at t_ref
    t_ref: float
    direction: np.ndarray      # unit vector along the current segment
    theta_ref: float           # center phase at t_ref
    k: float
    ell: float
    t_birth: float = 0.0

    def center(self, t: float) -> np.ndarray:
        return self.center_ref + self.direction * self.k * (t - self.t_ref)

    def w(self, t: float) -> complex:
        return self.ell ** 2 + 1j * (t - self.t_birth)

    def center_phase(self, t: float) -> float:
        return self.theta_ref + 0.5 * self.k ** 2 * (t - self.t_ref)

    def amplitude(self, r: np.ndarray, t: float) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        w = self.w(t)
        d = r - self.center(t)
        phase = self.k * (d @ self.direction) + self.center_phase(t)
        pref = (self.ell ** 2 / w) / math.sqrt(math.pi * self.ell ** 2)
        return pref * np.exp(-(d * d).sum(axis=-1) / (2 * w) + 1j * phase)

    def gradient(self, r: np.ndarray, t: float) -> np.ndarray:
        """(..., 2) complex gradient; last axis is the spatial component."""
        r = np.asarray(r, dtype=float)
        w = self.w(t)
        d = r - self.center(t)
        amp = np.asarray(self.amplitude(r, t))
        return amp[..., None] * (-d / w + 1j * self.k * self.direction)


@dataclass(frozen=True)
class WaveState:
    """Snapshot of the term structure, valid on [t_lo, t_hi]."""

    ket: modes.TwoParticleKet
    packets: dict                 # side -> {label: GaussianPacket}
    t_lo: float
    t_hi: float

    def terms(self) -> list[tuple[GaussianPacket, GaussianPacket, complex]]:
        out = []
        for pair, c in self.ket.nonzero_items():
            la, lb = pair.split(",")
            out.append((self.packets["A"][la], self.packets["B"][lb], c))
        return out


@dataclass(frozen=True)
class CurrentSample:
    rho: float
    j: np.ndarray                 # (4,): (J1x, J1y, J2x, J2y)


@dataclass(frozen=True)
class WaveTimeline:
    """Piecewise-stationary term structure over the full run."""

    layout: Layout
    mode: str
    phi: float
    states: tuple
    boundaries: tuple             # event times separating the states
    survival: float | None        # annihilation survival probability, if any

    def state_at(self, t: float) -> WaveState:
        """State governing evolution at time t (post-event at boundaries)."""
        i = bisect_right(self.boundaries, t)
        return self.states[i]

    def state_before(self, t: float) -> WaveState:
        """State on the interval ending at t (pre-event at boundaries)."""
        i = bisect_right(self.boundaries, t)
        if i > 0 and t in self.boundaries:
            i -= 1
        return self.states[i]

    @property
    def t_end(self) -> float:
        return self.states[-1].t_hi


def _segment_direction(pts: np.ndarray, i: int) -> np.ndarray:
    seg = pts[i + 1] - pts[i]
    return seg / np.hypot(*seg)


def _field_events(layout: Layout, mode: str, phi: float) -> list[tuple]:
    """(time, order_key, kind, side, payload), time-sorted, ties deterministic."""
    sched = layout.event_schedule(mode, phi)
    events = []
    for e in sched.events:
        events.append((e.time, 0, e.kind, e.side, e.phi))
    for side in ("A", "B"):
        for label in ARM_LABELS[side]:
            for t_m, vertex in layout.mirror_times(label):
                events.append((t_m, 1, "mirror", side, label))
    events.sort(key=lambda ev: (ev[0], ev[1], ev[2], str(ev[3])))
    return events


def evolve_wave(layout: Layout, mode: str = "annihilate",
                phi: float = math.pi) -> WaveTimeline:
    """Build the piecewise term structure for a full run.

    Raises ConfigError if the layout speed is not the group velocity k or
    the total flight time exceeds the dispersion budget 0.2 * l^2.
    """
    k, ell = layout.wavenumber, layout.packet_length
    if abs(layout.speed - k) > 1e-12 * max(k, 1.0):
        raise ConfigError(
            f"layout speed {layout.speed} must equal the group velocity k={k}")
    if layout.t_final_probe > FLIGHT_TIME_BUDGET * ell ** 2:
        raise ConfigError(
            f"flight time {layout.t_final_probe} exceeds dispersion budget "
            f"{FLIGHT_TIME_BUDGET * ell ** 2}")

    def packet(label, t_ref, theta_ref, vertex_index=0):
        pts = layout.polylines[label]
        return GaussianPacket(
            label=label, center_ref=pts[vertex_index].copy(), t_ref=t_ref,
            direction=_segment_direction(pts, vertex_index),
            theta_ref=theta_ref, k=k, ell=ell)

    packets = {"A": {}, "B": {}}
    for side in ("A", "B"):
        packets[side][INPUT_LABELS[side]] = packet(INPUT_LABELS[side], 0.0, 0.0)
    ket = modes.TwoParticleKet.initial()

    states = []
    boundaries = []
    survival = None
    t_lo = 0.0
    grouped: dict[float, list[tuple]] = {}
    for ev in _field_events(layout, mode, phi):
        grouped.setdefault(ev[0], []).append(ev)

    for t_e in sorted(grouped):
        states.append(WaveState(ket=ket, t_lo=t_lo,
                                packets={s: dict(packets[s]) for s in packets},
                                t_hi=t_e))
        boundaries.append(t_e)
        t_lo = t_e
        for _, _, kind, side, payload in grouped[t_e]:
            if kind == "input_splitter":
                old = packets[side].pop(INPUT_LABELS[side])
                theta = old.center_phase(t_e)
                for label in ARM_LABELS[side]:
                    packets[side][label] = packet(label, t_e, theta)
                ket = modes.apply_splitter(ket, side, "input")
            elif kind == "output_splitter":
                arm1 = packets[side][ARM_LABELS[side][0]]
                theta = arm1.center_phase(t_e)
                for label in ARM_LABELS[side]:
                    del packets[side][label]
                for label in OUT_LABELS[side]:
                    packets[side][label] = packet(label, t_e, theta)
                ket = modes.apply_splitter(ket, side, "out")
            elif kind == "mirror":
                old = packets[side][payload]
                packets[side][payload] = packet(
                    payload, t_e, old.center_phase(t_e) + 0.5 * math.pi,
                    vertex_index=1)
            elif kind == "annihilate":
                ket, survival = modes.annihilate(ket)
            elif kind == "dephase":
                ket = modes.dephase(ket, payload)
            else:
                raise ConfigError(f"unknown event kind {kind!r}")
    states.append(WaveState(ket=ket, t_lo=t_lo,
                            packets={s: dict(packets[s]) for s in packets},
                            t_hi=layout.t_final_probe))
    return WaveTimeline(layout=layout, mode=mode, phi=phi,
                        states=tuple(states), boundaries=tuple(boundaries),
                        survival=survival)


def initial_state(timeline: WaveTimeline) -> WaveState:
    return timeline.states[0]


def rho_floor(layout: Layout) -> float:
    return RHO_FLOOR_FACTOR / (math.pi * layout.packet_length ** 2) ** 2


# --- evaluation (reference implementation; the integrator uses a compiled
# --- equivalent) ------------------------------------------------------------

def psi(state: WaveState, r1: np.ndarray, r2: np.ndarray, t: float):
    """Wavefunction value; broadcasts over leading axes of r1/r2."""
    total = 0.0 + 0.0j
    for pa, pb, c in state.terms():
        total = total + c * pa.amplitude(r1, t) * pb.amplitude(r2, t)
    return total


def current(state: WaveState, r1: np.ndarray, r2: np.ndarray,
            t: float) -> CurrentSample:
    """Density and 4-component configuration-space current at one point."""
    value = 0.0 + 0.0j
    grad = np.zeros(4, dtype=complex)
    for pa, pb, c in state.terms():
        amp_a = pa.amplitude(r1, t)
        amp_b = pb.amplitude(r2, t)
        value += c * amp_a * amp_b
        grad[:2] += c * amp_b * pa.gradient(r1, t)
        grad[2:] += c * amp_a * pb.gradient(r2, t)
    rho = float(value.real ** 2 + value.imag ** 2)
    j = np.imag(np.conj(value) * grad)
    return CurrentSample(rho=rho, j=j)


def velocity(state: WaveState, r1: np.ndarray, r2: np.ndarray, t: float,
             floor: float | None = None) -> np.ndarray:
    """Flow velocity J / rho; raises NodeProximityError below the floor."""
    sample = current(state, r1, r2, t)
    if floor is None:
        floor = rho_floor_from_state(state)
    if sample.rho < floor:
        raise NodeProximityError(
            f"rho={sample.rho} below floor {floor} at t={t}")
    return sample.j / sample.rho


def rho_floor_from_state(state: WaveState) -> float:
    any_side = next(iter(state.packets.values()))
    any_packet = next(iter(any_side.values()))
    return RHO_FLOOR_FACTOR / (math.pi * any_packet.ell ** 2) ** 2


def mode_vector(state: WaveState) -> modes.TwoParticleKet:
    """The coefficient table of the current term structure."""
    return state.ket.copy()


def continuity_residual(timeline: WaveTimeline, r1, r2, t: float,
                        h: float | None = None) -> float:
    """|d rho/dt + div J| / (k^2 rho), central differences with step h.

    t must not sit within h of an event boundary; the wave is only piecewise
    smooth in time.
    """
    k = timeline.layout.wavenumber
    if h is None:
        h = 1e-3 / k
    state = timeline.state_at(t)
    if not (state.t_lo + h <= t <= state.t_hi - h):
        raise ValueError(f"t={t} within h of an event boundary")
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)

    def rho_at(tt):
        v = psi(state, r1, r2, tt)
        return float(v.real ** 2 + v.imag ** 2)

    drho_dt = (rho_at(t + h) - rho_at(t - h)) / (2 * h)
    div = 0.0
    for i in range(4):
        dr1p, dr1m = r1.copy(), r1.copy()
        dr2p, dr2m = r2.copy(), r2.copy()
        if i < 2:
            dr1p[i] += h
            dr1m[i] -= h
        else:
            dr2p[i - 2] += h
            dr2m[i - 2] -= h
        jp = current(state, dr1p, dr2p, t).j[i]
        jm = current(state, dr1m, dr2m, t).j[i]
        div += (jp - jm) / (2 * h)
    rho = rho_at(t)
    return abs(drho_dt + div) / (k ** 2 * rho + 1e-300)


def norm_check(state: WaveState, t: float, n: int = 4000,
               seed: int = 0) -> float:
    """Monte-Carlo estimate of the 4D norm integral of |Psi|^2.

    Importance-samples from the |c|^2-weighted product-Gaussian mixture, so
    the estimator equals 1 exactly when the term structure is consistent.
    """
    rng = np.random.default_rng(seed)
    terms = state.terms()
    weights = np.array([abs(c) ** 2 for _, _, c in terms])
    weights = weights / weights.sum()
    counts = rng.multinomial(n, weights)
    total = 0.0
    for (pa, pb, _), m in zip(terms, counts):
        if m == 0:
            continue
        sigma_a = abs(pa.w(t)) / (math.sqrt(2.0) * pa.ell)
        sigma_b = abs(pb.w(t)) / (math.sqrt(2.0) * pb.ell)
        r1 = pa.center(t) + rng.normal(scale=sigma_a, size=(m, 2))
        r2 = pb.center(t) + rng.normal(scale=sigma_b, size=(m, 2))
        val = psi(state, r1, r2, t)
        rho = val.real ** 2 + val.imag ** 2
        q = np.zeros(m)
        for qa, qb, c in terms:
            ga = np.abs(qa.amplitude(r1, t)) ** 2
            gb = np.abs(qb.amplitude(r2, t)) ** 2
            q += abs(c) ** 2 * ga * gb
        total += float((rho / q).sum())
    return total / n


def write_probe_csv(timeline: WaveTimeline, points, path) -> None:
    """Tabulate rho and J at (t, r1, r2) probe points as delimited text."""
    lines = ["t,x1,y1,x2,y2,rho,j1x,j1y,j2x,j2y"]
    for t, r1, r2 in points:
        s = current(timeline.state_at(t), np.asarray(r1, float),
                    np.asarray(r2, float), t)
        row = [t, r1[0], r1[1], r2[0], r2[1], s.rho, *s.j.tolist()]
        lines.append(",".join(repr(float(x)) for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def state_arrays(state: WaveState):
    """Flat arrays for the compiled integrator.

    Returns (packets_a, packets_b, term_ia, term_ib, term_c, k, ell) where
    packet rows are (cx_ref, cy_ref, t_ref, dir_x, dir_y, theta_ref).
    """
    sides = {}
    index = {}
    for side in ("A", "B"):
        labels = sorted(state.packets[side])
        index[side] = {lb: i for i, lb in enumerate(labels)}
        rows = np.empty((len(labels), 6))
        for i, lb in enumerate(labels):
            p = state.packets[side][lb]
            rows[i] = (p.center_ref[0], p.center_ref[1], p.t_ref,
                       p.direction[0], p.direction[1], p.theta_ref)
        sides[side] = rows
    term_ia, term_ib, term_c = [], [], []
    for pair, c in state.ket.nonzero_items():
        la, lb = pair.split(",")
        term_ia.append(index["A"][la])
        term_ib.append(index["B"][lb])
        term_c.append(c)
    any_packet = next(iter(state.packets["A"].values()))
    return (sides["A"], sides["B"], np.array(term_ia, dtype=np.int64),
            np.array(term_ib, dtype=np.int64),
            np.array(term_c, dtype=complex), any_packet.k, any_packet.ell)
