"""Exact two-particle mode algebra for a pair of Mach-Zehnder interferometers.

Each particle occupies one of five discrete modes: the input beam (a0/b0),
one of two interferometer arms (a1/a2, b1/b2), or one of two output beams
(A1/A2, B1/B2).  A two-particle state is a dense 5x5 table of complex
amplitudes.  Optical elements act as exact substitutions:

    beam splitter   |m1> -> (|M1> + i|M2>)/sqrt(2)
                    |m2> -> (i|M1> + |M2>)/sqrt(2)

with the single input beam entering the second port (a0 -> (i a1 + a2)/sqrt(2)).
The inner-arm pair (a2, b2) can be removed (annihilation, a projector followed
by renormalization) or phase-tagged (dephasing).  Zero amplitudes stay exact
zeros so forbidden channels are exact, not merely small.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# mode indices per side
INPUT, ARM1, ARM2, OUT1, OUT2 = range(5)

MODE_NAMES = {
    "A": ("a0", "a1", "a2", "A1", "A2"),
    "B": ("b0", "b1", "b2", "B1", "B2"),
}
STAGE_OF_INDEX = ("input", "arm", "arm", "out", "out")

_INV_SQRT2 = 1.0 / math.sqrt(2.0)

OUTPUT_PAIRS = ("A1,B1", "A1,B2", "A2,B1", "A2,B2")


class StageMismatchError(ValueError):
    """An event was applied to a ket living at the wrong stage."""


class ZeroSurvivalError(ValueError):
    """Annihilation would leave nothing: the ket is entirely in (a2, b2)."""


class NormalizationError(ValueError):
    """Operation requires a normalized ket."""


@dataclass(frozen=True)
class DiscreteEvent:
    """One scheduled mode-level event.

    kind is one of 'input_splitter', 'output_splitter', 'annihilate',
    'dephase'; side ('A' or 'B') applies to splitters only; phi to dephase.
    """

    kind: str
    time: float
    side: str | None = None
    phi: float = 0.0


class TwoParticleKet:
    """Dense 5x5 complex amplitude table, indexed [mode_of_A, mode_of_B]."""

    __slots__ = ("amps",)

    def __init__(self, amps: np.ndarray):
        amps = np.asarray(amps, dtype=np.complex128)
        if amps.shape != (5, 5):
            raise ValueError("amplitude table must be 5x5")
        self.amps = amps

    @classmethod
    def initial(cls) -> "TwoParticleKet":
        amps = np.zeros((5, 5), dtype=np.complex128)
        amps[INPUT, INPUT] = 1.0
        return cls(amps)

    @classmethod
    def from_dict(cls, entries: dict[str, complex]) -> "TwoParticleKet":
        """Build from {"a1,b2": amplitude} style entries."""
        amps = np.zeros((5, 5), dtype=np.complex128)
        for key, value in entries.items():
            ia, ib = _indices_of_pair(key)
            amps[ia, ib] = value
        return cls(amps)

    def copy(self) -> "TwoParticleKet":
        return TwoParticleKet(self.amps.copy())

    def amplitude(self, pair: str) -> complex:
        ia, ib = _indices_of_pair(pair)
        return complex(self.amps[ia, ib])

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amps) ** 2)))

    def support_indices(self, side: str) -> set[int]:
        """Mode indices of the given side carrying nonzero amplitude."""
        axis = 1 if side == "A" else 0
        nonzero = np.any(self.amps != 0, axis=axis)
        return {int(i) for i in np.nonzero(nonzero)[0]}

    def nonzero_items(self):
        """Yield (pair_key, amplitude) in deterministic (A, B) index order."""
        for ia in range(5):
            for ib in range(5):
                amp = self.amps[ia, ib]
                if amp != 0:
                    yield f"{MODE_NAMES['A'][ia]},{MODE_NAMES['B'][ib]}", complex(amp)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v:.4g}" for k, v in self.nonzero_items())
        return f"TwoParticleKet({inner})"


def _indices_of_pair(pair: str) -> tuple[int, int]:
    name_a, name_b = pair.split(",")
    return MODE_NAMES["A"].index(name_a), MODE_NAMES["B"].index(name_b)


def phase_invariant_equal(ket: TwoParticleKet, other: TwoParticleKet,
                          tol: float = 1e-12) -> bool:
    """True when the kets agree up to a single global phase.

    Tests |<psi|phi>| = |psi| * |phi| within tol (states never normalized
    behind the caller's back).
    """
    overlap = abs(np.vdot(ket.amps, other.amps))
    scale = ket.norm() * other.norm()
    return abs(overlap - scale) <= tol * max(scale, 1.0)


def _check_support(ket: TwoParticleKet, side: str, allowed: set[int], kind: str):
    support = ket.support_indices(side)
    if not support <= allowed:
        names = sorted(MODE_NAMES[side][i] for i in support - allowed)
        raise StageMismatchError(
            f"{kind} on side {side}: amplitude present on {names}")


def apply_splitter(ket: TwoParticleKet, side: str, stage: str) -> TwoParticleKet:
    """Apply one beam splitter (stage 'input' or 'out') on one side.

    Input stage: a0 -> (i a1 + a2)/sqrt(2).
    Output stage: a1 -> (A1 + i A2)/sqrt(2), a2 -> (i A1 + A2)/sqrt(2).
    """
    if side not in ("A", "B"):
        raise ValueError(f"unknown side {side!r}")
    amps = ket.amps.copy()
    if side == "B":
        amps = amps.T  # act on axis 0, transpose back at the end
    new = np.zeros_like(amps)
    if stage == "input":
        _check_support(ket, side, {INPUT}, "input splitter")
        new[ARM1] = 1j * _INV_SQRT2 * amps[INPUT]
        new[ARM2] = _INV_SQRT2 * amps[INPUT]
    elif stage == "out":
        _check_support(ket, side, {ARM1, ARM2}, "output splitter")
        new[OUT1] = _INV_SQRT2 * (amps[ARM1] + 1j * amps[ARM2])
        new[OUT2] = _INV_SQRT2 * (1j * amps[ARM1] + amps[ARM2])
    else:
        raise ValueError(f"unknown splitter stage {stage!r}")
    if side == "B":
        new = new.T
    return TwoParticleKet(new)


def annihilate(ket: TwoParticleKet) -> tuple[TwoParticleKet, float]:
    """Remove the (a2, b2) component and renormalize.

    Returns (new_ket, survival) where survival is the surviving probability
    fraction.  Raises ZeroSurvivalError when nothing survives.
    """
    _check_support(ket, "A", {ARM1, ARM2}, "annihilate")
    _check_support(ket, "B", {ARM1, ARM2}, "annihilate")
    total = float(np.sum(np.abs(ket.amps) ** 2))
    removed = float(abs(ket.amps[ARM2, ARM2]) ** 2)
    survival = 1.0 - removed / total
    if survival <= 1e-15:
        raise ZeroSurvivalError("state is entirely in the (a2, b2) channel")
    amps = ket.amps.copy()
    amps[ARM2, ARM2] = 0.0
    amps /= math.sqrt(survival * total)
    return TwoParticleKet(amps), survival


def dephase(ket: TwoParticleKet, phi: float) -> TwoParticleKet:
    """Multiply the (a2, b2) amplitude by exp(i phi)."""
    _check_support(ket, "A", {ARM1, ARM2}, "dephase")
    _check_support(ket, "B", {ARM1, ARM2}, "dephase")
    amps = ket.amps.copy()
    amps[ARM2, ARM2] *= complex(math.cos(phi), math.sin(phi))
    return TwoParticleKet(amps)


def apply_event(ket: TwoParticleKet, event: DiscreteEvent) -> tuple[TwoParticleKet, float | None]:
    """Apply one event; returns (ket, survival or None)."""
    if event.kind == "input_splitter":
        return apply_splitter(ket, event.side, "input"), None
    if event.kind == "output_splitter":
        return apply_splitter(ket, event.side, "out"), None
    if event.kind == "annihilate":
        new, survival = annihilate(ket)
        return new, survival
    if event.kind == "dephase":
        return dephase(ket, event.phi), None
    raise ValueError(f"unknown event kind {event.kind!r}")


def evolve(initial: TwoParticleKet, events: list[DiscreteEvent]) -> list[TwoParticleKet]:
    """Apply events in order; returns the ket after each event.

    Events must be time-ordered; stage preconditions catch inconsistent
    schedules (e.g. an output splitter before the input splitter).
    """
    times = [e.time for e in events]
    if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
        raise ValueError("events are not time-ordered")
    states = []
    ket = initial
    for event in events:
        ket, _ = apply_event(ket, event)
        states.append(ket)
    return states


def born_probabilities(ket: TwoParticleKet) -> dict[str, float]:
    """Detection probabilities over the four output-pair channels.

    Requires a normalized ket with support only on output modes.
    """
    _check_support(ket, "A", {OUT1, OUT2}, "born_probabilities")
    _check_support(ket, "B", {OUT1, OUT2}, "born_probabilities")
    norm = ket.norm()
    if abs(norm - 1.0) > 1e-12:
        raise NormalizationError(f"ket norm {norm!r} is not 1")
    out = {}
    for pair in OUTPUT_PAIRS:
        ia, ib = _indices_of_pair(pair)
        out[pair] = float(abs(ket.amps[ia, ib]) ** 2)
    return out


# --- JSON round-trip -------------------------------------------------------

def ket_to_jsonable(ket: TwoParticleKet) -> dict:
    """Nonzero amplitudes as {"a1,b2": {"re": ..., "im": ...}}, ordered."""
    return {key: {"re": amp.real, "im": amp.imag}
            for key, amp in ket.nonzero_items()}


def ket_from_jsonable(data: dict) -> TwoParticleKet:
    return TwoParticleKet.from_dict(
        {key: complex(v["re"], v["im"]) for key, v in data.items()})


def ket_to_json(ket: TwoParticleKet) -> str:
    return json.dumps(ket_to_jsonable(ket), indent=2)


def ket_from_json(text: str) -> TwoParticleKet:
    return ket_from_jsonable(json.loads(text))
