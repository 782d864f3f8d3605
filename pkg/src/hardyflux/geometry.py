"""Planar layout of the twin interferometers, event scheduling, and
Lorentz-frame helpers.

Each interferometer is a rectangle Mach-Zehnder drawn with axis-aligned
segments.  Particle A runs above the symmetry axis, particle B below, with
the two inner arms (a2, b2) facing each other across a gap d.  For side A
(q = d/2, rung height H, rail length W):

    a0:  (-lead, q)  ->  (0, q)                     input beam
    a1:  (0, q) -> (0, q+H) -> (W, q+H)             outer arm (reflected)
    a2:  (0, q) -> (W, q) -> (W, q+H)               inner arm (transmitted)
    A1:  (W, q+H) -> +x                             straight-through output
    A2:  (W, q+H) -> +y                             deflected output

Both arms have one mirror and equal arc length H + W, so mirror phases and
propagation phases cancel at the output splitter.  A nonzero delta_l
lengthens W on one side only, which delays that side's output-splitter
crossing by delta_l / s while keeping the two arms of that side equal.

Natural units hbar = m = c = 1 throughout; event times are arc length over
the common packet speed s.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .modes import DiscreteEvent

# geometry ratios, in units of arm_length or packet_length
RUNG_FRACTION = 0.45        # H = 0.45 L, W = 0.55 L
LEAD_IN_LENGTHS = 2.5       # input beam length before the splitter, in ell
TAIL_LENGTHS = 8.0          # classification delay after the later output event
ANNIHILATION_FRACTION = 0.75  # position of the annihilation event along the rail

ARM_LABELS = {"A": ("a1", "a2"), "B": ("b1", "b2")}
OUT_LABELS = {"A": ("A1", "A2"), "B": ("B1", "B2")}
INPUT_LABELS = {"A": "a0", "B": "b0"}


class ConfigError(ValueError):
    """Invalid layout parameters or config file."""


@dataclass(frozen=True)
class EventSchedule:
    """Mode-level events plus the probe/end times derived from the layout."""

    events: tuple[DiscreteEvent, ...]
    t0: float
    t_input: float
    t_event: float | None          # annihilation/dephasing time, if scheduled
    t_out_a: float
    t_out_b: float
    t_arm_probe: float
    t_final_probe: float
    t_end: float

    def to_jsonable(self) -> dict:
        return {
            "events": [
                {"kind": e.kind, "time": e.time, "side": e.side, "phi": e.phi}
                for e in self.events
            ],
            "t0": self.t0,
            "t_input": self.t_input,
            "t_event": self.t_event,
            "t_out_a": self.t_out_a,
            "t_out_b": self.t_out_b,
            "t_arm_probe": self.t_arm_probe,
            "t_final_probe": self.t_final_probe,
            "t_end": self.t_end,
        }


@dataclass(frozen=True, eq=False)
class Layout:
    """Validated geometry with branch polylines and timing helpers."""

    arm_length: float           # L: arc length input->output splitter per arm
    arm_separation: float       # d: gap between the two inner rails
    speed: float                # s: packet speed along every segment
    packet_length: float        # ell: initial 1/e half-width scale
    wavenumber: float           # k: carrier wavenumber
    delta_l: float              # signed extension: B's output arm (+), A's (-)
    polylines: dict = field(repr=False)
    start_times: dict = field(repr=False)
    annihilation_window: tuple[float, float] = (0.0, 0.0)

    # --- derived scalars ---------------------------------------------------

    @property
    def lead_in(self) -> float:
        return LEAD_IN_LENGTHS * self.packet_length

    @property
    def rung(self) -> float:
        return RUNG_FRACTION * self.arm_length

    @property
    def rail(self) -> float:
        return self.arm_length - self.rung

    def rail_of(self, side: str) -> float:
        if side == "A":
            return self.rail + max(-self.delta_l, 0.0)
        return self.rail + max(self.delta_l, 0.0)

    @property
    def t_input(self) -> float:
        return self.lead_in / self.speed

    def t_output(self, side: str) -> float:
        return self.t_input + (self.rung + self.rail_of(side)) / self.speed

    @property
    def t_final_probe(self) -> float:
        later = max(self.t_output("A"), self.t_output("B"))
        return later + TAIL_LENGTHS * self.packet_length / self.speed

    @property
    def t_annihilation(self) -> float:
        w_min = min(self.rail_of("A"), self.rail_of("B"))
        return self.t_input + ANNIHILATION_FRACTION * w_min / self.speed

    @property
    def t_arm_probe(self) -> float:
        earliest = min(self.t_output("A"), self.t_output("B"))
        return 0.5 * (self.t_input + earliest)

    @property
    def total_flight_time(self) -> float:
        return self.t_final_probe

    def output_splitter_position(self, side: str) -> np.ndarray:
        return self.polylines[OUT_LABELS[side][0]][0].copy()

    # --- polyline walking ----------------------------------------------------

    def branch_position(self, label: str, t: float) -> np.ndarray:
        """Packet-center position on a branch at time t (clamped to its ends)."""
        pts = self.polylines[label]
        arc = self.speed * (t - self.start_times[label])
        pos = pts[0].copy()
        for a, b in zip(pts[:-1], pts[1:]):
            seg = b - a
            seg_len = float(np.hypot(*seg))
            if arc <= seg_len:
                return a + seg * max(arc, 0.0) / seg_len
            arc -= seg_len
        return pts[-1].copy()

    def branch_centers(self, labels, t: float) -> np.ndarray:
        return np.array([self.branch_position(lb, t) for lb in labels])

    def mirror_times(self, label: str) -> list[tuple[float, np.ndarray]]:
        """(time, vertex) for each interior vertex of a branch polyline."""
        pts = self.polylines[label]
        out = []
        arc = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            arc += float(np.hypot(*(b - a)))
            if not np.array_equal(b, pts[-1]):
                out.append((self.start_times[label] + arc / self.speed, b))
        return out

    # --- schedule ------------------------------------------------------------

    def event_schedule(self, mode: str = "annihilate",
                       phi: float = math.pi) -> EventSchedule:
        """Time-ordered mode-level events for a run of the given mode."""
        if mode not in ("annihilate", "dephase", "none"):
            raise ConfigError(f"unknown mode {mode!r}")
        t_in = self.t_input
        t_out_a = self.t_output("A")
        t_out_b = self.t_output("B")
        events = [
            DiscreteEvent("input_splitter", t_in, side="A"),
            DiscreteEvent("input_splitter", t_in, side="B"),
        ]
        t_event = None
        if mode != "none":
            t_event = self.t_annihilation
            if mode == "annihilate":
                events.append(DiscreteEvent("annihilate", t_event))
            else:
                events.append(DiscreteEvent("dephase", t_event, phi=phi))
        outs = sorted(
            [("A", t_out_a), ("B", t_out_b)], key=lambda p: (p[1], p[0]))
        for side, t in outs:
            events.append(DiscreteEvent("output_splitter", t, side=side))
        return EventSchedule(
            events=tuple(events),
            t0=0.0,
            t_input=t_in,
            t_event=t_event,
            t_out_a=t_out_a,
            t_out_b=t_out_b,
            t_arm_probe=self.t_arm_probe,
            t_final_probe=self.t_final_probe,
            t_end=self.t_final_probe,
        )

    # --- serialization ---------------------------------------------------------

    def config_dict(self) -> dict:
        ext_a = max(-self.delta_l, 0.0) + 0.0    # + 0.0 normalizes -0.0
        ext_b = max(self.delta_l, 0.0) + 0.0
        return {
            "layout": {
                "arm_length": self.arm_length,
                "arm_separation": self.arm_separation,
                "speed": self.speed,
                "packet_length": self.packet_length,
                "wavenumber": self.wavenumber,
            },
            "interferometer_a": {"output_extension": ext_a},
            "interferometer_b": {"output_extension": ext_b},
        }

    def to_config(self) -> str:
        parser = configparser.ConfigParser()
        for section, entries in self.config_dict().items():
            parser[section] = {k: repr(v) for k, v in entries.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def config_hash(self) -> str:
        canon = json.dumps(self.config_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def build_layout(arm_length: float, arm_separation: float, speed: float,
                 packet_length: float, wavenumber: float,
                 delta_l: float = 0.0) -> Layout:
    """Validate parameters and construct the branch polylines.

    Raises ConfigError when the separation, arm length, or narrow-band
    requirements are violated.
    """
    ell = packet_length
    if ell <= 0 or speed <= 0 or wavenumber <= 0:
        raise ConfigError("packet_length, speed, wavenumber must be positive")
    if arm_separation < 8 * ell:
        raise ConfigError(
            f"arm_separation {arm_separation} < 8 * packet_length {8 * ell}")
    if arm_length < 4 * ell:
        raise ConfigError(
            f"arm_length {arm_length} < 4 * packet_length {4 * ell}")
    if wavenumber * ell < 50:
        raise ConfigError(
            f"narrow-band requirement k*ell >= 50 violated ({wavenumber * ell})")

    q = arm_separation / 2.0
    H = RUNG_FRACTION * arm_length
    W = arm_length - H
    lead = LEAD_IN_LENGTHS * ell
    w_a = W + max(-delta_l, 0.0)
    w_b = W + max(delta_l, 0.0)
    t_in = lead / speed
    t_out = {"A": t_in + (H + w_a) / speed, "B": t_in + (H + w_b) / speed}
    t_end = max(t_out.values()) + TAIL_LENGTHS * ell / speed
    polylines: dict[str, np.ndarray] = {}
    start_times: dict[str, float] = {}

    for side, sign, w_side in (("A", 1.0, w_a), ("B", -1.0, w_b)):
        yi = sign * q              # inner rail
        yo = sign * (q + H)        # outer rail
        out_len = speed * (t_end - t_out[side]) + 2 * ell
        lb_in = INPUT_LABELS[side]
        lb1, lb2 = ARM_LABELS[side]
        lo1, lo2 = OUT_LABELS[side]
        polylines[lb_in] = np.array([(-lead, yi), (0.0, yi)])
        polylines[lb1] = np.array([(0.0, yi), (0.0, yo), (w_side, yo)])
        polylines[lb2] = np.array([(0.0, yi), (w_side, yi), (w_side, yo)])
        polylines[lo1] = np.array([(w_side, yo), (w_side + out_len, yo)])
        polylines[lo2] = np.array([(w_side, yo), (w_side, yo + sign * out_len)])
        start_times[lb_in] = 0.0
        start_times[lb1] = t_in
        start_times[lb2] = t_in
        start_times[lo1] = t_out[side]
        start_times[lo2] = t_out[side]

    # equal arc length along both arms of each side, by construction
    for side, w_side in (("A", w_a), ("B", w_b)):
        for lb in ARM_LABELS[side]:
            pts = polylines[lb]
            arc = float(sum(np.hypot(*(b - a)) for a, b in zip(pts[:-1], pts[1:])))
            assert abs(arc - (H + w_side)) < 1e-9 * (H + w_side)

    window = (t_in, t_in + min(w_a, w_b) / speed)
    layout = Layout(
        arm_length=arm_length,
        arm_separation=arm_separation,
        speed=speed,
        packet_length=ell,
        wavenumber=wavenumber,
        delta_l=delta_l,
        polylines=polylines,
        start_times=start_times,
        annihilation_window=window,
    )
    t_ann = layout.t_annihilation
    if not (window[0] < t_ann < window[1]):
        raise ConfigError("annihilation time fell outside its window")
    if not (layout.t_input < t_ann < min(t_out.values())):
        raise ConfigError("annihilation time not between input and output events")
    return layout


def with_delta(layout: Layout, delta_l: float) -> Layout:
    """Same parameters, different output-arm extension."""
    return build_layout(layout.arm_length, layout.arm_separation, layout.speed,
                        layout.packet_length, layout.wavenumber, delta_l)


# --- config files -------------------------------------------------------------

_LAYOUT_KEYS = ("arm_length", "arm_separation", "speed", "packet_length",
                "wavenumber")


def layout_from_config(text: str) -> Layout:
    """Parse a key = value config with one section per interferometer.

    Required: [layout] with arm_length, arm_separation, speed, packet_length,
    wavenumber.  Optional: [interferometer_a]/[interferometer_b] with
    output_extension (at most one may be nonzero; B minus A gives delta_l).
    """
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    if "layout" not in parser:
        raise ConfigError("config is missing the [layout] section")
    values = {}
    for key in _LAYOUT_KEYS:
        if key not in parser["layout"]:
            raise ConfigError(f"[layout] is missing {key}")
        try:
            values[key] = float(parser["layout"][key])
        except ValueError as exc:
            raise ConfigError(f"[layout] {key} is not a number") from exc
    unknown = set(parser["layout"]) - set(_LAYOUT_KEYS)
    if unknown:
        raise ConfigError(f"unknown [layout] keys: {sorted(unknown)}")

    def extension(section):
        if section not in parser:
            return 0.0
        try:
            return float(parser[section].get("output_extension", "0"))
        except ValueError as exc:
            raise ConfigError(f"[{section}] output_extension is not a number") from exc

    ext_a = extension("interferometer_a")
    ext_b = extension("interferometer_b")
    if ext_a < 0 or ext_b < 0:
        raise ConfigError("output_extension must be non-negative")
    if ext_a and ext_b:
        raise ConfigError("only one interferometer may carry an extension")
    return build_layout(values["arm_length"], values["arm_separation"],
                        values["speed"], values["packet_length"],
                        values["wavenumber"], delta_l=ext_b - ext_a)


def run_options_from_config(text: str) -> dict:
    """Optional [run] section: n, seed, mode, phi, jobs, keep (flags win)."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if "run" not in parser:
        return {}
    section = parser["run"]
    out = {}
    for key in ("n", "seed", "jobs", "keep"):
        if key in section:
            out[key] = section.getint(key)
    if "mode" in section:
        out["mode"] = section.get("mode")
    if "phi" in section:
        out["phi"] = section.getfloat("phi")
    return out


# --- Lorentz boosts ------------------------------------------------------------

@dataclass(frozen=True)
class SpacetimeEvent:
    t: float
    x: float


def boost_event(event: SpacetimeEvent, v: float) -> SpacetimeEvent:
    """Standard boost along the x axis, c = 1."""
    if abs(v) >= 1.0:
        raise ValueError(f"|v| must be < 1, got {v}")
    gamma = 1.0 / math.sqrt(1.0 - v * v)
    return SpacetimeEvent(t=gamma * (event.t - v * event.x),
                          x=gamma * (event.x - v * event.t))


def output_events(layout: Layout) -> tuple[SpacetimeEvent, SpacetimeEvent]:
    """Output-splitter crossings as (t, x) with x along the boost axis.

    The boost axis is the direction along which the two interferometers'
    rung sections run antiparallel (A upward, B downward); A's splitter sits
    at larger x.  Requires delta_l = 0 so both lab times coincide.
    """
    if layout.delta_l != 0.0:
        raise ConfigError("boost analysis requires delta_l = 0")
    x_a = layout.arm_separation / 2.0 + layout.rung
    t_out = layout.t_output("A")
    return (SpacetimeEvent(t=t_out, x=x_a), SpacetimeEvent(t=t_out, x=-x_a))


def crossing_order(layout: Layout, v: float) -> tuple[str, float]:
    """Which output splitter fires first in the boosted frame, and the delay.

    Returns ('A_first' | 'B_first' | 'simultaneous', |t'_A - t'_B|).
    """
    ev_a, ev_b = output_events(layout)
    tb = boost_event(ev_b, v).t
    ta = boost_event(ev_a, v).t
    if ta < tb:
        return "A_first", tb - ta
    if tb < ta:
        return "B_first", ta - tb
    return "simultaneous", 0.0


def effective_layout(layout: Layout, v: float) -> Layout:
    """Galilean layout reproducing the boosted crossing-time difference.

    The later side's output arm is extended by speed * delay: v > 0 makes A
    cross first, so B acquires a positive delta_l.
    """
    ev_a, ev_b = output_events(layout)
    delay_b_minus_a = boost_event(ev_b, v).t - boost_event(ev_a, v).t
    return with_delta(layout, layout.speed * delay_b_minus_a)
