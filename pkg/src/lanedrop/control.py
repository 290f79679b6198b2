"""Feedback metering at the bottleneck entrance.

Two controllers share one feedback law: a proportional update drives the
desired inflow q so the bottleneck vehicle count tracks a target, and q is
converted to a red-green cycle.  The traffic-light variant meters every
lane at the end of the control edge; the decentralized variant has each AV
stop there and wait out its own cycle time before entering.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .carfollow import CONTROL_EDGE, STOP_SPEED, VehicleState
from .network import NetworkState, count_bottleneck

# Stop lines sit a few meters before the edge end, clear of the merge
# arbitration zone, the way painted stop bars sit back from a junction.
STOP_SETBACK = 1.5


def _holds_at(v: VehicleState, stop_pos: float, dt: float) -> bool:
    """True when the vehicle is still behind the stop line."""
    return v.pos <= stop_pos


@dataclass
class FeedbackParams:
    gain: float = 20.0           # K, vph per vehicle of count error
    n_crit: float = 8.0          # target bottleneck vehicle count
    q_init: float = 1000.0       # vph, initial desired inflow
    q_min: float = 200.0
    q_max: float = 14400.0
    window: float = 25.0         # T, averaging window for the count, s
    update_period: float = 30.0  # s between feedback updates
    green: float = 4.0           # g, fixed green time, s
    max_lanes: int = 4           # L in the cycle conversion

    def validate(self) -> None:
        if not self.q_min <= self.q_init <= self.q_max:
            raise ValueError("q_init must lie in [q_min, q_max]")
        if self.gain <= 0 or self.green <= 0 or self.update_period <= 0:
            raise ValueError("gain, green and update_period must be positive")


@dataclass
class FeedbackState:
    q: float
    samples: deque = field(default_factory=lambda: deque())
    latest: float = 0.0
    last_update: float = 0.0
    lane_offset: float = 2.0     # s of phase shift between adjacent lanes

    @classmethod
    def fresh(cls, fp: FeedbackParams, dt: float, t: float = 0.0) -> "FeedbackState":
        n = max(1, round(fp.window / dt))
        return cls(q=fp.q_init, samples=deque(maxlen=n), last_update=t)

    def record(self, count: float) -> None:
        self.samples.append(count)
        self.latest = count


def feedback_update(fs: FeedbackState, fp: FeedbackParams) -> float:
    """One proportional update of the desired inflow, with anti-windup.

    n_hat is the mean bottleneck count over the sample window (the current
    instantaneous count when the buffer is empty).  The new q is clamped to
    [q_min, q_max] and stored back on the state.
    """
    if fs.samples:
        n_hat = sum(fs.samples) / len(fs.samples)
    else:
        n_hat = fs.latest
    q = fs.q + fp.gain * (fp.n_crit - n_hat)
    q = max(fp.q_min, min(q, fp.q_max))
    fs.q = q
    return q


def cycle_time(q: float, fp: FeedbackParams) -> Tuple[float, float]:
    """(cycle, red) seconds for a desired inflow; red floors at zero."""
    if q <= 0:
        raise ValueError("desired inflow must be positive")
    c = 7200.0 * fp.max_lanes / q
    r = c - fp.green
    return c, (r if r > 0.0 else 0.0)


def light_phase(lane: int, t: float, fs: FeedbackState, fp: FeedbackParams) -> bool:
    """True when the light for ``lane`` shows green at time t."""
    c, _ = cycle_time(fs.q, fp)
    return (t + fs.lane_offset * lane) % c < fp.green


class TrafficLightController:
    """ALINEA-style metering lights, one per lane at the control edge end.

    A red light is a stop line for every vehicle still on the control edge.
    The feedback state updates every update_period seconds from the rolling
    bottleneck-count window (sampled once per simulation step).
    """

    def __init__(self, fp: FeedbackParams, dt: float, control_edge: int = CONTROL_EDGE,
                 fixed_cycle: Optional[float] = None):
        fp.validate()
        self.fp = fp
        self.dt = dt
        self.edge = control_edge
        self.fs = FeedbackState.fresh(fp, dt)
        if fixed_cycle is not None:
            # pin q so the conversion yields the requested cycle
            self.fs.q = 7200.0 * fp.max_lanes / fixed_cycle
        self.fixed = fixed_cycle is not None
        self._green: Dict[int, bool] = {}
        self._stop_pos = 0.0

    def begin_step(self, state: NetworkState) -> None:
        t = state.clock
        if not self.fixed and t - self.fs.last_update >= self.fp.update_period:
            feedback_update(self.fs, self.fp)
            self.fs.last_update = t
        self._stop_pos = state.spec.lengths[self.edge] - STOP_SETBACK
        n = state.spec.lane_counts[self.edge]
        self._green = {lane: light_phase(self._light_index(lane, n), t, self.fs, self.fp)
                       for lane in range(n)}

    @staticmethod
    def _light_index(lane: int, n_lanes: int) -> int:
        # Lanes that zipper together downstream get indices 2 apart, so
        # their green pulses sit half a cycle apart and the released
        # platoons do not collide at the merge.
        if n_lanes == 4:
            return (0, 2, 1, 3)[lane]
        return lane

    def constraints_for(self, state: NetworkState, v: VehicleState):
        return None

    def lines_for(self, state: NetworkState, v: VehicleState):
        if (v.edge == self.edge and not self._green[v.lane]
                and _holds_at(v, self._stop_pos, self.dt)):
            return (self._stop_pos - v.pos,)
        return None

    def held(self, state: NetworkState, v: VehicleState) -> bool:
        return (v.edge == self.edge and not self._green[v.lane]
                and _holds_at(v, self._stop_pos, self.dt))

    def accel_for(self, v: VehicleState):
        return None

    def observe(self, state: NetworkState) -> None:
        self.fs.record(count_bottleneck(state))


@dataclass
class _AvMeter:
    fs: FeedbackState
    entered: float
    wait_started: Optional[float] = None
    released: bool = False


class AvWaitController:
    """Decentralized metering: each AV stops at the control edge end and
    waits out its own cycle time c_k before entering the bottleneck.

    Every AV keeps its own feedback counter, seeded at q_init when it
    enters the network and updated on its local clock; the wait starts once
    the AV has stopped at the head of its lane.  After release (or off the
    control edge) the AV is an ordinary car-follower.
    """

    def __init__(self, fp: FeedbackParams, dt: float, control_edge: int = CONTROL_EDGE):
        fp.validate()
        self.fp = fp
        self.dt = dt
        self.edge = control_edge
        self.meters: Dict[int, _AvMeter] = {}
        self._count = 0.0
        self._stop_pos = 0.0

    def _meter(self, v: VehicleState, t: float) -> _AvMeter:
        m = self.meters.get(v.id)
        if m is None or (m.released and v.edge == 1):
            # fresh counter on (re-)entry
            m = _AvMeter(fs=FeedbackState.fresh(self.fp, self.dt, t), entered=t)
            self.meters[v.id] = m
        return m

    def begin_step(self, state: NetworkState) -> None:
        t = state.clock
        self._stop_pos = state.spec.lengths[self.edge] - STOP_SETBACK
        for vs in state.lanes.values():
            for v in vs:
                if v.is_av:
                    m = self._meter(v, t)
                    m.fs.record(self._count)
                    if t - m.fs.last_update >= self.fp.update_period:
                        feedback_update(m.fs, self.fp)
                        m.fs.last_update = t
        # release decisions for lane heads that have finished their wait
        for lane in range(state.spec.lane_counts[self.edge]):
            vs = state.lanes[(self.edge, lane)]
            if not vs:
                continue
            head = vs[-1]
            if not head.is_av:
                continue
            m = self.meters.get(head.id)
            if m is None or m.released:
                continue
            if head.speed < STOP_SPEED:
                if m.wait_started is None:
                    m.wait_started = t
                c, _ = cycle_time(m.fs.q, self.fp)
                if t - m.wait_started >= c:
                    m.released = True

    def constraints_for(self, state: NetworkState, v: VehicleState):
        return None

    def lines_for(self, state: NetworkState, v: VehicleState):
        if v.is_av and v.edge == self.edge and v.pos <= self._stop_pos:
            m = self.meters.get(v.id)
            if m is not None and not m.released:
                return (self._stop_pos - v.pos,)
        return None

    def held(self, state: NetworkState, v: VehicleState) -> bool:
        if v.is_av and v.edge == self.edge and v.pos <= self._stop_pos:
            m = self.meters.get(v.id)
            return m is not None and not m.released
        return False

    def wait_progress(self, vehicle_id: int, t: float) -> float:
        m = self.meters.get(vehicle_id)
        if m is None or m.wait_started is None:
            return 0.0
        return t - m.wait_started

    def accel_for(self, v: VehicleState):
        return None

    def observe(self, state: NetworkState) -> None:
        self._count = count_bottleneck(state)

    def wait_time(self, vehicle_id: int) -> float:
        """Current cycle time c_k for one AV (the minimal-state feature)."""
        m = self.meters.get(vehicle_id)
        if m is None:
            c, _ = cycle_time(self.fp.q_init, self.fp)
        else:
            c, _ = cycle_time(m.fs.q, self.fp)
        return c


def feedback_grid(n_crit_values=(6.0, 8.0, 10.0),
                  gain_values=(1.0, 5.0, 10.0, 20.0, 50.0),
                  q_init_values=(200.0, 600.0, 1000.0, 5000.0, 10000.0),
                  base: Optional[FeedbackParams] = None) -> List[FeedbackParams]:
    """The 75-point hyperparameter grid, in lexicographic order."""
    base = base or FeedbackParams()
    grid = []
    for n_crit in n_crit_values:
        for gain in gain_values:
            for q_init in q_init_values:
                grid.append(FeedbackParams(gain=gain, n_crit=n_crit, q_init=q_init,
                                           q_min=base.q_min, q_max=base.q_max,
                                           window=base.window,
                                           update_period=base.update_period,
                                           green=base.green,
                                           max_lanes=base.max_lanes))
    return grid


def grid_search_feedback(grid: List[FeedbackParams], eval_fn) -> Tuple[FeedbackParams, List[Tuple[FeedbackParams, float]]]:
    """Exhaustive sweep; returns (argmax of eval_fn, full results table).

    Ties go to the earlier grid entry, which is lexicographically first in
    (n_crit, gain, q_init) for grids built by feedback_grid.
    """
    if not grid:
        raise ValueError("empty grid")
    results = []
    best = None
    best_score = -math.inf
    for fp in grid:
        score = eval_fn(fp)
        results.append((fp, score))
        if score > best_score:
            best = fp
            best_score = score
    return best, results
