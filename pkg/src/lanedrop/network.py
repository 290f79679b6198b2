"""The 4-2-1 lane-drop network: topology, inflow, motion, merges, accounting.

Edges are numbered 1..5 along the route.  Lane counts drop at two zipper
merges (after edge 3: lanes (0,1)->0 and (2,3)->1; after edge 4:
(0,1)->0).  Vehicles approaching a merging boundary interleave strictly by
projected arrival position, ties to the lower lane index.
"""

from __future__ import annotations

import math
import random
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .carfollow import (
    STOP_SPEED,
    KraussParams,
    LaneOption,
    VehicleState,
    braking_safe_speed,
    detect_collisions,
    krauss_safe_speed,
    maybe_lane_change,
    step_vehicle,
)

# Calibrated so the uncontrolled congestion onset lands between 2300 and
# 2500 veh/h (see experiments.calibrate_network).
DEFAULT_EDGES = ((1, 200.0, 4), (2, 100.0, 4), (3, 100.0, 4), (4, 250.0, 2), (5, 40.0, 1))


def default_krauss() -> KraussParams:
    """Calibrated driver model for the shipped network geometry."""
    return KraussParams(min_gap=2.0, sigma=0.2, v_max=28.0)
BOTTLENECK_EDGE = 4


class CollisionError(RuntimeError):
    """A bumper overlap was detected; indicates a model bug, not a crash model."""


@dataclass
class NetworkSpec:
    """Static description of the bottleneck geometry and driver model."""

    edges: Tuple[Tuple[int, float, int], ...] = DEFAULT_EDGES
    merge_map: Optional[Dict[int, Dict[int, int]]] = None  # edge -> upstream lane -> downstream lane
    krauss: KraussParams = field(default_factory=default_krauss)
    merge_zone: float = math.inf    # m before a merging boundary where zipper order binds
    merge_commit: float = 25.0      # m before the boundary where the no-overlap cap engages
    queue_speed: float = 8.0        # below this speed a merging head is paced through the throat
    queue_gap: float = 12.0         # downstream clearance (m) that ends the pacing
    queue_cross: float = 4.0        # paced crossing speed (m/s) for a crawling head
    jam_gate_edge: int = 2          # pacing needs the jam to have spilled back to this edge
    jam_gate_speed: float = 10.0    # mean speed (m/s) on the gate edge that marks spillback
    jam_throat_speed: float = 8.0   # ... while the bottleneck edge itself is also this slow
    speed_limits: Optional[Dict[int, float]] = None  # per-edge limit overriding krauss.v_max
    entry_speed: float = 25.0       # m/s, network entry speed
    entry_speed_min: float = 12.5   # entries slower than this are denied
    lc_hysteresis: float = 5.0      # m of extra gap required to change lanes

    def __post_init__(self) -> None:
        self.krauss.validate()
        ids = [e[0] for e in self.edges]
        if ids != list(range(1, len(self.edges) + 1)):
            raise ValueError("edge ids must be 1..n in order")
        lanes = [e[2] for e in self.edges]
        if any(n <= 0 for n in lanes) or any(e[1] <= 0 for e in self.edges):
            raise ValueError("edge lengths and lane counts must be positive")
        if any(a < b for a, b in zip(lanes, lanes[1:])):
            raise ValueError("lane counts must be non-increasing along the route")
        if self.merge_map is None:
            self.merge_map = {e: default_merge_map(up, down)
                              for (e, _, up), (_, _, down)
                              in zip(self.edges, self.edges[1:])}
        self._validate_merge_map()
        self.lengths = {e: ln for e, ln, _ in self.edges}
        self.limits = {e: (self.speed_limits or {}).get(e, self.krauss.v_max)
                       for e, _, _ in self.edges}
        self.lane_counts = {e: n for e, _, n in self.edges}
        self.offsets = {}
        total = 0.0
        for e, ln, _ in self.edges:
            self.offsets[e] = total
            total += ln
        self.total_length = total
        self.last_edge = len(self.edges)
        # (edge, lane_a, lane_b) triples whose lanes zipper into one.
        self.merge_pairs = []
        for e in range(1, self.last_edge):
            by_target: Dict[int, List[int]] = {}
            for up, down in self.merge_map[e].items():
                by_target.setdefault(down, []).append(up)
            for down, ups in sorted(by_target.items()):
                if len(ups) == 2:
                    a, b = sorted(ups)
                    self.merge_pairs.append((e, a, b))
                elif len(ups) > 2:
                    raise ValueError("more than two lanes merging into one")

    def _validate_merge_map(self) -> None:
        for (e, _, up), (_, _, down) in zip(self.edges, self.edges[1:]):
            m = self.merge_map.get(e)
            if m is None or sorted(m) != list(range(up)):
                raise ValueError(f"merge map after edge {e} must cover lanes 0..{up - 1}")
            targets = set(m.values())
            if targets != set(range(down)):
                raise ValueError(f"merge map after edge {e} must be onto lanes 0..{down - 1}")


def default_merge_map(up: int, down: int) -> Dict[int, int]:
    """Identity when counts match, zipper pairs (0,1)->0, (2,3)->1 otherwise."""
    if up == down:
        return {i: i for i in range(up)}
    if up == 2 * down:
        return {i: i // 2 for i in range(up)}
    raise ValueError(f"no default mapping for {up}->{down} lanes")


@dataclass
class InflowConfig:
    rate: float = 2400.0        # vehicles/hour over the whole entry cross-section
    penetration: float = 0.0    # probability a spawned vehicle is an AV
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rate < 0:
            raise ValueError("rate must be non-negative")
        if not 0.0 <= self.penetration <= 1.0:
            raise ValueError("penetration must lie in [0, 1]")


@dataclass
class StepReport:
    n_exited: int
    exited: List[VehicleState]


class NetworkState:
    """Mutable simulation state: per-lane vehicle lists plus counters."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.lanes: Dict[Tuple[int, int], List[VehicleState]] = {
            (e, l): [] for e, _, n in spec.edges for l in range(n)
        }
        self.steps = 0
        self.clock = 0.0
        self.outflow_events: List[float] = []     # exit timestamps, ascending
        self.inflow_events: List[Tuple[float, int, bool]] = []  # (t, id, is_av)
        self.spawned = 0
        self.exited = 0
        self.denied = 0
        self.next_id = 0
        self.pending: List[VehicleState] = []     # rerouted vehicles awaiting re-entry
        self.entered_edge: Dict[int, int] = {e: 0 for e, _, _ in spec.edges}

    def vehicles(self):
        for vs in self.lanes.values():
            yield from vs

    def n_present(self) -> int:
        return sum(len(vs) for vs in self.lanes.values())

    def route_pos(self, v: VehicleState) -> float:
        return self.spec.offsets[v.edge] + v.pos


def build_network(spec: NetworkSpec) -> NetworkState:
    """Empty network at clock 0; raises on a malformed spec."""
    return NetworkState(spec)


# ---------------------------------------------------------------------------
# motion


def _downstream_constraint(state: NetworkState, v: VehicleState) -> Optional[Tuple[float, float]]:
    """Nearest vehicle ahead across edge boundaries, following the merge map."""
    spec = state.spec
    e, l = v.edge, v.lane
    dist = spec.lengths[e] - v.pos
    while e < spec.last_edge:
        l = spec.merge_map[e][l]
        e += 1
        vs = state.lanes[(e, l)]
        if vs:
            rear = vs[0]
            return (rear.speed, dist + rear.pos - rear.length)
        dist += spec.lengths[e]
    return None


def _mean_speed(state: NetworkState, e: int):
    total = 0.0
    n = 0
    for l in range(state.spec.lane_counts[e]):
        for v in state.lanes[(e, l)]:
            total += v.speed
            n += 1
    return total / n if n else None


def _spilled_back(state: NetworkState) -> bool:
    """Sustained overload: the bottleneck edge has collapsed and the queue
    reaches back to the gate edge.  Transient local jams (gate edge still
    free) and metering queues (bottleneck edge still fast) do not count."""
    spec = state.spec
    gate = _mean_speed(state, spec.jam_gate_edge)
    if gate is None or gate >= spec.jam_gate_speed:
        return False
    throat = _mean_speed(state, spec.last_edge - 1)
    return throat is not None and throat < spec.jam_throat_speed


def _build_constraints(state: NetworkState, dt: float, controller=None):
    """Per-vehicle (leader_speed, gap) lists from the pre-step snapshot.

    Returns (hard, merge, lines): hard constraints get the full safety
    treatment, merge ones the braking envelope only (zipper coupling before
    the pair shares a lane), and lines are stop-line distances (unresolved
    merge conflicts, red lights).
    """
    spec = state.spec
    cons: Dict[int, list] = {}
    merge: Dict[int, list] = {}
    lines: Dict[int, list] = {}
    caps: Dict[int, float] = {}
    for (e, l), vs in state.lanes.items():
        if not vs:
            continue
        n = len(vs)
        for i in range(n):
            v = vs[i]
            lst = []
            if i + 1 < n:
                lead = vs[i + 1]
                lst.append((lead.speed, lead.pos - lead.length - v.pos))
            else:
                down = _downstream_constraint(state, v)
                if down is not None:
                    lst.append(down)
            cons[v.id] = lst

    # Zipper arbitration: only the two lane heads compete for the boundary.
    # The head that projects behind (smaller pos; ties to the higher lane
    # index) tracks the other as a leader.  The coupling is soft over the
    # approach (the pair still sits in different physical lanes) and becomes
    # a hard no-overlap constraint in the commit window before the boundary.
    # A conflicted loser (projected gap under min_gap) may not cross: it
    # eases toward a stop at the boundary line instead, which resolves as
    # soon as the winner pulls clear.
    min_gap = spec.krauss.min_gap
    jammed = spec.queue_gap > 0.0 and _spilled_back(state)
    is_held = getattr(controller, "held", None) if controller is not None else None
    for e, la, lb in spec.merge_pairs:
        a = state.lanes[(e, la)]
        b = state.lanes[(e, lb)]
        if not a or not b:
            continue
        length = spec.lengths[e]
        ha, hb = a[-1], b[-1]
        a_ahead = ha.pos > hb.pos or (ha.pos == hb.pos and la < lb)
        winner, loser = (ha, hb) if a_ahead else (hb, ha)
        if loser.pos < length - spec.merge_zone:
            continue
        # A winner held at a controller's stop line (red light, waiting
        # AV) cannot cross (its stop-line cap keeps it behind the
        # boundary), so it does not block the other lane; once released
        # the positional order re-arbitrates.  Uncontrolled slow winners
        # keep their priority.
        if is_held is not None and is_held(state, winner):
            continue
        # Queue etiquette at the final throat, active only once the jam
        # has spilled back to the gate edge (drivers reaching the throat
        # have been queued for a long time): a crawling head creeps
        # through at walking pace until the previous crosser has pulled
        # queue_gap meters clear.  This paces stale-jam discharge below
        # free-flow capacity (the capacity drop), while short local jams
        # and metered traffic (which arrives at speed) discharge at full
        # efficiency.
        if jammed and e == spec.last_edge - 1:
            for vs_head in (a, b):
                head = vs_head[-1]
                if (head.speed < spec.queue_speed
                        and head.pos >= length - spec.merge_commit):
                    down = _downstream_constraint(state, head)
                    if down is not None and down[1] < spec.queue_gap:
                        prev = caps.get(head.id)
                        if prev is None or spec.queue_cross < prev:
                            caps[head.id] = spec.queue_cross
        committed = loser.pos >= length - spec.merge_commit
        gap = winner.pos - winner.length - loser.pos
        if gap >= min_gap:
            merge.setdefault(loser.id, []).append((winner.speed, gap, committed))
        else:
            # Unresolved conflict: shed speed behind the winner.  In the
            # commit window the loser may either hold behind the boundary
            # or cross overlap-free, whichever allows the higher speed.
            merge.setdefault(loser.id, []).append(
                (winner.speed, gap if gap > 0.0 else 0.0, False))
            if committed:
                cap = max((gap if gap > 0.0 else 0.0) / dt,
                          (length - loser.pos) / dt)
                prev = caps.get(loser.id)
                if prev is None or cap < prev:
                    caps[loser.id] = cap

    if controller is not None:
        get_lines = getattr(controller, "lines_for", None)
        for vs in state.lanes.values():
            for v in vs:
                extra = controller.constraints_for(state, v)
                if extra:
                    cons[v.id].extend(extra)
                if get_lines is not None:
                    ls = get_lines(state, v)
                    if ls:
                        lines.setdefault(v.id, []).extend(ls)
    return cons, merge, lines, caps


def _apply_lane_changes(state: NetworkState, rng) -> None:
    """Simple gap-acceptance lane changes for human vehicles (instant move).

    Vehicles are evaluated once per step, front to back, each seeing the
    occupancy left by earlier movers.
    """
    spec = state.spec
    for e, ln, n_lanes in spec.edges:
        if n_lanes < 2:
            continue
        candidates = []
        for l in range(n_lanes):
            candidates.extend(v for v in state.lanes[(e, l)] if not v.is_av)
        candidates.sort(key=lambda v: -v.pos)
        for v in candidates:
            cur = state.lanes[(e, v.lane)]
            idx = cur.index(v)
            if idx + 1 < len(cur):
                lead = cur[idx + 1]
                cur_gap = lead.pos - lead.length - v.pos
            else:
                cur_gap = math.inf
            options = []
            for tl in (v.lane - 1, v.lane + 1):
                if 0 <= tl < n_lanes:
                    options.append(_lane_option(state, e, tl, v))
            target = maybe_lane_change(v, cur_gap, options, spec.krauss,
                                       spec.lc_hysteresis)
            if target is not None:
                cur.remove(v)
                v.lane = target
                _insert_sorted(state.lanes[(e, target)], v)


def _lane_option(state: NetworkState, e: int, lane: int, v: VehicleState) -> LaneOption:
    vs = state.lanes[(e, lane)]
    leader_gap = math.inf
    leader_speed = 0.0
    follower_gap = math.inf
    follower_speed = 0.0
    for o in vs:
        if o.pos >= v.pos:
            leader_gap = o.pos - o.length - v.pos
            leader_speed = o.speed
            break
    for o in reversed(vs):
        if o.pos < v.pos:
            follower_gap = v.pos - v.length - o.pos
            follower_speed = o.speed
            break
    return LaneOption(lane, leader_gap, leader_speed, follower_gap, follower_speed)


def _insert_sorted(vs: List[VehicleState], v: VehicleState) -> None:
    idx = 0
    while idx < len(vs) and vs[idx].pos < v.pos:
        idx += 1
    vs.insert(idx, v)


def advance(state: NetworkState, dt: float, controller=None, rng=None,
            reroute: bool = False, lane_change: bool = False,
            actions=None) -> StepReport:
    """One synchronous step: speeds from the pre-step snapshot, then motion,
    boundary transitions, and exits.  Returns the number of vehicles that
    left the network this step (they re-enter via the pending queue when
    ``reroute`` is on).  Aborts with CollisionError on bumper overlap.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    spec = state.spec
    if controller is not None:
        controller.begin_step(state)
    if lane_change:
        _apply_lane_changes(state, rng)

    cons, merge, lines, caps = _build_constraints(state, dt, controller)
    krauss = spec.krauss
    get_accel = controller.accel_for if controller is not None else None
    if actions is None and get_accel is None:
        for vs in state.lanes.values():
            for v in vs:
                step_vehicle(v, cons[v.id], krauss, dt, rng,
                             stop_lines=lines.get(v.id),
                             merge_leaders=merge.get(v.id),
                             v_limit=spec.limits[v.edge],
                             speed_cap=caps.get(v.id))
    else:
        for vs in state.lanes.values():
            for v in vs:
                acc = None
                if actions is not None:
                    acc = actions.get(v.id)
                if acc is None and get_accel is not None:
                    acc = get_accel(v)
                step_vehicle(v, cons[v.id], krauss, dt, rng, external_accel=acc,
                             stop_lines=lines.get(v.id),
                             merge_leaders=merge.get(v.id),
                             v_limit=spec.limits[v.edge],
                             speed_cap=caps.get(v.id))

    state.steps += 1
    state.clock = state.steps * dt

    exited: List[VehicleState] = []
    for e in range(spec.last_edge, 0, -1):
        length = spec.lengths[e]
        for l in range(spec.lane_counts[e]):
            vs = state.lanes[(e, l)]
            while vs and vs[-1].pos > length:
                v = vs.pop()
                if e == spec.last_edge:
                    state.exited += 1
                    state.outflow_events.append(state.clock)
                    exited.append(v)
                    if reroute:
                        v.edge = 1
                        v.pos = 0.0
                        state.pending.append(v)
                else:
                    v.pos -= length
                    v.edge = e + 1
                    v.lane = spec.merge_map[e][l]
                    state.entered_edge[e + 1] += 1
                    _insert_sorted(state.lanes[(e + 1, v.lane)], v)

    audit_collisions(state)
    if controller is not None:
        controller.observe(state)
    return StepReport(len(exited), exited)


def audit_collisions(state: NetworkState) -> None:
    for (e, l), vs in state.lanes.items():
        if len(vs) > 1:
            pairs = detect_collisions(vs)
            if pairs:
                raise CollisionError(
                    f"overlap on edge {e} lane {l} at t={state.clock}: {pairs}")


# ---------------------------------------------------------------------------
# inflow


def _try_insert(state: NetworkState, lane: int, v: VehicleState, dt: float) -> bool:
    spec = state.spec
    krauss = spec.krauss
    vs = state.lanes[(1, lane)]
    speed = spec.entry_speed
    if vs:
        rear = vs[0]
        gap = rear.pos - rear.length
        g_eff = gap - krauss.min_gap
        if g_eff <= 0.0:
            return False
        speed = min(speed,
                    krauss_safe_speed(rear.speed, g_eff, krauss, spec.entry_speed),
                    braking_safe_speed(rear.speed, g_eff, krauss, dt),
                    gap / dt)
        if speed < spec.entry_speed_min:
            return False
    v.lane = lane
    v.edge = 1
    v.pos = 0.0
    v.speed = speed
    v.stop_timer = 0.0
    vs.insert(0, v)
    return True


def inflow_step(state: NetworkState, cfg: InflowConfig, dt: float, rng) -> List[VehicleState]:
    """Spawn entries for one step; rerouted vehicles re-enter first.

    Each entry lane independently spawns with probability
    rate*dt/(3600*lanes) when the entry region admits a vehicle at (close
    to) the entry speed.  Blocked spawns are dropped and counted as denied
    inflow; blocked reroutes stay queued.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_lanes = state.spec.lane_counts[1]

    if state.pending:
        still = []
        for v in state.pending:
            lanes = list(range(n_lanes))
            rng.shuffle(lanes)
            for lane in lanes:
                if _try_insert(state, lane, v, dt):
                    break
            else:
                still.append(v)
        state.pending = still

    spawned: List[VehicleState] = []
    p_spawn = cfg.rate * dt / (3600.0 * n_lanes)
    for lane in range(n_lanes):
        if rng.random() >= p_spawn:
            continue
        is_av = rng.random() < cfg.penetration
        v = VehicleState(id=state.next_id, edge=1, lane=lane, pos=0.0,
                         speed=state.spec.entry_speed,
                         length=state.spec.krauss.length, is_av=is_av,
                         entry_time=state.clock)
        if _try_insert(state, lane, v, dt):
            state.next_id += 1
            state.spawned += 1
            state.inflow_events.append((state.clock, v.id, is_av))
            spawned.append(v)
        else:
            state.denied += 1
    return spawned


# ---------------------------------------------------------------------------
# measurements


def count_bottleneck(state: NetworkState, edge: int = BOTTLENECK_EDGE) -> int:
    return sum(len(state.lanes[(edge, l)]) for l in range(state.spec.lane_counts[edge]))


def edge_mean_speeds(state: NetworkState, edges: Sequence[int] = (3, 4, 5)) -> Dict[int, float]:
    """Arithmetic mean speed per edge; an empty edge reads as v_max."""
    out = {}
    for e in edges:
        total = 0.0
        n = 0
        for l in range(state.spec.lane_counts[e]):
            for v in state.lanes[(e, l)]:
                total += v.speed
                n += 1
        out[e] = total / n if n else state.spec.krauss.v_max
    return out


def outflow_vph(state: NetworkState, window: float) -> float:
    """Exits over the trailing ``window`` seconds, scaled to vehicles/hour."""
    if window <= 0:
        raise ValueError("window must be positive")
    if state.clock < window:
        raise ValueError(f"clock {state.clock} shorter than window {window}")
    cutoff = state.clock - window
    idx = bisect_right(state.outflow_events, cutoff)
    return 3600.0 * (len(state.outflow_events) - idx) / window


# ---------------------------------------------------------------------------
# orchestration


class Simulation:
    """One seeded simulation instance: motion plus inflow each step.

    Strictly sequential; independent instances are safe to run in parallel
    (no shared mutable state).
    """

    def __init__(self, spec: NetworkSpec, inflow: InflowConfig, seed: int,
                 controller=None, reroute: bool = False,
                 lane_change: bool = False):
        self.state = build_network(spec)
        self.inflow = inflow
        self.rng = random.Random(seed)
        self.controller = controller
        self.reroute = reroute
        self.lane_change = lane_change

    def step(self, dt: float, actions=None) -> StepReport:
        report = advance(self.state, dt, self.controller, self.rng,
                         reroute=self.reroute, lane_change=self.lane_change,
                         actions=actions)
        inflow_step(self.state, self.inflow, dt, self.rng)
        return report

    def run(self, duration: float, dt: float) -> int:
        """Advance ``duration`` seconds; returns total exits over the run."""
        total = 0
        for _ in range(round(duration / dt)):
            total += self.step(dt).n_exited
        return total
