"""Krauss-style car following: per-vehicle kinematics, gap safety, lane changes.

Vehicles drive as fast as allowed by their acceleration bound, the speed
limit, and a safe-speed cap that guarantees they can always stop behind
their leader.  All updates are first-order Euler with a fixed step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

# External accelerations only take effect on this edge; elsewhere the
# car-following model output is used and the command discarded.
CONTROL_EDGE = 3

# Below this speed a vehicle counts as stopped and its stop timer accrues.
STOP_SPEED = 0.2

# Acceleration command bounds (m/s^2) for externally controlled vehicles.
ACCEL_MAX = 2.6
DECEL_MAX = 4.5


@dataclass
class KraussParams:
    """Car-following parameters (SUMO-style defaults).

    sigma = 0 disables the driver noise entirely.
    """

    accel: float = 2.6        # max acceleration a, m/s^2
    decel: float = 4.5        # comfortable/max braking b, m/s^2
    tau: float = 1.0          # driver reaction time, s
    min_gap: float = 2.5      # bumper-to-bumper gap kept when standing, m
    sigma: float = 0.5        # driver imperfection in [0, 1]
    v_max: float = 25.0       # speed limit, m/s
    length: float = 5.0       # vehicle length, m
    restart_speed: float = 10.0  # below this the braking envelope aids restarts

    def validate(self) -> None:
        if self.accel <= 0 or self.decel <= 0 or self.tau <= 0:
            raise ValueError("accel, decel and tau must be positive")
        if self.min_gap < 0:
            raise ValueError("min_gap must be non-negative")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")
        if self.v_max <= 0 or self.length <= 0:
            raise ValueError("v_max and length must be positive")


@dataclass
class Action:
    """Bounded acceleration command for a controlled vehicle."""

    accel: float

    def __post_init__(self) -> None:
        if not -DECEL_MAX - 1e-9 <= self.accel <= ACCEL_MAX + 1e-9:
            raise ValueError(f"accel {self.accel} outside [-{DECEL_MAX}, {ACCEL_MAX}]")


@dataclass(slots=True)
class VehicleState:
    """Kinematic and bookkeeping record for one vehicle.

    ``pos`` is the front-bumper position measured from the start of the
    current edge; the vehicle occupies [pos - length, pos].
    """

    id: int
    edge: int
    lane: int
    pos: float
    speed: float
    length: float = 5.0
    is_av: bool = False
    stop_timer: float = 0.0
    distance_traveled: float = 0.0
    entry_time: float = 0.0
    controlled_this_step: bool = False


# A leader constraint is (leader_speed, bumper_gap). ``gap`` is the raw
# bumper-to-bumper distance; min_gap is subtracted before the safe-speed
# formula is applied.
Constraint = Tuple[float, float]


def krauss_safe_speed(leader_speed: float, gap: float, params: KraussParams,
                      ego_speed: float) -> float:
    """Max speed from which the ego can keep following safely.

    Closed-form Krauss relaxation: the ego closes (or opens) the gap toward
    the desired following distance leader_speed*tau over the combined
    braking/reaction horizon.  ``ego_speed`` is the prior ego speed used as
    the reference in the braking-time term.  Never negative.
    """
    if gap < 0:
        raise ValueError(f"negative gap {gap}: vehicles already overlap")
    tau_b = (leader_speed + ego_speed) / (2.0 * params.decel)
    v_safe = leader_speed + (gap - leader_speed * params.tau) / (tau_b + params.tau)
    return v_safe if v_safe > 0.0 else 0.0


def braking_safe_speed(leader_speed: float, gap: float, params: KraussParams,
                       dt: float) -> float:
    """Safety envelope: max speed such that driving it for one step and then
    braking at decel keeps the ego behind a leader that brakes at decel
    starting now.  Solves v*dt + v^2/2b <= gap + v_l^2/2b.
    """
    b = params.decel
    v = -b * dt + math.sqrt(b * b * dt * dt + leader_speed * leader_speed + 2.0 * b * gap)
    return v if v > 0.0 else 0.0


def step_vehicle(v: VehicleState,
                 leaders: Optional[Sequence[Constraint]],
                 params: KraussParams,
                 dt: float,
                 rng,
                 external_accel: Optional[float] = None,
                 soft_leaders: Optional[Sequence[Constraint]] = None,
                 stop_lines: Optional[Sequence[float]] = None,
                 merge_leaders: Optional[Sequence[Tuple[float, float, bool]]] = None,
                 v_limit: Optional[float] = None,
                 speed_cap: Optional[float] = None) -> VehicleState:
    """Advance one vehicle by dt (in place) and return it.

    ``leaders`` holds zero or more (leader_speed, raw_gap) constraints; the
    binding one wins.  Each hard constraint is enforced three ways: the
    Krauss safe speed (behavior), the braking envelope (leader brakes at
    decel, ego reacts one step later), and a one-step cap raw_gap/dt that
    rules out bumper overlap outright even against a leader that stops
    dead.  Vehicles closer than min_gap hold still until the gap reopens.
    ``soft_leaders`` get only the speed formulas, no overlap cap (merge
    coupling where the pair does not yet share a physical lane).
    ``stop_lines`` are plain distances to points the vehicle must not pass
    (red lights, unresolved merge conflicts); the vehicle brakes along the
    physical envelope and halts at the line.  ``merge_leaders`` are
    cross-lane zipper predecessors: only the braking envelope applies (the
    pair does not share a lane yet, so tight projected gaps are allowed),
    plus the overlap cap once the entry is committed.  External
    accelerations apply only to AVs on the control edge and are still
    subject to every cap, so a controller cannot cause a collision.
    """
    speed = v.speed
    v_max = params.v_max if v_limit is None else v_limit
    bound = min(speed + params.accel * dt, v_max)
    if speed_cap is not None and speed_cap < bound:
        bound = speed_cap if speed_cap > 0.0 else 0.0
    if stop_lines:
        inv_dt = 1.0 / dt
        for dist in stop_lines:
            if dist <= 0.0:
                bound = 0.0
                break
            stop = braking_safe_speed(0.0, dist, params, dt)
            if stop < bound:
                bound = stop
            hard = dist * inv_dt
            if hard < bound:
                bound = hard
    if merge_leaders:
        inv_dt = 1.0 / dt
        for leader_speed, gap, committed in merge_leaders:
            g_eff = gap - params.min_gap
            if g_eff < 0.0:
                g_eff = 0.0
            envelope = braking_safe_speed(leader_speed, g_eff, params, dt)
            if envelope < bound:
                bound = envelope
            # Zipper target: half the normal following headway, approached
            # via the Krauss relaxation.  Separates dead heats early and
            # gently, while still letting pairs cross tightly interleaved.
            tau_b = (leader_speed + speed) / (2.0 * params.decel)
            relax = leader_speed + ((g_eff - 0.5 * leader_speed * params.tau)
                                    / (tau_b + params.tau))
            if relax < bound:
                bound = relax
            if committed:
                hard = gap * inv_dt
                if 0.0 <= hard < bound:
                    bound = hard
        if bound < 0.0:
            bound = 0.0
    if leaders:
        inv_dt = 1.0 / dt
        for leader_speed, gap in leaders:
            g_eff = gap - params.min_gap
            if g_eff <= 0.0:
                bound = 0.0
                break
            v_safe = krauss_safe_speed(leader_speed, g_eff, params, speed)
            if speed < params.restart_speed:
                # The react-after-tau braking envelope shares the Krauss
                # equilibrium gap but recovers much faster from stops;
                # blending it in at low speeds gives realistic queue
                # discharge without disturbing cruising stability.
                v_safe = max(v_safe,
                             braking_safe_speed(leader_speed, g_eff, params, params.tau))
            if v_safe < bound:
                bound = v_safe
            envelope = braking_safe_speed(leader_speed, g_eff, params, dt)
            if envelope < bound:
                bound = envelope
            hard = gap * inv_dt
            if hard < bound:
                bound = hard
        if bound < 0.0:
            bound = 0.0
    if soft_leaders and bound > 0.0:
        for leader_speed, gap in soft_leaders:
            g_eff = gap - params.min_gap
            if g_eff < 0.0:
                g_eff = 0.0
            v_safe = min(krauss_safe_speed(leader_speed, g_eff, params, speed),
                         braking_safe_speed(leader_speed, g_eff, params, dt))
            if v_safe < bound:
                bound = v_safe if v_safe > 0.0 else 0.0

    controlled = (external_accel is not None and v.is_av
                  and v.edge == CONTROL_EDGE)
    if controlled:
        v_des = speed + external_accel * dt
        if v_des > v_max:
            v_des = v_max
        new_speed = max(0.0, min(v_des, bound))
    else:
        v_des = min(speed + params.accel * dt, bound)
        if params.sigma > 0.0 and not v.is_av:
            v_des -= params.sigma * params.accel * dt * rng.random()
        new_speed = v_des if v_des > 0.0 else 0.0

    v.speed = new_speed
    step_dist = new_speed * dt
    v.pos += step_dist
    v.distance_traveled += step_dist
    if new_speed < STOP_SPEED:
        v.stop_timer += dt
    else:
        v.stop_timer = 0.0
    v.controlled_this_step = controlled
    return v


@dataclass
class LaneOption:
    """Candidate adjacent lane seen from one vehicle."""

    lane: int
    leader_gap: float            # inf when the lane is free ahead
    leader_speed: float
    follower_gap: float          # inf when nobody is behind
    follower_speed: float


def maybe_lane_change(v: VehicleState,
                      current_leader_gap: float,
                      options: Sequence[LaneOption],
                      params: KraussParams,
                      hysteresis: float = 5.0) -> Optional[int]:
    """Pick a better adjacent lane, or None.

    A lane qualifies when its leader gap beats the current one by
    ``hysteresis`` meters and both the ego and the would-be follower can
    keep driving without braking harder than decel.  Ties go to the right
    (lower index).  The change itself is an instantaneous lateral move.
    """
    best: Optional[LaneOption] = None
    for opt in sorted(options, key=lambda o: o.lane):
        if opt.leader_gap <= current_leader_gap + hysteresis:
            continue
        if opt.leader_gap < math.inf:
            ego_gap = opt.leader_gap - params.min_gap
            if ego_gap <= 0.0:
                continue
            ego_safe = krauss_safe_speed(opt.leader_speed, ego_gap, params, v.speed)
            if v.speed > ego_safe + params.decel * params.tau:
                continue
        if opt.follower_gap < math.inf:
            f_gap = opt.follower_gap - params.min_gap
            if f_gap <= 0.0:
                continue
            f_safe = krauss_safe_speed(v.speed, f_gap, params, opt.follower_speed)
            if opt.follower_speed > f_safe + params.decel * params.tau:
                continue
        if best is None or opt.leader_gap > best.leader_gap + 1e-9:
            best = opt
    return best.lane if best is not None else None


def bumper_gap(front: VehicleState, rear: VehicleState) -> float:
    return front.pos - front.length - rear.pos


def detect_collisions(vehicles: Sequence[VehicleState]) -> list[tuple[int, int]]:
    """Adjacent overlapping pairs in one lane, input ordered by position."""
    pairs = []
    for rear, front in zip(vehicles, vehicles[1:]):
        if bumper_gap(front, rear) < 0.0:
            pairs.append((rear.id, front.id))
    return pairs
