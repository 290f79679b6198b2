"""Multi-agent control environment over the bottleneck simulator.

Each AV is an agent.  Agents pick one bounded acceleration per environment
step; the command is applied only on the control edge and repeated for
``action_repeat`` simulation steps.  All live agents share one reward, the
normalized count of vehicles that left the network during the step.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .carfollow import ACCEL_MAX, CONTROL_EDGE, DECEL_MAX, VehicleState
from .control import AvWaitController, FeedbackParams
from .network import (
    BOTTLENECK_EDGE,
    InflowConfig,
    NetworkSpec,
    Simulation,
    count_bottleneck,
    edge_mean_speeds,
)

STATE_SPACES = ("minimal", "minimal_aggregate", "radar_aggregate", "radar")

# Raw (pre-scale) action interval and the rescaling factor: commands are
# clipped to [-decel, accel]/SCALE and multiplied back up, which biases a
# unit-range policy output toward strong decelerations.
ACTION_SCALE = 8.0
RAW_LO = -DECEL_MAX / ACTION_SCALE
RAW_HI = ACCEL_MAX / ACTION_SCALE


def apply_agent_action(raw: float, scale: float = ACTION_SCALE) -> float:
    """Clip a raw policy output and rescale it to an acceleration command."""
    return scale * min(max(raw, RAW_LO), RAW_HI)


@dataclass
class EpisodeConfig:
    sim_dt: float = 0.5
    action_repeat: int = 5
    warmup: float = 300.0
    horizon: float = 1000.0
    inflow: float = 2400.0
    penetration: Union[float, Tuple[float, float]] = (0.05, 0.4)
    state_space: str = "radar_aggregate"
    reroute: bool = True
    lane_change: bool = False
    radar_range_cap: Optional[float] = None
    reward_norm: float = 50.0
    network: NetworkSpec = field(default_factory=NetworkSpec)
    feedback_reference: FeedbackParams = field(
        default_factory=lambda: FeedbackParams(gain=20.0, n_crit=8.0, q_init=2000.0))

    def __post_init__(self) -> None:
        if self.state_space not in STATE_SPACES:
            raise ValueError(f"unknown state space {self.state_space!r}")
        if self.action_repeat < 1:
            raise ValueError("action_repeat must be >= 1")
        for name in ("warmup", "horizon"):
            value = getattr(self, name)
            if abs(round(value / self.sim_dt) * self.sim_dt - value) > 1e-9:
                raise ValueError(f"{name} must be a multiple of sim_dt")

    def draw_penetration(self, rng: random.Random) -> float:
        if isinstance(self.penetration, (int, float)):
            return float(self.penetration)
        lo, hi = self.penetration
        return rng.uniform(lo, hi)

    def observation_size(self) -> int:
        n_lanes = max(n for _, _, n in self.network.edges)
        ego = 7
        radar = 6 * n_lanes
        if self.state_space == "minimal":
            return 7
        if self.state_space == "minimal_aggregate":
            return 7 + 4          # mean speeds 3/4/5 + time; count already present
        if self.state_space == "radar":
            return ego + radar
        return ego + radar + 4    # mean speeds 3/4/5 + count; time already present


class BottleneckEnv:
    """One episode stream: reset -> step ... -> done.

    Observations are keyed by agent id (the vehicle id as a string).  In
    evaluation mode an agent is done on the step its vehicle exits (it
    still receives that step's shared reward); with rerouting, exits
    teleport back to the entrance and the agent persists to the horizon.
    """

    def __init__(self, cfg: EpisodeConfig):
        self.cfg = cfg
        self.sim: Optional[Simulation] = None
        self.shadow: Optional[AvWaitController] = None
        self.penetration = 0.0
        self.t_control = 0.0
        self.total_exits = 0
        self._done_all = True

    # -- episode control ----------------------------------------------------

    def reset(self, seed: int = 0) -> Dict[str, List[float]]:
        cfg = self.cfg
        rng = random.Random(seed)
        self.penetration = cfg.draw_penetration(rng)
        inflow = InflowConfig(rate=cfg.inflow, penetration=self.penetration)
        self.sim = Simulation(cfg.network, inflow, seed=rng.randrange(2 ** 62),
                              reroute=cfg.reroute, lane_change=cfg.lane_change)
        # reference wait-time feedback, observed but never steering
        self.shadow = AvWaitController(cfg.feedback_reference, cfg.sim_dt)
        for _ in range(round(cfg.warmup / cfg.sim_dt)):
            self.sim.step(cfg.sim_dt)
            self._shadow_step()
        self.t_control = 0.0
        self.total_exits = 0
        self._done_all = False
        return {str(v.id): self._observe(v) for v in self._agents()}

    def step(self, actions: Dict[str, float]):
        if self.sim is None or self._done_all:
            raise RuntimeError("episode is not active; call reset first")
        cfg = self.cfg
        live = {v.id for v in self._agents()}
        accel: Dict[int, float] = {}
        for key, raw in actions.items():
            vid = int(key)
            if vid in live:
                accel[vid] = apply_agent_action(float(raw))
        exits = 0
        exited_agents: List[int] = []
        for _ in range(cfg.action_repeat):
            report = self.sim.step(cfg.sim_dt, actions=accel)
            self._shadow_step()
            exits += report.n_exited
            for v in report.exited:
                if v.is_av:
                    if cfg.reroute:
                        accel.pop(v.id, None)  # revert to car-following until next action
                    else:
                        exited_agents.append(v.id)
                        accel.pop(v.id, None)
            self.t_control += cfg.sim_dt
        self.total_exits += exits
        reward = exits / cfg.reward_norm

        horizon_hit = self.t_control >= cfg.horizon - 1e-9
        obs: Dict[str, List[float]] = {}
        dones: Dict[str, bool] = {}
        for v in self._agents():
            obs[str(v.id)] = self._observe(v)
            dones[str(v.id)] = horizon_hit
        zeros = [0.0] * self.cfg.observation_size()
        for vid in exited_agents:
            obs[str(vid)] = list(zeros)
            dones[str(vid)] = True
        dones["__all__"] = horizon_hit
        self._done_all = horizon_hit
        info = {
            "exits": exits,
            "bottleneck_count": count_bottleneck(self.sim.state),
            "time": self.t_control,
            "penetration": self.penetration,
            "total_exits": self.total_exits,
        }
        return obs, reward, dones, info

    def close(self) -> None:
        self.sim = None
        self._done_all = True

    # -- internals ----------------------------------------------------------

    def _shadow_step(self) -> None:
        self.shadow.begin_step(self.sim.state)
        self.shadow.observe(self.sim.state)

    def _agents(self):
        vs = [v for v in self.sim.state.vehicles() if v.is_av]
        vs.extend(v for v in self.sim.state.pending if v.is_av)
        vs.sort(key=lambda v: v.id)
        return vs

    def _leader_of(self, v: VehicleState, lane: int):
        """Nearest vehicle ahead in ``lane`` of the ego's edge, following the
        merge map across boundaries; returns (speed, bumper gap, is_av)."""
        state = self.sim.state
        spec = state.spec
        for o in state.lanes.get((v.edge, lane), ()):
            if o.pos > v.pos or (o.pos == v.pos and o is not v and lane != v.lane):
                return (o.speed, o.pos - o.length - v.pos, o.is_av)
        e, l = v.edge, lane
        dist = spec.lengths[e] - v.pos
        while e < spec.last_edge:
            l = spec.merge_map[e][l]
            e += 1
            vs = state.lanes[(e, l)]
            if vs:
                rear = vs[0]
                return (rear.speed, dist + rear.pos - rear.length, rear.is_av)
            dist += spec.lengths[e]
        return None

    def _follower_of(self, v: VehicleState, lane: int):
        state = self.sim.state
        for o in reversed(state.lanes.get((v.edge, lane), ())):
            if o.pos < v.pos:
                return (o.speed, v.pos - v.length - o.pos, o.is_av)
        return None

    def _radar_slot(self, found, pos_scale: float, spd_scale: float) -> List[float]:
        cap = self.cfg.radar_range_cap
        if found is not None:
            speed, gap, is_av = found
            if cap is not None and gap > cap:
                found = None
            else:
                return [gap / pos_scale, speed / spd_scale, 1.0 if is_av else 0.0]
        if cap is not None:
            # ablation default for anything beyond sensor range
            return [cap / pos_scale, 5.0 / spd_scale, 0.0]
        return [0.0, 0.0, 0.0]

    def _observe(self, v: VehicleState) -> List[float]:
        cfg = self.cfg
        state = self.sim.state
        spec = state.spec
        pos_scale = spec.total_length
        spd_scale = spec.krauss.v_max
        cnt_scale = cfg.reward_norm
        time_scale = cfg.horizon
        pending = v in state.pending
        t_norm = self.t_control / time_scale

        if cfg.state_space in ("minimal", "minimal_aggregate"):
            lead = None if pending else self._leader_of(v, v.lane)
            obs = [
                v.distance_traveled / pos_scale,
                count_bottleneck(state) / cnt_scale,
                v.stop_timer / time_scale,
                v.speed / spd_scale,
                (lead[0] / spd_scale) if lead else 0.0,
                (lead[1] / pos_scale) if lead else 0.0,
                self.shadow.wait_time(v.id) / time_scale,
            ]
            if cfg.state_space == "minimal_aggregate":
                speeds = edge_mean_speeds(state)
                obs.extend([speeds[3] / spd_scale, speeds[4] / spd_scale,
                            speeds[5] / spd_scale, t_norm])
            return obs

        n_lanes = max(n for _, _, n in spec.edges)
        obs = [
            v.speed / spd_scale,
            v.lane / max(1, n_lanes - 1),
            v.edge / spec.last_edge,
            v.pos / pos_scale,
            (spec.offsets[v.edge] + v.pos) / pos_scale if not pending else 0.0,
            v.stop_timer / time_scale,
            t_norm,
        ]
        edge_lanes = spec.lane_counts.get(v.edge, 0)
        for lane in range(n_lanes):
            if pending or lane >= edge_lanes:
                ahead = behind = None
            else:
                ahead = self._leader_of(v, lane)
                behind = self._follower_of(v, lane)
            obs.extend(self._radar_slot(ahead, pos_scale, spd_scale))
            obs.extend(self._radar_slot(behind, pos_scale, spd_scale))
        if cfg.state_space == "radar_aggregate":
            speeds = edge_mean_speeds(state)
            obs.extend([speeds[3] / spd_scale, speeds[4] / spd_scale,
                        speeds[5] / spd_scale,
                        count_bottleneck(state) / cnt_scale])
        return obs
