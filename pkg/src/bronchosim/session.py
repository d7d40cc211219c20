"""Teleoperation session: the 50 Hz loop that owns plant, perception, and MPC.

Per tick: perceive (render depth, reduce to guidance), read the operator
input (live mailbox or scripted pilot), step the phase machine, turn the
velocity intent into a short-horizon reference for the MPC (or a direct
torque map in the guidance-off baseline), apply the torques to the plant,
and append one log record. Everything is seeded, so (scenario, mode, seed)
fully determines the episode log.

Two scripted pilots stand in for the human operator: the guided pilot
steers on the served misalignment vector and cue; the blind pilot (ablation
arm) reads the raw depth image itself - no smoothing, no calibration, a
steering dead-band, and a laggier stop - which is what losing the overlay
does to a human.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .airway import build_airway
from .config import CONTROL_DT, StackConfig
from .episode_log import EpisodeLog
from .model import LatentDynamicsModel, finite_diff_velocity
from .mpc import RecedingHorizonController, ReferenceTrajectory
from .perception import Cue, GuidancePipeline, Zone, locate_lumen
from .plant import Plant, add_sensor_noise, clamp_control, quat_rotate


class Phase(str, Enum):
    APPROACH = "approach"
    ALIGNMENT = "alignment"
    NAVIGATION = "navigation"
    HOLD_AT_TARGET = "hold_at_target"
    RAILROADING = "railroading"
    WITHDRAWAL = "withdrawal"
    SECURED = "secured"
    ABORTED = "aborted"


TERMINAL_PHASES = (Phase.SECURED, Phase.ABORTED)


class Hat(str, Enum):
    NONE = "none"
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class OperatorInput:
    axes: tuple[float, float, float] = (0.0, 0.0, 0.0)
    throttle: float = 0.0
    hat: Hat = Hat.NONE
    retract_tube: bool = False
    next_waypoint: bool = False
    toggle_guidance: bool = False
    estop: bool = False

    def clamped(self) -> "OperatorInput":
        return replace(
            self,
            axes=tuple(float(np.clip(a, -1.0, 1.0)) for a in self.axes),
            throttle=float(np.clip(self.throttle, 0.0, 1.0)),
        )

    def to_dict(self) -> dict:
        return {
            "axes": list(self.axes),
            "throttle": self.throttle,
            "hat": self.hat.value,
            "buttons": {
                "retract_tube": self.retract_tube,
                "next_waypoint": self.next_waypoint,
                "toggle_guidance": self.toggle_guidance,
                "estop": self.estop,
            },
        }


# hat -> unit torque direction on the antagonistic pairs: up/down drive the
# first pair (channels 0/2), right/left the second (channels 1/3)
_HAT_DIRECTIONS = {
    Hat.NONE: (0.0, 0.0),
    Hat.UP: (1.0, 0.0),
    Hat.DOWN: (-1.0, 0.0),
    Hat.RIGHT: (0.0, 1.0),
    Hat.LEFT: (0.0, -1.0),
}


def map_input(raw: OperatorInput, max_speed: float) -> tuple[np.ndarray, np.ndarray]:
    """Operator input -> (velocity intent mm/s in the tip frame, tendon direction)."""
    inp = raw.clamped()
    velocity = np.array(inp.axes) * inp.throttle * max_speed
    tendon = np.array(_HAT_DIRECTIONS[inp.hat])
    return velocity, tendon


def tendon_pair_torques(direction: np.ndarray, magnitude: float) -> np.ndarray:
    """Antagonistic 4-channel torques from a 2-axis bend direction."""
    u = np.zeros(5)
    u[0] = max(direction[0], 0.0) * magnitude
    u[2] = max(-direction[0], 0.0) * magnitude
    u[1] = max(direction[1], 0.0) * magnitude
    u[3] = max(-direction[1], 0.0) * magnitude
    return u


@dataclass
class TrialOutcome:
    success: bool
    placed: bool                    # reached SECURED
    final_phase: str
    final_offset: float | None      # ground-truth tube-tip-to-carina at placement, mm
    final_offset_est: float | None  # estimated distance at placement, mm
    final_zone: str | None
    wall_contacts: int
    corrective_withdrawals: int
    input_variance: list[float]     # per-axis during distal navigation
    duration_s: float
    ticks: int
    abort_reason: str | None
    scenario: str
    mode: str
    seed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class ScriptedPilot:
    """Deterministic operator stand-in; `blind=True` is the ablation arm."""

    def __init__(self, cfg: StackConfig, rng: np.random.Generator, blind: bool = False):
        self.cfg = cfg.session
        self.zones = cfg.perception.zones
        self.blind = blind
        self.rng = rng
        self._stable_ticks = 0
        self.request_railroad = False

    def _steer_axes(self, offset_px: np.ndarray) -> np.ndarray:
        v = offset_px.copy()
        if self.blind:
            # no overlay: small offsets go unnoticed
            v = np.where(np.abs(v) < self.cfg.pilot_blind_deadband_px, 0.0, v)
        axes = np.clip(v / 15.0, -1.0, 1.0)
        return axes

    def decide(self, phase: Phase, guidance, depth_map) -> OperatorInput:
        """Produce this tick's input from what the operator can see."""
        self.request_railroad = False
        target = self.zones.target_offset
        if self.blind:
            # raw-image reductions: unsmoothed argmax, uncalibrated depth
            center = np.unravel_index(int(np.argmax(depth_map.values)), depth_map.values.shape)
            offset = np.array([center[1] - 32.0, center[0] - 32.0])
            dist = float(depth_map.values[center]) - self.cfg.pilot_blind_distance_bias
            zone = Zone.ZONE2 if dist <= self.zones.zone2_upper else Zone.ZONE1
            if dist < self.zones.zone3_threshold:
                zone = Zone.ZONE3
            cue = {Zone.ZONE1: Cue.ADVANCE, Zone.ZONE2: Cue.MAINTAIN, Zone.ZONE3: Cue.WITHDRAW}[zone]
        else:
            offset = guidance.misalignment
            dist = guidance.carina_distance_est
            cue = guidance.cue

        axes_xy = self._steer_axes(offset)
        forward = 0.0
        advance_scale = float(np.clip(1.0 - np.linalg.norm(offset) / 30.0, 0.25, 1.0))
        if phase in (Phase.ALIGNMENT, Phase.NAVIGATION):
            if cue == Cue.ADVANCE:
                forward = self.cfg.pilot_advance_speed / self.cfg.max_tip_speed * advance_scale
            elif cue == Cue.MAINTAIN:
                # creep toward the hold point inside the placement zone
                err = dist - target
                forward = float(np.clip(err / 15.0, -0.6, 0.6)) * advance_scale
            else:
                forward = -self.cfg.pilot_withdraw_speed / self.cfg.max_tip_speed
        elif phase == Phase.HOLD_AT_TARGET:
            err = dist - target
            forward = float(np.clip(err / 20.0, -0.4, 0.4))
            if abs(err) <= self.cfg.hold_tolerance:
                self._stable_ticks += 1
            else:
                self._stable_ticks = 0
            if self._stable_ticks >= self.cfg.hold_stable_ticks:
                self.request_railroad = True
        axes = np.array([axes_xy[0], axes_xy[1], forward])
        axes += self.rng.normal(0.0, self.cfg.pilot_input_noise, size=3)
        return OperatorInput(
            axes=tuple(float(a) for a in np.clip(axes, -1, 1)),
            throttle=1.0,
        )


class TeleopSession:
    """One episode owner: plant + perception + controller + phase machine."""

    def __init__(
        self,
        cfg: StackConfig,
        model: LatentDynamicsModel,
        scenario: str = "standard",
        mode: str = "guided-auto",
        seed: int = 0,
    ):
        if mode not in ("piloted", "guided-auto", "ablation"):
            raise ValueError(f"unknown session mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.scenario = scenario
        self.seed = seed
        self.airway = build_airway(scenario, seed, cfg.airway)
        self.plant = Plant(self.airway, cfg.plant)
        self.perception = GuidancePipeline(self.airway, cfg.perception)
        self.model = model
        self.controller = RecedingHorizonController(model, cfg.mpc)
        self.rng = np.random.default_rng([seed, 0x5E55, hash(mode) & 0xFFFF, hash(scenario) & 0xFFFF])
        self.pilot = (
            ScriptedPilot(cfg, self.rng, blind=(mode == "ablation"))
            if mode in ("guided-auto", "ablation")
            else None
        )
        self.guidance_enabled = mode != "ablation"

        self.state = self.plant.initial_state(cfg.session.initial_insertion)
        self.phase = Phase.APPROACH
        self.tick = 0
        self._phase_ticks = 0
        self._prev_tip_meas: np.ndarray | None = None
        self._windows: deque = deque(maxlen=cfg.model.window + 1)
        self._last_u = np.zeros(5)
        self._corrective = 0
        self._in_corrective = False
        self._wall_contacts = 0
        self._placement: tuple[float, float] | None = None  # (gt, est) at railroad completion
        self._abort_reason: str | None = None
        self._pending_command: str | None = None
        self._estop = False
        self.log = EpisodeLog.create(scenario, mode, seed, cfg.digest(), cfg.session.dt)
        self.log.header["carina_arclength"] = self.airway.carina_arclength

        self.last_depth_b64: str | None = None
        cloud = self._measure_backbone()
        for _ in range(cfg.model.window + 1):
            self._windows.append(cloud.points.ravel())
        self._prev_tip_meas = cloud.points[-1]

    # -- sensing ---------------------------------------------------------------

    def _measure_backbone(self):
        cloud = self.plant.reconstruct_backbone(self.state, timestamp=self.tick * self.cfg.session.dt)
        sigma = self.cfg.session.backbone_noise_sigma
        if sigma > 0:
            cloud = add_sensor_noise(cloud, sigma, rng=self.rng)
        return cloud

    # -- commands (gateway or pilot) ---------------------------------------------

    def command(self, verb: str) -> None:
        if verb == "estop":
            self._estop = True
        elif verb in ("railroad", "toggle_guidance"):
            self._pending_command = verb
        else:
            raise ValueError(f"unknown session command {verb!r}")

    # -- phase machine -----------------------------------------------------------

    def _step_phase(self, guidance, input_: OperatorInput) -> None:
        cfg = self.cfg.session
        zcfg = self.cfg.perception.zones
        if self._estop or input_.estop:
            self._abort_reason = "estop"
            self._set_phase(Phase.ABORTED)
            return
        phase = self.phase
        est = guidance.carina_distance_est
        in_band = (
            guidance.zone == Zone.ZONE2
            and abs(est - zcfg.target_offset) <= cfg.hold_tolerance
        )
        if phase == Phase.APPROACH:
            if self._phase_ticks >= cfg.approach_ticks or input_.next_waypoint:
                self._set_phase(Phase.ALIGNMENT)
        elif phase == Phase.ALIGNMENT:
            if self.state.insertion > cfg.initial_insertion + 5.0:
                self._set_phase(Phase.NAVIGATION)
        elif phase == Phase.NAVIGATION:
            corrective = guidance.zone == Zone.ZONE3
            if corrective and not self._in_corrective:
                self._corrective += 1
            self._in_corrective = corrective
            if in_band and not corrective:
                self._set_phase(Phase.HOLD_AT_TARGET)
        elif phase == Phase.HOLD_AT_TARGET:
            if self._pending_command == "railroad":
                self._set_phase(Phase.RAILROADING)
            elif not in_band:
                self._set_phase(Phase.NAVIGATION)
        elif phase == Phase.RAILROADING:
            if self.state.tube_insertion >= self.state.insertion - 1.0:
                gt = self._tube_tip_carina_distance()
                self._placement = (gt, est)
                self._set_phase(Phase.WITHDRAWAL)
        elif phase == Phase.WITHDRAWAL:
            if self.state.insertion <= cfg.secured_insertion:
                self._set_phase(Phase.SECURED)
        if self._pending_command == "railroad" and self.phase != Phase.RAILROADING:
            pass  # rejected: railroading requires a held in-band state
        self._pending_command = None

    def _set_phase(self, phase: Phase) -> None:
        if phase != self.phase:
            self.phase = phase
            self._phase_ticks = 0
            self._in_corrective = False

    def _tube_tip_carina_distance(self) -> float:
        return self.airway.carina_arclength - self.state.tube_insertion

    # -- control -------------------------------------------------------------------

    def _control(self, input_: OperatorInput, x_meas: np.ndarray) -> tuple[np.ndarray, dict | None]:
        cfg = self.cfg
        velocity_tip, tendon_dir = map_input(input_, cfg.session.max_tip_speed)
        if self.phase in (Phase.APPROACH, Phase.RAILROADING, *TERMINAL_PHASES):
            velocity_tip = np.zeros(3)
        if self.phase == Phase.WITHDRAWAL:
            u = np.zeros(5)
            u[4] = -cfg.session.withdraw_speed / cfg.plant.insertion_gain
            return clamp_control(u, cfg.plant.torque_limit), None

        if self.mode == "ablation":
            # guidance-off baseline: direct kinematic torque map, no MPC
            u = tendon_pair_torques(
                np.array([velocity_tip[0], velocity_tip[1]]) / cfg.session.max_tip_speed,
                cfg.plant.torque_limit * 0.75,
            )
            u += tendon_pair_torques(tendon_dir, cfg.plant.torque_limit * 0.4)
            u[4] = velocity_tip[2] / cfg.plant.insertion_gain
            return clamp_control(u, cfg.plant.torque_limit), None

        velocity_world = quat_rotate(self.state.tip_quat, velocity_tip)
        if self.phase in (Phase.APPROACH, Phase.RAILROADING):
            ref = ReferenceTrajectory.hold(x_meas, cfg.mpc.horizon)
        else:
            ref = ReferenceTrajectory.from_velocity_intent(
                x_meas, velocity_world, cfg.session.dt, cfg.mpc.horizon
            )
        u, sol = self.controller.step(x_meas, self._encode_window(), ref)
        u = u + tendon_pair_torques(tendon_dir, cfg.plant.torque_limit * 0.4)
        diag = {
            "ms": sol.solve_time_ms,
            "iterations": sol.iterations,
            "cost": sol.cost,
            "state_penalty": sol.state_penalty,
        }
        return clamp_control(u, cfg.plant.torque_limit), diag

    def _encode_window(self) -> np.ndarray:
        return self.model.encode(np.stack(list(self._windows)))

    # -- main loop ---------------------------------------------------------------------

    def run_tick(self, external_input: OperatorInput | None = None) -> dict:
        """Advance one 50 Hz tick; returns the log record."""
        cfg = self.cfg
        depth, guidance = self.perception.evaluate(
            self.state.tip_position,
            self.state.tip_quat,
            rng=self.rng if cfg.perception.depth_noise_sigma > 0 else None,
        )
        self.last_depth_b64 = depth.grid_base64()

        if self.pilot is not None:
            input_ = self.pilot.decide(self.phase, guidance, depth)
            if self.pilot.request_railroad:
                self.command("railroad")
        else:
            input_ = (external_input or OperatorInput()).clamped()

        self._step_phase(guidance, input_)

        tip_meas = np.asarray(self._windows[-1]).reshape(-1, 3)[-1]
        v_meas = finite_diff_velocity(tip_meas, self._prev_tip_meas, cfg.session.dt)
        x_meas = np.concatenate([tip_meas, v_meas])

        contacts = []
        diag = None
        if self.phase not in TERMINAL_PHASES:
            u, diag = self._control(input_, x_meas)
            tube_rate = cfg.session.tube_speed if self.phase == Phase.RAILROADING else 0.0
            if input_.retract_tube:
                tube_rate = -cfg.session.tube_speed
            self.state, contacts = self.plant.step(self.state, u, cfg.session.dt, tube_rate=tube_rate)
            self._last_u = u
        else:
            u = np.zeros(5)

        if contacts and self.phase in (Phase.NAVIGATION, Phase.HOLD_AT_TARGET):
            self._wall_contacts += len(contacts)

        self._prev_tip_meas = tip_meas
        cloud = self._measure_backbone()
        self._windows.append(cloud.points.ravel())

        try:
            gt_dist = self.plant.carina_distance(self.state)
        except ValueError:
            gt_dist = None

        record = {
            "tick": self.tick,
            "t": round(self.tick * cfg.session.dt, 6),
            "phase": self.phase.value,
            "plant": self.state.summary(),
            "gt_carina": gt_dist,
            "guidance": guidance.to_dict(),
            "u": u.tolist(),
            "input": input_.to_dict(),
            "backbone16": cloud.points[:: max(1, len(cloud.points) // 16)][:16].ravel().tolist(),
            "contacts": [
                {
                    "location": c.location.tolist(),
                    "penetration": c.penetration_depth,
                    "zone": c.zone_at_contact,
                }
                for c in contacts
            ],
            "corrective": self._in_corrective,
            "solver": diag,
        }
        if self._placement is not None and "placement" not in self.log.header:
            self.log.header["placement"] = {
                "gt": self._placement[0],
                "est": self._placement[1],
                "tick": self.tick,
            }
        self.log.append(record)
        self.tick += 1
        self._phase_ticks += 1
        return record

    def run(self, max_ticks: int | None = None) -> tuple[EpisodeLog, TrialOutcome]:
        limit = max_ticks or self.cfg.session.max_ticks
        while self.phase not in TERMINAL_PHASES and self.tick < limit:
            self.run_tick()
        if self.phase not in TERMINAL_PHASES:
            self._abort_reason = "tick_limit"
            self._set_phase(Phase.ABORTED)
        self.log.header["abort_reason"] = self._abort_reason
        return self.log, self.outcome()

    def outcome(self) -> TrialOutcome:
        from .metrics import outcome_from_log

        return outcome_from_log(self.log, self.cfg)


def run_episode(
    scenario: str,
    mode: str,
    seed: int,
    cfg: StackConfig,
    model: LatentDynamicsModel,
) -> tuple[EpisodeLog, TrialOutcome]:
    session = TeleopSession(cfg, model, scenario=scenario, mode=mode, seed=seed)
    return session.run()
