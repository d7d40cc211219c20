"""Ground-truth simulator of the tendon-driven scope inside an airway.

The scope is modeled as a straight proximal shaft plus a constant-curvature
articulation section, driven by five torques: four antagonistic tendon
channels (0/2 bend x, 1/3 bend y) and one insertion channel. Curvature
follows a first-order lag toward a torque-proportional command, shaped by a
Dahl-style friction state with an input dead-band and a cross-axis coupling
term, so the input-output map is hysteretic and nonlinear. The tip is hard
constrained to the lumen; blocked motion is resolved by backtracking the
step and reported as a contact event.

All lengths in mm, torques in N*mm, time in s. State values are snapshots:
every step returns a fresh PlantState and arrays are never mutated in place.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .airway import AirwayGeometry
from .config import PlantConfig


@dataclass(frozen=True)
class PlantState:
    kappa_x: float          # articulation curvature, 1/mm
    kappa_y: float
    insertion: float        # inserted arc length, mm
    tube_insertion: float   # tube-tip arc length from the mouth, mm
    hysteresis_x: float     # Dahl friction states, dimensionless in [-1, 1]
    hysteresis_y: float
    tip_position: np.ndarray  # (3,) mm
    tip_quat: np.ndarray      # (4,) unit quaternion (w, x, y, z), base frame -> tip frame

    def summary(self) -> dict:
        return {
            "kappa_x": self.kappa_x,
            "kappa_y": self.kappa_y,
            "insertion": self.insertion,
            "tube_insertion": self.tube_insertion,
            "hysteresis_x": self.hysteresis_x,
            "hysteresis_y": self.hysteresis_y,
            "tip": self.tip_position.tolist(),
        }


@dataclass(frozen=True)
class BackboneCloud:
    """Ordered polyline of the inserted shaft, base -> tip."""

    points: np.ndarray      # (N, 3) mm
    timestamp: float        # s

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("backbone points must have shape (N, 3)")


@dataclass(frozen=True)
class ContactEvent:
    time: float             # s
    location: np.ndarray    # (3,) mm, resolved tip position on the wall
    penetration_depth: float  # mm, how far the unconstrained step overshot
    zone_at_contact: str    # airway zone label at the contact


def clamp_control(u: np.ndarray, limit: float) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=float), -limit, limit)


def _dead_band(x: float, width: float) -> float:
    if x > width:
        return x - width
    if x < -width:
        return x + width
    return 0.0


def backbone_chain(
    kappa_x: float, kappa_y: float, insertion: float, cfg: PlantConfig
) -> tuple[np.ndarray, np.ndarray, float]:
    """Chord-exact backbone polyline plus tip tangent and bend angle.

    The shaft is discretized into n_backbone_points - 1 straight links of
    equal length, so the summed chord lengths equal the inserted arc length
    exactly. Link directions follow the constant-curvature arc evaluated at
    link midpoints; the distal articulation_length of the inserted shaft
    bends, the remainder stays straight.
    """
    n = cfg.n_backbone_points
    if insertion < cfg.min_reconstruct_insertion:
        raise ValueError(
            f"insertion {insertion:.3f} mm below reconstructable minimum "
            f"{cfg.min_reconstruct_insertion} mm"
        )
    ds = insertion / (n - 1)
    arc_len = min(insertion, cfg.articulation_length)
    straight_len = insertion - arc_len
    kappa = float(np.hypot(kappa_x, kappa_y))

    sigma_mid = (np.arange(n - 1) + 0.5) * ds
    bend = kappa * np.clip(sigma_mid - straight_len, 0.0, arc_len)
    if kappa > 0.0:
        bx, by = kappa_x / kappa, kappa_y / kappa
    else:
        bx, by = 0.0, 0.0
    dirs = np.stack(
        [np.sin(bend) * bx, np.sin(bend) * by, np.cos(bend)], axis=1
    )
    points = np.zeros((n, 3))
    np.cumsum(dirs * ds, axis=0, out=points[1:])
    tip_angle = kappa * arc_len
    tip_tangent = np.array(
        [np.sin(tip_angle) * bx, np.sin(tip_angle) * by, np.cos(tip_angle)]
    )
    return points, tip_tangent, tip_angle


def _tip_quaternion(kappa_x: float, kappa_y: float, tip_angle: float) -> np.ndarray:
    """Rotation from the base frame to the tip frame about the bend axis."""
    kappa = float(np.hypot(kappa_x, kappa_y))
    if kappa == 0.0 or tip_angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = np.array([-kappa_y / kappa, kappa_x / kappa, 0.0])
    half = 0.5 * tip_angle
    q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
    return q / np.linalg.norm(q)


def quat_rotate(q: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Rotate vectors (.., 3) by unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    rot = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return np.asarray(vec) @ rot.T


def add_sensor_noise(
    cloud: BackboneCloud,
    sigma: float,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> BackboneCloud:
    """I.i.d. zero-mean Gaussian perturbation per coordinate.

    Pass a seed for a self-contained deterministic draw, or an existing
    generator to take the next draws from a caller-owned stream.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return cloud
    if rng is None:
        rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=cloud.points.shape)
    return BackboneCloud(points=cloud.points + noise, timestamp=cloud.timestamp)


class Plant:
    """Owns one airway and steps scope states through it."""

    def __init__(self, airway: AirwayGeometry, cfg: PlantConfig | None = None):
        self.airway = airway
        self.cfg = cfg or PlantConfig()

    def initial_state(self, insertion: float | None = None) -> PlantState:
        s0 = self.cfg.min_reconstruct_insertion * 10 if insertion is None else insertion
        return self._with_tip(
            kappa_x=0.0,
            kappa_y=0.0,
            insertion=s0,
            tube_insertion=0.0,
            hysteresis_x=0.0,
            hysteresis_y=0.0,
        )

    def _tip_of(self, kappa_x: float, kappa_y: float, insertion: float) -> np.ndarray:
        points, _, _ = backbone_chain(kappa_x, kappa_y, insertion, self.cfg)
        return points[-1]

    def _with_tip(self, **fields) -> PlantState:
        points, _, tip_angle = backbone_chain(
            fields["kappa_x"], fields["kappa_y"], fields["insertion"], self.cfg
        )
        quat = _tip_quaternion(fields["kappa_x"], fields["kappa_y"], tip_angle)
        return PlantState(tip_position=points[-1], tip_quat=quat, **fields)

    def reconstruct_backbone(self, state: PlantState, timestamp: float = 0.0) -> BackboneCloud:
        points, _, _ = backbone_chain(
            state.kappa_x, state.kappa_y, state.insertion, self.cfg
        )
        return BackboneCloud(points=points, timestamp=timestamp)

    def carina_distance(self, state: PlantState) -> float:
        """Signed arc-length distance from tip to carina; positive = proximal."""
        return self.airway.carina_distance_of_point(state.tip_position)

    # -- stepping -------------------------------------------------------------

    def _curvature_axis_step(
        self, kappa: float, hyst: float, raw: float, cross: float, dt: float
    ) -> tuple[float, float]:
        cfg = self.cfg
        gain = cfg.curvature_gain * (1.0 + cfg.coupling_gain * abs(cross) / cfg.torque_limit)
        effective = raw - cfg.friction_torque * hyst
        command = np.clip(
            gain * _dead_band(effective, cfg.dead_band_torque),
            -cfg.curvature_limit,
            cfg.curvature_limit,
        )
        rate = (command - kappa) / cfg.curvature_time_constant
        new_kappa = float(np.clip(kappa + rate * dt, -cfg.curvature_limit, cfg.curvature_limit))
        d_kappa = new_kappa - kappa
        new_hyst = hyst + cfg.friction_stiffness * d_kappa * (1.0 - hyst * np.sign(d_kappa))
        return new_kappa, float(np.clip(new_hyst, -1.0, 1.0))

    def step(
        self,
        state: PlantState,
        u: np.ndarray,
        dt: float,
        tube_rate: float = 0.0,
    ) -> tuple[PlantState, list[ContactEvent]]:
        """Advance one tick; returns the new state and any contact events.

        Insertion law: ds/dt = clip(insertion_gain * u[4], +-insertion_speed_limit)
        * (1 - bend_insertion_coupling * min(1, |kappa| / curvature_limit)).
        """
        cfg = self.cfg
        u = np.asarray(u, dtype=float)
        if dt <= 0:
            raise ValueError("dt must be positive")
        if u.shape != (5,) or not np.all(np.isfinite(u)):
            raise ValueError("control vector must be 5 finite torques")
        if np.any(np.abs(u) > cfg.torque_limit + 1e-9):
            raise ValueError(f"control torques exceed the +-{cfg.torque_limit} N*mm box")

        kx, hx = self._curvature_axis_step(
            state.kappa_x, state.hysteresis_x, u[0] - u[2], u[1] - u[3], dt
        )
        ky, hy = self._curvature_axis_step(
            state.kappa_y, state.hysteresis_y, u[1] - u[3], u[0] - u[2], dt
        )

        kappa_mag = np.hypot(state.kappa_x, state.kappa_y)
        slowdown = 1.0 - cfg.bend_insertion_coupling * min(1.0, kappa_mag / cfg.curvature_limit)
        ins_rate = np.clip(
            cfg.insertion_gain * u[4], -cfg.insertion_speed_limit, cfg.insertion_speed_limit
        ) * slowdown
        s_new = float(
            np.clip(state.insertion + ins_rate * dt, cfg.min_reconstruct_insertion, cfg.max_insertion)
        )

        contacts: list[ContactEvent] = []
        raw_tip = self._tip_of(kx, ky, s_new)
        if self.airway.contains(raw_tip[None])[0]:
            final = (kx, ky, s_new)
        else:
            final, resolved_tip = self._resolve_contact(state, kx, ky, s_new)
            penetration = float(np.linalg.norm(raw_tip - resolved_tip))
            contacts.append(
                ContactEvent(
                    time=0.0,
                    location=resolved_tip,
                    penetration_depth=max(penetration, 1e-9),
                    zone_at_contact=self._zone_label(resolved_tip),
                )
            )

        tube = float(np.clip(state.tube_insertion + tube_rate * dt, 0.0, final[2]))
        return (
            self._with_tip(
                kappa_x=final[0],
                kappa_y=final[1],
                insertion=final[2],
                tube_insertion=tube,
                hysteresis_x=hx,
                hysteresis_y=hy,
            ),
            contacts,
        )

    def _resolve_contact(
        self, prev: PlantState, kx: float, ky: float, s_new: float
    ) -> tuple[tuple[float, float, float], np.ndarray]:
        """Backtrack the blocked step: first curvature, then insertion.

        The previous state is feasible by induction, so bisection on the
        blend factor always terminates on an in-lumen tip.
        """

        def feasible(k1: float, k2: float, s: float) -> bool:
            return bool(self.airway.contains(self._tip_of(k1, k2, s)[None])[0])

        def bisect(blend) -> float:
            lo, hi = 0.0, 1.0  # blend(0) feasible, blend(1) not
            for _ in range(24):
                mid = 0.5 * (lo + hi)
                if feasible(*blend(mid)):
                    lo = mid
                else:
                    hi = mid
            return lo

        if feasible(prev.kappa_x, prev.kappa_y, s_new):
            # wall blocks the bend: slide forward, give back curvature
            lam = bisect(
                lambda a: (
                    prev.kappa_x + a * (kx - prev.kappa_x),
                    prev.kappa_y + a * (ky - prev.kappa_y),
                    s_new,
                )
            )
            final = (
                prev.kappa_x + lam * (kx - prev.kappa_x),
                prev.kappa_y + lam * (ky - prev.kappa_y),
                s_new,
            )
        else:
            # axial block: keep previous curvature, give back insertion
            mu = bisect(
                lambda a: (
                    prev.kappa_x,
                    prev.kappa_y,
                    prev.insertion + a * (s_new - prev.insertion),
                )
            )
            final = (prev.kappa_x, prev.kappa_y, prev.insertion + mu * (s_new - prev.insertion))
        return final, self._tip_of(*final)

    def _zone_label(self, tip: np.ndarray) -> str:
        from .perception import classify_zone  # local import avoids a cycle at module load

        try:
            dist = self.airway.carina_distance_of_point(tip)
        except ValueError:
            return "zone1"
        return classify_zone(max(dist, 0.0)).value
