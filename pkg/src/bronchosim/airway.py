"""Parametric airway geometry.

The airway is a tube train along an arc-length-parametrized centerline:
mouth -> pharynx (gentle posterior bend) -> glottis (narrowing) -> trachea
(lateral sway) -> carina, where the lumen splits into two straight bronchus
stubs. The main centerline continues into the +x bronchus; the -x bronchus
is a side branch used for containment and rendering only.

Coordinates are mm in a frame whose +z axis is the insertion direction at
the mouth. Segment lengths are fixed per scenario; per-seed jitter touches
only radii and bend amplitudes, so landmark arc lengths are identical for
every seed of a scenario.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .config import AirwayConfig

try:  # compiled ray-march kernel; the numpy path below is the reference
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    _HAVE_NUMBA = False

AIRWAY_SCHEMA_VERSION = 1


class Scenario(str, Enum):
    STANDARD = "standard"
    CONSTRAINED = "constrained"


@dataclass
class BranchStub:
    """Straight cylindrical bronchus stub leaving the carina."""

    origin: np.ndarray      # (3,) carina point, mm
    direction: np.ndarray   # (3,) unit vector
    radius: float           # mm
    length: float           # mm
    side: str               # "left" or "right"

    def axial_and_radial(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Axial coordinate along the stub and radial distance off its axis."""
        rel = points - self.origin
        t = rel @ self.direction
        radial = np.linalg.norm(rel - np.outer(t, self.direction), axis=-1)
        return t, radial

    def contains(self, points: np.ndarray) -> np.ndarray:
        t, radial = self.axial_and_radial(points)
        return (t >= 0.0) & (t <= self.length) & (radial <= self.radius)

    def inner_sdf(self, points: np.ndarray) -> np.ndarray:
        """Exact distance to the stub boundary, negative outside."""
        t, radial = self.axial_and_radial(points)
        return np.minimum(self.radius - radial, np.minimum(t, self.length - t))


@dataclass
class AirwayGeometry:
    """Built airway: main-path tables, landmarks, and branch stubs."""

    scenario: Scenario
    seed: int
    centerline: np.ndarray        # (K, 3) main path, mouth -> +x bronchus end
    radius_profile: np.ndarray    # (K,) lumen radius per centerline sample
    arclength: np.ndarray         # (K,) cumulative arc length, strictly increasing
    carina_arclength: float
    glottis_arclength: float
    branches: list[BranchStub]
    params: dict = field(default_factory=dict)  # realized (jittered) dimensions
    # z-indexed lookup tables for the pre-carina tube (built on construction)
    _z_grid: np.ndarray = field(default=None, repr=False)
    _z_center: np.ndarray = field(default=None, repr=False)
    _z_radius: np.ndarray = field(default=None, repr=False)
    _slope_factor: float = field(default=1.0, repr=False)
    _carina_z: float = field(default=0.0, repr=False)

    # -- carinal geometry ---------------------------------------------------

    @property
    def carina_point(self) -> np.ndarray:
        idx = int(np.searchsorted(self.arclength, self.carina_arclength))
        return self.centerline[min(idx, len(self.centerline) - 1)]

    @property
    def min_radius(self) -> float:
        return float(min(self.radius_profile.min(), min(b.radius for b in self.branches)))

    @property
    def max_curvature(self) -> float:
        return float(self.params["max_centerline_curvature"])

    # -- membership / distance fields ----------------------------------------

    def _main_tube_sdf(self, points: np.ndarray) -> np.ndarray:
        """Conservative inner distance for the pre-carina tube (z-table)."""
        z = points[..., 2]
        zi = np.clip(z, self._z_grid[0], self._carina_z)
        frac = (zi - self._z_grid[0]) / (self._z_grid[1] - self._z_grid[0])
        i0 = np.clip(frac.astype(np.int64), 0, len(self._z_grid) - 2)
        w = frac - i0
        c = self._z_center[i0] * (1.0 - w)[..., None] + self._z_center[i0 + 1] * w[..., None]
        r = self._z_radius[i0] * (1.0 - w) + self._z_radius[i0 + 1] * w
        transverse = np.hypot(points[..., 0] - c[..., 0], points[..., 1] - c[..., 1])
        sdf = (r - transverse) * self._slope_factor
        # closed behind the mouth plane, open into the junction past the carina
        sdf = np.minimum(sdf, z - self._z_grid[0])
        return np.where(z > self._carina_z, z * 0.0 - 1.0, sdf)

    def inner_sdf(self, points: np.ndarray) -> np.ndarray:
        """Lower bound on distance to the lumen wall; <= 0 means outside."""
        points = np.asarray(points, dtype=float)
        sdf = self._main_tube_sdf(points)
        for b in self.branches:
            sdf = np.maximum(sdf, b.inner_sdf(points))
        return sdf

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.inner_sdf(np.asarray(points, dtype=float)) > 0.0

    def local_center(self, z: float) -> tuple[np.ndarray, float]:
        """Lumen center (x, y) and radius of the pre-carina tube at axial z."""
        zc = float(np.clip(z, self._z_grid[0], self._carina_z))
        cx = np.interp(zc, self._z_grid, self._z_center[:, 0])
        cy = np.interp(zc, self._z_grid, self._z_center[:, 1])
        r = np.interp(zc, self._z_grid, self._z_radius)
        return np.array([cx, cy]), float(r)

    # -- ray casting -----------------------------------------------------------

    def cast_rays(
        self,
        origin: np.ndarray,
        directions: np.ndarray,
        max_range: float,
        min_step: float = 1.0,
        safety: float = 0.8,
        refine_iters: int = 12,
    ) -> tuple[np.ndarray, np.ndarray]:
        """First wall hit along each ray from an in-lumen origin.

        Sphere-traces the interior distance field, then bisects the bracket,
        so hit distances are exact to max_range / 2**refine_iters. Returns
        (distance, hit) arrays; missed rays carry max_range and hit=False.
        """
        origin = np.asarray(origin, dtype=float)
        directions = np.ascontiguousarray(directions, dtype=float)
        if _HAVE_NUMBA:
            b_origin = np.ascontiguousarray([b.origin for b in self.branches])
            b_dirs = np.ascontiguousarray([b.direction for b in self.branches])
            b_radius = np.array([b.radius for b in self.branches])
            b_length = np.array([b.length for b in self.branches])
            return _march_kernel(
                origin,
                directions,
                float(self._z_grid[0]),
                float(self._z_grid[1] - self._z_grid[0]),
                np.ascontiguousarray(self._z_center),
                np.ascontiguousarray(self._z_radius),
                float(self._carina_z),
                float(self._slope_factor),
                b_origin,
                b_dirs,
                b_radius,
                b_length,
                float(max_range),
                float(min_step),
                float(safety),
                int(refine_iters),
            )
        return self._cast_rays_numpy(origin, directions, max_range, min_step, safety, refine_iters)

    def _cast_rays_numpy(
        self,
        origin: np.ndarray,
        directions: np.ndarray,
        max_range: float,
        min_step: float,
        safety: float,
        refine_iters: int,
    ) -> tuple[np.ndarray, np.ndarray]:
        n = directions.shape[0]
        t = np.zeros(n)
        t_lo = np.zeros(n)
        t_hi = np.full(n, np.nan)
        escaped = np.zeros(n, dtype=bool)
        active = np.arange(n)
        for _ in range(int(max_range / min_step) + 8):
            if active.size == 0:
                break
            p = origin[None, :] + t[active, None] * directions[active]
            sdf = self.inner_sdf(p)
            outside = sdf <= 0.0
            t_hi[active[outside]] = t[active[outside]]
            still_in = active[~outside]
            t_lo[still_in] = t[still_in]
            t[still_in] += np.maximum(sdf[~outside] * safety, min_step)
            over = still_in[t[still_in] > max_range]
            escaped[over] = True
            active = still_in[t[still_in] <= max_range]

        hit = ~escaped & ~np.isnan(t_hi)
        lo, hi = t_lo[hit].copy(), t_hi[hit].copy()
        d_hit = directions[hit]
        for _ in range(refine_iters):
            mid = 0.5 * (lo + hi)
            inside = self.contains(origin[None, :] + mid[:, None] * d_hit)
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        dist = np.full(n, max_range)
        dist[hit] = np.minimum(0.5 * (lo + hi), max_range)
        return dist, hit

    # -- arc-length projection ------------------------------------------------

    def project_arclength(self, point: np.ndarray, tol: float = 1e-6) -> float:
        """Arc length along the main path of the closest centerline point.

        Points inside a branch stub map to carina_arclength + axial depth so
        that excursions into either bronchus read as past the carina.
        Raises ValueError for points outside the lumen (beyond tol).
        """
        point = np.asarray(point, dtype=float)
        if self.inner_sdf(point[None])[0] <= -tol:
            raise ValueError(f"point {point.tolist()} is outside the airway lumen")
        z = point[2]
        if z > self._carina_z or self._main_tube_sdf(point[None])[0] <= 0.0:
            for b in self.branches:
                t, radial = b.axial_and_radial(point[None])
                if 0.0 <= t[0] <= b.length and radial[0] <= b.radius + tol:
                    return self.carina_arclength + float(t[0])
        # nearest segment of the pre-carina polyline
        n_car = int(np.searchsorted(self.arclength, self.carina_arclength)) + 1
        pts = self.centerline[:n_car]
        seg = pts[1:] - pts[:-1]
        seg_len2 = np.einsum("ij,ij->i", seg, seg)
        rel = point[None] - pts[:-1]
        t = np.clip(np.einsum("ij,ij->i", rel, seg) / seg_len2, 0.0, 1.0)
        closest = pts[:-1] + seg * t[:, None]
        d2 = np.einsum("ij,ij->i", point[None] - closest, point[None] - closest)
        i = int(np.argmin(d2))
        return float(self.arclength[i] + t[i] * np.sqrt(seg_len2[i]))

    def carina_distance_of_point(self, point: np.ndarray) -> float:
        """Signed arc-length distance to the carina; positive is proximal."""
        return self.carina_arclength - self.project_arclength(point)

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": AIRWAY_SCHEMA_VERSION,
            "scenario": self.scenario.value,
            "seed": self.seed,
            "centerline": self.centerline.tolist(),
            "radii": self.radius_profile.tolist(),
            "arclength": self.arclength.tolist(),
            "landmarks": {
                "glottis_arclength": self.glottis_arclength,
                "carina_arclength": self.carina_arclength,
            },
            "branches": [
                {
                    "origin": b.origin.tolist(),
                    "direction": b.direction.tolist(),
                    "radius": b.radius,
                    "length": b.length,
                    "side": b.side,
                }
                for b in self.branches
            ],
            "params": self.params,
        }

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, doc: dict) -> "AirwayGeometry":
        version = doc.get("schema_version")
        if version != AIRWAY_SCHEMA_VERSION:
            raise ValueError(f"unsupported airway schema version: {version!r}")
        geo = cls(
            scenario=Scenario(doc["scenario"]),
            seed=int(doc.get("seed", 0)),
            centerline=np.asarray(doc["centerline"], dtype=float),
            radius_profile=np.asarray(doc["radii"], dtype=float),
            arclength=np.asarray(doc["arclength"], dtype=float),
            carina_arclength=float(doc["landmarks"]["carina_arclength"]),
            glottis_arclength=float(doc["landmarks"]["glottis_arclength"]),
            branches=[
                BranchStub(
                    origin=np.asarray(b["origin"], dtype=float),
                    direction=np.asarray(b["direction"], dtype=float),
                    radius=float(b["radius"]),
                    length=float(b["length"]),
                    side=b["side"],
                )
                for b in doc["branches"]
            ],
            params=dict(doc.get("params", {})),
        )
        geo._build_tables()
        geo._check_invariants()
        return geo

    @classmethod
    def from_json(cls, text: str) -> "AirwayGeometry":
        return cls.from_dict(json.loads(text))

    # -- construction helpers ---------------------------------------------------

    def _build_tables(self) -> None:
        n_car = int(np.searchsorted(self.arclength, self.carina_arclength)) + 1
        pts = self.centerline[:n_car]
        radii = self.radius_profile[:n_car]
        z = pts[:, 2]
        if np.any(np.diff(z) <= 0):
            raise ValueError("main-path z must be strictly increasing before the carina")
        self._carina_z = float(z[-1])
        spacing = float(self.params.get("sample_spacing", 1.0))
        grid = np.arange(z[0], self._carina_z + spacing, spacing)
        cx = np.interp(grid, z, pts[:, 0])
        cy = np.interp(grid, z, pts[:, 1])
        self._z_grid = grid
        self._z_center = np.stack([cx, cy], axis=1)
        self._z_radius = np.interp(grid, z, radii)
        slope = np.max(
            np.abs(np.diff(self._z_center, axis=0)).max() / spacing
            + np.abs(np.diff(self._z_radius)).max() / spacing
        )
        self._slope_factor = float(np.cos(np.arctan(slope)))

    def _check_invariants(self) -> None:
        if np.any(np.diff(self.arclength) <= 0):
            raise ValueError("arc length must be strictly increasing")
        if np.any(self.radius_profile <= 0):
            raise ValueError("all lumen radii must be positive")
        if not self.glottis_arclength < self.carina_arclength:
            raise ValueError("glottis must be proximal to the carina")


def build_airway(scenario: Scenario | str, seed: int, cfg: AirwayConfig | None = None) -> AirwayGeometry:
    """Deterministic airway for (scenario, seed).

    Per-seed jitter perturbs radii and bend amplitudes only; segment lengths
    (and hence glottis/carina arc lengths) are scenario constants.
    """
    scenario = Scenario(scenario)
    cfg = cfg or AirwayConfig()
    rng = np.random.default_rng([int(seed), 0xA12 if scenario is Scenario.STANDARD else 0xC05])
    jr = cfg.jitter_radius_mm
    jb = cfg.jitter_bend_mm

    if scenario is Scenario.STANDARD:
        glottis_r = cfg.glottis_radius
        trachea_r = cfg.trachea_radius
        bronchus_r = cfg.bronchus_radius
        subcarinal_r = cfg.subcarinal_radius
        pharynx_amp = cfg.pharynx_bend_amplitude
        sway_amp = cfg.trachea_sway_amplitude
    else:
        glottis_r = cfg.constrained_glottis_radius
        trachea_r = cfg.constrained_trachea_radius
        bronchus_r = cfg.constrained_bronchus_radius
        subcarinal_r = cfg.constrained_subcarinal_radius
        pharynx_amp = cfg.constrained_pharynx_bend_amplitude
        sway_amp = cfg.constrained_trachea_sway_amplitude

    params = {
        "mouth_radius": cfg.mouth_radius + jr * rng.uniform(-1, 1),
        "pharynx_radius": cfg.pharynx_radius + jr * rng.uniform(-1, 1),
        "glottis_radius": glottis_r + jr * rng.uniform(-1, 1),
        "trachea_radius": trachea_r + jr * rng.uniform(-1, 1),
        "subcarinal_radius": subcarinal_r + 0.5 * jr * rng.uniform(-1, 1),
        "bronchus_radius": bronchus_r + 0.5 * jr * rng.uniform(-1, 1),
        "pharynx_bend_amplitude": pharynx_amp + jb * rng.uniform(-1, 1),
        "trachea_sway_amplitude": sway_amp + 0.5 * jb * rng.uniform(-1, 1),
        "mouth_length": cfg.mouth_length,
        "pharynx_length": cfg.pharynx_length,
        "glottis_length": cfg.glottis_length,
        "trachea_length": cfg.trachea_length,
        "bronchus_length": cfg.bronchus_length,
        "bronchus_angle_deg": cfg.bronchus_angle_deg,
        "sample_spacing": cfg.sample_spacing,
    }

    ds = cfg.sample_spacing
    s_mouth = cfg.mouth_length
    s_pharynx = s_mouth + cfg.pharynx_length
    s_glottis_end = s_pharynx + cfg.glottis_length
    carina_s = s_glottis_end + cfg.trachea_length
    total_s = carina_s + cfg.bronchus_length
    n = int(round(total_s / ds))

    # heading-curvature profiles: raised-sine bumps integrate to zero net angle
    a_pitch = 2.0 * np.pi * params["pharynx_bend_amplitude"] / cfg.pharynx_length**2
    a_yaw = 2.0 * np.pi * params["trachea_sway_amplitude"] / cfg.trachea_length**2

    def pitch_curvature(s: float) -> float:
        if s_mouth <= s < s_pharynx:
            return a_pitch * np.sin(2.0 * np.pi * (s - s_mouth) / cfg.pharynx_length)
        return 0.0

    def yaw_curvature(s: float) -> float:
        if s_glottis_end <= s < carina_s:
            return a_yaw * np.sin(2.0 * np.pi * (s - s_glottis_end) / cfg.trachea_length)
        return 0.0

    # integrate heading angles, then chord-exact midpoint polyline to the carina
    n_car = int(round(carina_s / ds))
    pts = np.zeros((n + 1, 3))
    pitch = 0.0
    yaw = 0.0
    branch_dir_right = None
    for i in range(n_car):
        s_mid = (i + 0.5) * ds
        pitch += pitch_curvature(s_mid) * ds
        yaw += yaw_curvature(s_mid) * ds
        d = np.array(
            [np.cos(pitch) * np.sin(yaw), -np.sin(pitch), np.cos(pitch) * np.cos(yaw)]
        )
        pts[i + 1] = pts[i] + d * ds

    carina_point = pts[n_car].copy()
    tangent = pts[n_car] - pts[n_car - 1]
    tangent /= np.linalg.norm(tangent)
    lateral = np.array([1.0, 0.0, 0.0]) - tangent * tangent[0]
    lateral /= np.linalg.norm(lateral)
    alpha = np.deg2rad(cfg.bronchus_angle_deg)
    branch_dir_right = np.cos(alpha) * tangent + np.sin(alpha) * lateral
    branch_dir_left = np.cos(alpha) * tangent - np.sin(alpha) * lateral
    for i in range(n_car, n):
        pts[i + 1] = pts[i] + branch_dir_right * ds

    arclength = np.arange(n + 1) * ds

    # radius profile along the main path
    radii = np.empty(n + 1)
    glottis_center = s_pharynx + cfg.glottis_length / 2.0
    for i, s in enumerate(arclength):
        if s < s_mouth:
            r = params["mouth_radius"] + (params["pharynx_radius"] - params["mouth_radius"]) * (s / s_mouth)
        elif s < s_pharynx:
            r = params["pharynx_radius"]
        elif s < s_glottis_end:
            # raised-cosine notch down to the glottic aperture
            u = (s - s_pharynx) / cfg.glottis_length
            blend = 0.5 * (1.0 - np.cos(2.0 * np.pi * u))
            base = params["pharynx_radius"] + (params["trachea_radius"] - params["pharynx_radius"]) * u
            r = base + (params["glottis_radius"] - base) * blend
        elif s < carina_s:
            r = params["trachea_radius"]
            taper_start = carina_s - cfg.subcarinal_taper_length
            if s >= taper_start:
                # smooth taper into the bifurcation limits oblique sightlines
                u = (s - taper_start) / cfg.subcarinal_taper_length
                blend = 0.5 * (1.0 - np.cos(np.pi * u))
                r = r + (params["subcarinal_radius"] - r) * blend
        else:
            r = params["bronchus_radius"]
        radii[i] = r

    params["max_centerline_curvature"] = float(max(abs(a_pitch), abs(a_yaw)))

    branches = [
        BranchStub(
            origin=carina_point,
            direction=branch_dir_right,
            radius=params["bronchus_radius"],
            length=cfg.bronchus_length,
            side="right",
        ),
        BranchStub(
            origin=carina_point,
            direction=branch_dir_left,
            radius=params["bronchus_radius"],
            length=cfg.bronchus_length,
            side="left",
        ),
    ]

    geo = AirwayGeometry(
        scenario=scenario,
        seed=int(seed),
        centerline=pts,
        radius_profile=radii,
        arclength=arclength,
        carina_arclength=float(carina_s),
        glottis_arclength=float(glottis_center),
        branches=branches,
        params=params,
    )
    geo._build_tables()
    geo._check_invariants()
    return geo


if _HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=False)
    def _sdf_scalar(
        px, py, pz, z0, dz, cxy, rad, carina_z, slope, b_org, b_dir, b_rad, b_len
    ):
        best = -1.0e30
        if pz <= carina_z:
            zi = pz if pz > z0 else z0
            f = (zi - z0) / dz
            i0 = int(f)
            kmax = cxy.shape[0] - 2
            if i0 > kmax:
                i0 = kmax
            w = f - i0
            cx = cxy[i0, 0] * (1.0 - w) + cxy[i0 + 1, 0] * w
            cy = cxy[i0, 1] * (1.0 - w) + cxy[i0 + 1, 1] * w
            rr = rad[i0] * (1.0 - w) + rad[i0 + 1] * w
            ddx = px - cx
            ddy = py - cy
            s = (rr - np.sqrt(ddx * ddx + ddy * ddy)) * slope
            zcap = pz - z0
            if zcap < s:
                s = zcap
            best = s
        for b in range(b_org.shape[0]):
            rx = px - b_org[b, 0]
            ry = py - b_org[b, 1]
            rz = pz - b_org[b, 2]
            t_ax = rx * b_dir[b, 0] + ry * b_dir[b, 1] + rz * b_dir[b, 2]
            rad2 = rx * rx + ry * ry + rz * rz - t_ax * t_ax
            if rad2 < 0.0:
                rad2 = 0.0
            s = b_rad[b] - np.sqrt(rad2)
            if t_ax < s:
                s = t_ax
            if b_len[b] - t_ax < s:
                s = b_len[b] - t_ax
            if s > best:
                best = s
        return best

    @numba.njit(cache=True, fastmath=False, parallel=True)
    def _march_kernel(
        origin,
        dirs,
        z0,
        dz,
        cxy,
        rad,
        carina_z,
        slope,
        b_org,
        b_dir,
        b_rad,
        b_len,
        max_range,
        min_step,
        safety,
        refine_iters,
    ):
        n = dirs.shape[0]
        dist = np.empty(n)
        hit = np.zeros(n, dtype=np.bool_)
        ox, oy, oz = origin[0], origin[1], origin[2]
        for i in numba.prange(n):
            dx, dy, dzr = dirs[i, 0], dirs[i, 1], dirs[i, 2]
            t_in = 0.0
            t = 0.0
            t_out = -1.0
            while True:
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dzr
                s = _sdf_scalar(
                    px, py, pz, z0, dz, cxy, rad, carina_z, slope, b_org, b_dir, b_rad, b_len
                )
                if s <= 0.0:
                    t_out = t
                    break
                t_in = t
                step = s * safety
                if step < min_step:
                    step = min_step
                t += step
                if t > max_range:
                    break
            if t_out < 0.0:
                dist[i] = max_range
            else:
                lo = t_in
                hi = t_out
                for _ in range(refine_iters):
                    mid = 0.5 * (lo + hi)
                    s = _sdf_scalar(
                        ox + mid * dx,
                        oy + mid * dy,
                        oz + mid * dzr,
                        z0,
                        dz,
                        cxy,
                        rad,
                        carina_z,
                        slope,
                        b_org,
                        b_dir,
                        b_rad,
                        b_len,
                    )
                    if s > 0.0:
                        lo = mid
                    else:
                        hi = mid
                d = 0.5 * (lo + hi)
                dist[i] = d if d < max_range else max_range
                hit[i] = True
        return dist, hit
