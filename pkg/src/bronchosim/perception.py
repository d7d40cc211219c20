"""Synthetic endoscopic depth and anatomy-aware guidance.

Depth maps are ray-cast from the tip camera against the airway lumen with a
pinhole model (sphere tracing on the lumen's interior distance field plus a
bisection refinement, so reported depths are exact to well below the march
step). Guidance reduces a map to: lumen center (smoothed argmax), the
misalignment vector relative to the optical center, a carina-distance
estimate, a zone label, and an operator cue.

Pixel coordinates are (x, y) = (column, row); depth grids are indexed
[row, column]. Depths are mm.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .airway import AirwayGeometry
from .config import CameraConfig, PerceptionConfig, ZoneConfig
from .plant import quat_rotate

DEPTH_SCHEMA_VERSION = 1


class Zone(str, Enum):
    ZONE1 = "zone1"   # supraglottic / proximal: far from the carina
    ZONE2 = "zone2"   # mid-tracheal placement window
    ZONE3 = "zone3"   # distal / carinal proximity


class Cue(str, Enum):
    ADVANCE = "advance"
    MAINTAIN = "maintain_position"
    WITHDRAW = "withdraw"


@dataclass(frozen=True)
class CameraModel:
    width: int = 64
    height: int = 64
    focal_px: float = 32.0
    cx: float = 32.0
    cy: float = 32.0
    max_range: float = 100.0

    def __post_init__(self):
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.focal_px <= 0:
            raise ValueError("focal length must be positive")

    @classmethod
    def from_config(cls, cfg: CameraConfig) -> "CameraModel":
        return cls(
            width=cfg.width,
            height=cfg.height,
            focal_px=cfg.focal_px,
            cx=cfg.cx,
            cy=cfg.cy,
            max_range=cfg.max_range,
        )

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the camera frame, shape (H*W, 3), row-major."""
        xs = (np.arange(self.width) - self.cx) / self.focal_px
        ys = (np.arange(self.height) - self.cy) / self.focal_px
        gx, gy = np.meshgrid(xs, ys)
        dirs = np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)], axis=1)
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray   # (H, W) mm, capped at max_range where invalid
    valid: np.ndarray    # (H, W) bool, False where the ray escaped max_range
    max_range: float

    def smoothed(self) -> np.ndarray:
        """3x3 box-smoothed grid (edge-replicated); invalids count at the cap."""
        padded = np.pad(self.values, 1, mode="edge")
        out = np.zeros_like(self.values)
        for dr in (0, 1, 2):
            for dc in (0, 1, 2):
                out += padded[dr : dr + self.values.shape[0], dc : dc + self.values.shape[1]]
        return out / 9.0

    # flat binary grid with a JSON header line
    def to_bytes(self) -> bytes:
        header = {
            "schema_version": DEPTH_SCHEMA_VERSION,
            "height": int(self.values.shape[0]),
            "width": int(self.values.shape[1]),
            "units": "mm",
            "max_range": self.max_range,
            "dtype": "float32",
        }
        return (
            json.dumps(header).encode() + b"\n"
            + self.values.astype(np.float32).tobytes()
            + self.valid.astype(np.uint8).tobytes()
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DepthMap":
        nl = blob.index(b"\n")
        header = json.loads(blob[:nl].decode())
        if header.get("schema_version") != DEPTH_SCHEMA_VERSION:
            raise ValueError(f"unsupported depth schema: {header.get('schema_version')!r}")
        h, w = header["height"], header["width"]
        body = blob[nl + 1 :]
        values = np.frombuffer(body[: 4 * h * w], dtype=np.float32).reshape(h, w)
        valid = np.frombuffer(body[4 * h * w : 4 * h * w + h * w], dtype=np.uint8).reshape(h, w)
        return cls(values=values.astype(float), valid=valid.astype(bool), max_range=header["max_range"])

    def grid_base64(self) -> str:
        return base64.b64encode(self.values.astype(np.float32).tobytes()).decode()


@dataclass(frozen=True)
class GuidanceState:
    zone: Zone
    cue: Cue
    misalignment: np.ndarray       # (2,) pixels, lumen center minus optical center
    carina_distance_est: float     # mm
    lumen_center: np.ndarray       # (2,) pixel coords (x, y)

    def to_dict(self) -> dict:
        return {
            "zone": self.zone.value,
            "cue": self.cue.value,
            "misalignment": self.misalignment.tolist(),
            "carina_distance_est": self.carina_distance_est,
            "lumen_center": self.lumen_center.tolist(),
        }


def render_depth(
    tip_position: np.ndarray,
    tip_quat: np.ndarray,
    airway: AirwayGeometry,
    cam: CameraModel,
    march_step: float = 1.0,
    march_safety: float = 0.8,
    refine_iters: int = 12,
) -> DepthMap:
    """Per-pixel ray cast from the tip camera pose against the lumen wall."""
    origin = np.asarray(tip_position, dtype=float)
    if not airway.contains(origin[None])[0]:
        raise ValueError("camera origin is outside the airway lumen")
    dirs = quat_rotate(np.asarray(tip_quat, dtype=float), cam.ray_directions())
    depth, hit = airway.cast_rays(
        origin,
        dirs,
        cam.max_range,
        min_step=march_step,
        safety=march_safety,
        refine_iters=refine_iters,
    )
    return DepthMap(
        values=depth.reshape(cam.height, cam.width),
        valid=hit.reshape(cam.height, cam.width),
        max_range=cam.max_range,
    )


def locate_lumen(depth: DepthMap) -> np.ndarray:
    """Pixel (x, y) of the smoothed-depth argmax; row-major tie-break."""
    if not depth.valid.any():
        raise ValueError("depth map has no valid pixels")
    flat = int(np.argmax(depth.smoothed()))
    row, col = divmod(flat, depth.values.shape[1])
    return np.array([float(col), float(row)])


def misalignment(lumen_center: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Image-space offset of the lumen center from the optical center."""
    return np.asarray(lumen_center, dtype=float) - cam.principal_point


def estimate_carina_distance(
    depth: DepthMap, cam: CameraModel, camera_depth_offset: float = 0.0
) -> float:
    """Smoothed depth at the lumen-center pixel minus the calibration offset."""
    center = locate_lumen(depth)
    col, row = int(center[0]), int(center[1])
    value = float(depth.smoothed()[row, col])
    return max(0.0, min(value, depth.max_range) - camera_depth_offset)


def classify_zone(dist: float, cfg: ZoneConfig | None = None) -> Zone:
    """Zone from carina distance: [0, z3) -> 3, [z3, z2u] -> 2, above -> 1."""
    cfg = cfg or ZoneConfig()
    if dist < 0:
        raise ValueError("carina distance must be non-negative")
    if dist < cfg.zone3_threshold:
        return Zone.ZONE3
    if dist <= cfg.zone2_upper:
        return Zone.ZONE2
    return Zone.ZONE1


def guidance_cue(zone: Zone) -> Cue:
    return {
        Zone.ZONE1: Cue.ADVANCE,
        Zone.ZONE2: Cue.MAINTAIN,
        Zone.ZONE3: Cue.WITHDRAW,
    }[zone]


class GuidancePipeline:
    """Render + reduce for one airway; pure given (pose, rng draw)."""

    def __init__(self, airway: AirwayGeometry, cfg: PerceptionConfig | None = None):
        self.airway = airway
        self.cfg = cfg or PerceptionConfig()
        self.camera = CameraModel.from_config(self.cfg.camera)

    def render(self, tip_position: np.ndarray, tip_quat: np.ndarray) -> DepthMap:
        c = self.cfg.camera
        return render_depth(
            tip_position,
            tip_quat,
            self.airway,
            self.camera,
            march_step=c.march_step,
            march_safety=c.march_safety,
            refine_iters=c.refine_iters,
        )

    def add_depth_noise(self, depth: DepthMap, rng: np.random.Generator) -> DepthMap:
        sigma = self.cfg.depth_noise_sigma
        if sigma <= 0.0:
            return depth
        noisy = depth.values + rng.normal(0.0, sigma, size=depth.values.shape)
        noisy = np.clip(noisy, 1e-3, depth.max_range)
        return DepthMap(values=noisy, valid=depth.valid, max_range=depth.max_range)

    def evaluate(
        self,
        tip_position: np.ndarray,
        tip_quat: np.ndarray,
        rng: np.random.Generator | None = None,
    ) -> tuple[DepthMap, GuidanceState]:
        depth = self.render(tip_position, tip_quat)
        if rng is not None:
            depth = self.add_depth_noise(depth, rng)
        center = locate_lumen(depth)
        offset = misalignment(center, self.camera)
        dist = estimate_carina_distance(depth, self.camera, self.cfg.camera_depth_offset)
        zone = classify_zone(dist, self.cfg.zones)
        return depth, GuidanceState(
            zone=zone,
            cue=guidance_cue(zone),
            misalignment=offset,
            carina_distance_est=dist,
            lumen_center=center,
        )
