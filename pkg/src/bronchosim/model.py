"""Latent-shape dynamics model.

A causal temporal-convolution encoder compresses a short history of backbone
point clouds into a low-dimensional deformation state z; a residual MLP maps
(tip state, z, torques) to the next tip state. Both are trained end-to-end
on a one-step tip-state prediction loss plus a latent temporal-smoothness
penalty. Gradients are exact reverse accumulation through both networks (see
nnet) and are verified against central finite differences in the tests.

Tip state x = [position (mm), finite-difference velocity (mm/s)] in R^6.
Control u = four tendon torques + one insertion torque (N*mm) in R^5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nnet
from .config import ModelConfig

PARAMS_MAGIC = b"BSNN"
PARAMS_VERSION = 1


def finite_diff_velocity(p_t: np.ndarray, p_prev: np.ndarray, dt: float) -> np.ndarray:
    """(p_t - p_prev) / dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return (np.asarray(p_t, dtype=float) - np.asarray(p_prev, dtype=float)) / dt


@dataclass
class NormStats:
    """Per-dimension standardization computed on the train split."""

    points_mu: np.ndarray   # (n_points*3,)
    points_sd: np.ndarray
    x_mu: np.ndarray        # (6,)
    x_sd: np.ndarray
    u_mu: np.ndarray        # (5,)
    u_sd: np.ndarray
    delta_scale: np.ndarray  # (6,) std of one-step state change, scales the residual head

    @classmethod
    def identity(cls, cfg: ModelConfig) -> "NormStats":
        p = cfg.n_points * 3
        return cls(
            points_mu=np.zeros(p),
            points_sd=np.ones(p),
            x_mu=np.zeros(cfg.state_dim),
            x_sd=np.ones(cfg.state_dim),
            u_mu=np.zeros(cfg.control_dim),
            u_sd=np.ones(cfg.control_dim),
            delta_scale=np.ones(cfg.state_dim),
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "points_mu": self.points_mu,
            "points_sd": self.points_sd,
            "x_mu": self.x_mu,
            "x_sd": self.x_sd,
            "u_mu": self.u_mu,
            "u_sd": self.u_sd,
            "delta_scale": self.delta_scale,
        }


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator) -> nnet.Params:
    p = cfg.n_points * 3
    c = cfg.conv_channels
    k = cfg.conv_kernel
    params: nnet.Params = {
        "embed_w": nnet.fan_in_uniform(rng, (p, cfg.embed_dim), cfg.init_scale),
        "embed_b": np.zeros(cfg.embed_dim),
        "proj_w": nnet.fan_in_uniform(rng, (c, cfg.latent_dim), cfg.init_scale),
        "proj_b": np.zeros(cfg.latent_dim),
    }
    c_in = cfg.embed_dim
    for i, _dil in enumerate(cfg.conv_dilations):
        params[f"conv{i}_w"] = nnet.fan_in_uniform(rng, (k * c_in, c), cfg.init_scale)
        params[f"conv{i}_b"] = np.zeros(c)
        c_in = c
    return params


def init_dynamics_params(cfg: ModelConfig, rng: np.random.Generator) -> nnet.Params:
    d_in = cfg.state_dim + cfg.latent_dim + cfg.control_dim
    h = cfg.hidden_dim
    return {
        "w1": nnet.fan_in_uniform(rng, (d_in, h), cfg.init_scale),
        "b1": np.zeros(h),
        "w2": nnet.fan_in_uniform(rng, (h, h), cfg.init_scale),
        "b2": np.zeros(h),
        "w3": nnet.fan_in_uniform(rng, (h, cfg.state_dim), cfg.init_scale),
        "b3": np.zeros(cfg.state_dim),
    }


class LatentDynamicsModel:
    """Encoder + residual dynamics with shared normalization stats."""

    def __init__(
        self,
        cfg: ModelConfig,
        enc_params: nnet.Params,
        dyn_params: nnet.Params,
        norm: NormStats,
    ):
        self.cfg = cfg
        self.enc_params = enc_params
        self.dyn_params = dyn_params
        self.norm = norm

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int, norm: NormStats | None = None) -> "LatentDynamicsModel":
        rng = np.random.default_rng([seed, 0x5EED])
        return cls(
            cfg,
            init_encoder_params(cfg, rng),
            init_dynamics_params(cfg, rng),
            norm or NormStats.identity(cfg),
        )

    # -- encoder ---------------------------------------------------------------

    def _normalize_windows(self, windows: np.ndarray) -> np.ndarray:
        return (windows - self.norm.points_mu) / self.norm.points_sd

    def encoder_forward(self, windows_norm: np.ndarray):
        """windows_norm: (B, T, n_points*3) already standardized; returns (z, cache)."""
        p = self.enc_params
        e_pre, e_cache = nnet.linear_forward(windows_norm, p["embed_w"], p["embed_b"])
        h, h_act = nnet.tanh_forward(e_pre)
        conv_caches = []
        for i, dil in enumerate(self.cfg.conv_dilations):
            y, c_cache = nnet.causal_conv_forward(
                h, p[f"conv{i}_w"], p[f"conv{i}_b"], dil, self.cfg.conv_kernel
            )
            h, a_cache = nnet.tanh_forward(y)
            conv_caches.append((c_cache, a_cache))
        pooled = h.mean(axis=1)
        z, proj_cache = nnet.linear_forward(pooled, p["proj_w"], p["proj_b"])
        t_len = h.shape[1]
        return z, (e_cache, h_act, conv_caches, proj_cache, t_len)

    def encoder_backward(self, dz: np.ndarray, cache, grads: nnet.Grads) -> None:
        """Accumulate encoder parameter grads for one forward pass."""
        e_cache, h_act, conv_caches, proj_cache, t_len = cache
        dpooled, dpw, dpb = nnet.linear_backward(dz, proj_cache)
        grads["enc.proj_w"] += dpw
        grads["enc.proj_b"] += dpb
        dh = np.repeat(dpooled[:, None, :] / t_len, t_len, axis=1)
        for i in reversed(range(len(conv_caches))):
            c_cache, a_cache = conv_caches[i]
            dy = nnet.tanh_backward(dh, a_cache)
            dh, dw, db = nnet.causal_conv_backward(dy, c_cache)
            grads[f"enc.conv{i}_w"] += dw
            grads[f"enc.conv{i}_b"] += db
        de_pre = nnet.tanh_backward(dh, h_act)
        _, dew, deb = nnet.linear_backward(de_pre, e_cache, need_dx=False)
        grads["enc.embed_w"] += dew
        grads["enc.embed_b"] += deb

    def encode(self, window: np.ndarray) -> np.ndarray:
        """Latent state for one window of raw clouds, shape (T, n_points*3) or (T, N, 3)."""
        w = np.asarray(window, dtype=float)
        if w.ndim == 3:
            w = w.reshape(w.shape[0], -1)
        expected = self.cfg.window + 1
        if w.shape != (expected, self.cfg.n_points * 3):
            raise ValueError(
                f"window must be ({expected}, {self.cfg.n_points * 3}), got {w.shape}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("window contains non-finite values")
        z, _ = self.encoder_forward(self._normalize_windows(w[None]))
        return z[0]

    # -- dynamics ----------------------------------------------------------------

    def dynamics_forward(self, x: np.ndarray, z: np.ndarray, u: np.ndarray):
        """x (B,6) raw, z (B,dz), u (B,5) raw -> (x_next_hat (B,6) raw, cache)."""
        p = self.dyn_params
        xn = (x - self.norm.x_mu) / self.norm.x_sd
        un = (u - self.norm.u_mu) / self.norm.u_sd
        inp = np.concatenate([xn, z, un], axis=-1)
        y1, c1 = nnet.linear_forward(inp, p["w1"], p["b1"])
        h1, a1 = nnet.tanh_forward(y1)
        y2, c2 = nnet.linear_forward(h1, p["w2"], p["b2"])
        h2, a2 = nnet.tanh_forward(y2)
        res, c3 = nnet.linear_forward(h2, p["w3"], p["b3"])
        xhat = x + res * self.norm.delta_scale
        return xhat, (c1, a1, c2, a2, c3)

    def dynamics_backward(
        self, dxhat: np.ndarray, cache, grads: nnet.Grads | None = None
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (dx, dz, du) in raw units; accumulates param grads if given."""
        c1, a1, c2, a2, c3 = cache
        dres = dxhat * self.norm.delta_scale
        dh2, dw3, db3 = nnet.linear_backward(dres, c3)
        dy2 = nnet.tanh_backward(dh2, a2)
        dh1, dw2, db2 = nnet.linear_backward(dy2, c2)
        dy1 = nnet.tanh_backward(dh1, a1)
        dinp, dw1, db1 = nnet.linear_backward(dy1, c1)
        if grads is not None:
            grads["dyn.w1"] += dw1
            grads["dyn.b1"] += db1
            grads["dyn.w2"] += dw2
            grads["dyn.b2"] += db2
            grads["dyn.w3"] += dw3
            grads["dyn.b3"] += db3
        nx, nz = self.cfg.state_dim, self.cfg.latent_dim
        dx = dxhat + dinp[..., :nx] / self.norm.x_sd
        dz = dinp[..., nx : nx + nz]
        du = dinp[..., nx + nz :] / self.norm.u_sd
        return dx, dz, du

    def predict(self, x: np.ndarray, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        """One-step prediction for single vectors."""
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z)) and np.all(np.isfinite(u))):
            raise ValueError("predict inputs must be finite")
        xhat, _ = self.dynamics_forward(x[None], z[None], u[None])
        return xhat[0]

    # -- training objective ---------------------------------------------------------

    def zero_grads(self) -> nnet.Grads:
        grads: nnet.Grads = {}
        for k, v in self.enc_params.items():
            grads[f"enc.{k}"] = np.zeros_like(v)
        for k, v in self.dyn_params.items():
            grads[f"dyn.{k}"] = np.zeros_like(v)
        return grads

    def loss_and_grad(
        self, batch: dict, beta: float, target_weights: np.ndarray | None = None
    ) -> tuple[float, nnet.Grads, dict]:
        """Mean squared one-step error plus beta * mean latent step size.

        batch keys: strips (B, window+2, n_points*3) raw frame strips covering
        both windows, x (B,6), u (B,5), x_next (B,6). The window at t is
        strips[:, :-1], the window at t+1 is strips[:, 1:].

        target_weights, when given, scales the prediction error per dimension
        before squaring (training uses 1/std of the one-step change so the mm
        and mm/s components contribute comparably); None is the plain
        unweighted objective.
        """
        strips = self._normalize_windows(np.asarray(batch["strips"]))
        x = np.asarray(batch["x"])
        u = np.asarray(batch["u"])
        x_next = np.asarray(batch["x_next"])
        t_len = self.cfg.window + 1
        if strips.shape[1] != t_len + 1:
            raise ValueError(f"strips must hold {t_len + 1} frames, got {strips.shape[1]}")
        bsz = strips.shape[0]

        z_t, cache_t = self.encoder_forward(strips[:, :-1])
        z_n, cache_n = self.encoder_forward(strips[:, 1:])
        xhat, dyn_cache = self.dynamics_forward(x, z_t, u)

        err = xhat - x_next
        if target_weights is not None:
            err = err * target_weights
        dz_step = z_n - z_t
        pred_loss = float(np.sum(err * err) / bsz)
        smooth_loss = float(np.sum(dz_step * dz_step) / bsz)
        loss = pred_loss + beta * smooth_loss

        grads = self.zero_grads()
        dxhat = 2.0 * err / bsz
        if target_weights is not None:
            dxhat = dxhat * target_weights
        _, dz_t, _ = self.dynamics_backward(dxhat, dyn_cache, grads)
        dz_t = dz_t - 2.0 * beta * dz_step / bsz
        dz_n = 2.0 * beta * dz_step / bsz
        self.encoder_backward(dz_t, cache_t, grads)
        self.encoder_backward(dz_n, cache_n, grads)
        return loss, grads, {"pred": pred_loss, "smooth": smooth_loss}

    def all_params(self) -> nnet.Params:
        out: nnet.Params = {}
        for k, v in self.enc_params.items():
            out[f"enc.{k}"] = v
        for k, v in self.dyn_params.items():
            out[f"dyn.{k}"] = v
        return out

    def set_params(self, flat: nnet.Params) -> None:
        for k, v in flat.items():
            scope, name = k.split(".", 1)
            target = self.enc_params if scope == "enc" else self.dyn_params
            target[name] = v

    # -- persistence: single binary blob with a JSON manifest ------------------------

    def save(self, path: str, extra_manifest: dict | None = None) -> None:
        arrays = {f"param.{k}": v for k, v in self.all_params().items()}
        arrays.update({f"norm.{k}": v for k, v in self.norm.to_arrays().items()})
        order = sorted(arrays)
        manifest = {
            "version": PARAMS_VERSION,
            "model_config": {
                "n_points": self.cfg.n_points,
                "window": self.cfg.window,
                "embed_dim": self.cfg.embed_dim,
                "conv_channels": self.cfg.conv_channels,
                "conv_kernel": self.cfg.conv_kernel,
                "conv_dilations": list(self.cfg.conv_dilations),
                "latent_dim": self.cfg.latent_dim,
                "state_dim": self.cfg.state_dim,
                "control_dim": self.cfg.control_dim,
                "hidden_dim": self.cfg.hidden_dim,
                "init_scale": self.cfg.init_scale,
            },
            "arrays": [{"name": k, "shape": list(arrays[k].shape)} for k in order],
        }
        if extra_manifest:
            manifest.update(extra_manifest)
        blob = json.dumps(manifest).encode()
        with open(path, "wb") as fh:
            fh.write(PARAMS_MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for k in order:
                fh.write(np.ascontiguousarray(arrays[k], dtype=np.float64).tobytes())

    @classmethod
    def load(cls, path: str) -> "LatentDynamicsModel":
        with open(path, "rb") as fh:
            if fh.read(4) != PARAMS_MAGIC:
                raise ValueError("not a model params file")
            n = int.from_bytes(fh.read(8), "little")
            manifest = json.loads(fh.read(n).decode())
            if manifest["version"] != PARAMS_VERSION:
                raise ValueError(f"unsupported params version {manifest['version']}")
            mc = manifest["model_config"]
            mc["conv_dilations"] = tuple(mc["conv_dilations"])
            cfg = ModelConfig(**mc)
            arrays = {}
            for spec in manifest["arrays"]:
                shape = tuple(spec["shape"])
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(fh.read(8 * count), dtype=np.float64).reshape(shape)
                arrays[spec["name"]] = data.copy()
        norm = NormStats(**{k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("norm.")})
        model = cls(cfg, {}, {}, norm)
        model.set_params({k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("param.")})
        return model
