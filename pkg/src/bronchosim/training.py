"""End-to-end training of the latent dynamics model.

Minibatch Adam over the prediction + latent-smoothness objective, with
normalization stats computed on the train split and frozen into the model.
Shuffle order is fully seeded, so loss histories are bit-identical across
runs with the same seed. A constant-velocity extrapolation (p + v*dt, v
held) serves as the skill baseline.
"""

from __future__ import annotations

import copy

import numpy as np

from . import nnet
from .config import CONTROL_DT, ModelConfig, TrainConfig
from .dataset import TransitionDataset
from .model import LatentDynamicsModel, NormStats


def compute_norm_stats(dataset: TransitionDataset, cfg: ModelConfig) -> NormStats:
    """Per-dimension mean/std over the train split; stds floored at 1e-6."""
    frames = []
    xs = []
    us = []
    deltas = []
    for ep in dataset.split_episodes("train"):
        frames.append(ep.frames)
        xs.append(ep.x)
        us.append(ep.u)
        deltas.append(np.diff(ep.x, axis=0))
    if not frames:
        raise ValueError("train split is empty")
    frames = np.concatenate(frames)
    xs = np.concatenate(xs)
    us = np.concatenate(us)
    deltas = np.concatenate(deltas)

    def sd(a):
        return np.maximum(a.std(axis=0), 1e-6)

    return NormStats(
        points_mu=frames.mean(axis=0),
        points_sd=sd(frames),
        x_mu=xs.mean(axis=0),
        x_sd=sd(xs),
        u_mu=us.mean(axis=0),
        u_sd=sd(us),
        delta_scale=sd(deltas),
    )


def heldout_loss(
    model: LatentDynamicsModel,
    dataset: TransitionDataset,
    beta: float,
    target_weights: np.ndarray | None = None,
    batch_size: int = 1024,
) -> float:
    idx = dataset.index("heldout")
    if not idx:
        return float("nan")
    total = 0.0
    for start in range(0, len(idx), batch_size):
        chunk = idx[start : start + batch_size]
        batch = dataset.gather(chunk)
        strips = model._normalize_windows(batch["strips"])
        z_t, _ = model.encoder_forward(strips[:, :-1])
        z_n, _ = model.encoder_forward(strips[:, 1:])
        xhat, _ = model.dynamics_forward(batch["x"], z_t, batch["u"])
        err = xhat - batch["x_next"]
        if target_weights is not None:
            err = err * target_weights
        step = z_n - z_t
        total += float(np.sum(err * err) + beta * np.sum(step * step))
    return total / len(idx)


def _cast_dataset(dataset: TransitionDataset, dtype) -> TransitionDataset:
    eps = [
        type(ep)(
            episode_id=ep.episode_id,
            scenario=ep.scenario,
            policy=ep.policy,
            frames=ep.frames.astype(dtype),
            x=ep.x.astype(dtype),
            u=ep.u.astype(dtype),
        )
        for ep in dataset.episodes
    ]
    out = TransitionDataset(episodes=eps, window=dataset.window)
    out.heldout_episode_ids = set(dataset.heldout_episode_ids)
    return out


def train(
    dataset: TransitionDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    verbose: bool = False,
    dtype=np.float32,
) -> tuple[LatentDynamicsModel, list[dict]]:
    """Returns the trained model (best heldout checkpoint) and its loss history.

    The optimization loop runs in float32 for speed; the returned model is
    cast back to float64. Shuffle order and arithmetic are seeded and fixed,
    so histories are reproducible bit-for-bit on a given machine.
    """
    if dataset.sample_count("train") == 0:
        raise ValueError("cannot train on an empty dataset")
    norm = compute_norm_stats(dataset, model_cfg)
    model = LatentDynamicsModel.initialize(model_cfg, seed=train_cfg.seed, norm=norm)
    if dtype is not np.float64:
        dataset = _cast_dataset(dataset, dtype)
        model.set_params({k: v.astype(dtype) for k, v in model.all_params().items()})
        for k, v in model.norm.to_arrays().items():
            setattr(model.norm, k, v.astype(dtype))
    params = model.all_params()
    opt = nnet.Adam(
        params,
        lr=train_cfg.learning_rate,
        beta1=train_cfg.adam_beta1,
        beta2=train_cfg.adam_beta2,
        eps=train_cfg.adam_eps,
    )

    train_idx = dataset.index("train")
    rng = np.random.default_rng([train_cfg.seed, 0x7EA1])
    history: list[dict] = []
    best_heldout = float("inf")
    best_params = None
    stall = 0
    # balance mm against mm/s in the objective: weight each state dimension
    # by the inverse std of its one-step change on the train split
    weights = (1.0 / model.norm.delta_scale) if train_cfg.target_weighting else None

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), train_cfg.batch_size):
            chunk = [train_idx[i] for i in order[start : start + train_cfg.batch_size]]
            batch = dataset.gather(chunk)
            loss, grads, _ = model.loss_and_grad(batch, train_cfg.beta, target_weights=weights)
            opt.step(params, grads)
            epoch_loss += loss
            n_batches += 1
        held = heldout_loss(model, dataset, train_cfg.beta, target_weights=weights)
        history.append(
            {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1), "heldout_loss": held}
        )
        if verbose:
            print(
                f"epoch {epoch:3d}  train {history[-1]['train_loss']:.6f}  "
                f"heldout {held:.6f}",
                flush=True,
            )
        if np.isfinite(held) and held < best_heldout - 1e-12:
            best_heldout = held
            best_params = copy.deepcopy(params)
            stall = 0
        else:
            stall += 1
            if stall >= train_cfg.patience:
                break
    if best_params is not None:
        model.set_params(best_params)
    if dtype is not np.float64:
        model.set_params({k: v.astype(np.float64) for k, v in model.all_params().items()})
        for k, v in model.norm.to_arrays().items():
            setattr(model.norm, k, v.astype(np.float64))
    return model, history


def evaluate_skill(
    model: LatentDynamicsModel,
    dataset: TransitionDataset,
    split: str = "heldout",
    batch_size: int = 1024,
) -> dict:
    """One-step tip-position MAE for the model vs constant-velocity baseline."""
    idx = dataset.index(split)
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    model_err = 0.0
    baseline_err = 0.0
    displacement = 0.0
    for start in range(0, len(idx), batch_size):
        batch = dataset.gather(idx[start : start + batch_size])
        strips = model._normalize_windows(batch["strips"])
        z_t, _ = model.encoder_forward(strips[:, :-1])
        xhat, _ = model.dynamics_forward(batch["x"], z_t, batch["u"])
        p_next = batch["x_next"][:, :3]
        p_now = batch["x"][:, :3]
        v_now = batch["x"][:, 3:]
        model_err += float(np.linalg.norm(xhat[:, :3] - p_next, axis=1).sum())
        baseline_err += float(
            np.linalg.norm(p_now + v_now * CONTROL_DT - p_next, axis=1).sum()
        )
        displacement += float(np.linalg.norm(p_next - p_now, axis=1).sum())
    n = len(idx)
    return {
        "split": split,
        "samples": n,
        "model_position_mae": model_err / n,
        "baseline_position_mae": baseline_err / n,
        "mean_step_displacement": displacement / n,
        "mae_ratio_vs_baseline": (model_err / n) / max(baseline_err / n, 1e-12),
        "mae_over_displacement": (model_err / n) / max(displacement / n, 1e-12),
    }
