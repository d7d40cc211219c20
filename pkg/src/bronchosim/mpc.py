"""Receding-horizon control over the learned tip dynamics.

Each tick solves a finite-horizon tracking problem by projected-gradient
shooting: roll the learned model forward over the horizon with the latent
state frozen at its current value, backpropagate the quadratic tracking
cost through the dynamics (exact reverse accumulation, shared with
training), take a backtracking gradient step on the torque sequence, and
project onto the torque box after every step, so every iterate is feasible.
State bounds are soft quadratic penalties; accepted iterates never increase
the cost. The first input of the solution is executed and the shifted
sequence warm-starts the next solve.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import MPCConfig
from .model import LatentDynamicsModel


@dataclass
class Weights:
    q: np.ndarray  # (6,) stage state weights (diagonal)
    r: np.ndarray  # (nu,) stage input weights (diagonal)
    p: np.ndarray  # (6,) terminal state weights (diagonal)

    @classmethod
    def from_config(cls, cfg: MPCConfig, control_dim: int = 5) -> "Weights":
        q = np.array([cfg.q_position] * 3 + [cfg.q_velocity] * 3)
        return cls(q=q, r=np.full(control_dim, cfg.r_control), p=cfg.terminal_scale * q)


@dataclass
class ReferenceTrajectory:
    x_ref: np.ndarray  # (M+1, 6)
    u_ref: np.ndarray  # (M, nu)

    def __post_init__(self):
        if self.x_ref.shape[0] != self.u_ref.shape[0] + 1:
            raise ValueError("x_ref must hold one more step than u_ref")

    @classmethod
    def hold(cls, x: np.ndarray, horizon: int, control_dim: int = 5) -> "ReferenceTrajectory":
        return cls(x_ref=np.tile(x, (horizon + 1, 1)), u_ref=np.zeros((horizon, control_dim)))

    @classmethod
    def from_velocity_intent(
        cls, x: np.ndarray, velocity: np.ndarray, dt: float, horizon: int, control_dim: int = 5
    ) -> "ReferenceTrajectory":
        """Track the operator's Cartesian intent: p advances by v*dt each step."""
        x_ref = np.tile(x, (horizon + 1, 1))
        for i in range(horizon + 1):
            x_ref[i, :3] = x[:3] + velocity * dt * i
            x_ref[i, 3:] = velocity
        return cls(x_ref=x_ref, u_ref=np.zeros((horizon, control_dim)))


@dataclass
class OCPSolution:
    u_seq: np.ndarray         # (M, nu), feasible w.r.t. the torque box
    states: np.ndarray        # (M+1, 6) rollout under u_seq
    cost: float
    iterations: int
    solve_time_ms: float
    state_penalty: float      # soft state-bound violation contribution
    converged: bool


def rollout(model: LatentDynamicsModel, x0: np.ndarray, z: np.ndarray, u_seq: np.ndarray):
    """Iterate the learned one-step model; z is frozen over the horizon."""
    m = u_seq.shape[0]
    states = np.zeros((m + 1, x0.shape[0]))
    states[0] = x0
    caches = []
    x = x0[None]
    zb = z[None]
    for i in range(m):
        x, cache = model.dynamics_forward(x, zb, u_seq[i][None])
        states[i + 1] = x[0]
        caches.append(cache)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("rollout diverged to non-finite state")
    return states, caches


def trajectory_cost(
    states: np.ndarray,
    u_seq: np.ndarray,
    ref: ReferenceTrajectory,
    w: Weights,
    cfg: MPCConfig,
) -> tuple[float, float]:
    """Quadratic tracking cost plus soft state-bound penalty."""
    if states.shape[0] != ref.x_ref.shape[0] or u_seq.shape[0] != ref.u_ref.shape[0]:
        raise ValueError("states/inputs do not match the reference horizon")
    dx = states - ref.x_ref
    du = u_seq - ref.u_ref
    stage = float(np.sum((dx[:-1] ** 2) @ w.q) + np.sum((du**2) @ w.r))
    terminal = float((dx[-1] ** 2) @ w.p)
    bounds = np.array([cfg.position_bound] * 3 + [cfg.velocity_bound] * 3)
    over = np.maximum(np.abs(states) - bounds, 0.0)
    penalty = float(cfg.state_penalty * np.sum(over**2))
    return stage + terminal + penalty, penalty


def _cost_gradient(
    model: LatentDynamicsModel,
    states: np.ndarray,
    caches: list,
    u_seq: np.ndarray,
    ref: ReferenceTrajectory,
    w: Weights,
    cfg: MPCConfig,
) -> np.ndarray:
    """dJ/du_seq by adjoint recursion through the learned dynamics."""
    m = u_seq.shape[0]
    bounds = np.array([cfg.position_bound] * 3 + [cfg.velocity_bound] * 3)

    def soft_grad(x):
        over = np.abs(x) - bounds
        return np.where(over > 0.0, 2.0 * cfg.state_penalty * np.sign(x) * over, 0.0)

    grad_u = np.zeros_like(u_seq)
    lam = 2.0 * w.p * (states[m] - ref.x_ref[m]) + soft_grad(states[m])
    for i in reversed(range(m)):
        dx, _, du = model.dynamics_backward(lam[None], caches[i])
        grad_u[i] = du[0] + 2.0 * w.r * (u_seq[i] - ref.u_ref[i])
        lam = dx[0]
        lam = lam + 2.0 * w.q * (states[i] - ref.x_ref[i]) + soft_grad(states[i])
    if not np.all(np.isfinite(grad_u)):
        raise FloatingPointError("non-finite gradient in the trajectory solver")
    return grad_u


def solve_ocp(
    model: LatentDynamicsModel,
    x0: np.ndarray,
    z: np.ndarray,
    ref: ReferenceTrajectory,
    cfg: MPCConfig,
    warm_start: np.ndarray | None = None,
    weights: Weights | None = None,
) -> OCPSolution:
    """Projected-gradient shooting; every iterate stays inside the torque box.

    With a warm start the descent runs once from it; cold solves descend from
    a small fixed set of starting sequences and keep the best, which guards
    against poor local minima of the nonconvex shooting landscape.
    """
    t_start = time.perf_counter()
    w = weights or Weights.from_config(cfg, model.cfg.control_dim)
    m = cfg.horizon
    nu = model.cfg.control_dim
    if warm_start is not None and warm_start.shape == (m, nu):
        starts = [np.clip(warm_start.copy(), -cfg.control_bound, cfg.control_bound)]
    else:
        half = 0.5 * cfg.control_bound
        starts = [
            np.zeros((m, nu)),
            np.full((m, nu), half),
            np.full((m, nu), -half),
        ]
    best: OCPSolution | None = None
    for u0 in starts:
        sol = _descend(model, x0, z, ref, cfg, w, u0)
        if best is None or sol.cost < best.cost:
            best = sol
    return OCPSolution(
        u_seq=best.u_seq,
        states=best.states,
        cost=best.cost,
        iterations=best.iterations,
        solve_time_ms=(time.perf_counter() - t_start) * 1e3,
        state_penalty=best.state_penalty,
        converged=best.converged,
    )


def _descend(
    model: LatentDynamicsModel,
    x0: np.ndarray,
    z: np.ndarray,
    ref: ReferenceTrajectory,
    cfg: MPCConfig,
    w: Weights,
    u: np.ndarray,
) -> OCPSolution:
    states, caches = rollout(model, x0, z, u)
    cost, _ = trajectory_cost(states, u, ref, w, cfg)
    step = cfg.step_size
    iters = 0
    converged = False
    for _ in range(cfg.max_iters):
        iters += 1
        grad = _cost_gradient(model, states, caches, u, ref, w, cfg)
        improved = False
        for _ in range(cfg.max_backtracks):
            cand = np.clip(u - step * grad, -cfg.control_bound, cfg.control_bound)
            cand_states, cand_caches = rollout(model, x0, z, cand)
            cand_cost, _ = trajectory_cost(cand_states, cand, ref, w, cfg)
            if cand_cost < cost:
                rel_drop = (cost - cand_cost) / max(cost, 1e-12)
                u, states, caches, cost = cand, cand_states, cand_caches, cand_cost
                step *= 1.5
                improved = True
                if rel_drop < cfg.tol:
                    converged = True
                break
            step *= cfg.backtrack
        if not improved or converged:
            converged = converged or not improved
            break

    _, penalty = trajectory_cost(states, u, ref, w, cfg)
    return OCPSolution(
        u_seq=u,
        states=states,
        cost=cost,
        iterations=iters,
        solve_time_ms=0.0,
        state_penalty=penalty,
        converged=converged,
    )


@dataclass
class RecedingHorizonController:
    """Owns the warm start; one instance per control loop."""

    model: LatentDynamicsModel
    cfg: MPCConfig
    weights: Weights = None
    _warm: np.ndarray | None = field(default=None, repr=False)
    _last_u: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.weights is None:
            self.weights = Weights.from_config(self.cfg, self.model.cfg.control_dim)

    def reset(self) -> None:
        self._warm = None
        self._last_u = None

    def step(self, x: np.ndarray, z: np.ndarray, ref: ReferenceTrajectory) -> tuple[np.ndarray, OCPSolution]:
        """Solve, execute the first input, shift the rest as the next warm start."""
        warm = self._warm if self.cfg.warm_start else None
        sol = solve_ocp(self.model, x, z, ref, self.cfg, warm_start=warm, weights=self.weights)
        if (
            self.cfg.solve_budget_ms is not None
            and sol.solve_time_ms > self.cfg.solve_budget_ms
            and self._last_u is not None
        ):
            # degraded mode (live serving only): reapply the previous input
            return self._last_u.copy(), sol
        u0 = sol.u_seq[0].copy()
        self._warm = np.vstack([sol.u_seq[1:], sol.u_seq[-1:]])
        self._last_u = u0
        return u0, sol
