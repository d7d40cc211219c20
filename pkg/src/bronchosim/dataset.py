"""Transition dataset: scripted excitation of the plant, storage, batching.

Collection drives the plant with a cycle of open-loop torque scripts
(straight insertions, stepped bends, s-curves, wall-riding contact runs, and
random torque walks) across both airway scenarios, logging one record per
tick. Tip states use the backbone tip plus finite-difference velocity, the
same measurement path the controller sees at run time.

Stored floats are quantized to 1e-5 so the JSON Lines round trip is exact
and dataset hashes are reproducible.

Transitions pair consecutive ticks within one episode; windows never cross
episode boundaries. A transition at tick t uses the frame strip
[t - window .. t + 1], so valid t ranges over [window, T - 2].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .airway import build_airway
from .config import CONTROL_DT, CollectConfig, PlantConfig, StackConfig
from .model import finite_diff_velocity
from .plant import Plant, add_sensor_noise

DATASET_SCHEMA_VERSION = 1
QUANT_DECIMALS = 5

POLICY_NAMES = ("straight_insert", "bend_steps", "s_curve", "contact_rich", "random_walk")


def _quant(a: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(a, dtype=float), QUANT_DECIMALS)


@dataclass
class EpisodeData:
    episode_id: int
    scenario: str
    policy: str
    frames: np.ndarray   # (T, n_points*3) mm
    x: np.ndarray        # (T, 6) tip position + fd velocity
    u: np.ndarray        # (T, 5) torques applied at each tick

    @property
    def ticks(self) -> int:
        return self.frames.shape[0]


@dataclass
class TransitionDataset:
    episodes: list[EpisodeData]
    window: int
    heldout_episode_ids: set[int] = field(default_factory=set)

    def _valid_ts(self, ep: EpisodeData) -> range:
        return range(self.window, ep.ticks - 1)

    def split_episodes(self, split: str) -> list[EpisodeData]:
        if split == "train":
            return [e for e in self.episodes if e.episode_id not in self.heldout_episode_ids]
        if split == "heldout":
            return [e for e in self.episodes if e.episode_id in self.heldout_episode_ids]
        raise ValueError(f"unknown split {split!r}")

    def index(self, split: str) -> list[tuple[int, int]]:
        ids = []
        for ei, ep in enumerate(self.episodes):
            in_heldout = ep.episode_id in self.heldout_episode_ids
            if (split == "heldout") != in_heldout:
                continue
            ids.extend((ei, t) for t in self._valid_ts(ep))
        return ids

    def sample_count(self, split: str | None = None) -> int:
        if split is None:
            return sum(len(self._valid_ts(ep)) for ep in self.episodes)
        return len(self.index(split))

    def gather(self, indices: list[tuple[int, int]]) -> dict:
        strips = []
        xs = []
        us = []
        x_next = []
        w = self.window
        for ei, t in indices:
            ep = self.episodes[ei]
            strips.append(ep.frames[t - w : t + 2])
            xs.append(ep.x[t])
            us.append(ep.u[t])
            x_next.append(ep.x[t + 1])
        return {
            "strips": np.stack(strips),
            "x": np.stack(xs),
            "u": np.stack(us),
            "x_next": np.stack(x_next),
        }

    def assign_splits(self, heldout_fraction: float, seed: int) -> None:
        rng = np.random.default_rng([seed, 0x5B117])
        ids = [e.episode_id for e in self.episodes]
        k = max(1, int(round(heldout_fraction * len(ids))))
        perm = rng.permutation(len(ids))
        self.heldout_episode_ids = {ids[i] for i in perm[:k]}

    # -- persistence -------------------------------------------------------------

    def save_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({
                "schema_version": DATASET_SCHEMA_VERSION,
                "window": self.window,
                "heldout_episode_ids": sorted(self.heldout_episode_ids),
            }) + "\n")
            for ep in self.episodes:
                for t in range(ep.ticks):
                    rec = {
                        "episode": ep.episode_id,
                        "scenario": ep.scenario,
                        "policy": ep.policy,
                        "t": t,
                        "points": ep.frames[t].tolist(),
                        "x": ep.x[t].tolist(),
                        "u": ep.u[t].tolist(),
                        "x_next": ep.x[t + 1].tolist() if t + 1 < ep.ticks else None,
                    }
                    fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load_jsonl(cls, path: str) -> "TransitionDataset":
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("schema_version") != DATASET_SCHEMA_VERSION:
                raise ValueError(f"unsupported dataset schema {header.get('schema_version')!r}")
            episodes: dict[int, dict] = {}
            for line in fh:
                rec = json.loads(line)
                ep = episodes.setdefault(
                    rec["episode"],
                    {"scenario": rec["scenario"], "policy": rec["policy"],
                     "frames": [], "x": [], "u": []},
                )
                ep["frames"].append(rec["points"])
                ep["x"].append(rec["x"])
                ep["u"].append(rec["u"])
        built = [
            EpisodeData(
                episode_id=eid,
                scenario=d["scenario"],
                policy=d["policy"],
                frames=np.asarray(d["frames"]),
                x=np.asarray(d["x"]),
                u=np.asarray(d["u"]),
            )
            for eid, d in sorted(episodes.items())
        ]
        ds = cls(episodes=built, window=header["window"])
        ds.heldout_episode_ids = set(header["heldout_episode_ids"])
        return ds

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for ep in self.episodes:
            h.update(str(ep.episode_id).encode())
            h.update(ep.frames.tobytes())
            h.update(ep.x.tobytes())
            h.update(ep.u.tobytes())
        return h.hexdigest()


# -- excitation torque scripts ------------------------------------------------------


def _ou_walk(rng, ticks, sigma, theta=2.0, dt=CONTROL_DT, lim=55.0):
    out = np.zeros(ticks)
    v = 0.0
    for t in range(ticks):
        v += -theta * v * dt + sigma * np.sqrt(dt) * rng.normal()
        out[t] = np.clip(v, -lim, lim)
    return out


def _apply_torque_jumps(u, rng, rate=0.02, lim=50.0):
    """Sharp held tendon/insertion steps; the constant-velocity baseline
    cannot anticipate these, the torque-aware model can."""
    t = 0
    ticks = u.shape[0]
    while t < ticks:
        if rng.random() < rate:
            hold = int(rng.integers(8, 40))
            ch = int(rng.integers(0, 3))
            if ch < 2:
                level = rng.uniform(-lim, lim)
                u[t : t + hold, ch] = max(level, 0.0)
                u[t : t + hold, ch + 2] = max(-level, 0.0)
            else:
                u[t : t + hold, 4] = rng.uniform(-45.0, 45.0)
            t += hold
        else:
            t += 1
    return u


def _script_straight_insert(rng, ticks, lim):
    u = np.zeros((ticks, 5))
    t = 0
    sign = 1.0
    while t < ticks:
        seg = int(rng.integers(40, 120))
        u[t : t + seg, 4] = sign * rng.uniform(15.0, 45.0)
        sign = -sign if rng.random() < 0.6 else sign
        t += seg
    for ax in (0, 1):
        u[:, ax] = _ou_walk(rng, ticks, sigma=6.0, lim=10.0)
    return _apply_torque_jumps(u, rng)


def _script_bend_steps(rng, ticks, lim):
    u = np.zeros((ticks, 5))
    u[:, 4] = rng.uniform(5.0, 20.0)
    axis = int(rng.integers(0, 2))
    t = 0
    while t < ticks:
        seg = int(rng.integers(25, 80))
        level = rng.uniform(20.0, lim) * rng.choice([-1.0, 1.0])
        u[t : t + seg, axis] = max(level, 0.0)
        u[t : t + seg, axis + 2] = max(-level, 0.0)
        t += seg
    return _apply_torque_jumps(u, rng)


def _script_s_curve(rng, ticks, lim):
    u = np.zeros((ticks, 5))
    u[:, 4] = rng.uniform(8.0, 28.0)
    tt = np.arange(ticks) * CONTROL_DT
    for axis in (0, 1):
        amp = rng.uniform(12.0, 35.0)
        freq = rng.uniform(0.2, 0.8)
        phase = rng.uniform(0, 2 * np.pi)
        wave = amp * np.sin(2 * np.pi * freq * tt + phase)
        u[:, axis] = np.maximum(wave, 0.0)
        u[:, axis + 2] = np.maximum(-wave, 0.0)
    return _apply_torque_jumps(u, rng)


def _script_contact_rich(rng, ticks, lim):
    u = np.zeros((ticks, 5))
    u[:, 4] = rng.uniform(15.0, 35.0)
    t = 0
    while t < ticks:
        seg = int(rng.integers(60, 150))
        axis = int(rng.integers(0, 2))
        bias = rng.uniform(30.0, lim) * rng.choice([-1.0, 1.0])
        u[t : t + seg, axis] = max(bias, 0.0)
        u[t : t + seg, axis + 2] = max(-bias, 0.0)
        t += seg
    return u


def _script_random_walk(rng, ticks, lim):
    u = np.zeros((ticks, 5))
    for ch, sigma in ((0, 28.0), (1, 28.0), (2, 28.0), (3, 28.0), (4, 26.0)):
        u[:, ch] = _ou_walk(rng, ticks, sigma=sigma, lim=lim)
    # sharp seeded jumps keep the constant-velocity baseline honest
    for t in range(ticks):
        if rng.random() < 0.03:
            ch = int(rng.integers(0, 5))
            u[t:, ch] = rng.uniform(-lim, lim)
    return np.clip(u, -lim, lim)


_SCRIPTS = {
    "straight_insert": _script_straight_insert,
    "bend_steps": _script_bend_steps,
    "s_curve": _script_s_curve,
    "contact_rich": _script_contact_rich,
    "random_walk": _script_random_walk,
}


def run_excitation_episode(
    episode_id: int,
    scenario: str,
    policy: str,
    seed: int,
    ticks: int,
    plant_cfg: PlantConfig,
    noise_sigma: float = 0.0,
) -> EpisodeData:
    rng = np.random.default_rng([seed, episode_id, 0xDA7A])
    # one canonical airway per scenario: contact responses stay learnable
    # instead of depending on geometry the encoder cannot observe
    geo = build_airway(scenario, 0)
    plant = Plant(geo, plant_cfg)
    lim = plant_cfg.torque_limit - 5.0
    script = _SCRIPTS[policy](rng, ticks, lim)

    state = plant.initial_state()
    frames = np.zeros((ticks, plant_cfg.n_backbone_points * 3))
    xs = np.zeros((ticks, 6))
    us = np.zeros((ticks, 5))
    prev_tip = None
    noise_seed = int(rng.integers(0, 2**31)) if noise_sigma > 0 else 0
    centering_gain = 6.0  # N*mm per mm of transverse offset
    lim_t = plant_cfg.torque_limit
    for t in range(ticks):
        cloud = plant.reconstruct_backbone(state, timestamp=t * CONTROL_DT)
        if noise_sigma > 0:
            cloud = add_sensor_noise(cloud, noise_sigma, noise_seed + t)
        tip = cloud.points[-1]
        vel = np.zeros(3) if prev_tip is None else finite_diff_velocity(tip, prev_tip, CONTROL_DT)
        # weak centering assist on top of the excitation script, like the
        # operator-held steering the training runs were collected under;
        # keeps episodes from degenerating into continuous wall dragging
        center, _ = geo.local_center(state.tip_position[2])
        offset = state.tip_position[:2] - center
        assist = np.clip(-centering_gain * offset, -18.0, 18.0)
        u = script[t].copy()
        u[0] += max(assist[0], 0.0)
        u[2] += max(-assist[0], 0.0)
        u[1] += max(assist[1], 0.0)
        u[3] += max(-assist[1], 0.0)
        u = np.clip(u, -lim_t, lim_t)
        frames[t] = cloud.points.ravel()
        xs[t] = np.concatenate([tip, vel])
        us[t] = u
        state, _ = plant.step(state, u, CONTROL_DT)
        prev_tip = tip

    return EpisodeData(
        episode_id=episode_id,
        scenario=scenario,
        policy=policy,
        frames=_quant(frames),
        x=_quant(xs),
        u=_quant(us),
    )


def collect_dataset(cfg: StackConfig | None = None, episodes: int | None = None, seed: int | None = None) -> TransitionDataset:
    """Run the scripted excitation campaign; deterministic per seed."""
    cfg = cfg or StackConfig()
    cc: CollectConfig = cfg.collect
    n_episodes = cc.episodes if episodes is None else episodes
    master_seed = cc.seed if seed is None else seed
    if n_episodes < 0:
        raise ValueError("episodes must be >= 0")

    scenarios = (
        ["standard", "constrained"] if cc.scenario == "mixed" else [cc.scenario]
    )
    out: list[EpisodeData] = []
    for i in range(n_episodes):
        policy = POLICY_NAMES[i % len(POLICY_NAMES)]
        scenario = scenarios[(i // len(POLICY_NAMES)) % len(scenarios)]
        out.append(
            run_excitation_episode(
                episode_id=i,
                scenario=scenario,
                policy=policy,
                seed=master_seed,
                ticks=cc.ticks_per_episode,
                plant_cfg=cfg.plant,
                noise_sigma=cc.backbone_noise_sigma,
            )
        )
    ds = TransitionDataset(episodes=out, window=cfg.model.window)
    if out:
        ds.assign_splits(cfg.train.heldout_fraction, master_seed)
    return ds
