"""Conditioned diffusion policy: encoders, denoiser, and training loop.

The policy consumes an observation (scene point cloud + proprioception
history), a contact point, and a post-contact trajectory, fuses them into a
single conditioning vector, and trains a noise-prediction network over
normalized action chunks.  It satisfies the sampler's policy interface
(`horizon`, `action_dim`, `encode`, `predict_eps`, `denormalize`,
`denorm_scale`).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .affordance import Affordance, load_affordance, resample_trajectory, \
    save_affordance
from .geometry import PointCloud, load_point_cloud, save_point_cloud
from .nn import Adam, EncoderConfig, ParameterStore, Tensor, \
    attention_encode, concat, dense_forward, gradients, init_attention, \
    init_dense, load_checkpoint, no_grad, save_checkpoint, \
    sinusoidal_positions


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


# -- observations ----------------------------------------------------------

@dataclass
class ObservationFrame:
    cloud: PointCloud
    proprio: np.ndarray

    def __post_init__(self):
        self.proprio = np.asarray(self.proprio, dtype=np.float64)
        if self.proprio.ndim != 1:
            raise ValueError("proprioception must be a flat vector")


@dataclass
class Observation:
    """Fixed-length history of (cloud, proprioception) frames."""

    frames: tuple

    def __post_init__(self):
        self.frames = tuple(self.frames)
        if not self.frames:
            raise ValueError("observation needs at least one frame")

    @property
    def latest(self) -> ObservationFrame:
        return self.frames[-1]

    def proprio_history(self) -> np.ndarray:
        return np.concatenate([f.proprio for f in self.frames])


@dataclass
class ConditioningFeature:
    scene: np.ndarray
    proprio: np.ndarray
    affordance: np.ndarray
    fused: np.ndarray


# -- action normalization ---------------------------------------------------

@dataclass
class NormalizationStats:
    """Per-dimension min/max with an affine map onto [-1, 1].

    Dimensions with max == min are degenerate: they normalize to 0 and
    denormalize back to the constant, and their slope is 0.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("stats must be matching flat vectors")
        if not (np.isfinite(self.lo).all() and np.isfinite(self.hi).all()):
            raise ValueError("non-finite normalization statistics")
        if np.any(self.hi < self.lo):
            raise ValueError("max below min in normalization statistics")
        self.degenerate = self.hi - self.lo <= 0.0

    @classmethod
    def from_actions(cls, actions: np.ndarray) -> "NormalizationStats":
        actions = np.asarray(actions, dtype=np.float64).reshape(
            -1, np.asarray(actions).shape[-1])
        return cls(actions.min(axis=0), actions.max(axis=0))

    @property
    def scale(self) -> np.ndarray:
        """Slope of denormalization, d(action)/d(normalized)."""
        return np.where(self.degenerate, 0.0, (self.hi - self.lo) / 2.0)


def normalize_actions(stats: NormalizationStats, actions) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.float64)
    span = np.where(stats.degenerate, 1.0, stats.hi - stats.lo)
    out = 2.0 * (actions - stats.lo) / span - 1.0
    return np.where(stats.degenerate, 0.0, out)


def denormalize_actions(stats: NormalizationStats, normalized) -> np.ndarray:
    normalized = np.asarray(normalized, dtype=np.float64)
    return stats.lo + (normalized + 1.0) * (stats.hi - stats.lo) / 2.0


# -- demo episodes -----------------------------------------------------------

@dataclass
class DemoEpisode:
    """One expert rollout: per-frame records plus the episode affordance."""

    task: str
    object_id: str
    seed: int
    noise_level: str
    proprio: np.ndarray        # (F, p)
    actions: np.ndarray        # (F, n)
    clouds: list               # F PointClouds (consecutive frames may share)
    affordance: Affordance

    def __post_init__(self):
        self.proprio = np.asarray(self.proprio, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        frames = len(self.clouds)
        if self.proprio.shape[0] != frames or \
                self.actions.shape[0] != frames:
            raise ValueError("per-frame records disagree on frame count")
        if frames == 0:
            raise ValueError("empty episode")

    def __len__(self) -> int:
        return len(self.clouds)


def save_episode(path, episode: DemoEpisode) -> None:
    """Episode directory: demo.txt, affordance.txt, cloud_*.pc files.

    Consecutive frames whose clouds are identical share one cloud file.
    """
    os.makedirs(path, exist_ok=True)
    names = []
    previous = None
    for i, cloud in enumerate(episode.clouds):
        if previous is not None and \
                np.array_equal(cloud.points, previous.points):
            names.append(names[-1])
            continue
        name = f"cloud_{i:04d}.pc"
        save_point_cloud(os.path.join(path, name), cloud)
        names.append(name)
        previous = cloud
    with open(os.path.join(path, "demo.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"demo {episode.task} {episode.object_id} "
                 f"{episode.seed} {episode.noise_level}\n")
        fh.write(f"frames {len(episode)} {episode.proprio.shape[1]} "
                 f"{episode.actions.shape[1]}\n")
        for i in range(len(episode)):
            fh.write("p " + " ".join("%.17g" % v
                                     for v in episode.proprio[i]) + "\n")
            fh.write("a " + " ".join("%.17g" % v
                                     for v in episode.actions[i]) + "\n")
            fh.write("c " + names[i] + "\n")
    save_affordance(os.path.join(path, "affordance.txt"),
                    episode.affordance)


def load_episode(path) -> DemoEpisode:
    with open(os.path.join(path, "demo.txt"), "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("demo "):
        raise ValueError(f"not an episode file: {path}")
    _, task, object_id, seed, noise_level = lines[0].split(" ", 4)
    counts = lines[1].split()
    frames, p_dim, a_dim = int(counts[1]), int(counts[2]), int(counts[3])
    proprio = np.zeros((frames, p_dim))
    actions = np.zeros((frames, a_dim))
    clouds = []
    cache = {}
    row = 2
    for i in range(frames):
        proprio[i] = [float(v) for v in lines[row].split()[1:]]
        actions[i] = [float(v) for v in lines[row + 1].split()[1:]]
        name = lines[row + 2].split(" ", 1)[1]
        if name not in cache:
            cache[name] = load_point_cloud(os.path.join(path, name))
        clouds.append(cache[name])
        row += 3
    affordance = load_affordance(os.path.join(path, "affordance.txt"))
    return DemoEpisode(task, object_id, int(seed), noise_level,
                       proprio, actions, clouds, affordance)


# -- configuration -----------------------------------------------------------

@dataclass
class PolicyConfig:
    horizon: int = 8
    obs_steps: int = 2
    action_dim: int = 4
    proprio_dim: int = 4
    num_points: int = 512
    traj_points: int = 32
    cond_dim: int = 256
    time_dim: int = 64
    hidden_dim: int = 256
    encoder_dim: int = 64
    model_dim: int = 64
    heads: int = 4
    attn_layers: int = 4
    train_steps: int = 500
    variant: str = "full"      # "full" or "contact": trajectory branch toggle

    def __post_init__(self):
        if self.variant not in ("full", "contact"):
            raise ValueError(f"unknown conditioning variant "
                             f"'{self.variant}'")
        for name in ("horizon", "obs_steps", "action_dim", "proprio_dim",
                     "num_points", "traj_points", "cond_dim", "time_dim",
                     "hidden_dim", "encoder_dim", "train_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def attention(self) -> EncoderConfig:
        return EncoderConfig(model_dim=self.model_dim, heads=self.heads,
                             layers=self.attn_layers)


# -- dataset ------------------------------------------------------------------

@dataclass
class DemoDataset:
    """Sliding-window training samples packed into flat arrays.

    Normalization statistics are computed from exactly the episodes this
    dataset was built from; evaluation episodes never pass through here.
    """

    clouds: np.ndarray       # (S, P, 3) latest-frame scene points
    proprios: np.ndarray     # (S, obs_steps * p)
    chunks: np.ndarray       # (S, H, n) raw actions
    contacts: np.ndarray     # (S, 3)
    trajectories: np.ndarray  # (S, N, 3)
    stats: NormalizationStats
    index: list = field(default_factory=list)   # (episode, frame) per sample

    def __len__(self) -> int:
        return self.chunks.shape[0]

    @classmethod
    def from_episodes(cls, episodes, config: PolicyConfig) -> "DemoDataset":
        if not episodes:
            raise ValueError("empty demonstration set")
        clouds, proprios, chunks, contacts, trajs, index = \
            [], [], [], [], [], []
        for e, ep in enumerate(episodes):
            frames = len(ep)
            resampled = resample_trajectory(ep.affordance.trajectory,
                                            config.traj_points)
            for t in range(frames):
                obs_rows = [ep.proprio[max(0, t - i)]
                            for i in range(config.obs_steps - 1, -1, -1)]
                rows = [ep.actions[min(frames - 1, t + h)]
                        for h in range(config.horizon)]
                pts = ep.clouds[t].points
                if pts.shape[0] != config.num_points:
                    raise ValueError(
                        f"episode cloud has {pts.shape[0]} points, "
                        f"config expects {config.num_points}")
                clouds.append(pts)
                proprios.append(np.concatenate(obs_rows))
                chunks.append(np.stack(rows))
                contacts.append(ep.affordance.contact)
                trajs.append(resampled)
                index.append((e, t))
        chunks = np.stack(chunks)
        return cls(np.stack(clouds), np.stack(proprios), chunks,
                   np.stack(contacts), np.stack(trajs),
                   NormalizationStats.from_actions(chunks), index)

    def sample_tuple(self, episodes, i: int, config: PolicyConfig):
        """Reconstruct the i-th sample as (Observation, chunk, Affordance)."""
        e, t = self.index[i]
        ep = episodes[e]
        frames = [ObservationFrame(ep.clouds[max(0, t - j)],
                                   ep.proprio[max(0, t - j)])
                  for j in range(config.obs_steps - 1, -1, -1)]
        return Observation(frames), self.chunks[i], ep.affordance


# -- policy --------------------------------------------------------------------

class Policy:
    """Conditioned noise-prediction network over normalized action chunks."""

    def __init__(self, config: PolicyConfig, stats: NormalizationStats,
                 seed: int = 0, store: ParameterStore | None = None):
        if stats.lo.shape[0] != config.action_dim:
            raise ValueError("normalization statistics do not match "
                             "action dimension")
        self.config = config
        self.stats = stats
        self.store = store if store is not None else \
            self._init_store(config, seed)
        self._time_table = sinusoidal_positions(config.train_steps + 1,
                                                config.time_dim)

    @staticmethod
    def _init_store(config: PolicyConfig, seed: int) -> ParameterStore:
        store = ParameterStore(seed=seed)
        e = config.encoder_dim
        init_dense(store, "point1", 3, e)
        init_dense(store, "point2", e, e)
        init_dense(store, "prop1", config.obs_steps * config.proprio_dim, e)
        init_dense(store, "prop2", e, e)
        init_dense(store, "contact1", 3, e)
        init_dense(store, "contact2", e, e)
        fuse_in = 3 * e
        if config.variant == "full":
            init_attention(store, config.attention, "traj", 3)
            fuse_in += config.model_dim
        init_dense(store, "fuse", fuse_in, config.cond_dim)
        h = config.hidden_dim
        flat = config.horizon * config.action_dim
        init_dense(store, "den_in", flat + config.time_dim + config.cond_dim,
                   h)
        init_dense(store, "den_b1a", h, h)
        init_dense(store, "den_b1b", h, h)
        init_dense(store, "den_b2a", h, h)
        init_dense(store, "den_b2b", h, h)
        init_dense(store, "den_out", h, flat)
        return store

    # -- sampler interface ----------------------------------------------

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    @property
    def denorm_scale(self) -> np.ndarray:
        return self.stats.scale

    def normalize(self, actions) -> np.ndarray:
        return normalize_actions(self.stats, actions)

    def denormalize(self, normalized) -> np.ndarray:
        return denormalize_actions(self.stats, normalized)

    # -- encoders ---------------------------------------------------------

    def _encode_graph(self, clouds, proprios, contacts, trajectories):
        """Batched conditioning graph; inputs are numpy, output Tensors."""
        cfg = self.config
        h = dense_forward(self.store, "point1", Tensor(clouds), "gelu")
        f_scene = dense_forward(self.store, "point2", h).max(axis=1)
        f_prop = dense_forward(
            self.store, "prop2",
            dense_forward(self.store, "prop1", Tensor(proprios), "gelu"))
        f_contact = dense_forward(
            self.store, "contact2",
            dense_forward(self.store, "contact1", Tensor(contacts), "gelu"))
        if cfg.variant == "full":
            f_traj = attention_encode(cfg.attention, self.store,
                                      Tensor(trajectories), prefix="traj")
            f_afford = concat([f_contact, f_traj], axis=-1)
        else:
            f_afford = f_contact
        fused = dense_forward(
            self.store, "fuse",
            concat([f_scene, f_prop, f_afford], axis=-1))
        return f_scene, f_prop, f_afford, fused

    def _check_observation(self, obs: Observation) -> None:
        cfg = self.config
        if len(obs.frames) != cfg.obs_steps:
            raise ValueError(f"observation history length "
                             f"{len(obs.frames)} != {cfg.obs_steps}")
        for frame in obs.frames:
            if frame.cloud.points.shape[0] != cfg.num_points:
                raise ValueError(
                    f"scene cloud has {frame.cloud.points.shape[0]} "
                    f"points, expected {cfg.num_points}")
            if frame.proprio.shape[0] != cfg.proprio_dim:
                raise ValueError("proprioception dimension mismatch")

    def encode_conditions(self, obs: Observation,
                          affordance: Affordance) -> ConditioningFeature:
        self._check_observation(obs)
        traj = resample_trajectory(affordance.trajectory,
                                   self.config.traj_points)
        with no_grad():
            f_scene, f_prop, f_afford, fused = self._encode_graph(
                obs.latest.cloud.points[None],
                obs.proprio_history()[None],
                np.asarray(affordance.contact, dtype=np.float64)[None],
                traj[None])
        return ConditioningFeature(f_scene.data[0], f_prop.data[0],
                                   f_afford.data[0], fused.data[0])

    def encode(self, obs: Observation, affordance: Affordance) -> np.ndarray:
        return self.encode_conditions(obs, affordance).fused

    # -- denoiser ----------------------------------------------------------

    def _noise_graph(self, a, t_ids, cond):
        """a: Tensor/array (B, H, n); t_ids: (B,) ints; cond: Tensor (B, c)."""
        cfg = self.config
        batch = a.shape[0]
        flat = cfg.horizon * cfg.action_dim
        a = a if isinstance(a, Tensor) else Tensor(a)
        x = concat([a.reshape((batch, flat)),
                    Tensor(self._time_table[np.asarray(t_ids, dtype=int)]),
                    cond], axis=-1)
        h = dense_forward(self.store, "den_in", x, "gelu")
        h = h + dense_forward(
            self.store, "den_b1b",
            dense_forward(self.store, "den_b1a", h, "gelu"))
        h = h + dense_forward(
            self.store, "den_b2b",
            dense_forward(self.store, "den_b2a", h, "gelu"))
        out = dense_forward(self.store, "den_out", h)
        return out.reshape((batch, cfg.horizon, cfg.action_dim))

    def predict_noise(self, a_k, k: int, cond) -> np.ndarray:
        cfg = self.config
        if not 0 <= int(k) <= cfg.train_steps:
            raise ValueError(f"timestep {k} outside schedule range "
                             f"[0, {cfg.train_steps}]")
        a_k = np.asarray(a_k, dtype=np.float64)
        if a_k.shape != (cfg.horizon, cfg.action_dim):
            raise ValueError("action chunk shape mismatch")
        cond = np.asarray(cond, dtype=np.float64)
        with no_grad():
            out = self._noise_graph(a_k[None], np.array([int(k)]),
                                    Tensor(cond[None]))
        return out.data[0]

    predict_eps = predict_noise

    # -- training -----------------------------------------------------------

    def train(self, dataset: DemoDataset, schedule, epochs: int,
              batch: int, seed: int, lr: float = 1e-4,
              weight_decay: float = 1e-6, predict_override=None) -> list:
        """Behavior cloning: match the injected noise at random timesteps.

        One epoch = one optimizer step on a batch resampled with
        replacement; returns the per-epoch loss curve.  `predict_override`
        replaces the network (no parameter updates) so the loss path can be
        checked against an oracle.
        """
        cfg = self.config
        if schedule.train_steps != cfg.train_steps:
            raise ValueError("schedule train steps disagree with policy")
        if len(dataset) == 0:
            raise ValueError("empty demonstration set")
        rng = np.random.default_rng(seed)
        optimizer = Adam(self.store, lr=lr, weight_decay=weight_decay)
        chunks_norm = self.normalize(dataset.chunks)
        losses = []
        for step in range(epochs):
            idx = rng.integers(0, len(dataset), size=batch)
            k = rng.integers(1, cfg.train_steps + 1, size=batch)
            eps = rng.standard_normal((batch, cfg.horizon, cfg.action_dim))
            ab = schedule.alpha_bar[k][:, None, None]
            a_k = np.sqrt(ab) * chunks_norm[idx] + np.sqrt(1.0 - ab) * eps
            if predict_override is not None:
                pred = predict_override(a_k, k, eps)
                loss_value = float(np.mean((eps - pred) ** 2))
                losses.append(loss_value)
                continue
            _, _, _, cond = self._encode_graph(
                dataset.clouds[idx], dataset.proprios[idx],
                dataset.contacts[idx], dataset.trajectories[idx])
            pred = self._noise_graph(a_k, k, cond)
            loss = ((pred - Tensor(eps)) ** 2).mean()
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_value} at step {step}")
            self.store.zero_grad()
            loss.backward()
            optimizer.step(gradients(self.store))
            losses.append(loss_value)
        return losses

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        cfg = self.config
        meta = {name: str(getattr(cfg, name)) for name in (
            "horizon", "obs_steps", "action_dim", "proprio_dim",
            "num_points", "traj_points", "cond_dim", "time_dim",
            "hidden_dim", "encoder_dim", "model_dim", "heads",
            "attn_layers", "train_steps", "variant")}
        meta["stats_lo"] = ",".join("%.17g" % v for v in self.stats.lo)
        meta["stats_hi"] = ",".join("%.17g" % v for v in self.stats.hi)
        save_checkpoint(self.store, path, meta)

    @classmethod
    def load(cls, path) -> "Policy":
        store, meta = load_checkpoint(path)
        kwargs = {name: int(meta[name]) for name in (
            "horizon", "obs_steps", "action_dim", "proprio_dim",
            "num_points", "traj_points", "cond_dim", "time_dim",
            "hidden_dim", "encoder_dim", "model_dim", "heads",
            "attn_layers", "train_steps")}
        config = PolicyConfig(variant=meta["variant"], **kwargs)
        stats = NormalizationStats(
            np.array([float(v) for v in meta["stats_lo"].split(",")]),
            np.array([float(v) for v in meta["stats_hi"].split(",")]))
        return cls(config, stats, store=store)
