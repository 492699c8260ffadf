"""Command-line pipeline: collect demos, train policies, evaluate, ablate,
and export plot data.

All commands read one flat key-value config file (``key value`` per line,
``#`` comments, ``include <relpath>`` merges another file in place).  Every
output file embeds the hash of the fully resolved config plus the seeds in
play, and no output contains timestamps or absolute paths, so re-running a
command with the same config reproduces byte-identical result tables.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""

import argparse
import dataclasses
import hashlib
import math
import sys
from collections import deque
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .affordance import (AffordanceMemory, MemoryEntry, TransferConfig,
                         TransferError, load_memory, pooled_appearance,
                         save_memory, transfer)
from .descriptor import SyntheticDescriptor
from .env import (NOISE_LEVELS, EnvConfig, Environment, evaluate,
                  generate_object, scripted_expert)
from .nn import PoisonedUpdateError
from .policy import (DemoDataset, Observation, Policy, PolicyConfig,
                     TrainingDivergedError, load_episode, save_episode)
from .sampler import (GuidanceConfig, NoiseSchedule, cosine_schedule,
                      sample)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# CLI guidance names map onto sampler modes.
GUIDANCE_MODES = {"none": "none", "loss": "loss_guided",
                  "spherical": "spherical"}
SPLITS = ("seen", "unseen_instance", "unseen_category", "spatial")
ABLATION_SPLITS = ("seen", "unseen_instance", "unseen_category")


class ConfigError(ValueError):
    """Bad config file, key, value, or flag combination."""


class DataError(RuntimeError):
    """Missing or inconsistent inputs (demos, memory, checkpoints)."""


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class RunConfig:
    """Resolved run settings; one flat namespace shared by every command."""

    # data collection
    task: str = "drawer"
    noise: str = "easy"
    variation: float = 1.0
    train_objects: int = 5
    episodes_per_object: int = 20
    object_seed: int = 100
    collect_seed: int = 1000
    door_memory_objects: int = 3
    door_memory_seed: int = 900
    expert_max_frames: int = 160
    collect_explore: float = 0.0
    memory_points: int = 768
    # scene rendering
    num_points: int = 512
    oversample: int = 4
    # policy network
    horizon: int = 8
    obs_steps: int = 2
    action_steps: int = 4
    traj_points: int = 32
    encoder_dim: int = 64
    model_dim: int = 64
    heads: int = 4
    attn_layers: int = 4
    cond_dim: int = 256
    time_dim: int = 64
    hidden_dim: int = 256
    variant: str = "full"
    # diffusion schedule
    train_steps: int = 500
    inference_steps: int = 10
    inference_span: float = 1.0
    # training
    epochs: int = 4000
    batch: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-6
    train_seed: int = 0
    # descriptor provider
    descriptor_sigma: float = 0.0
    descriptor_dim: int = 16
    descriptor_seed: int = 17
    # affordance transfer
    segment_radius: float = 0.05
    normal_angle_tol: float = 120.0
    # guidance
    guidance: str = "none"
    gamma: float = 1.0
    theta: float = 0.1
    delta_scale: float = 1.0
    min_grad_norm: float = 1e-8
    stride: int = 1
    eta: float = 1.0
    # evaluation
    eval_policy: str = "checkpoint"
    eval_episodes: int = 100
    eval_seed: int = 50000
    max_chunks: int = 25
    split_objects: int = 3
    unseen_instance_seed: int = 700
    unseen_category_seed: int = 800
    spatial_x_min: float = 0.42
    spatial_x_max: float = 0.62
    spatial_y_min: float = -0.20
    spatial_y_max: float = 0.20


DEFAULTS = {f.name: str(f.default) for f in fields(RunConfig)}


def parse_config_file(path, _depth: int = 0) -> dict:
    """Flat ``key value`` lines; ``include <relpath>`` merges in place."""
    if _depth > 8:
        raise ConfigError(f"include depth exceeded at {path}")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8")
                                 .splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 'key value'")
        key, value = parts
        if key == "include":
            out.update(parse_config_file(path.parent / value, _depth + 1))
        else:
            out[key] = value.strip()
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    values = dict(DEFAULTS)
    if path is not None:
        values.update(parse_config_file(path))
    if overrides:
        values.update({k: str(v) for k, v in overrides.items()})
    unknown = sorted(set(values) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    typed = {}
    for f in fields(RunConfig):
        raw = values[f.name]
        try:
            typed[f.name] = (int(raw) if f.type is int else
                             float(raw) if f.type is float else raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{f.name}': {raw}") from exc
    cfg = RunConfig(**typed)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: RunConfig) -> None:
    if cfg.task not in ("drawer", "door"):
        raise ConfigError(f"unknown task '{cfg.task}'")
    if cfg.noise not in NOISE_LEVELS:
        raise ConfigError(f"unknown noise level '{cfg.noise}'")
    if cfg.variant not in ("full", "contact"):
        raise ConfigError(f"unknown variant '{cfg.variant}'")
    if cfg.guidance not in GUIDANCE_MODES:
        raise ConfigError(f"unknown guidance '{cfg.guidance}'")
    if cfg.eval_policy not in ("checkpoint", "expert"):
        raise ConfigError(f"unknown eval_policy '{cfg.eval_policy}'")
    if not 0.0 <= cfg.variation <= 1.0:
        raise ConfigError("variation must lie in [0, 1]")
    if cfg.action_steps < 1 or cfg.action_steps > cfg.horizon:
        raise ConfigError("action_steps must lie in [1, horizon]")
    if not 0.0 < cfg.inference_span <= 1.0:
        raise ConfigError("inference_span must lie in (0, 1]")
    for name in ("train_objects", "episodes_per_object",
                 "door_memory_objects", "eval_episodes",
                 "collect_explore"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    for name in ("num_points", "memory_points", "epochs", "batch",
                 "max_chunks", "split_objects", "expert_max_frames"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")


def config_hash(cfg: RunConfig) -> str:
    text = "\n".join(f"{f.name} {getattr(cfg, f.name)}"
                     for f in fields(cfg))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def policy_config(cfg: RunConfig) -> PolicyConfig:
    return PolicyConfig(
        horizon=cfg.horizon, obs_steps=cfg.obs_steps, action_dim=4,
        proprio_dim=4, num_points=cfg.num_points, traj_points=cfg.traj_points,
        cond_dim=cfg.cond_dim, time_dim=cfg.time_dim,
        hidden_dim=cfg.hidden_dim, encoder_dim=cfg.encoder_dim,
        model_dim=cfg.model_dim, heads=cfg.heads,
        attn_layers=cfg.attn_layers, train_steps=cfg.train_steps,
        variant=cfg.variant)


def env_config(cfg: RunConfig) -> EnvConfig:
    return EnvConfig(num_points=cfg.num_points, oversample=cfg.oversample)


def descriptor_provider(cfg: RunConfig) -> SyntheticDescriptor:
    return SyntheticDescriptor(cfg.descriptor_sigma, seed=cfg.descriptor_seed,
                               dim=cfg.descriptor_dim)


def transfer_config(cfg: RunConfig) -> TransferConfig:
    return TransferConfig(segment_radius=cfg.segment_radius,
                          normal_angle_tol=cfg.normal_angle_tol)


def make_schedule(cfg: RunConfig):
    """Cosine schedule; inference_span < 1 caps the noisiest timestep the
    inference subsequence visits.  Near the terminal timestep alpha_bar is
    tiny, so the clean-sample estimate divides by a near-zero sqrt(alpha_bar)
    and amplifies predictor error by orders of magnitude; stopping the chain
    start slightly short trades a mild start-distribution mismatch for
    stability."""
    base = cosine_schedule(cfg.train_steps, cfg.inference_steps)
    if cfg.inference_span >= 1.0:
        return base
    t_max = max(cfg.inference_steps,
                round(cfg.train_steps * cfg.inference_span))
    index_map = np.linspace(0, t_max,
                            cfg.inference_steps + 1).round().astype(int)
    return NoiseSchedule(base.alpha_bar, cfg.train_steps,
                         cfg.inference_steps, index_map=index_map)


def guidance_config(cfg: RunConfig, name: str) -> GuidanceConfig:
    if name not in GUIDANCE_MODES:
        raise ConfigError(f"unknown guidance '{name}'")
    return GuidanceConfig(mode=GUIDANCE_MODES[name], gamma=cfg.gamma,
                          theta=cfg.theta, delta_scale=cfg.delta_scale,
                          min_grad_norm=cfg.min_grad_norm, stride=cfg.stride,
                          eta=cfg.eta)


# ---------------------------------------------------------------------------
# collect


def _memory_entry(cfg, obj, episode, provider) -> MemoryEntry:
    """Memory entry for the episode's closed object, rendered densely.

    Reset noise is drawn before surface sampling, so re-resetting with the
    episode's seed at a higher point budget reproduces the exact world pose;
    the stored contact then has a nearby cloud point even when the policy
    observes sparse clouds.
    """
    dense = dataclasses.replace(env_config(cfg),
                                num_points=max(cfg.num_points,
                                               cfg.memory_points))
    state, frame = Environment(obj, dense).reset(episode.noise_level,
                                                 episode.seed)
    appearance = pooled_appearance(provider, frame.cloud,
                                   state.canonical_points)
    return MemoryEntry(episode.task, episode.affordance, appearance,
                       frame.cloud, canonical=state.canonical_points)


def cmd_collect(cfg: RunConfig, out_dir) -> dict:
    """Expert demos for each training object plus the affordance memory.

    Infeasible or failed episodes are skipped (and itemized in the summary);
    a yield below half the requested episodes is a hard error.  Memory gets
    one entry per training object plus door entries that exist only in
    memory — the unseen-category split retrieves from those.
    """
    out = Path(out_dir)
    demos_dir = out / "demos"
    demos_dir.mkdir(parents=True, exist_ok=True)
    requested = cfg.train_objects * cfg.episodes_per_object
    provider = descriptor_provider(cfg)
    memory = AffordanceMemory()
    demo_rows, skip_rows = [], []
    written = 0
    if requested > 0:
        for i in range(cfg.train_objects):
            obj = generate_object(cfg.task, cfg.object_seed + i,
                                  cfg.variation)
            env = Environment(obj, env_config(cfg))
            entry = None
            for j in range(cfg.episodes_per_object):
                seed = cfg.collect_seed + 1000 * i + j
                episode, info = scripted_expert(
                    env, cfg.noise, seed, max_frames=cfg.expert_max_frames,
                    explore=cfg.collect_explore)
                if episode is None or not info["success"]:
                    reason = info.get("reason", "no success")
                    skip_rows.append(
                        f"skip {obj.object_id} {seed} {reason}")
                    continue
                save_episode(demos_dir / f"episode_{written:05d}", episode)
                pos = info["state"].object_position
                demo_rows.append(
                    f"demo {written} {episode.task} {episode.object_id} "
                    f"{seed} {pos[0]:.17g} {pos[1]:.17g}")
                written += 1
                if entry is None:
                    entry = _memory_entry(cfg, obj, episode, provider)
            if entry is None:
                raise DataError(
                    f"no successful demo for {obj.object_id}; "
                    "cannot build its memory entry")
            memory.add(entry)
        for i in range(cfg.door_memory_objects):
            obj = generate_object("door", cfg.door_memory_seed + i,
                                  cfg.variation)
            env = Environment(obj, env_config(cfg))
            entry = None
            for attempt in range(10):
                seed = cfg.door_memory_seed + 100 * i + attempt
                episode, info = scripted_expert(
                    env, cfg.noise, seed, max_frames=cfg.expert_max_frames)
                if episode is not None and info["success"]:
                    entry = _memory_entry(cfg, obj, episode, provider)
                    break
            if entry is None:
                raise DataError(
                    f"no successful door demo for memory ({obj.object_id})")
            memory.add(entry)
        if written < 0.5 * requested:
            raise DataError(
                f"demo yield too low: {written}/{requested} succeeded")
    save_memory(memory, out / "memory")
    lines = [f"collect {config_hash(cfg)}",
             f"requested {requested} written {written}"]
    lines += demo_rows + skip_rows
    (demos_dir / "summary.txt").write_text("\n".join(lines) + "\n",
                                           encoding="utf-8")
    return {"requested": requested, "written": written,
            "memory_entries": len(memory)}


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: RunConfig, out_dir) -> list:
    out = Path(out_dir)
    demos_dir = out / "demos"
    if not demos_dir.is_dir():
        raise DataError(f"demo directory not found: {demos_dir}")
    episode_dirs = sorted(p for p in demos_dir.iterdir()
                          if p.is_dir() and p.name.startswith("episode_"))
    if not episode_dirs:
        raise DataError(f"no demos under {demos_dir}")
    episodes = [load_episode(p) for p in episode_dirs]
    pconf = policy_config(cfg)
    dataset = DemoDataset.from_episodes(episodes, pconf)
    policy = Policy(pconf, dataset.stats, seed=cfg.train_seed)
    losses = policy.train(dataset, make_schedule(cfg), cfg.epochs, cfg.batch,
                          seed=cfg.train_seed, lr=cfg.lr,
                          weight_decay=cfg.weight_decay)
    policy.save(out / f"checkpoint_{cfg.variant}")
    lines = [f"loss {config_hash(cfg)} variant {cfg.variant} "
             f"seed {cfg.train_seed}"]
    lines += [f"{i} {v:.17g}" for i, v in enumerate(losses)]
    (out / f"loss_{cfg.variant}.txt").write_text("\n".join(lines) + "\n",
                                                 encoding="utf-8")
    return losses


# ---------------------------------------------------------------------------
# eval


def binomial_ci(successes: int, n: int):
    """Success rate with a 95% normal-approximation interval, clipped."""
    if n == 0:
        return 0.0, 0.0, 0.0
    p = successes / n
    half = 1.96 * math.sqrt(p * (1.0 - p) / n)
    return p, max(0.0, p - half), min(1.0, p + half)


def _split_spec(cfg: RunConfig, split: str):
    """(category, object seeds, randomize-position flag) for a split."""
    if split == "seen":
        return (cfg.task, [cfg.object_seed + i
                           for i in range(cfg.train_objects)], False)
    if split == "unseen_instance":
        return (cfg.task, [cfg.unseen_instance_seed + i
                           for i in range(cfg.split_objects)], False)
    if split == "unseen_category":
        other = "door" if cfg.task == "drawer" else "drawer"
        return (other, [cfg.unseen_category_seed + i
                        for i in range(cfg.split_objects)], False)
    if split == "spatial":
        return cfg.task, [cfg.object_seed], True
    raise ConfigError(f"unknown split '{split}'")


def _rollout(cfg, env, state, frame0, policy, memory, provider, tconf,
             sched, gconf, ep_rng):
    """Transfer once, then sample/execute chunks until success or budget."""
    try:
        affordance = transfer(memory, env.object.category, frame0.cloud,
                              provider, tconf,
                              target_metadata=state.canonical_points)
    except TransferError as exc:
        return False, state.joint_value, f"transfer_{exc.stage}"
    frames = deque([frame0] * cfg.obs_steps, maxlen=cfg.obs_steps)
    category = env.object.category
    for _ in range(cfg.max_chunks):
        obs = Observation(tuple(frames))
        chunk_seed = int(ep_rng.integers(2 ** 31))
        chunk = sample(policy, obs, affordance, sched, gconf, chunk_seed,
                       chain=state.chain, grasped=state.ever_grasped)
        for action in chunk[:cfg.action_steps]:
            state, frame = env.step(state, action)
            frames.append(frame)
        if evaluate(state, category):
            break
    return evaluate(state, category), state.joint_value, "ok"


def run_eval(cfg: RunConfig, split: str, guidance_name: str, policy,
             memory) -> tuple:
    """Evaluate one (split, guidance) cell; returns (summary, episode rows).

    Episode seeds derive from (eval_seed, episode index) so guided and
    unguided runs see identical scenes.  Transfer failures count as episode
    failures with the failing stage recorded per row.
    """
    category, seeds, randomize = _split_spec(cfg, split)
    provider = descriptor_provider(cfg)
    tconf = transfer_config(cfg)
    sched = make_schedule(cfg)
    gconf = guidance_config(cfg, guidance_name)
    econf = env_config(cfg)
    rows = []
    successes = 0
    for e in range(cfg.eval_episodes):
        obj = generate_object(category, seeds[e % len(seeds)], cfg.variation)
        ep_rng = np.random.default_rng([cfg.eval_seed, e])
        if randomize:
            pos = np.array([ep_rng.uniform(cfg.spatial_x_min,
                                           cfg.spatial_x_max),
                            ep_rng.uniform(cfg.spatial_y_min,
                                           cfg.spatial_y_max), 0.0])
            obj = dataclasses.replace(obj, nominal_position=pos)
        env = Environment(obj, econf)
        reset_seed = int(ep_rng.integers(2 ** 31))
        state, frame0 = env.reset(cfg.noise, reset_seed)
        if cfg.eval_policy == "expert":
            _, info = scripted_expert(env, cfg.noise, reset_seed,
                                      max_frames=cfg.expert_max_frames)
            success = bool(info["success"])
            final_joint = float(info.get("final_joint", 0.0))
            stage = "ok" if not info["infeasible"] \
                else info["reason"].replace(" ", "_")
        else:
            success, final_joint, stage = _rollout(
                cfg, env, state, frame0, policy, memory, provider, tconf,
                sched, gconf, ep_rng)
        successes += int(success)
        rows.append((e, reset_seed, obj.object_id,
                     float(state.object_position[0]),
                     float(state.object_position[1]), int(success),
                     float(final_joint), stage))
    rate, lo, hi = binomial_ci(successes, cfg.eval_episodes)
    summary = {"split": split, "guidance": guidance_name,
               "episodes": cfg.eval_episodes, "successes": successes,
               "rate": rate, "ci_lo": lo, "ci_hi": hi}
    return summary, rows


def _write_eval_tables(cfg, out, split, guidance_name, summary, rows):
    chash = config_hash(cfg)
    head = ("config_hash\tsplit\tguidance\tpolicy\tepisodes\tsuccesses\t"
            "rate\tci_lo\tci_hi\teval_seed\n")
    line = (f"{chash}\t{split}\t{guidance_name}\t{cfg.eval_policy}\t"
            f"{summary['episodes']}\t{summary['successes']}\t"
            f"{summary['rate']:.6f}\t{summary['ci_lo']:.6f}\t"
            f"{summary['ci_hi']:.6f}\t{cfg.eval_seed}\n")
    (out / f"eval_{split}_{guidance_name}.tsv").write_text(
        head + line, encoding="utf-8")
    ep_head = ("config_hash\tsplit\tguidance\tepisode\tseed\tobject_id\t"
               "obj_x\tobj_y\tsuccess\tfinal_joint\tstage\n")
    ep_lines = [
        f"{chash}\t{split}\t{guidance_name}\t{e}\t{seed}\t{oid}\t"
        f"{x:.6f}\t{y:.6f}\t{succ}\t{fj:.6f}\t{stage}"
        for e, seed, oid, x, y, succ, fj, stage in rows]
    (out / f"eval_{split}_{guidance_name}_episodes.tsv").write_text(
        ep_head + "\n".join(ep_lines) + ("\n" if ep_lines else ""),
        encoding="utf-8")


def _load_policy(cfg: RunConfig, out: Path, checkpoint=None) -> Policy:
    path = Path(checkpoint) if checkpoint else \
        out / f"checkpoint_{cfg.variant}"
    if not path.is_dir():
        raise DataError(f"checkpoint not found: {path}")
    return Policy.load(path)


def _load_memory(out: Path) -> AffordanceMemory:
    try:
        return load_memory(out / "memory")
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc


def cmd_eval(cfg: RunConfig, out_dir, split: str, guidance_name: str,
             checkpoint=None) -> dict:
    """Evaluate a policy on one split; reads inputs, never mutates them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policy = memory = None
    if cfg.eval_policy == "checkpoint":
        policy = _load_policy(cfg, out, checkpoint)
        memory = _load_memory(out)
    summary, rows = run_eval(cfg, split, guidance_name, policy, memory)
    _write_eval_tables(cfg, out, split, guidance_name, summary, rows)
    return summary


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(cfg: RunConfig, out_dir) -> dict:
    """3x3 conditioning grid: rows contact-only / +trajectory / +guidance."""
    out = Path(out_dir)
    guided = cfg.guidance if cfg.guidance != "none" else "spherical"
    grid_rows = [("contact_only", "contact", "none"),
                 ("trajectory", "full", "none"),
                 ("guidance", "full", guided)]
    policies = {}
    for _, variant, _g in grid_rows:
        if variant not in policies:
            path = out / f"checkpoint_{variant}"
            if not path.is_dir():
                raise DataError(
                    f"missing checkpoint for variant '{variant}': {path}")
            policies[variant] = Policy.load(path)
    memory = _load_memory(out)
    table = {}
    lines = ["config_hash\trow\t" + "\t".join(ABLATION_SPLITS)]
    for name, variant, gname in grid_rows:
        row_cfg = dataclasses.replace(cfg, variant=variant)
        rates = []
        for split in ABLATION_SPLITS:
            summary, _ = run_eval(row_cfg, split, gname, policies[variant],
                                  memory)
            rates.append(summary["rate"])
        table[name] = dict(zip(ABLATION_SPLITS, rates))
        lines.append(f"{config_hash(cfg)}\t{name}\t"
                     + "\t".join(f"{r:.6f}" for r in rates))
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n",
                                      encoding="utf-8")
    return table


# ---------------------------------------------------------------------------
# plot


def _hull_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    from scipy.spatial import ConvexHull, QhullError
    try:
        return float(ConvexHull(pts).volume)  # 2-D hull: volume is area
    except QhullError:
        return 0.0


def _read_success_positions(path: Path):
    if not path.is_file():
        raise DataError(f"missing eval results: {path}")
    pts = []
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    ix, iy = header.index("obj_x"), header.index("obj_y")
    isucc = header.index("success")
    for line in lines[1:]:
        cells = line.split("\t")
        if cells[isucc] == "1":
            pts.append((float(cells[ix]), float(cells[iy])))
    return pts


def cmd_plot(cfg: RunConfig, out_dir, split: str) -> dict:
    """Scatter layers (demo vs success positions) plus hull-area summary."""
    out = Path(out_dir)
    summary_path = out / "demos" / "summary.txt"
    if not summary_path.is_file():
        raise DataError(f"missing demo summary: {summary_path}")
    demo_pts = []
    for line in summary_path.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if parts and parts[0] == "demo":
            demo_pts.append((float(parts[-2]), float(parts[-1])))
    layers = {}
    for gname in ("none", "spherical"):
        layers[gname] = _read_success_positions(
            out / f"eval_{split}_{gname}_episodes.tsv")
    areas = {g: _hull_area(p) for g, p in layers.items()}
    lines = [f"plot {config_hash(cfg)} split {split}",
             f"counts demo {len(demo_pts)} "
             f"success_none {len(layers['none'])} "
             f"success_spherical {len(layers['spherical'])}",
             f"hull_area none {areas['none']:.9g} "
             f"spherical {areas['spherical']:.9g}"]
    lines += [f"demo {x:.6f} {y:.6f}" for x, y in demo_pts]
    for gname in ("none", "spherical"):
        lines += [f"success_{gname} {x:.6f} {y:.6f}"
                  for x, y in layers[gname]]
    (out / f"plot_{split}.txt").write_text("\n".join(lines) + "\n",
                                           encoding="utf-8")
    return {"demo": len(demo_pts),
            "success_none": len(layers["none"]),
            "success_spherical": len(layers["spherical"]),
            "areas": areas}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="affordkit",
        description="Affordance-transfer manipulation pipeline.")
    p.add_argument("command",
                   choices=["collect", "train", "eval", "ablate", "plot"])
    p.add_argument("--config", default=None, help="flat key-value file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the command's seed")
    p.add_argument("--split", choices=SPLITS, default="seen")
    p.add_argument("--guidance", choices=sorted(GUIDANCE_MODES),
                   default=None)
    p.add_argument("--variant", choices=["full", "contact"], default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True, help="run directory")
    return p


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    if args.variant is not None:
        updates["variant"] = args.variant
    if args.guidance is not None:
        updates["guidance"] = args.guidance
    if args.seed is not None:
        updates[{"collect": "collect_seed", "train": "train_seed"}.get(
            args.command, "eval_seed")] = args.seed
    return dataclasses.replace(cfg, **updates) if updates else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        if args.command == "collect":
            result = cmd_collect(cfg, args.out)
            print(f"collected {result['written']}/{result['requested']} "
                  f"demos, {result['memory_entries']} memory entries")
        elif args.command == "train":
            losses = cmd_train(cfg, args.out)
            print(f"trained {cfg.variant} for {len(losses)} epochs, "
                  f"final loss {losses[-1]:.6f}")
        elif args.command == "eval":
            gname = args.guidance or cfg.guidance
            summary = cmd_eval(cfg, args.out, args.split, gname,
                               checkpoint=args.checkpoint)
            print(f"eval {args.split}/{gname}: "
                  f"{summary['successes']}/{summary['episodes']} "
                  f"rate {summary['rate']:.3f} "
                  f"ci [{summary['ci_lo']:.3f}, {summary['ci_hi']:.3f}]")
        elif args.command == "ablate":
            table = cmd_ablate(cfg, args.out)
            for row, cells in table.items():
                print(row + " " + " ".join(
                    f"{s}={cells[s]:.3f}" for s in ABLATION_SPLITS))
        else:
            counts = cmd_plot(cfg, args.out, args.split)
            print(f"plot {args.split}: demo {counts['demo']} "
                  f"success_none {counts['success_none']} "
                  f"success_spherical {counts['success_spherical']}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, PoisonedUpdateError,
            FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
