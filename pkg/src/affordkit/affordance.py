"""Affordance memory and transfer.

An affordance is a contact point plus an ordered post-contact trajectory.
Memory entries pair an affordance with the task name, a pooled appearance
vector, and the object cloud it was recorded on. Transfer onto a new object
composes retrieval (cosine similarity over appearance), contact matching
(feature correspondence), part extraction (region growing at the contacts),
rotation estimation (contact-centered part ICP), and a rigid trajectory map.

The trajectory map rotates about the source contact before applying the
contact-difference translation, so the transferred trajectory starts at the
transferred contact point.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .descriptor import (
    FeatureField,
    correspond,
    segment_part,
)
from .geometry import (
    NeighborIndex,
    PointCloud,
    RigidTransform,
    estimate_normals,
    icp_point_to_plane,
    load_point_cloud,
    save_point_cloud,
)

MAX_TRAJECTORY_STEP = 0.1
CONTACT_START_TOL = 0.02


class AffordanceNotFoundError(LookupError):
    """No memory entry exists for the requested task."""


class TransferError(RuntimeError):
    """A transfer stage failed; `stage` names the failing component."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"transfer stage '{stage}': {message}")
        self.stage = stage


def validate_trajectory(trajectory: np.ndarray, contact=None,
                        max_step: float = MAX_TRAJECTORY_STEP,
                        start_tol: float = CONTACT_START_TOL) -> np.ndarray:
    """Check the ordered-trajectory invariants, returning the array.

    At least two points, consecutive steps within `max_step`, and (when a
    contact is given) the first point within `start_tol` of it.
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if trajectory.ndim != 2 or trajectory.shape[1] != 3:
        raise ValueError("trajectory must be an (N, 3) array")
    if trajectory.shape[0] < 2:
        raise ValueError("trajectory needs at least 2 points")
    if not np.isfinite(trajectory).all():
        raise ValueError("trajectory contains non-finite values")
    steps = np.linalg.norm(np.diff(trajectory, axis=0), axis=1)
    if steps.max() > max_step + 1e-12:
        raise ValueError(f"trajectory step {steps.max():.4f} m exceeds "
                         f"max step {max_step:.4f} m")
    if contact is not None:
        gap = np.linalg.norm(trajectory[0] - np.asarray(contact, dtype=float))
        if gap > start_tol + 1e-12:
            raise ValueError(f"trajectory starts {gap:.4f} m from the "
                             f"contact point (tolerance {start_tol:.4f} m)")
    return trajectory


@dataclass
class Affordance:
    """Contact point plus post-contact trajectory, world frame, meters."""

    contact: np.ndarray     # (3,)
    trajectory: np.ndarray  # (N, 3)
    max_step: float = MAX_TRAJECTORY_STEP
    start_tol: float = CONTACT_START_TOL

    def __post_init__(self):
        self.contact = np.asarray(self.contact, dtype=np.float64).reshape(3)
        if not np.isfinite(self.contact).all():
            raise ValueError("contact must be finite")
        self.trajectory = validate_trajectory(
            self.trajectory, self.contact, self.max_step, self.start_tol)


@dataclass
class MemoryEntry:
    """One remembered manipulation: (task, affordance, appearance, cloud).

    `canonical` optionally carries the cloud's canonical chart so the
    synthetic descriptor can be re-run on the stored cloud.
    """

    task: str
    affordance: Affordance
    appearance: np.ndarray
    cloud: PointCloud
    canonical: np.ndarray | None = None

    def __post_init__(self):
        if not self.task:
            raise ValueError("task must be non-empty")
        self.appearance = np.asarray(self.appearance,
                                     dtype=np.float64).reshape(-1)
        if np.linalg.norm(self.appearance) == 0.0:
            raise ValueError("appearance vector must have nonzero norm")
        if self.canonical is not None:
            self.canonical = np.asarray(self.canonical, dtype=np.float64)
            if self.canonical.shape != (len(self.cloud), 3):
                raise ValueError("canonical chart does not match cloud size")


@dataclass
class AffordanceMemory:
    entries: list = field(default_factory=list)

    def add(self, entry: MemoryEntry) -> None:
        self.entries.append(entry)

    def tasks(self) -> set:
        return {e.task for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class TransferConfig:
    """Knobs for the transfer composition."""

    segment_radius: float = 0.05
    normal_angle_tol: float = 120.0
    icp_max_iter: int = 50
    normal_k: int = 12


def pooled_appearance(provider, cloud: PointCloud,
                      metadata=None) -> np.ndarray:
    """Appearance vector: mean of the provider's per-point features."""
    feats = provider.compute(cloud, metadata).features
    return feats.mean(axis=0)


def retrieve(memory: AffordanceMemory, task: str,
             query_appearance) -> MemoryEntry:
    """Matching-task entry with maximal cosine similarity to the query.

    Ties break toward the earliest inserted entry.
    """
    query = np.asarray(query_appearance, dtype=np.float64).reshape(-1)
    qnorm = np.linalg.norm(query)
    if qnorm == 0.0:
        raise ValueError("query appearance must have nonzero norm")
    candidates = [e for e in memory.entries if e.task == task]
    if not candidates:
        raise AffordanceNotFoundError(f"no memory entry for task '{task}'")
    sims = np.array([
        e.appearance @ query / (np.linalg.norm(e.appearance) * qnorm)
        for e in candidates])
    return candidates[int(np.argmax(sims))]


def transfer_static(source: MemoryEntry, target_cloud: PointCloud, provider,
                    target_metadata=None,
                    source_field: FeatureField | None = None,
                    target_field: FeatureField | None = None) -> np.ndarray:
    """Contact point on the target selected by feature correspondence."""
    index = NeighborIndex(source.cloud)
    src_idx, dist = index.query(source.affordance.contact)
    if dist > 0.02:
        raise ValueError(f"stored contact is {dist:.4f} m from the source "
                         "cloud (must be within 0.02 m)")
    if source_field is None:
        source_field = provider.compute(source.cloud, source.canonical)
    if target_field is None:
        target_field = provider.compute(target_cloud, target_metadata)
    tgt_idx, _ = correspond(source_field, src_idx, target_field)
    return target_cloud.points[tgt_idx].copy()


def estimate_translation(c_source, c_target) -> np.ndarray:
    """Contact-difference translation t = c_target - c_source."""
    return (np.asarray(c_target, dtype=np.float64).reshape(3)
            - np.asarray(c_source, dtype=np.float64).reshape(3))


def estimate_rotation(source_part: PointCloud, target_part: PointCloud,
                      c_source, c_target, max_iter: int = 50,
                      normal_k: int = 12) -> RigidTransform:
    """Rotation between parts from contact-centered point-to-plane ICP.

    Both parts are translated so their contacts sit at the origin; ICP runs
    from identity and only the rotation of the result is kept.
    """
    c_source = np.asarray(c_source, dtype=np.float64).reshape(3)
    c_target = np.asarray(c_target, dtype=np.float64).reshape(3)
    if target_part.normals is None:
        k = min(normal_k, len(target_part) - 1)
        target_part = estimate_normals(target_part, k)
    src = PointCloud(source_part.points - c_source)
    tgt = PointCloud(target_part.points - c_target, target_part.normals)
    result, _, _, _ = icp_point_to_plane(src, tgt, max_iter=max_iter)
    return RigidTransform(result.rotation, np.zeros(3))


def transfer_dynamic(source_traj: np.ndarray, rotation, t,
                     c_source) -> np.ndarray:
    """Rigid map of the trajectory: rotate about the source contact, then
    translate by the contact difference."""
    traj = validate_trajectory(source_traj)
    if isinstance(rotation, RigidTransform):
        rotation = rotation.rotation
    rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    c_source = np.asarray(c_source, dtype=np.float64).reshape(3)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    return (traj - c_source) @ rotation.T + c_source + t


def transfer(memory: AffordanceMemory, task: str, target_cloud: PointCloud,
             provider, config: TransferConfig | None = None,
             target_metadata=None) -> Affordance:
    """Full affordance transfer onto `target_cloud`.

    Composes retrieve, contact correspondence, part segmentation at both
    contacts, contact-centered rotation estimation, and the rigid trajectory
    map. Component failures surface as TransferError with a stage label.
    """
    config = config or TransferConfig()
    try:
        target_field = provider.compute(target_cloud, target_metadata)
    except Exception as exc:
        raise TransferError("descriptor", str(exc)) from exc
    try:
        query = target_field.features.mean(axis=0)
        entry = retrieve(memory, task, query)
    except Exception as exc:
        raise TransferError("retrieve", str(exc)) from exc
    try:
        c_target = transfer_static(entry, target_cloud, provider,
                                   target_field=target_field)
    except Exception as exc:
        raise TransferError("transfer_static", str(exc)) from exc
    c_source = entry.affordance.contact
    try:
        source_part = segment_part(_with_normals(entry.cloud, config),
                                   c_source, config.segment_radius,
                                   config.normal_angle_tol)
        target_part = segment_part(_with_normals(target_cloud, config),
                                   c_target, config.segment_radius,
                                   config.normal_angle_tol)
    except Exception as exc:
        raise TransferError("segment_part", str(exc)) from exc
    try:
        rotation = estimate_rotation(source_part, target_part, c_source,
                                     c_target, max_iter=config.icp_max_iter,
                                     normal_k=config.normal_k)
    except Exception as exc:
        raise TransferError("estimate_rotation", str(exc)) from exc
    t = estimate_translation(c_source, c_target)
    try:
        trajectory = transfer_dynamic(entry.affordance.trajectory, rotation,
                                      t, c_source)
        return Affordance(c_target, trajectory)
    except Exception as exc:
        raise TransferError("transfer_dynamic", str(exc)) from exc


def _with_normals(cloud: PointCloud, config: TransferConfig) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    return estimate_normals(cloud, min(config.normal_k, len(cloud) - 1))


def resample_trajectory(trajectory: np.ndarray, n: int) -> np.ndarray:
    """Resample to `n` points uniformly spaced by arc length.

    Endpoints are preserved; a zero-length trajectory repeats its point.
    """
    if n < 2:
        raise ValueError("need at least 2 output points")
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] != 3 or traj.shape[0] < 2:
        raise ValueError("trajectory must be an (N, 3) array with N >= 2")
    seg = np.linalg.norm(np.diff(traj, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] == 0.0:
        return np.tile(traj[0], (n, 1))
    targets = np.linspace(0.0, arc[-1], n)
    out = np.empty((n, 3))
    for d in range(3):
        out[:, d] = np.interp(targets, arc, traj[:, d])
    return out


def save_affordance(path, affordance: Affordance) -> None:
    """Write `contact x y z`, `traj <N>`, then one line per point."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("contact " + " ".join(
            f"{v:.12f}" for v in affordance.contact) + "\n")
        fh.write(f"traj {len(affordance.trajectory)}\n")
        for p in affordance.trajectory:
            fh.write(" ".join(f"{v:.12f}" for v in p) + "\n")


def load_affordance(path) -> Affordance:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().split()
        if len(first) != 4 or first[0] != "contact":
            raise ValueError(f"bad affordance header in {path}")
        contact = np.array([float(v) for v in first[1:]])
        second = fh.readline().split()
        if len(second) != 2 or second[0] != "traj":
            raise ValueError(f"bad trajectory header in {path}")
        count = int(second[1])
        traj = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if traj.shape != (count, 3):
        raise ValueError(f"expected {count} trajectory points, "
                         f"got {traj.shape}")
    return Affordance(contact, traj)


def save_memory(memory: AffordanceMemory, root) -> None:
    """One directory per entry plus a manifest of `<task> <dir>` lines."""
    os.makedirs(root, exist_ok=True)
    lines = []
    for i, entry in enumerate(memory.entries):
        rel = os.path.join("entries", f"{i:04d}")
        entry_dir = os.path.join(root, rel)
        os.makedirs(entry_dir, exist_ok=True)
        save_point_cloud(os.path.join(entry_dir, "cloud.pc"), entry.cloud)
        save_affordance(os.path.join(entry_dir, "affordance.txt"),
                        entry.affordance)
        with open(os.path.join(entry_dir, "appearance.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(" ".join(f"{v:.12f}" for v in entry.appearance) + "\n")
        if entry.canonical is not None:
            np.savetxt(os.path.join(entry_dir, "canonical.txt"),
                       entry.canonical, fmt="%.12f")
        lines.append(f"{entry.task} {rel}")
    with open(os.path.join(root, "manifest.txt"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_memory(root) -> AffordanceMemory:
    manifest = os.path.join(root, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no memory manifest at {manifest}")
    memory = AffordanceMemory()
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            task, rel = line.split(maxsplit=1)
            entry_dir = os.path.join(root, rel)
            cloud = load_point_cloud(os.path.join(entry_dir, "cloud.pc"))
            affordance = load_affordance(
                os.path.join(entry_dir, "affordance.txt"))
            appearance = np.loadtxt(
                os.path.join(entry_dir, "appearance.txt"), dtype=np.float64)
            canonical_path = os.path.join(entry_dir, "canonical.txt")
            canonical = None
            if os.path.exists(canonical_path):
                canonical = np.loadtxt(canonical_path, dtype=np.float64,
                                       ndmin=2)
            memory.add(MemoryEntry(task, affordance, appearance, cloud,
                                   canonical))
    return memory
