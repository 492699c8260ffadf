"""Point-cloud primitives: rigid transforms, nearest neighbors, normal
estimation, farthest point sampling, and point-to-plane ICP.

Conventions: points are float64 arrays of shape (N, 3) in meters, normals are
unit vectors. All functions are pure; clouds and transforms are treated as
immutable once constructed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class DegenerateGeometryError(ValueError):
    """Raised when a geometric system is too degenerate to solve."""


def as_points(points) -> np.ndarray:
    """Coerce to a float64 (N, 3) array, validating finiteness."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite values")
    return pts


@dataclass
class PointCloud:
    """Ordered 3D points with optional per-point unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = as_points(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ValueError(
                    f"normals shape {self.normals.shape} does not match "
                    f"points shape {self.points.shape}"
                )
            lengths = np.linalg.norm(self.normals, axis=1)
            if not np.all(np.abs(lengths - 1.0) < 1e-6):
                raise ValueError("normals must have unit length within 1e-6")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, indices) -> "PointCloud":
        """Cloud restricted to `indices`, preserving their order."""
        idx = np.asarray(indices, dtype=np.int64)
        normals = self.normals[idx] if self.normals is not None else None
        return PointCloud(self.points[idx].copy(),
                          None if normals is None else normals.copy())

    def diameter(self) -> float:
        """Length of the bounding-box diagonal."""
        extent = self.points.max(axis=0) - self.points.min(axis=0)
        return float(np.linalg.norm(extent))


@dataclass
class RigidTransform:
    """Proper rigid motion p -> R @ p + t."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation,
                                      dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal (max error {err:.2e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > 1e-9:
            raise ValueError(f"rotation determinant {det} != 1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return apply_transform(self, points)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self o other)(p) = self(other(p))."""
        rot = orthonormalize(self.rotation @ other.rotation)
        return RigidTransform(rot,
                              self.rotation @ other.translation
                              + self.translation)

    def inverse(self) -> "RigidTransform":
        rot = self.rotation.T
        return RigidTransform(rot.copy(), -rot @ self.translation)

    def transform_cloud(self, cloud: PointCloud) -> PointCloud:
        normals = None
        if cloud.normals is not None:
            normals = cloud.normals @ self.rotation.T
        return PointCloud(self.apply(cloud.points), normals)


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        r = u @ vt
    return r


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for `angle` radians about `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise ValueError("rotation axis must be nonzero")
    x, y, z = axis / norm
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def apply_transform(transform: RigidTransform, points) -> np.ndarray:
    """Apply R @ p + t to each point, preserving order."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = as_points(pts)
    out = pts @ transform.rotation.T + transform.translation
    return out[0] if single else out


class NeighborIndex:
    """Nearest-neighbor index over a cloud; ties resolve to the lowest index."""

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise ValueError("cannot index an empty cloud")
        self._points = cloud.points
        self._tree = cKDTree(self._points)

    def query(self, point) -> tuple[int, float]:
        q = np.asarray(point, dtype=np.float64).reshape(3)
        dist, idx = self._tree.query(q)
        # Canonicalize ties: among all points at the minimal distance, pick
        # the lowest index. kd-tree tie order is otherwise unspecified.
        radius = dist + 1e-12 * max(1.0, dist)
        candidates = self._tree.query_ball_point(q, radius)
        if len(candidates) > 1:
            dists = np.linalg.norm(self._points[candidates] - q, axis=1)
            best = dists.min()
            idx = min(c for c, d in zip(candidates, dists)
                      if d <= best + 1e-12 * max(1.0, best))
            dist = float(np.linalg.norm(self._points[idx] - q))
        return int(idx), float(dist)

    def query_many(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Batch nearest neighbors (no tie canonicalization)."""
        pts = as_points(points)
        dists, idx = self._tree.query(pts)
        return idx.astype(np.int64), dists

    def query_knn(self, points, k: int) -> tuple[np.ndarray, np.ndarray]:
        pts = as_points(points)
        dists, idx = self._tree.query(pts, k=k)
        return idx.astype(np.int64), dists


def nearest_neighbor(index: NeighborIndex, query) -> tuple[int, float]:
    """Index and Euclidean distance of the closest point to `query`."""
    return index.query(query)


def local_surface_stats(cloud: PointCloud, k: int,
                        viewpoint=(0.0, 0.0, 0.0)
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Per-point (normal, curvature) from the k-NN covariance.

    The normal is the smallest-eigenvector of the neighborhood covariance,
    sign-flipped to face `viewpoint`. Curvature is the smallest eigenvalue
    over the eigenvalue sum (0 for a perfect plane).
    """
    n = len(cloud)
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} points for k={k} "
                         f"neighborhoods, got {n}")
    viewpoint = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    tree = cKDTree(cloud.points)
    # k neighbors plus the point itself
    _, idx = tree.query(cloud.points, k=k + 1)
    neigh = cloud.points[idx]                      # (n, k+1, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    covs = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(covs)        # ascending eigenvalues
    normals = eigvecs[:, :, 0]
    to_view = viewpoint - cloud.points
    flip = np.einsum("ni,ni->n", normals, to_view) < 0.0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    total = eigvals.sum(axis=1)
    curvature = np.where(total > 0.0, eigvals[:, 0] / np.maximum(total, 1e-300),
                         0.0)
    return normals, curvature


def estimate_normals(cloud: PointCloud, k: int,
                     viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """Cloud with unit normals estimated from k-NN covariances.

    Normals are oriented toward `viewpoint` (the sensor origin by
    convention).
    """
    normals, _ = local_surface_stats(cloud, k, viewpoint)
    return PointCloud(cloud.points.copy(), normals)


def farthest_point_indices(points, n: int, seed: int) -> np.ndarray:
    """Greedy max-min sample of `n` indices; the start index is drawn from
    `seed`, later ties resolve to the lowest index."""
    pts = as_points(points)
    total = pts.shape[0]
    if n <= 0:
        raise ValueError("sample size must be positive")
    if n > total:
        raise ValueError(f"cannot sample {n} points from a cloud of {total}")
    rng = np.random.default_rng(seed)
    selected = np.empty(n, dtype=np.int64)
    selected[0] = rng.integers(total)
    min_dist = np.linalg.norm(pts - pts[selected[0]], axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(min_dist))  # argmax takes the lowest tied index
        selected[i] = nxt
        np.minimum(min_dist, np.linalg.norm(pts - pts[nxt], axis=1),
                   out=min_dist)
    return selected


def farthest_point_sampling(cloud: PointCloud, n: int,
                            seed: int) -> PointCloud:
    """Downsample to `n` points by farthest point sampling."""
    return cloud.subset(farthest_point_indices(cloud.points, n, seed))


def point_to_plane_error(source_pts, target: PointCloud,
                         pairs: tuple[np.ndarray, np.ndarray]) -> float:
    """Mean squared point-to-plane error over explicit correspondences."""
    src_idx, tgt_idx = pairs
    diff = target.points[tgt_idx] - np.asarray(source_pts)[src_idx]
    proj = np.einsum("ni,ni->n", diff, target.normals[tgt_idx])
    return float(np.mean(proj ** 2))


def _correspondences(transformed, index, rejection_ratio):
    idx, dists = index.query_many(transformed)
    median = np.median(dists)
    keep = dists <= max(rejection_ratio * median, 1e-12)
    if not np.any(keep):
        keep = np.ones_like(keep, dtype=bool)
    src_idx = np.nonzero(keep)[0]
    return src_idx, idx[src_idx]


def _solve_increment(transformed, target, src_idx, tgt_idx):
    """One linearized point-to-plane step (omega, delta) via normal
    equations; eigendecomposition fallback when ill-conditioned."""
    x = transformed[src_idx]
    p = target.points[tgt_idx]
    n = target.normals[tgt_idx]
    a = np.hstack([np.cross(x, n), n])           # (m, 6)
    b = np.einsum("ni,ni->n", p - x, n)
    ata = a.T @ a
    atb = a.T @ b
    eigvals = np.linalg.eigvalsh(ata)
    if eigvals[-1] <= 0.0:
        raise DegenerateGeometryError("point-to-plane system is singular")
    if eigvals[0] > 1e-10 * eigvals[-1]:
        try:
            xi = np.linalg.solve(ata, atb)
            return xi
        except np.linalg.LinAlgError:
            pass
    # Ill-conditioned: minimal-norm step from truncated eigendecomposition.
    w, v = np.linalg.eigh(ata)
    good = w > 1e-12 * w[-1]
    if not np.any(good):
        raise DegenerateGeometryError("point-to-plane system is singular")
    inv = np.zeros_like(w)
    inv[good] = 1.0 / w[good]
    return v @ (inv * (v.T @ atb))


def _increment_transform(xi) -> RigidTransform:
    omega, delta = xi[:3], xi[3:]
    angle = np.linalg.norm(omega)
    if angle < 1e-300:
        rot = np.eye(3)
    else:
        rot = rotation_about_axis(omega, angle)
    return RigidTransform(rot, delta)


def icp_point_to_plane(source: PointCloud, target: PointCloud,
                       init: RigidTransform | None = None,
                       max_iter: int = 50, tol: float = 1e-10,
                       rejection_ratio: float = 3.0,
                       converged_threshold: float = 1e-6,
                       ) -> tuple[RigidTransform, float, bool, list[float]]:
    """Point-to-plane ICP from `init`, minimizing the summed squared
    projections of residuals onto target normals.

    Returns (transform, residual, converged, history) where residual is the
    final mean squared point-to-plane error, converged requires the residual
    to fall below `converged_threshold`, and history holds the per-iteration
    residuals (non-increasing; steps that would increase the error are
    damped and iteration stops if no damping helps).
    """
    if target.normals is None:
        raise ValueError("target cloud must carry normals")
    if len(source) < 10 or len(target) < 10:
        raise ValueError("ICP needs at least 10 points in each cloud")
    spread = np.linalg.eigvalsh(np.cov(target.points.T))
    if spread[1] <= 1e-12 * max(spread[-1], 1e-300):
        raise DegenerateGeometryError("target cloud is collinear")

    transform = RigidTransform.identity() if init is None else init
    index = NeighborIndex(target)

    def residual_at(t: RigidTransform):
        moved = t.apply(source.points)
        pairs = _correspondences(moved, index, rejection_ratio)
        return point_to_plane_error(moved, target, pairs), moved, pairs

    residual, moved, pairs = residual_at(transform)
    history = [residual]
    converged = residual < converged_threshold
    for _ in range(max_iter):
        xi = _solve_increment(moved, target, *pairs)
        # Damped update: keep the residual sequence non-increasing.
        improved = False
        for _ in range(12):
            candidate = _increment_transform(xi).compose(transform)
            cand_res, cand_moved, cand_pairs = residual_at(candidate)
            if cand_res <= residual:
                improved = True
                break
            xi = 0.5 * xi
        if not improved:
            converged = residual < converged_threshold
            break
        decrease = residual - cand_res
        transform, residual = candidate, cand_res
        moved, pairs = cand_moved, cand_pairs
        history.append(residual)
        if decrease < tol:
            converged = residual < converged_threshold
            break
    else:
        converged = residual < converged_threshold
    return transform, residual, converged, history


def save_point_cloud(path, cloud: PointCloud) -> None:
    """Write the text format: `pc <count> <has_normals>` then one point per
    line in fixed decimal."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"pc {len(cloud)} {1 if cloud.has_normals else 0}\n")
        for i in range(len(cloud)):
            row = [f"{v:.12f}" for v in cloud.points[i]]
            if cloud.has_normals:
                row += [f"{v:.12f}" for v in cloud.normals[i]]
            fh.write(" ".join(row) + "\n")


def load_point_cloud(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "pc":
            raise ValueError(f"bad point-cloud header in {path}")
        count, has_normals = int(header[1]), bool(int(header[2]))
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if count == 0:
        return PointCloud(np.zeros((0, 3)),
                          np.zeros((0, 3)) if has_normals else None)
    if data.shape[0] != count:
        raise ValueError(f"expected {count} points, found {data.shape[0]}")
    if has_normals:
        if data.shape[1] != 6:
            raise ValueError("normals flagged but lines have no normal data")
        normals = data[:, 3:6]
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        return PointCloud(data[:, :3], normals)
    return PointCloud(data[:, :3])
