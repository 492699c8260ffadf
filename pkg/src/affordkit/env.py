"""Synthetic kinematic manipulation environment.

A 3-link planar arm (confined to the z = 0 plane of a 3D scene) interacts
with procedurally generated articulated objects -- prismatic drawers and
revolute doors.  Kinematics are energy-free: the object joint moves only
while the grasp predicate holds, following the end-effector displacement
projected on the joint axis (prismatic) or handle tangent (revolute).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .affordance import Affordance
from .geometry import PointCloud, farthest_point_indices, \
    rotation_about_axis
from .policy import DemoEpisode, ObservationFrame
from .sampler import KinematicChain, forward_kinematics


@dataclass(frozen=True)
class NoiseLevel:
    robot_position: float
    robot_dof: float
    object_position: float

    def __post_init__(self):
        for value in (self.robot_position, self.robot_dof,
                      self.object_position):
            if value < 0:
                raise ValueError("noise scales must be non-negative")


NOISE_LEVELS = {
    "none": NoiseLevel(0.0, 0.0, 0.0),
    "easy": NoiseLevel(0.025, 0.025, 0.01),
    "median": NoiseLevel(0.05, 0.05, 0.05),
    "hard": NoiseLevel(0.1, 0.1, 0.05),
}

SUCCESS_THRESHOLDS = {"drawer": 0.15, "door": np.deg2rad(30.0)}

_CATEGORY_IDS = {"drawer": 1, "door": 2}


def inject_noise(x, xi: float, rng, uniform: bool = False) -> np.ndarray:
    """Perturb x by 2*xi*N(0,1) - xi per coordinate (mean -xi, sd 2*xi).

    The additive-bias form is intentional; `uniform` swaps in a zero-mean
    uniform [-xi, xi] alternative.
    """
    x = np.asarray(x, dtype=np.float64)
    if uniform:
        return x + rng.uniform(-xi, xi, x.shape)
    return x + 2.0 * xi * rng.standard_normal(x.shape) - xi


# -- procedural objects -------------------------------------------------------

@dataclass
class Face:
    """Rectangular surface patch in canonical (object-local) coordinates."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    part: str
    moving: bool

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))


def _bar_faces(x0: float, x1: float, y0: float, y1: float, z0: float,
               z1: float, part: str, moving: bool, skip_back: bool = True):
    """Axis-aligned box faces; the +x face (glued to the panel) optional."""
    dx, dy, dz = x1 - x0, y1 - y0, z1 - z0
    faces = [
        Face((x0, y0, z0), (0, dy, 0), (0, 0, dz), part, moving),   # -x
        Face((x0, y0, z0), (dx, 0, 0), (0, 0, dz), part, moving),   # -y
        Face((x0, y1, z0), (dx, 0, 0), (0, 0, dz), part, moving),   # +y
        Face((x0, y0, z0), (dx, 0, 0), (0, dy, 0), part, moving),   # -z
        Face((x0, y0, z1), (dx, 0, 0), (0, dy, 0), part, moving),   # +z
    ]
    if not skip_back:
        faces.append(Face((x1, y0, z0), (0, dy, 0), (0, 0, dz), part,
                          moving))
    return faces


@dataclass
class ArticulatedObject:
    """Canonical-frame geometry of a one-joint object.

    The canonical frame has the interaction plane at x = 0 with the body
    behind it (+x); the handle protrudes toward -x (the robot side).  The
    world placement translates the canonical origin to a position.
    """

    category: str
    object_id: str
    faces: list
    handle_local: np.ndarray
    joint_type: str                  # "prismatic" or "revolute"
    joint_axis: np.ndarray
    hinge_local: np.ndarray
    joint_limits: tuple
    nominal_position: np.ndarray
    dims: dict = field(default_factory=dict)
    joint_value: float = 0.0

    def __post_init__(self):
        self.handle_local = np.asarray(self.handle_local, dtype=np.float64)
        self.joint_axis = np.asarray(self.joint_axis, dtype=np.float64)
        self.hinge_local = np.asarray(self.hinge_local, dtype=np.float64)
        self.nominal_position = np.asarray(self.nominal_position,
                                           dtype=np.float64)


_HANDLE_DEPTH = 0.035
_HANDLE_HALF_LEN = 0.04
_HANDLE_HALF_THICK = 0.012


def _handle_bar(hy: float, part_moving: bool):
    return _bar_faces(-_HANDLE_DEPTH, 0.0, hy - _HANDLE_HALF_LEN,
                      hy + _HANDLE_HALF_LEN, -_HANDLE_HALF_THICK,
                      _HANDLE_HALF_THICK, "handle", part_moving)


def _drawer(rng, variation: float, object_id: str) -> ArticulatedObject:
    u = rng.uniform(-1.0, 1.0, 4)
    width = 0.34 + 0.10 * variation * u[0]
    height = 0.20 + 0.06 * variation * u[1]
    depth = 0.25 + 0.08 * variation * u[2]
    hy = variation * u[3] * (width / 2 - 0.07)
    w2, h2 = width / 2, height / 2
    faces = [
        # moving front panel + handle
        Face((0, -w2, -h2), (0, width, 0), (0, 0, height), "panel", True),
        *_handle_bar(hy, True),
        # static body shell
        Face((0, -w2, h2), (depth, 0, 0), (0, width, 0), "body", False),
        Face((0, -w2, -h2), (depth, 0, 0), (0, width, 0), "body", False),
        Face((0, -w2, -h2), (depth, 0, 0), (0, 0, height), "body", False),
        Face((0, w2, -h2), (depth, 0, 0), (0, 0, height), "body", False),
        Face((depth, -w2, -h2), (0, width, 0), (0, 0, height), "body",
             False),
    ]
    return ArticulatedObject(
        category="drawer", object_id=object_id, faces=faces,
        handle_local=np.array([-_HANDLE_DEPTH, hy, 0.0]),
        joint_type="prismatic", joint_axis=np.array([-1.0, 0.0, 0.0]),
        hinge_local=np.zeros(3), joint_limits=(0.0, 0.30),
        nominal_position=np.array([0.50, 0.0, 0.0]),
        dims={"width": width, "height": height, "depth": depth,
              "handle_y": hy})


def _door(rng, variation: float, object_id: str) -> ArticulatedObject:
    u = rng.uniform(-1.0, 1.0, 3)
    width = 0.36 + 0.10 * variation * u[0]
    height = 0.22 + 0.06 * variation * u[1]
    hy = width / 2 - 0.07 + 0.025 * variation * u[2]
    w2, h2 = width / 2, height / 2
    jamb = 0.08
    faces = [
        Face((0, -w2, -h2), (0, width, 0), (0, 0, height), "panel", True),
        *_handle_bar(hy, True),
        # static frame: two jambs and a lintel in the door plane
        Face((0, -w2 - jamb, -h2), (0, jamb, 0), (0, 0, height), "body",
             False),
        Face((0, w2, -h2), (0, jamb, 0), (0, 0, height), "body", False),
        Face((0, -w2 - jamb, h2), (0, width + 2 * jamb, 0), (0, 0, 0.06),
             "body", False),
    ]
    return ArticulatedObject(
        category="door", object_id=object_id, faces=faces,
        handle_local=np.array([-_HANDLE_DEPTH, hy, 0.0]),
        joint_type="revolute", joint_axis=np.array([0.0, 0.0, 1.0]),
        hinge_local=np.array([0.0, -w2, 0.0]), joint_limits=(0.0, 1.3),
        nominal_position=np.array([0.50, -0.08, 0.0]),
        dims={"width": width, "height": height, "handle_y": hy})


def generate_object(category: str, seed: int,
                    variation: float = 1.0) -> ArticulatedObject:
    """Deterministic procedural instance; variation 0 is the prototype."""
    if category not in _CATEGORY_IDS:
        raise ValueError(f"unknown category '{category}'")
    if not 0.0 <= variation <= 1.0:
        raise ValueError("variation must lie in [0, 1]")
    rng = np.random.default_rng([_CATEGORY_IDS[category], int(seed)])
    object_id = f"{category}-{int(seed)}"
    if category == "drawer":
        return _drawer(rng, variation, object_id)
    return _door(rng, variation, object_id)


# -- world state -------------------------------------------------------------

@dataclass
class WorldState:
    chain: KinematicChain
    q_pos: np.ndarray
    gripper: float
    joint_value: float
    object_position: np.ndarray
    canonical_points: np.ndarray      # (N, 3) chart, aligned with the cloud
    point_parts: np.ndarray           # (N,) part labels
    point_moving: np.ndarray          # (N,) bool
    ever_grasped: bool = False
    clamped: bool = False
    seed: int = 0


@dataclass
class EnvConfig:
    num_points: int = 512
    oversample: int = 4
    grasp_radius: float = 0.03
    rate_limit: float = 0.25
    gripper_rate: float = 1.0
    link_lengths: tuple = (0.4, 0.35, 0.3)
    q_init: tuple = (1.2, -1.8, 0.8)
    q_limit: float = 2.9
    uniform_noise: bool = False


def _placed_points(obj: ArticulatedObject, canonical: np.ndarray,
                   moving: np.ndarray, joint_value: float,
                   position: np.ndarray) -> np.ndarray:
    pts = canonical.copy()
    if np.any(moving):
        if obj.joint_type == "prismatic":
            pts[moving] += joint_value * obj.joint_axis
        else:
            rot = rotation_about_axis(obj.joint_axis, joint_value)
            pts[moving] = obj.hinge_local + \
                (pts[moving] - obj.hinge_local) @ rot.T
    return pts + position


def handle_world(obj: ArticulatedObject, joint_value: float,
                 position: np.ndarray) -> np.ndarray:
    moving = np.array([True])
    return _placed_points(obj, obj.handle_local[None].copy(), moving,
                          joint_value, position)[0]


class Environment:
    """Value-state kinematic environment around one articulated object."""

    def __init__(self, obj: ArticulatedObject,
                 config: EnvConfig | None = None):
        self.object = obj
        self.config = config if config is not None else EnvConfig()

    # -- observation ------------------------------------------------------

    def render(self, state: WorldState) -> ObservationFrame:
        pts = _placed_points(self.object, state.canonical_points,
                             state.point_moving, state.joint_value,
                             state.object_position)
        proprio = np.concatenate([state.q_pos, [state.gripper]])
        return ObservationFrame(PointCloud(pts), proprio)

    def ee_position(self, state: WorldState) -> np.ndarray:
        return forward_kinematics(state.chain, state.q_pos)[0]

    def handle_position(self, state: WorldState) -> np.ndarray:
        return handle_world(self.object, state.joint_value,
                            state.object_position)

    # -- lifecycle ----------------------------------------------------------

    def reset(self, noise, seed: int):
        if isinstance(noise, str):
            noise = NOISE_LEVELS[noise]
        cfg = self.config
        rng = np.random.default_rng(seed)
        base_xy = inject_noise(np.zeros(2), noise.robot_position, rng,
                               cfg.uniform_noise)
        q0 = inject_noise(np.array(cfg.q_init, dtype=np.float64),
                          noise.robot_dof, rng, cfg.uniform_noise)
        clamped = bool(np.any(np.abs(q0) > cfg.q_limit))
        q0 = np.clip(q0, -cfg.q_limit, cfg.q_limit)
        pos_xy = inject_noise(self.object.nominal_position[:2],
                              noise.object_position, rng, cfg.uniform_noise)
        position = np.array([pos_xy[0], pos_xy[1], 0.0])

        faces = self.object.faces
        areas = np.array([f.area for f in faces])
        count = cfg.oversample * cfg.num_points
        choice = rng.choice(len(faces), size=count, p=areas / areas.sum())
        uv = rng.uniform(0.0, 1.0, (count, 2))
        origins = np.stack([f.origin for f in faces])
        us = np.stack([f.u for f in faces])
        vs = np.stack([f.v for f in faces])
        canonical = origins[choice] + uv[:, :1] * us[choice] \
            + uv[:, 1:] * vs[choice]
        parts = np.array([f.part for f in faces])[choice]
        moving = np.array([f.moving for f in faces])[choice]

        world = _placed_points(self.object, canonical, moving,
                               self.object.joint_value, position)
        keep = farthest_point_indices(world, cfg.num_points,
                                      seed=int(rng.integers(2 ** 31)))
        chain = KinematicChain(cfg.link_lengths, ("revolute",) * 3,
                               base=np.array([base_xy[0], base_xy[1], 0.0]))
        state = WorldState(chain=chain, q_pos=q0, gripper=1.0,
                           joint_value=self.object.joint_value,
                           object_position=position,
                           canonical_points=canonical[keep],
                           point_parts=parts[keep],
                           point_moving=moving[keep],
                           clamped=clamped, seed=seed)
        return state, self.render(state)

    def step(self, state: WorldState, action):
        cfg = self.config
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (state.q_pos.shape[0] + 1,):
            raise ValueError(f"action must have {state.q_pos.shape[0] + 1} "
                             f"entries")
        q_target = action[:-1]
        clamped = state.clamped
        if np.any(np.abs(q_target) > cfg.q_limit) or \
                not np.isfinite(action).all():
            q_target = np.clip(np.nan_to_num(q_target), -cfg.q_limit,
                               cfg.q_limit)
            clamped = True
        dq = np.clip(q_target - state.q_pos, -cfg.rate_limit,
                     cfg.rate_limit)
        q_new = state.q_pos + dq
        g_target = float(np.clip(np.nan_to_num(action[-1]), 0.0, 1.0))
        g_new = state.gripper + float(np.clip(g_target - state.gripper,
                                              -cfg.gripper_rate,
                                              cfg.gripper_rate))

        p_old = forward_kinematics(state.chain, state.q_pos)[0]
        handle_old = self.handle_position(state)
        grasped = state.gripper < 0.5 and \
            float(np.linalg.norm(p_old - handle_old)) <= cfg.grasp_radius
        joint_value = state.joint_value
        if grasped:
            p_new = forward_kinematics(state.chain, q_new)[0]
            dp = p_new - p_old
            lo, hi = self.object.joint_limits
            if self.object.joint_type == "prismatic":
                joint_value = float(np.clip(
                    joint_value + dp @ self.object.joint_axis, lo, hi))
            else:
                hinge = self.object.hinge_local + state.object_position
                radial = handle_old - hinge
                radial[2] = 0.0
                radius = float(np.linalg.norm(radial))
                tangent = np.cross(self.object.joint_axis, radial) / radius
                joint_value = float(np.clip(
                    joint_value + (dp @ tangent) / radius, lo, hi))
        new_state = dataclasses.replace(
            state, q_pos=q_new, gripper=g_new, joint_value=joint_value,
            ever_grasped=state.ever_grasped or grasped, clamped=clamped)
        return new_state, self.render(new_state)


# -- evaluation -----------------------------------------------------------------

def evaluate(state: WorldState, category: str) -> bool:
    """Task success: joint displacement past threshold AND a handle grasp."""
    if category not in SUCCESS_THRESHOLDS:
        raise ValueError(f"unknown category '{category}'")
    return bool(state.ever_grasped and
                state.joint_value >= SUCCESS_THRESHOLDS[category])


# -- scripted expert ----------------------------------------------------------

def ik_solve(chain: KinematicChain, q_start: np.ndarray, target,
             q_limit: float, tol: float = 1e-4, max_iter: int = 150,
             damping: float = 0.05, centering: float = 0.1):
    """Damped-least-squares IK in the plane; returns (q, converged).

    A null-space term biases the redundant joint toward zero so tracked
    paths do not wind the arm into its joint limits.
    """
    q = np.asarray(q_start, dtype=np.float64).copy()
    target = np.asarray(target, dtype=np.float64)
    for _ in range(max_iter):
        p, jac = forward_kinematics(chain, q)
        err = (target - p)[:2]
        if np.linalg.norm(err) < tol:
            return q, True
        j = jac[:2]
        step = j.T @ np.linalg.solve(j @ j.T + damping ** 2 * np.eye(2),
                                     err)
        if centering:
            # Exact projector: null-space centering must not leak into
            # end-effector motion or convergence stalls above tol.
            null = np.eye(q.size) - np.linalg.pinv(j) @ j
            step = step - centering * (null @ q)
        q = np.clip(q + np.clip(step, -0.2, 0.2), -q_limit, q_limit)
    return q, False


class InfeasibleEpisodeError(RuntimeError):
    """Raised internally when the expert cannot complete an episode."""


def scripted_expert(env: Environment, noise, seed: int,
                    noise_name: str | None = None, max_frames: int = 160,
                    explore: float = 0.0):
    """Run one expert episode; returns (DemoEpisode | None, info dict).

    Phases: IK approach to the handle, gripper close, then joint-space
    tracking of the handle path (axis pull or hinge arc) past the success
    threshold.  Unreachable targets mark the episode infeasible and no
    demo is emitted.

    `explore` jitters the *executed* joint targets by U(-explore, explore)
    during the approach while the recorded actions stay the clean targets,
    so demos cover the recovery states a learned policy visits; 0 disables
    it and reproduces the exact unjittered episode.  The grasp and pull
    phases are never jittered (the approach settles on the goal before
    closing), so episode yield is unaffected for small amplitudes.
    """
    if isinstance(noise, str):
        noise_name = noise_name or noise
        noise = NOISE_LEVELS[noise]
    noise_name = noise_name or "custom"
    obj = env.object
    cfg = env.config
    if explore < 0.0 or not np.isfinite(explore):
        raise ValueError("explore amplitude must be finite and >= 0")
    explore_rng = np.random.default_rng([seed, 1729]) if explore > 0.0 \
        else None

    def executed(action):
        if explore_rng is None:
            return action
        q = np.clip(action[:-1] + explore_rng.uniform(
            -explore, explore, action.shape[0] - 1),
            -cfg.q_limit, cfg.q_limit)
        return np.concatenate([q, action[-1:]])

    state, frame = env.reset(noise, seed)
    threshold = SUCCESS_THRESHOLDS[obj.category]
    target_joint = min(threshold * 1.25, obj.joint_limits[1])
    reach = 0.98 * sum(cfg.link_lengths)
    base = state.chain.base

    waypoints = [handle_world(obj, v, state.object_position)
                 for v in (0.0, target_joint)]
    if any(np.linalg.norm(w - base) > reach for w in waypoints):
        return None, {"infeasible": True, "reason": "handle outside reach",
                      "success": False}

    proprio, actions, clouds = [], [], []

    def record(action, current_frame):
        proprio.append(current_frame.proprio)
        actions.append(np.asarray(action, dtype=np.float64))
        clouds.append(current_frame.cloud)

    # approach
    q_goal, ok = ik_solve(state.chain, state.q_pos,
                          env.handle_position(state), cfg.q_limit)
    if not ok:
        return None, {"infeasible": True, "reason": "approach IK failed",
                      "success": False}
    guard = 0
    while np.max(np.abs(state.q_pos - q_goal)) > explore + 1e-9:
        action = np.concatenate([q_goal, [1.0]])
        record(action, frame)
        state, frame = env.step(state, executed(action))
        guard += 1
        if guard > max_frames:
            return None, {"infeasible": True, "reason": "approach stalled",
                          "success": False}
    if explore_rng is not None:
        # settle exactly on the goal (no jitter) so the grasp still lands
        # inside the radius
        for _ in range(2):
            action = np.concatenate([q_goal, [1.0]])
            record(action, frame)
            state, frame = env.step(state, action)
    if np.linalg.norm(env.ee_position(state) - env.handle_position(state)) \
            > 0.5 * cfg.grasp_radius:
        return None, {"infeasible": True, "reason": "approach missed",
                      "success": False}

    # grasp
    for _ in range(2):
        action = np.concatenate([state.q_pos, [0.0]])
        record(action, frame)
        state, frame = env.step(state, action)

    # post-contact pull / arc
    contact = env.ee_position(state).copy()
    trajectory = [contact]
    delta = 0.02 if obj.joint_type == "prismatic" else 0.04
    # The tracked joint converges to within IK tolerance of the target, so
    # demand it only up to a hair; exact equality would spin out the budget.
    while state.joint_value < target_joint - 1e-3 and \
            len(actions) < max_frames:
        slipping = np.linalg.norm(env.ee_position(state) -
                                  env.handle_position(state)) \
            > 0.5 * cfg.grasp_radius
        next_value = state.joint_value if slipping else \
            min(state.joint_value + delta, target_joint)
        target = handle_world(obj, next_value, state.object_position)
        q_des, ok = ik_solve(state.chain, state.q_pos, target, cfg.q_limit)
        if not ok:
            return None, {"infeasible": True, "reason": "pull IK failed",
                          "success": False}
        action = np.concatenate([q_des, [0.0]])
        record(action, frame)
        # no jitter while pulling: slip-recovery jumps under jitter break
        # the recorded end-effector path's step bound
        state, frame = env.step(state, action)
        trajectory.append(env.ee_position(state).copy())
    if state.joint_value < threshold:
        return None, {"infeasible": True, "reason": "pull stalled",
                      "success": False}

    affordance = Affordance(contact, np.array(trajectory))
    episode = DemoEpisode(obj.category, obj.object_id, seed, noise_name,
                          np.stack(proprio), np.stack(actions), clouds,
                          affordance)
    info = {"infeasible": False, "success": evaluate(state, obj.category),
            "final_joint": state.joint_value,
            "ever_grasped": state.ever_grasped, "state": state}
    return episode, info
