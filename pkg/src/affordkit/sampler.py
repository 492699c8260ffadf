"""Noise schedule, DDIM stepping, and guided sampling.

The sampler denoises an action chunk over a short inference subsequence of a
longer training schedule. Guidance corrects each step toward a contact
point: either by subtracting a weighted loss gradient from the DDIM update,
or by a fixed-radius spherical step along the normalized gradient. The
guidance loss is adaptive: it only acts when a predicted end-effector
position is within `theta` of the contact and never after grasping.

The policy object consumed by `sample` must expose `horizon`, `action_dim`,
`encode(obs, affordance) -> cond`, `predict_eps(a_norm, train_t, cond)`,
`denormalize(a_norm)`, and `denorm_scale` (the per-dimension slope of
denormalize, used to pull gradients back into normalized space).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TRAIN_STEPS = 500
DEFAULT_INFERENCE_STEPS = 10


class ScheduleError(ValueError):
    """The noise schedule violates monotonicity or range constraints."""


def sigma_value(alpha_bar_k: float, alpha_bar_prev: float) -> float:
    """Posterior noise scale for one step.

    sigma_k = sqrt((1 - abar_{k-1}) / (1 - abar_k))
              * sqrt(1 - abar_k / abar_{k-1})
    """
    if alpha_bar_k >= alpha_bar_prev:
        raise ScheduleError(
            f"alpha_bar must decrease along the chain "
            f"({alpha_bar_prev} -> {alpha_bar_k})")
    if not (0.0 < alpha_bar_k < 1.0) or not (0.0 < alpha_bar_prev <= 1.0):
        raise ScheduleError("alpha_bar values must lie in (0, 1]")
    return float(np.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_k))
                 * np.sqrt(1.0 - alpha_bar_k / alpha_bar_prev))


@dataclass
class NoiseSchedule:
    """Cumulative signal levels alpha_bar over training timesteps 0..T, plus
    the inference subsequence used for sampling.

    alpha_bar[0] is exactly 1; the inference map picks K + 1 indices from 0
    to T by uniform stride. Constructed schedules guarantee sigma_k^2 <=
    1 - alpha_bar_{k-1} on every consecutive inference pair, so the DDIM
    direction coefficient stays real.
    """

    alpha_bar: np.ndarray
    train_steps: int
    inference_steps: int
    index_map: np.ndarray = field(default=None)

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.alpha_bar.shape != (self.train_steps + 1,):
            raise ScheduleError("alpha_bar must have train_steps + 1 values")
        if abs(self.alpha_bar[0] - 1.0) > 1e-12:
            raise ScheduleError("alpha_bar[0] must be 1")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] <= 0.0:
            raise ScheduleError("alpha_bar must stay positive")
        if not 1 <= self.inference_steps <= self.train_steps:
            raise ScheduleError("inference_steps must be in [1, train_steps]")
        if self.index_map is None:
            self.index_map = np.linspace(
                0, self.train_steps,
                self.inference_steps + 1).round().astype(np.int64)
        self.index_map = np.asarray(self.index_map, dtype=np.int64)
        if np.any(np.diff(self.index_map) <= 0):
            raise ScheduleError("inference index map must strictly increase")
        for k in range(1, self.inference_steps + 1):
            abar_k = self.alpha_bar_at(k)
            abar_prev = self.alpha_bar_at(k - 1)
            sig = sigma_value(abar_k, abar_prev) if abar_prev < 1.0 else 0.0
            if sig * sig > 1.0 - abar_prev + 1e-12:
                raise ScheduleError(
                    f"sigma^2 exceeds 1 - alpha_bar at inference step {k}")

    def alpha_bar_at(self, k: int) -> float:
        """alpha_bar at inference position k (0 = clean end, K = pure noise)."""
        return float(self.alpha_bar[self.index_map[k]])

    def timestep(self, k: int) -> int:
        """Training timestep index for inference position k."""
        return int(self.index_map[k])

    def sigma(self, k: int) -> float:
        if k < 1:
            raise ScheduleError("sigma is defined for inference steps k >= 1")
        abar_prev = self.alpha_bar_at(k - 1)
        if abar_prev >= 1.0:
            return 0.0
        return sigma_value(self.alpha_bar_at(k), abar_prev)


def cosine_schedule(train_steps: int = DEFAULT_TRAIN_STEPS,
                    inference_steps: int = DEFAULT_INFERENCE_STEPS,
                    offset: float = 0.008) -> NoiseSchedule:
    """Squared-cosine alpha_bar with per-step betas clipped to 0.999."""
    t = np.arange(train_steps + 1) / train_steps
    f = np.cos((t + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
    raw = f / f[0]
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, 0.999)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar, train_steps, inference_steps)


def estimate_clean(a_k: np.ndarray, eps_pred: np.ndarray,
                   alpha_bar_k: float) -> np.ndarray:
    """Invert the forward noising: a0_hat = (a_k - sqrt(1-abar) eps)/sqrt(abar)."""
    if not 0.0 < alpha_bar_k <= 1.0:
        raise ValueError(f"alpha_bar_k must be in (0, 1], got {alpha_bar_k}")
    return (a_k - np.sqrt(1.0 - alpha_bar_k) * eps_pred) \
        / np.sqrt(alpha_bar_k)


def mu_theta(schedule: NoiseSchedule, k: int, a_k: np.ndarray,
             eps_pred: np.ndarray, eta: float = 1.0) -> np.ndarray:
    """Deterministic part of the DDIM update (no fresh-noise term)."""
    abar_k = schedule.alpha_bar_at(k)
    abar_prev = schedule.alpha_bar_at(k - 1)
    sig = eta * schedule.sigma(k)
    direction = np.sqrt(max(1.0 - abar_prev - sig * sig, 0.0))
    return np.sqrt(abar_prev) * estimate_clean(a_k, eps_pred, abar_k) \
        + direction * eps_pred


def ddim_step(schedule: NoiseSchedule, k: int, a_k: np.ndarray,
              eps_pred: np.ndarray, rng: np.random.Generator,
              eta: float = 1.0) -> np.ndarray:
    """One reverse step; eta scales the stochastic term (0 = deterministic)."""
    mean = mu_theta(schedule, k, a_k, eps_pred, eta)
    sig = eta * schedule.sigma(k)
    if sig > 0.0:
        return mean + sig * rng.standard_normal(a_k.shape)
    return mean


@dataclass
class GuidanceConfig:
    mode: str = "none"
    gamma: float = 1.0
    theta: float = 0.1
    delta_scale: float = 1.0
    min_grad_norm: float = 1e-8
    eta: float = 1.0
    stride: int = 1

    def __post_init__(self):
        if self.mode not in ("none", "loss_guided", "spherical"):
            raise ValueError(f"unknown guidance mode '{self.mode}'")
        if self.mode != "none" and self.theta <= 0.0:
            raise ValueError("theta must be positive when guidance is on")
        if self.gamma < 0.0 or self.delta_scale <= 0.0 or self.stride < 1:
            raise ValueError("invalid guidance parameters")


@dataclass
class KinematicChain:
    """Serial chain in the x-y plane: revolute joints turn the heading about
    z, prismatic joints extend along the current heading."""

    link_lengths: np.ndarray
    joint_types: tuple
    base: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.link_lengths = np.asarray(self.link_lengths, dtype=np.float64)
        self.base = np.asarray(self.base, dtype=np.float64).reshape(3)
        if len(self.link_lengths) < 1:
            raise ValueError("chain needs at least one joint")
        if np.any(self.link_lengths <= 0.0):
            raise ValueError("link lengths must be positive")
        if len(self.joint_types) != len(self.link_lengths):
            raise ValueError("one joint type per link")
        for jt in self.joint_types:
            if jt not in ("revolute", "prismatic"):
                raise ValueError(f"unknown joint type '{jt}'")

    @property
    def dof(self) -> int:
        return len(self.link_lengths)


def forward_kinematics(chain: KinematicChain, q_pos
                       ) -> tuple[np.ndarray, np.ndarray]:
    """End-effector position and its analytic 3 x dof Jacobian."""
    q = np.asarray(q_pos, dtype=np.float64).reshape(-1)
    if q.shape[0] != chain.dof:
        raise ValueError(f"expected {chain.dof} joint values, got {q.shape[0]}")
    heading = 0.0
    position = chain.base.copy()
    joint_origins = []
    headings = []
    for j in range(chain.dof):
        joint_origins.append(position.copy())
        if chain.joint_types[j] == "revolute":
            heading += q[j]
            extend = chain.link_lengths[j]
        else:
            extend = chain.link_lengths[j] + q[j]
        headings.append(heading)
        position = position + extend * np.array(
            [np.cos(heading), np.sin(heading), 0.0])
    jac = np.zeros((3, chain.dof))
    for j in range(chain.dof):
        if chain.joint_types[j] == "revolute":
            rel = position - joint_origins[j]
            jac[:, j] = np.array([-rel[1], rel[0], 0.0])
        else:
            jac[:, j] = np.array(
                [np.cos(headings[j]), np.sin(headings[j]), 0.0])
    return position, jac


def adaptive_loss(chain: KinematicChain, a_hat0: np.ndarray, contact,
                  theta: float, grasped: bool
                  ) -> tuple[float, np.ndarray]:
    """Mean end-effector distance to the contact over in-range action steps.

    Steps at distance >= theta contribute nothing; with no contributing
    steps (or once grasped) the loss and gradient are exactly zero. The
    gradient covers the joint-position dims of each step via the FK
    Jacobian; other action dims get zero.
    """
    a = np.asarray(a_hat0, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] < chain.dof:
        raise ValueError("action chunk must be (H, n_dim) with joint "
                         "positions in the leading dims")
    grad = np.zeros_like(a)
    if grasped:
        return 0.0, grad
    contact = np.asarray(contact, dtype=np.float64).reshape(3)
    contributions = []
    step_grads = []
    for i in range(a.shape[0]):
        p_ee, jac = forward_kinematics(chain, a[i, :chain.dof])
        diff = p_ee - contact
        dist = float(np.linalg.norm(diff))
        if dist < theta:
            contributions.append(dist)
            g = np.zeros(a.shape[1])
            if dist > 1e-12:
                g[:chain.dof] = jac.T @ (diff / dist)
            step_grads.append((i, g))
    if not contributions:
        return 0.0, grad
    count = len(contributions)
    for i, g in step_grads:
        grad[i] = g / count
    return float(np.mean(contributions)), grad


def guided_step_loss(schedule: NoiseSchedule, k: int, a_k: np.ndarray,
                     eps_pred: np.ndarray, loss_fn, gamma: float,
                     rng: np.random.Generator, eta: float = 1.0
                     ) -> tuple[np.ndarray, dict]:
    """DDIM step minus gamma times the loss gradient.

    `loss_fn(a0_hat) -> (loss, grad)` differentiates w.r.t. the clean
    estimate; the predictor is frozen, so the chain rule back to a_k is a
    1/sqrt(alpha_bar_k) scale. A non-finite gradient skips the correction
    for this step and flags the record.
    """
    abar_k = schedule.alpha_bar_at(k)
    a0_hat = estimate_clean(a_k, eps_pred, abar_k)
    loss, grad0 = loss_fn(a0_hat)
    base = ddim_step(schedule, k, a_k, eps_pred, rng, eta)
    record = {"k": k, "fired": False, "loss": float(loss),
              "grad_norm": 0.0, "displacement": 0.0, "skipped": False}
    if not np.isfinite(grad0).all():
        record["skipped"] = True
        return base, record
    grad_k = grad0 / np.sqrt(abar_k)
    gnorm = float(np.linalg.norm(grad_k))
    record["grad_norm"] = gnorm
    if gamma == 0.0 or gnorm == 0.0:
        return base, record
    record["fired"] = True
    record["displacement"] = float(gamma * gnorm)
    return base - gamma * grad_k, record


def guided_step_spherical(schedule: NoiseSchedule, k: int, a_k: np.ndarray,
                          eps_pred: np.ndarray, loss_fn, delta_scale: float,
                          rng: np.random.Generator, eta: float = 1.0,
                          min_grad_norm: float = 1e-8
                          ) -> tuple[np.ndarray, dict]:
    """Fixed-radius guidance: mu_theta minus sqrt(n) delta_k along the
    normalized gradient; falls back to a plain DDIM step below
    `min_grad_norm`."""
    abar_k = schedule.alpha_bar_at(k)
    a0_hat = estimate_clean(a_k, eps_pred, abar_k)
    loss, grad0 = loss_fn(a0_hat)
    record = {"k": k, "fired": False, "loss": float(loss),
              "grad_norm": 0.0, "displacement": 0.0, "skipped": False}
    if not np.isfinite(grad0).all():
        record["skipped"] = True
        return ddim_step(schedule, k, a_k, eps_pred, rng, eta), record
    grad_k = grad0 / np.sqrt(abar_k)
    gnorm = float(np.linalg.norm(grad_k))
    record["grad_norm"] = gnorm
    if gnorm < min_grad_norm:
        return ddim_step(schedule, k, a_k, eps_pred, rng, eta), record
    delta_k = delta_scale * schedule.sigma(k)
    displacement = np.sqrt(a_k.size) * delta_k
    record["fired"] = True
    record["displacement"] = float(displacement)
    return mu_theta(schedule, k, a_k, eps_pred, eta) \
        - displacement * grad_k / gnorm, record


def sample(policy, obs, affordance, schedule: NoiseSchedule,
           guidance: GuidanceConfig, seed: int, chain=None,
           grasped: bool = False, log: list | None = None) -> np.ndarray:
    """Denoise an action chunk conditioned on the observation and affordance.

    Guidance (when enabled) needs `chain` for forward kinematics; its loss
    is evaluated on the denormalized clean estimate against the affordance
    contact, with the adaptive theta gate and the grasped override. Per-step
    records are appended to `log` when given. Returns the denormalized
    (horizon, action_dim) chunk.
    """
    if guidance.mode != "none" and chain is None:
        raise ValueError("guidance requires a kinematic chain")
    rng = np.random.default_rng(seed)
    cond = policy.encode(obs, affordance)
    a = rng.standard_normal((policy.horizon, policy.action_dim))
    contact = affordance.contact

    def loss_fn(a0_norm):
        a0 = policy.denormalize(a0_norm)
        loss, grad = adaptive_loss(chain, a0, contact, guidance.theta,
                                   grasped)
        return loss, grad * policy.denorm_scale

    for k in range(schedule.inference_steps, 0, -1):
        eps = policy.predict_eps(a, schedule.timestep(k), cond)
        apply_guidance = guidance.mode != "none" and \
            (schedule.inference_steps - k) % guidance.stride == 0
        if not apply_guidance:
            a = ddim_step(schedule, k, a, eps, rng, guidance.eta)
            record = {"k": k, "fired": False, "loss": 0.0, "grad_norm": 0.0,
                      "displacement": 0.0, "skipped": False}
        elif guidance.mode == "loss_guided":
            a, record = guided_step_loss(schedule, k, a, eps, loss_fn,
                                         guidance.gamma, rng, guidance.eta)
        else:
            a, record = guided_step_spherical(
                schedule, k, a, eps, loss_fn, guidance.delta_scale, rng,
                guidance.eta, guidance.min_grad_norm)
        if log is not None:
            log.append(record)
    return policy.denormalize(a)


def write_guidance_log(path, records) -> None:
    """Structured text: one `step <k> gated <0|1> loss <v> grad_norm <v>
    displacement <v>` line per record."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"step {r['k']} gated {int(r['fired'])} "
                     f"loss {r['loss']:.9g} grad_norm {r['grad_norm']:.9g} "
                     f"displacement {r['displacement']:.9g}\n")


def read_guidance_log(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 10 or parts[0] != "step":
                raise ValueError(f"bad guidance log line: {line!r}")
            records.append({"k": int(parts[1]), "fired": bool(int(parts[3])),
                            "loss": float(parts[5]),
                            "grad_norm": float(parts[7]),
                            "displacement": float(parts[9]),
                            "skipped": False})
    return records
