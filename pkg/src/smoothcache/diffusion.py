"""Linear-beta noise schedule and a deterministic DDIM (eta = 0) sampler."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .model import ALWAYS_COMPUTE, BranchPolicy

DEFAULT_GUIDANCE_SCALE = 1.5


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at diffusion step ``t`` in ``1..T``."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, int) or T < 1:
        raise ConfigError("sampler.train_steps", "must be a positive integer")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError("sampler.beta_start", "need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas, alpha_bars)


def forward_noise(x0: np.ndarray, t: int, schedule: NoiseSchedule, rng: nx.SeededRng) -> np.ndarray:
    a = schedule.alpha_bar(t)
    x0 = np.asarray(x0, dtype=nx.DTYPE)
    eps = rng.normal(x0.shape)
    return nx.DTYPE(np.sqrt(a)) * x0 + nx.DTYPE(np.sqrt(1.0 - a)) * eps


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 0.0
    seed: int = 0
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError("sampler.steps", "must be a positive integer")
        if self.steps > self.train_steps:
            raise ConfigError("sampler.steps", f"must be <= train_steps={self.train_steps}")
        if not self.cfg_scale >= 0.0:
            raise ConfigError("sampler.cfg_scale", "must be >= 0")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("sampler.seed", "must be a non-negative integer")

    @property
    def guided(self) -> bool:
        return self.cfg_scale > 0.0

    @property
    def batch(self) -> int:
        """Model batch per execution step: cond and uncond travel together under guidance."""
        return 2 if self.guided else 1

    def noise_schedule(self) -> NoiseSchedule:
        return make_schedule(self.train_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SamplerConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError("sampler", f"unknown fields {sorted(unknown)}")
        return cls(**data)


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced timesteps from ``1..T``, in descending (execution) order."""
    return [1 + (i * T) // steps for i in range(steps)][::-1]


def initial_noise(shape, seed: int) -> np.ndarray:
    return nx.SeededRng(seed).normal(shape)


def ddim_step(x_t: np.ndarray, eps: np.ndarray, alpha_bar_t: float, alpha_bar_prev: float):
    """One eta=0 DDIM update; returns ``(x_prev, x0_pred)``."""
    sa, s1a = nx.DTYPE(np.sqrt(alpha_bar_t)), nx.DTYPE(np.sqrt(1.0 - alpha_bar_t))
    sp, s1p = nx.DTYPE(np.sqrt(alpha_bar_prev)), nx.DTYPE(np.sqrt(1.0 - alpha_bar_prev))
    x0_pred = (x_t - s1a * eps) / sa
    return sp * x0_pred + s1p * eps, x0_pred


def ddim_sample(
    model,
    sampler_cfg: SamplerConfig,
    schedule: NoiseSchedule | None = None,
    policy: BranchPolicy = ALWAYS_COMPUTE,
    context: np.ndarray | None = None,
    x_T: np.ndarray | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the reverse chain from seeded noise; returns ``(x0, trajectory)``.

    With guidance enabled the conditional and unconditional inputs are stacked
    into one batch of two (conditional first) so the policy sees a single
    forward per execution step.  The trajectory holds ``x_T`` and the state
    after each of the ``steps`` updates.
    """
    schedule = schedule or sampler_cfg.noise_schedule()
    cfg = model.cfg
    shape = (cfg.tokens, cfg.channels)
    x = initial_noise(shape, sampler_cfg.seed) if x_T is None else nx.as_tensor(x_T, name="x_T")
    if x.shape != shape:
        raise ShapeError(f"x_T shape {x.shape} != {shape}")
    if sampler_cfg.guided:
        if context is None:
            raise ConfigError("sampler.cfg_scale", "guidance needs a conditioning context")
        batch_context = np.stack([np.asarray(context, nx.DTYPE), model.null_context])
    else:
        batch_context = None if context is None else np.asarray(context, nx.DTYPE)[None]
    w = nx.DTYPE(sampler_cfg.cfg_scale)

    timesteps = sampling_timesteps(schedule.T, sampler_cfg.steps)
    trajectory = [x]
    for s, t in enumerate(timesteps):
        a_t = schedule.alpha_bar(t)
        a_prev = schedule.alpha_bar(timesteps[s + 1]) if s + 1 < len(timesteps) else 1.0
        if sampler_cfg.guided:
            eps, _ = model.forward(np.stack([x, x]), t, batch_context, policy, s)
            eps = eps[1] + w * (eps[0] - eps[1])
        else:
            eps, _ = model.forward(x[None], t, batch_context, policy, s)
            eps = eps[0]
        x, _ = ddim_step(x, eps, a_t, a_prev)
        trajectory.append(x)
    return x, trajectory
