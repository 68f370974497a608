"""Model-agnostic diffusion arithmetic.

All functions are pure. Every formula uses the cumulative product alpha_bar
(forward noising, the deterministic DDIM step and the one-step clean estimate
share that convention). Schedules are held in float64; the coefficients are
applied as Python floats so arrays keep their own dtype.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence
import logging
import math

import torch

from app.exceptions import NumericDomainError, ScheduleError, ShapeMismatchError

logger = logging.getLogger(__name__)

MIN_ALPHA_BAR = 1e-12


class NoiseSchedule:
    """Per-step betas with alpha = 1 - beta and alpha_bar = running product."""

    def __init__(self, betas: torch.Tensor):
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise ScheduleError("Schedule needs at least one step")
        if not torch.all((betas > 0) & (betas < 1)):
            raise ScheduleError("Every beta must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        return cls(torch.tensor(list(betas), dtype=torch.float64))

    @property
    def T(self) -> int:
        return int(self.betas.numel())

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at timestep t, with alpha_bar(0) = 1."""
        t = int(t)
        if t < 0 or t > self.T:
            raise ScheduleError(f"Timestep {t} outside [0, {self.T}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


@dataclass
class LatentState:
    z: torch.Tensor
    t: int

    def __post_init__(self):
        if not torch.isfinite(self.z).all():
            raise NumericDomainError(f"Latent at t={self.t} has non-finite entries")


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 2:
        raise ScheduleError(f"Schedule needs T >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(
            f"Need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return NoiseSchedule(betas)


def inference_timesteps(sched: NoiseSchedule, num_steps: int) -> List[int]:
    """Strided DDIM subsequence, descending, every entry in [1, T]."""
    if num_steps < 1 or num_steps > sched.T:
        raise ScheduleError(f"num_steps must be in [1, {sched.T}], got {num_steps}")
    stride = sched.T // num_steps
    return [1 + i * stride for i in range(num_steps)][::-1]


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _checked_alpha_bar(t: int, sched: NoiseSchedule) -> float:
    if t < 1:
        raise ScheduleError(f"Timestep must be >= 1, got {t}")
    alpha_bar = sched.alpha_bar(t)
    if alpha_bar < MIN_ALPHA_BAR:
        raise NumericDomainError(f"alpha_bar at t={t} is {alpha_bar:.3e}, below {MIN_ALPHA_BAR}")
    return alpha_bar


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps; `t` may be one step per batch row."""
    _check_same_shape(z0, eps, "forward_diffuse")
    if torch.is_tensor(t) and t.dim() == 1:
        if t.min() < 1 or t.max() > sched.T:
            raise ScheduleError(f"Timesteps must lie in [1, {sched.T}]")
        alpha_bar = sched.alpha_bars[t.cpu() - 1].to(device=z0.device, dtype=z0.dtype)
        alpha_bar = alpha_bar.view(-1, *([1] * (z0.dim() - 1)))
        return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps
    alpha_bar = sched.alpha_bar(int(t))
    return math.sqrt(alpha_bar) * z0 + math.sqrt(1.0 - alpha_bar) * eps


def predict_clean(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(z_t, eps_pred, "predict_clean")
    alpha_bar = _checked_alpha_bar(t, sched)
    return (z_t - math.sqrt(1.0 - alpha_bar) * eps_pred) / math.sqrt(alpha_bar)


def ddim_step(
    z_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    t_prev: Optional[int] = None,
) -> torch.Tensor:
    """Deterministic step from t to t_prev (default t - 1)."""
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ScheduleError(f"Previous timestep {t_prev} must lie in [0, {t})")
    z0_hat = predict_clean(z_t, eps_pred, t, sched)
    alpha_bar_prev = sched.alpha_bar(t_prev)
    return math.sqrt(alpha_bar_prev) * z0_hat + math.sqrt(1.0 - alpha_bar_prev) * eps_pred


def ddim_invert_step(
    z_prev: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    t_prev: Optional[int] = None,
) -> torch.Tensor:
    """Exact inverse of `ddim_step` under the same eps: maps z at t_prev back to t."""
    _check_same_shape(z_prev, eps_pred, "ddim_invert_step")
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ScheduleError(f"Previous timestep {t_prev} must lie in [0, {t})")
    alpha_bar = _checked_alpha_bar(t, sched)
    alpha_bar_prev = sched.alpha_bar(t_prev)
    z0_hat = (z_prev - math.sqrt(1.0 - alpha_bar_prev) * eps_pred) / math.sqrt(alpha_bar_prev)
    return math.sqrt(alpha_bar) * z0_hat + math.sqrt(1.0 - alpha_bar) * eps_pred


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, omega: float) -> torch.Tensor:
    _check_same_shape(eps_cond, eps_uncond, "cfg_combine")
    return eps_cond + omega * (eps_cond - eps_uncond)


def cg_combine(eps_pred: torch.Tensor, classifier_grad: torch.Tensor, omega: float) -> torch.Tensor:
    _check_same_shape(eps_pred, classifier_grad, "cg_combine")
    return eps_pred + (omega + 1.0) * classifier_grad


class LatentCodec:
    """Seam between image space and the space the denoiser works in."""

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class PixelCodec(LatentCodec):
    """Identity codec: the denoiser works directly on [-1, 1] pixels."""

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return image

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z
