"""DDPM schedules, forward noising, the masked denoising loss and reverse-time samplers.

Everything is written in the noise-prediction form: a model returns eps_hat(x_t, t), and
the score is -eps_hat / sqrt(1 - alpha_bar_t). Timesteps run 1..T; schedule arrays carry
an extra entry at index 0 with alpha_bar_0 = 1 so that "t - 1 = 0" is the clean data.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np

from tetdiff.errors import DimensionError, NumericError, ParameterError, StateError
from tetdiff.tetgrid import CubicEmbedding, GridState, TetGrid, extract_from_cubic

if TYPE_CHECKING:
    from tetdiff.scoremodel import ScoreModel

logger = logging.getLogger(__name__)

SDF_CHANNEL = 3
SLERP_LINEAR_BELOW = 1e-6

StepCallback = Callable[[int, np.ndarray], None]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray  # (T + 1,), betas[0] = 0
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sqrt_alpha_bars: np.ndarray
    sqrt_one_minus_alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1


@dataclass(frozen=True, eq=False)
class DiffusionTensor:
    """Data channels of a cubic embedding together with the lattice mask."""

    values: np.ndarray  # (C, L, L, L) float64
    mask: np.ndarray  # (L, L, L) bool

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 4 or values.shape[1:] != self.mask.shape:
            raise DimensionError(f"values {values.shape} do not match mask {self.mask.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("diffusion tensor holds non-finite values")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_embedding(cls, emb: CubicEmbedding) -> DiffusionTensor:
        return cls(emb.data * emb.mask, emb.mask)


def make_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    if T < 2:
        raise ParameterError(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sqrt_alpha_bars=np.sqrt(alpha_bars),
        sqrt_one_minus_alpha_bars=np.sqrt(1.0 - alpha_bars),
    )


# ---------------------------------------------------------------------------
# Forward process and loss
# ---------------------------------------------------------------------------


def _check_t(t: int, sched: NoiseSchedule, lowest: int = 1) -> None:
    if not lowest <= t <= sched.T:
        raise ParameterError(f"timestep {t} outside [{lowest}, {sched.T}]")


def _pin(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return x if mask is None else x * mask


def forward_sample(
    x0: np.ndarray,
    t: int,
    noise: np.ndarray,
    sched: NoiseSchedule,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Closed-form draw from q(x_t | x_0); t = 0 returns x_0."""
    x0 = np.asarray(x0, dtype=np.float64)
    if np.shape(noise) != x0.shape:
        raise DimensionError(f"noise shape {np.shape(noise)} does not match data {x0.shape}")
    _check_t(t, sched, lowest=0)
    xt = sched.sqrt_alpha_bars[t] * x0 + sched.sqrt_one_minus_alpha_bars[t] * noise
    return _pin(xt, mask)


def masked_mse(
    eps_hat: np.ndarray, eps: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean squared error over mask-1 sites, and its gradient w.r.t. eps_hat."""
    m = np.broadcast_to(mask, eps.shape)
    count = np.count_nonzero(m)
    if count == 0:
        raise ParameterError("mask selects no sites; loss is undefined")
    diff = (eps_hat - eps) * m
    return float(np.sum(diff**2) / count), 2.0 * diff / count


def denoising_loss(
    model: ScoreModel,
    x0_batch: Sequence[np.ndarray] | np.ndarray,
    mask: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    t: int | None = None,
) -> float:
    """Masked eps-prediction loss averaged over the batch; t ~ U{1..T} per item unless fixed."""
    if len(x0_batch) == 0:
        raise ParameterError("empty batch")
    if not np.any(mask):
        raise ParameterError("mask selects no sites; loss is undefined")
    total = 0.0
    for x0 in x0_batch:
        ti = int(rng.integers(1, sched.T + 1)) if t is None else t
        eps = _pin(rng.standard_normal(np.shape(x0)), mask)
        xt = forward_sample(x0, ti, eps, sched, mask)
        eps_hat = model.eval(xt, ti, mask)
        if not np.all(np.isfinite(eps_hat)):
            raise NumericError(f"model output is not finite at t={ti}", step=ti)
        loss, _ = masked_mse(eps_hat, eps, mask)
        total += loss
    return total / len(x0_batch)


def predict_x0(
    xt: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule, clip: bool = False
) -> np.ndarray:
    x0 = (xt - sched.sqrt_one_minus_alpha_bars[t] * eps_hat) / sched.sqrt_alpha_bars[t]
    return np.clip(x0, -1.0, 1.0) if clip else x0


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def draw_latent(
    rng: np.random.Generator | int, shape: tuple[int, ...], mask: np.ndarray | None = None
) -> np.ndarray:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return _pin(rng.standard_normal(shape), mask)


def _check_finite(x: np.ndarray, t: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in sampler trajectory at t={t}", step=t)


def _ddpm_step(
    model: ScoreModel,
    sched: NoiseSchedule,
    x: np.ndarray,
    t: int,
    rng: np.random.Generator,
    mask: np.ndarray | None,
    on_step: StepCallback | None,
) -> np.ndarray:
    eps_hat = model.eval(x, t, mask)
    if on_step is not None:
        on_step(t, _pin(predict_x0(x, t, eps_hat, sched, clip=True), mask))
    coef = sched.betas[t] / sched.sqrt_one_minus_alpha_bars[t]
    x = (x - coef * eps_hat) / np.sqrt(sched.alphas[t])
    if t > 1:
        x = x + np.sqrt(sched.betas[t]) * rng.standard_normal(x.shape)
    x = _pin(x, mask)
    _check_finite(x, t)
    return x


def ddpm_sample(
    model: ScoreModel,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
    on_step: StepCallback | None = None,
) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0 with sigma_t^2 = beta_t."""
    x = draw_latent(rng, shape, mask)
    for t in range(sched.T, 0, -1):
        x = _ddpm_step(model, sched, x, t, rng, mask, on_step)
    return x


def ddim_timesteps(
    T: int, steps: int, spacing: Literal["quadratic", "uniform"] = "quadratic"
) -> np.ndarray:
    """Ascending 0-based step indices tau; the sampler visits t = tau + 1.

    A single step starts at t = T and lands directly on the clean estimate.
    """
    if steps < 1:
        raise ParameterError(f"need at least 1 sampler step, got {steps}")
    if steps > T:
        raise ParameterError(f"sampler steps {steps} exceed T={T}")
    if spacing not in ("quadratic", "uniform"):
        raise ParameterError(f"unknown spacing {spacing!r}")
    if steps == 1:
        return np.array([T - 1], dtype=np.int64)
    frac = np.arange(steps) / (steps - 1)
    if spacing == "quadratic":
        frac = frac**2
    return np.unique(np.round(frac * (T - 1)).astype(np.int64))


def ddim_sample(
    model: ScoreModel,
    sched: NoiseSchedule,
    latent: np.ndarray,
    steps: int,
    spacing: Literal["quadratic", "uniform"] = "quadratic",
    mask: np.ndarray | None = None,
    on_step: StepCallback | None = None,
    clip_x0: bool = True,
) -> np.ndarray:
    """Deterministic (eta = 0) sampling from a given latent over a strided timestep set."""
    ts = ddim_timesteps(sched.T, steps, spacing)[::-1] + 1
    x = _pin(np.asarray(latent, dtype=np.float64), mask)
    for i, t in enumerate(ts):
        prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        eps_hat = model.eval(x, int(t), mask)
        x0 = predict_x0(x, t, eps_hat, sched, clip=clip_x0)
        if clip_x0:
            eps_hat = (x - sched.sqrt_alpha_bars[t] * x0) / sched.sqrt_one_minus_alpha_bars[t]
        if on_step is not None:
            on_step(int(t), _pin(x0, mask))
        x = sched.sqrt_alpha_bars[prev] * x0 + sched.sqrt_one_minus_alpha_bars[prev] * eps_hat
        x = _pin(x, mask)
        _check_finite(x, int(t))
    return x


def slerp(z1: np.ndarray, z2: np.ndarray, u: float) -> np.ndarray:
    if not 0.0 <= u <= 1.0:
        raise ParameterError(f"interpolation weight must be in [0, 1], got {u}")
    a = np.asarray(z1, dtype=np.float64)
    b = np.asarray(z2, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ParameterError("cannot interpolate a zero latent")
    cos = np.clip(np.vdot(a, b) / (na * nb), -1.0, 1.0)
    omega = np.arccos(cos)
    if omega < SLERP_LINEAR_BELOW:
        return (1.0 - u) * a + u * b
    s = np.sin(omega)
    return np.sin((1.0 - u) * omega) / s * a + np.sin(u * omega) / s * b


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------


def conditional_sample(
    model: ScoreModel,
    sched: NoiseSchedule,
    known: np.ndarray,
    known_mask: np.ndarray,
    unfreeze_t: int,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
    on_step: StepCallback | None = None,
) -> np.ndarray:
    """Replacement conditioning.

    While t > unfreeze_t, the known sites of x_{t-1} are overwritten with a fresh
    forward-diffused draw of `known` at t - 1. Below that the whole tensor evolves freely.
    """
    known = np.asarray(known, dtype=np.float64)
    kmask = np.broadcast_to(np.asarray(known_mask, dtype=bool), known.shape)
    if not 0 <= unfreeze_t <= sched.T:
        raise ParameterError(f"unfreeze_t must be in [0, {sched.T}], got {unfreeze_t}")
    if mask is not None and np.any(kmask & ~np.broadcast_to(mask, known.shape)):
        raise ParameterError("known sites must lie inside the lattice mask")
    if not kmask.any():
        return ddpm_sample(model, sched, known.shape, rng, mask, on_step)

    def replace(x: np.ndarray, t: int) -> np.ndarray:
        draw = forward_sample(known, t, rng.standard_normal(known.shape), sched, mask)
        return np.where(kmask, draw, x)

    x = draw_latent(rng, known.shape, mask)
    if sched.T > unfreeze_t:
        x = replace(x, sched.T)
    for t in range(sched.T, 0, -1):
        x = _ddpm_step(model, sched, x, t, rng, mask, on_step)
        if t > unfreeze_t:
            x = replace(x, t - 1)
    return x


def refine_deformations(
    model: ScoreModel,
    sched: NoiseSchedule,
    x0: np.ndarray,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
    on_step: StepCallback | None = None,
) -> np.ndarray:
    """Regenerate the deformation channels conditioned on a normalized SDF channel."""
    x0 = np.asarray(x0, dtype=np.float64)
    sdf = x0[SDF_CHANNEL]
    sites = np.ones(sdf.shape, bool) if mask is None else np.asarray(mask, bool)
    if not np.all(np.abs(sdf[sites]) == 1.0):
        raise StateError("deformation refinement needs SDF values in {-1, +1}")
    known_mask = np.zeros(x0.shape, dtype=bool)
    known_mask[SDF_CHANNEL] = sites
    return conditional_sample(model, sched, x0, known_mask, 0, rng, mask, on_step)


def finalize(x0: np.ndarray, grid: TetGrid) -> GridState:
    """Signs of the SDF channel (0 -> +1) plus de-scaled, clipped deformations."""
    emb = CubicEmbedding(
        data=np.asarray(x0, dtype=np.float64),
        mask=np.ones(np.shape(x0)[1:], dtype=bool),
        vertex_sites=grid.vertex_sites,
    )
    raw = extract_from_cubic(emb, grid)
    deformation = np.clip(raw.deformation, -grid.delta_max, grid.delta_max)
    sdf = np.where(raw.sdf >= 0, 1.0, -1.0)
    return GridState(deformation, sdf, normalized=True)
