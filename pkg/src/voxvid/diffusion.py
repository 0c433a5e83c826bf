"""DDPM forward process, losses, learned covariance, and ancestral sampling.

Timesteps are 1-based: ``beta[1] .. beta[T]`` hold the schedule, index 0 is
the convention ``alpha_bar[0] == 1`` so posterior coefficients are uniform
in t. The learned covariance interpolates log-variance between ``beta_t``
and the posterior ``beta_tilde_t``; its coefficient ``v`` is trained with a
KL term whose mean is detached (only the covariance learns from it).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, ShapeError, no_grad

__all__ = [
    "DiffusionSchedule",
    "ModelOutput",
    "build_schedule",
    "respace_schedule",
    "q_sample",
    "posterior_params",
    "loss_simple",
    "loss_vlb",
    "ddpm_sample",
]


class ParameterError(ValueError):
    """Invalid schedule or timestep parameters."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed noise schedule; all arrays are length T+1, index 0 unused
    except ``alpha_bar[0] == 1``."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    log_beta: np.ndarray
    log_posterior_var_clipped: np.ndarray
    # Original-scale timestep for each local index (identity unless respaced).
    timestep_map: np.ndarray


@dataclass
class ModelOutput:
    """Denoiser output: predicted noise and covariance-interpolation coefficient."""

    eps_pred: Tensor
    v_pred: Tensor

    def __post_init__(self):
        if self.eps_pred.shape != self.v_pred.shape:
            raise ShapeError(
                f"eps/v shapes differ: {self.eps_pred.shape} vs {self.v_pred.shape}"
            )


def _finish_schedule(beta: np.ndarray, timestep_map: np.ndarray) -> DiffusionSchedule:
    T = beta.size - 1
    alpha = 1.0 - beta
    alpha[0] = 1.0
    alpha_bar = np.cumprod(alpha)
    posterior_var = np.zeros(T + 1)
    posterior_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    log_pv = np.zeros(T + 1)
    # beta_tilde_1 == 0; clip its log to the t=2 value (standard practice so the
    # covariance interpolation stays finite at t=1).
    log_pv[2:] = np.log(posterior_var[2:])
    log_pv[1] = log_pv[2] if T >= 2 else np.log(beta[1])
    log_beta = np.zeros(T + 1)
    log_beta[1:] = np.log(beta[1:])
    return DiffusionSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
        log_beta=log_beta,
        log_posterior_var_clipped=log_pv,
        timestep_map=timestep_map,
    )


def build_schedule(
    T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2
) -> DiffusionSchedule:
    """Linear variance schedule: beta[1] = beta_min, beta[T] = beta_max."""
    if T < 2:
        raise ParameterError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ParameterError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.zeros(T + 1)
    t = np.arange(1, T + 1)
    beta[1:] = beta_min + (t - 1) / (T - 1) * (beta_max - beta_min)
    sched = _finish_schedule(beta, np.arange(T + 1))
    assert np.all(np.diff(sched.beta[1:]) > 0), "linear schedule must increase"
    return sched


def respace_schedule(sched: DiffusionSchedule, steps: int) -> DiffusionSchedule:
    """Evenly spaced sub-schedule with betas recomputed from alpha_bar ratios."""
    if not (1 <= steps <= sched.T):
        raise ParameterError(f"steps must be in [1, {sched.T}], got {steps}")
    if steps == sched.T:
        return sched
    # Evenly spaced original timesteps, always ending at T. Spacing >= 1, so
    # flooring keeps exactly `steps` strictly increasing values.
    chosen = np.floor(np.linspace(1, sched.T, steps)).astype(int)
    beta = np.zeros(chosen.size + 1)
    prev_ab = 1.0
    for i, t in enumerate(chosen, start=1):
        ab = sched.alpha_bar[t]
        beta[i] = 1.0 - ab / prev_ab
        prev_ab = ab
    return _finish_schedule(beta, np.concatenate(([0], chosen)))


def _check_t(t, T: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t < 1) or np.any(t > T):
        raise ParameterError(f"timestep out of range [1, {T}]: {t}")
    return t


def _coeff(values: np.ndarray, t: np.ndarray, target_ndim: int, dtype) -> np.ndarray:
    """Gather per-sample schedule values and shape them to broadcast over a batch."""
    out = values[t].astype(dtype)
    return out.reshape(out.shape + (1,) * (target_ndim - 1))


def q_sample(x0: Tensor, t, eps: Tensor, sched: DiffusionSchedule) -> Tensor:
    """Forward diffusion: sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` may be a scalar or one value per leading-axis batch element.
    """
    if x0.shape != eps.shape:
        raise ShapeError(f"x0/eps shapes differ: {x0.shape} vs {eps.shape}")
    t = _check_t(t, sched.T)
    ab = _coeff(sched.alpha_bar, t, x0.ndim, x0.dtype)
    return x0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


def posterior_params(
    x0: Tensor, xt: Tensor, t, sched: DiffusionSchedule
) -> tuple[Tensor, np.ndarray]:
    """True reverse posterior q(x_{t-1} | x_t, x_0): mean and variance.

    Valid for t >= 2 in the strict DDPM decomposition; t == 1 is accepted
    because alpha_bar[0] == 1 gives the degenerate (zero-variance) limit
    used by the sampler's final step.
    """
    if x0.shape != xt.shape:
        raise ShapeError(f"x0/xt shapes differ: {x0.shape} vs {xt.shape}")
    t = _check_t(t, sched.T)
    ab_t = _coeff(sched.alpha_bar, t, x0.ndim, x0.dtype)
    ab_prev = _coeff(sched.alpha_bar, t - 1, x0.ndim, x0.dtype)
    beta_t = _coeff(sched.beta, t, x0.ndim, x0.dtype)
    alpha_t = _coeff(sched.alpha, t, x0.ndim, x0.dtype)
    coef0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    coeft = np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    mu = x0 * coef0 + xt * coeft
    var = _coeff(sched.posterior_var, t, x0.ndim, x0.dtype)
    return mu, var


def loss_simple(out: ModelOutput, eps: Tensor) -> Tensor:
    """Mean squared error between predicted and true noise."""
    if out.eps_pred.shape != eps.shape:
        raise ShapeError(f"shape mismatch: {out.eps_pred.shape} vs {eps.shape}")
    d = out.eps_pred - eps
    return (d * d).mean()


def predict_x0_from_eps(xt: Tensor, eps_pred: Tensor, t, sched: DiffusionSchedule) -> Tensor:
    t = _check_t(t, sched.T)
    ab = _coeff(sched.alpha_bar, t, xt.ndim, xt.dtype)
    return (xt - eps_pred * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))


def model_log_variance(v_pred: Tensor, t, sched: DiffusionSchedule) -> Tensor:
    """Interpolated log covariance: v log(beta_t) + (1 - v) log(beta_tilde_t)."""
    t = _check_t(t, sched.T)
    log_b = _coeff(sched.log_beta, t, v_pred.ndim, v_pred.dtype)
    log_pv = _coeff(sched.log_posterior_var_clipped, t, v_pred.ndim, v_pred.dtype)
    return v_pred * log_b + (v_pred * (-1.0) + 1.0) * log_pv


def _gaussian_kl(mu_q: Tensor, logvar_q, mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """Elementwise KL( N(mu_q, var_q) || N(mu_p, var_p) ) in nats."""
    logvar_q = mu_q._coerce(logvar_q)
    diff = mu_q - mu_p
    return (
        (logvar_p - logvar_q)
        + (logvar_q - logvar_p).exp()
        + diff * diff * (-logvar_p).exp()
        - 1.0
    ) * 0.5


def _std_normal_cdf(x: Tensor) -> Tensor:
    # tanh approximation; adequate for the discretized decoder term.
    inner = (x + x * x * x * 0.044715) * np.sqrt(2.0 / np.pi)
    return (_tanh(inner) + 1.0) * 0.5


def _tanh(x: Tensor) -> Tensor:
    # Saturate large arguments before exp; tanh is flat there anyway, so the
    # clamp changes neither value nor gradient beyond float precision.
    hi = 15.0
    inside = ((x.data > -hi) & (x.data < hi)).astype(x.data.dtype)
    x = x * inside + (1.0 - inside) * np.clip(x.data, -hi, hi)
    e = (x * 2.0).exp()
    return (e - 1.0) / (e + 1.0)


def _discretized_gaussian_nll(x0: Tensor, mean: Tensor, log_var: Tensor) -> Tensor:
    """Negative log-likelihood of x0 under a Gaussian discretized to 1/127.5 bins.

    Assumes data scaled to [-1, 1] (8-bit convention).
    """
    inv_std = (log_var * (-0.5)).exp()
    centered = x0 - mean
    plus = _std_normal_cdf((centered + 1.0 / 255.0) * inv_std)
    minus = _std_normal_cdf((centered - 1.0 / 255.0) * inv_std)
    cdf_delta = plus - minus
    eps = 1e-12
    log_probs_mid = _clamp_min(cdf_delta, eps).log()
    log_cdf_plus = _clamp_min(plus, eps).log()
    log_one_minus = _clamp_min(1.0 - minus, eps).log()
    x = x0.data
    # Branch selection through constant masks keeps autodiff exact per branch.
    mask_lo = (x < -0.999).astype(x.dtype)
    mask_hi = (x > 0.999).astype(x.dtype)
    mask_mid = 1.0 - mask_lo - mask_hi
    log_prob = log_cdf_plus * mask_lo + log_one_minus * mask_hi + log_probs_mid * mask_mid
    return -log_prob


def _clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = (x.data > lo).astype(x.data.dtype)
    return x * mask + (1.0 - mask) * lo


def loss_vlb(
    out: ModelOutput,
    x0: Tensor,
    xt: Tensor,
    t,
    sched: DiffusionSchedule,
) -> Tensor:
    """KL between the true posterior and the model's reverse Gaussian.

    The model mean is rebuilt from a detached eps prediction so this term
    trains only the covariance coefficient ``v``; t == 1 elements use the
    discretized decoder log-likelihood instead of a KL.
    """
    t = _check_t(t, sched.T)
    mu_true, var_true = posterior_params(x0, xt, t, sched)
    logvar_true = _coeff(
        sched.log_posterior_var_clipped, t, x0.ndim, np.float64
    ).astype(x0.dtype)
    x0_pred = predict_x0_from_eps(xt, out.eps_pred.detach(), t, sched)
    mu_model, _ = posterior_params(x0_pred, xt, t, sched)
    logvar_model = model_log_variance(out.v_pred, t, sched)
    kl = _gaussian_kl(mu_true, logvar_true, mu_model, logvar_model)
    nll = _discretized_gaussian_nll(x0.detach(), mu_model, logvar_model)
    t1 = (t == 1).astype(x0.dtype).reshape((-1,) + (1,) * (x0.ndim - 1))
    per_elem = nll * t1 + kl * (1.0 - t1)
    return per_elem.mean()


Denoiser = Callable[[Tensor, np.ndarray], ModelOutput]


def ddpm_sample(
    model: Denoiser,
    shape: tuple[int, ...],
    sched: DiffusionSchedule,
    steps: int | None = None,
    seed: int = 0,
    dtype=np.float32,
    clip_x0: float | None = None,
) -> Tensor:
    """Ancestral DDPM sampling from pure noise; deterministic given the seed.

    ``model(x_t, t_original)`` must return a :class:`ModelOutput` matching
    ``shape``. When ``steps`` < T an evenly spaced sub-schedule is used and
    the model still receives original-scale timesteps.
    """
    steps = sched.T if steps is None else steps
    sub = respace_schedule(sched, steps)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(shape).astype(dtype))
    with no_grad():
        for i in range(sub.T, 0, -1):
            t_orig = int(sub.timestep_map[i])
            out = model(x, np.full(shape[0] if len(shape) else 1, t_orig))
            if out.eps_pred.shape != tuple(shape):
                raise ShapeError(
                    f"model output shape {out.eps_pred.shape} != latent shape {tuple(shape)}"
                )
            x0_pred = predict_x0_from_eps(x, out.eps_pred, i, sub)
            if clip_x0 is not None:
                x0_pred = Tensor(np.clip(x0_pred.data, -clip_x0, clip_x0))
            mu, _ = posterior_params(x0_pred, x, i, sub)
            if i == 1:
                x = mu
            else:
                logvar = model_log_variance(out.v_pred, i, sub)
                z = rng.standard_normal(shape).astype(dtype)
                x = mu + (logvar * 0.5).exp() * Tensor(z.astype(mu.dtype))
    return x
