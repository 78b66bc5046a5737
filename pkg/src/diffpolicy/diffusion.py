"""Noise schedules, forward noising, reverse samplers, and the denoising loss.

Action chunks are (K, 7) float64 arrays in normalized [-1, 1] space.
The reverse update is the standard ancestral form

    x_{t-1} = (1/sqrt(alpha_t)) * (x_t - (beta_t/sqrt(1-alpha_bar_t)) * eps_hat)
              + sqrt(beta_t) * z,

with z = 0 at the final step, plus a deterministic (eta=0) implicit
sampler over an evenly strided sub-grid of the training schedule.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, ParameterError, ContractError, mse_loss

# Canonical 1000-step linear schedule endpoints. For other step counts the
# default endpoints scale by 1000/T so the terminal signal level stays
# comparable; explicit beta_min/beta_max in the config override this.
CANONICAL_T = 1000
CANONICAL_BETA_MIN = 1e-4
CANONICAL_BETA_MAX = 0.02


@dataclass
class DiffusionConfig:
    T_train: int = 1000
    T_sample: int = 100
    sampler: str = "ddim"
    beta_min: float | None = None
    beta_max: float | None = None

    def __post_init__(self):
        if self.sampler not in ("ddpm", "ddim"):
            raise ParameterError(f"unknown sampler {self.sampler!r}")
        if not 1 <= self.T_sample <= self.T_train:
            raise ParameterError("need 1 <= T_sample <= T_train")

    def resolved_betas(self):
        if (self.beta_min is None) != (self.beta_max is None):
            raise ParameterError("set both beta_min and beta_max or neither")
        if self.beta_min is not None:
            return self.beta_min, self.beta_max
        scale = CANONICAL_T / self.T_train
        bmax = CANONICAL_BETA_MAX * scale
        if bmax >= 1.0:
            raise ParameterError(
                f"auto beta range invalid at T_train={self.T_train}; "
                "pass explicit beta_min/beta_max"
            )
        return CANONICAL_BETA_MIN * scale, bmax


@dataclass
class NoiseSchedule:
    """Coefficient tables indexed by timestep t in 1..T."""

    T: int
    beta: np.ndarray        # length T, beta[t-1] is beta_t
    alpha: np.ndarray
    alpha_bar: np.ndarray
    coef_scale: np.ndarray  # 1/sqrt(alpha_t)
    coef_eps: np.ndarray    # beta_t / sqrt(1 - alpha_bar_t)
    sigma: np.ndarray       # sqrt(beta_t)

    def alpha_bar_at(self, t):
        """alpha_bar_t with the convention alpha_bar_0 = 1."""
        if not 0 <= t <= self.T:
            raise ParameterError(f"t={t} outside [0, {self.T}]")
        return 1.0 if t == 0 else self.alpha_bar[t - 1]


@dataclass
class NoisedChunk:
    values: np.ndarray
    t: int


def build_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    """Linear-beta schedule over cfg.T_train steps with derived tables."""
    T = cfg.T_train
    if T < 2:
        raise ParameterError("schedule needs T >= 2")
    bmin, bmax = cfg.resolved_betas()
    if not 0.0 < bmin < bmax < 1.0:
        raise ParameterError(f"need 0 < beta_min < beta_max < 1, got {bmin}, {bmax}")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = bmin + (t - 1.0) / (T - 1.0) * (bmax - bmin)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if T >= 100 and alpha_bar[-1] >= 0.05:
        raise ParameterError(
            f"alpha_bar[T]={alpha_bar[-1]:.4f} >= 0.05 at T={T}; "
            "beta range too small for this step count"
        )
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        coef_scale=1.0 / np.sqrt(alpha),
        coef_eps=beta / np.sqrt(1.0 - alpha_bar),
        sigma=np.sqrt(beta),
    )


def q_sample(x0, t, noise, sched: NoiseSchedule) -> NoisedChunk:
    """Forward-noise clean values to timestep t with the given noise draw."""
    if not 1 <= t <= sched.T:
        raise ParameterError(f"t={t} outside [1, {sched.T}]")
    ab = sched.alpha_bar[t - 1]
    values = np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(noise)
    return NoisedChunk(values=values, t=t)


def ddpm_step(x_t: NoisedChunk, eps_hat, sched: NoiseSchedule, rng) -> NoisedChunk:
    """One ancestral reverse step; the t=1 step adds no noise."""
    t = x_t.t
    if t < 1:
        raise ContractError("ddpm_step at t=0: chain already finished")
    if t > sched.T:
        raise ParameterError(f"t={t} outside schedule")
    eps_hat = np.asarray(eps_hat)
    mean = sched.coef_scale[t - 1] * (x_t.values - sched.coef_eps[t - 1] * eps_hat)
    if t > 1:
        mean = mean + sched.sigma[t - 1] * rng.standard_normal(x_t.values.shape)
    return NoisedChunk(values=mean, t=t - 1)


def ddim_step(x_t: NoisedChunk, eps_hat, t_prev, sched: NoiseSchedule) -> NoisedChunk:
    """Deterministic (eta=0) implicit step from t to t_prev < t."""
    t = x_t.t
    if not 0 <= t_prev < t:
        raise ParameterError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    eps_hat = np.asarray(eps_hat)
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t_prev)
    x0_hat = (x_t.values - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    values = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    return NoisedChunk(values=values, t=t_prev)


def ddim_timestep_grid(T_train, T_sample):
    """Evenly strided 0 = t_0 < t_1 < ... < t_S = T_train."""
    return [i * T_train // T_sample for i in range(T_sample + 1)]


def sample_chunk(denoiser, cond, cfg: DiffusionConfig, rng, chunk_shape=(32, 7)):
    """Run the configured sampler from pure noise down to a clean chunk.

    `denoiser(values, cond, t)` must return an eps prediction of
    chunk_shape. The result is clipped to the normalized action range.
    """
    sched = build_schedule(cfg)
    x = NoisedChunk(values=rng.standard_normal(chunk_shape), t=sched.T)
    if cfg.sampler == "ddpm":
        if cfg.T_sample != cfg.T_train:
            raise ParameterError("ddpm sampling runs the full schedule; "
                                 "set T_sample == T_train")
        for t in range(sched.T, 0, -1):
            eps = _checked_eps(denoiser, x, cond, t, chunk_shape)
            x = ddpm_step(x, eps, sched, rng)
    else:
        grid = ddim_timestep_grid(cfg.T_train, cfg.T_sample)
        for i in range(cfg.T_sample, 0, -1):
            x.t = grid[i]
            eps = _checked_eps(denoiser, x, cond, grid[i], chunk_shape)
            x = ddim_step(x, eps, grid[i - 1], sched)
    return np.clip(x.values, -1.0, 1.0)


def _checked_eps(denoiser, x, cond, t, chunk_shape):
    eps = np.asarray(denoiser(x.values, cond, t))
    if eps.shape != tuple(chunk_shape):
        raise ContractError(f"denoiser returned {eps.shape}, want {chunk_shape}")
    if not np.all(np.isfinite(eps)):
        raise NumericError(f"denoiser returned non-finite values at t={t}")
    return eps


@dataclass
class DiffusionBatch:
    """Clean chunks plus whatever conditioning the denoiser consumes."""

    chunks: np.ndarray              # (B, K, 7) normalized actions
    cond: object = None
    valid: np.ndarray | None = None  # (B, K) 1 = real action, 0 = padded tail

    def __post_init__(self):
        if self.chunks.ndim != 3:
            raise ParameterError("chunks must be (B, K, dims)")


def diffusion_loss(denoiser, batch: DiffusionBatch, sched: NoiseSchedule, rng):
    """Noise-prediction MSE over a batch, masked to real action entries.

    `denoiser(noised, cond, t)` receives noised (B, K, 7) values and a
    per-element timestep array and returns a Tensor of shape (B, K, w)
    with w >= 7; only the first 7 output dims enter the loss, so any
    padded trailing dims are ignored by construction.
    """
    B, K, D = batch.chunks.shape
    t = rng.integers(1, sched.T + 1, size=B)
    noise = rng.standard_normal(batch.chunks.shape)
    ab = sched.alpha_bar[t - 1][:, None, None]
    noised = np.sqrt(ab) * batch.chunks + np.sqrt(1.0 - ab) * noise
    eps_hat = denoiser(noised, batch.cond, t)
    if eps_hat.shape[-1] > D:
        eps_hat = eps_hat[..., :D]
    if batch.valid is None:
        mask = np.ones((B, K, D))
    else:
        mask = np.broadcast_to(batch.valid[:, :, None], (B, K, D)).copy()
    return mse_loss(eps_hat, noise, mask)
