"""Noising schedule, DDIM sampling steps, and reference denoisers.

`t` is a 1-based step index; `alpha_bar(t)` is the cumulative product of
(1 - beta_s) up to step t, with alpha_bar(0) = 1 (clean data).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .core import _readonly

FloatArray = npt.NDArray[np.floating]

DEFAULT_N_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_DDIM_STEPS = 50
DEFAULT_MIN_SNR_CLIP = 5.0


@dataclass(frozen=True)
class DiffusionSchedule:
    """Beta schedule, cumulative alphas and the DDIM sub-sequence."""

    betas: FloatArray
    alpha_bars: FloatArray
    timesteps: tuple
    eta: float = 0.0

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if bars.shape != betas.shape:
            raise ValueError("alpha_bars must match betas in length")
        ts = tuple(int(t) for t in self.timesteps)
        if len(ts) < 1 or ts[0] < 1 or ts[-1] > betas.size:
            raise ValueError("timesteps must lie in [1, n_steps]")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timesteps must be strictly increasing")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        object.__setattr__(self, "betas", _readonly(betas))
        object.__setattr__(self, "alpha_bars", _readonly(bars))
        object.__setattr__(self, "timesteps", ts)

    @property
    def n_steps(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        if t < 0 or t > self.n_steps:
            raise ValueError(f"step {t} outside [0, {self.n_steps}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def snr(self, t: int) -> float:
        ab = self.alpha_bar(t)
        return ab / (1.0 - ab)

    def sigma(self, t: int, t_prev: int) -> float:
        """DDIM stochasticity scale between consecutive sub-sequence steps."""
        if not 0 <= t_prev < t <= self.n_steps:
            raise ValueError(f"need 0 <= t_prev < t <= {self.n_steps}, got {t_prev}, {t}")
        ab_t = self.alpha_bar(t)
        ab_p = self.alpha_bar(t_prev)
        return self.eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)

    def step_pairs(self) -> list:
        """(t, t_prev) pairs walked during sampling, ending at (t_min, 0)."""
        ts = list(self.timesteps)
        prevs = [0] + ts[:-1]
        return list(zip(reversed(ts), reversed(prevs)))


def make_schedule(
    n_steps: int = DEFAULT_N_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    ddim_steps: int = DEFAULT_DDIM_STEPS,
    eta: float = 0.0,
) -> DiffusionSchedule:
    """Linear beta schedule with an evenly spaced DDIM sub-sequence."""
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if not (1 <= ddim_steps <= n_steps):
        raise ValueError("ddim_steps must lie in [1, n_steps]")
    betas = np.linspace(beta_start, beta_end, n_steps)
    alpha_bars = np.cumprod(1.0 - betas)
    timesteps = np.rint(np.linspace(1, n_steps, ddim_steps)).astype(int)
    return DiffusionSchedule(betas=betas, alpha_bars=alpha_bars,
                             timesteps=tuple(timesteps), eta=eta)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def x0_hat(x_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: DiffusionSchedule) -> np.ndarray:
    """Clean-data estimate implied by a noise prediction."""
    ab = schedule.alpha_bar(t)
    if ab <= 0:
        raise ValueError("alpha_bar is zero; x0 is unrecoverable at this step")
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
    schedule: DiffusionSchedule,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One DDIM update from step t to t_prev (deterministic when eta = 0)."""
    ab_p = schedule.alpha_bar(t_prev)
    x0 = x0_hat(x_t, eps_hat, t, schedule)
    sigma = schedule.sigma(t, t_prev)
    dir_sq = 1.0 - ab_p - sigma * sigma
    if dir_sq < -1e-12:
        raise ValueError(f"sigma^2 exceeds 1 - alpha_bar({t_prev}); eta is too large")
    out = np.sqrt(ab_p) * x0 + np.sqrt(max(dir_sq, 0.0)) * eps_hat
    if sigma > 0.0:
        if rng is None:
            raise ValueError("stochastic DDIM step requires an rng")
        out = out + sigma * rng.standard_normal(size=x_t.shape)
    return out


# ---------------------------------------------------------------------------
# denoisers
# ---------------------------------------------------------------------------

class Denoiser:
    """Conditional noise predictor over single patches."""

    def predict_eps(self, x_t: np.ndarray, t: int, y_cond: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x_t: np.ndarray, t: int, y_cond: np.ndarray,
            cotangent: np.ndarray) -> np.ndarray:
        """Gradient of <predict_eps(x_t), cotangent> with respect to x_t."""
        raise NotImplementedError("this denoiser has no analytic vector-Jacobian product")


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal features of the raw step index."""
    if dim < 2 or dim % 2:
        raise ValueError("embedding dimension must be even and at least 2")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


class ToyDenoiser(Denoiser):
    """Two affine layers with a tanh in between, small enough to train on a CPU.

    The input is the flattened noisy patch, the flattened conditioning
    patch, and a sinusoidal embedding of the step index. All gradients are
    explicit, so the class doubles as a reference for vjp checks.
    """

    def __init__(self, patch_size: int, bands: int, cond_channels: int,
                 hidden: int = 32, emb_dim: int = 8, loss: str = "l1", seed: int = 0):
        if loss not in ("l1", "l2"):
            raise ValueError("loss must be 'l1' or 'l2'")
        self.patch_size = int(patch_size)
        self.bands = int(bands)
        self.cond_channels = int(cond_channels)
        self.hidden = int(hidden)
        self.emb_dim = int(emb_dim)
        self.loss = loss
        self.x_dim = self.patch_size**2 * self.bands
        self.cond_dim = self.patch_size**2 * self.cond_channels
        self.in_dim = self.x_dim + self.cond_dim + self.emb_dim
        rng = np.random.default_rng(seed)
        self.w1 = rng.standard_normal((self.hidden, self.in_dim)) / np.sqrt(self.in_dim)
        self.b1 = np.zeros(self.hidden)
        self.w2 = rng.standard_normal((self.x_dim, self.hidden)) / np.sqrt(self.hidden)
        self.b2 = np.zeros(self.x_dim)

    @property
    def parameters(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]

    def _features(self, x_t: np.ndarray, t: int, y_cond: np.ndarray) -> np.ndarray:
        x = np.asarray(x_t, dtype=np.float64).ravel()
        y = np.asarray(y_cond, dtype=np.float64).ravel()
        if x.size != self.x_dim:
            raise ValueError(f"expected {self.x_dim} patch values, got {x.size}")
        if y.size != self.cond_dim:
            raise ValueError(f"expected {self.cond_dim} conditioning values, got {y.size}")
        return np.concatenate([x, y, time_embedding(t, self.emb_dim)])

    def predict_eps(self, x_t: np.ndarray, t: int, y_cond: np.ndarray) -> np.ndarray:
        feat = self._features(x_t, t, y_cond)
        h = np.tanh(self.w1 @ feat + self.b1)
        out = self.w2 @ h + self.b2
        return out.reshape(np.shape(x_t))

    def vjp(self, x_t: np.ndarray, t: int, y_cond: np.ndarray,
            cotangent: np.ndarray) -> np.ndarray:
        feat = self._features(x_t, t, y_cond)
        h = np.tanh(self.w1 @ feat + self.b1)
        dz = (self.w2.T @ np.asarray(cotangent, dtype=np.float64).ravel()) * (1.0 - h * h)
        gfeat = self.w1.T @ dz
        return gfeat[: self.x_dim].reshape(np.shape(x_t))

    def loss_and_grads(self, x0: np.ndarray, y_cond: np.ndarray, t: int,
                       eps: np.ndarray, schedule: DiffusionSchedule,
                       k_min_snr: float = DEFAULT_MIN_SNR_CLIP) -> tuple:
        """Per-sample training loss and parameter gradients.

        The noise-prediction error is weighted by min(SNR_t, k)/SNR_t so
        that very easy (high-SNR) steps do not dominate the objective.
        """
        x_t = q_sample(x0, t, eps, schedule)
        feat = self._features(x_t, t, y_cond)
        z = self.w1 @ feat + self.b1
        h = np.tanh(z)
        out = self.w2 @ h + self.b2
        diff = out - np.asarray(eps, dtype=np.float64).ravel()
        snr = schedule.snr(t)
        weight = min(snr, k_min_snr) / snr
        n = diff.size
        if self.loss == "l1":
            loss = weight * np.abs(diff).sum() / n
            dout = weight * np.sign(diff) / n
        else:
            loss = weight * (diff * diff).sum() / n
            dout = weight * 2.0 * diff / n
        dw2 = np.outer(dout, h)
        db2 = dout
        dz = (self.w2.T @ dout) * (1.0 - h * h)
        dw1 = np.outer(dz, feat)
        db1 = dz
        return float(loss), [dw1, db1, dw2, db2]


def train_step(
    denoiser: ToyDenoiser,
    x0_batch: np.ndarray,
    y_batch: np.ndarray,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    lr: float = 1e-2,
    k_min_snr: float = DEFAULT_MIN_SNR_CLIP,
) -> float:
    """One SGD step of noise-prediction training; returns the batch loss."""
    x0_batch = np.asarray(x0_batch)
    y_batch = np.asarray(y_batch)
    if x0_batch.shape[0] != y_batch.shape[0] or x0_batch.shape[0] == 0:
        raise ValueError("batch arrays must be non-empty and aligned")
    n = x0_batch.shape[0]
    total = 0.0
    acc = [np.zeros_like(p) for p in denoiser.parameters]
    for i in range(n):
        t = int(rng.integers(1, schedule.n_steps + 1))
        eps = rng.standard_normal(size=x0_batch[i].shape)
        loss, grads = denoiser.loss_and_grads(x0_batch[i], y_batch[i], t, eps,
                                              schedule, k_min_snr)
        total += loss
        for a, g in zip(acc, grads):
            a += g
    for p, a in zip(denoiser.parameters, acc):
        p -= lr * (a / n)
    return total / n


class GaussianPriorDenoiser(Denoiser):
    """Exact posterior-mean denoiser for a Gaussian patch prior.

    The prior is N(mean, Sigma) with Sigma = noise_floor^2 I + F F^T in
    factor form. Optionally a linear observation y = A x0 + N(0, s^2)
    conditions the prior, in which case predict_eps uses the conditional
    moments (dense path). Without conditioning, large patches stay cheap
    through the Woodbury identity on the low-rank factor.
    """

    _DENSE_LIMIT = 8192

    def __init__(
        self,
        mean: np.ndarray,
        patch_size: int,
        bands: int,
        schedule: DiffusionSchedule,
        cov_factor: np.ndarray | None = None,
        noise_floor: float = 1.0,
        cond_matrix: np.ndarray | None = None,
        cond_sigma: float = 0.1,
    ):
        self.patch_size = int(patch_size)
        self.bands = int(bands)
        self.dim = self.patch_size**2 * self.bands
        self.schedule = schedule
        mu = np.asarray(mean, dtype=np.float64).ravel()
        if mu.size == 1:
            mu = np.full(self.dim, float(mu[0]))
        if mu.size != self.dim:
            raise ValueError(f"mean must have {self.dim} entries, got {mu.size}")
        self.mean = mu
        if noise_floor < 0:
            raise ValueError("noise_floor must be non-negative")
        self.noise_floor = float(noise_floor)
        if cov_factor is not None:
            cov_factor = np.asarray(cov_factor, dtype=np.float64)
            if cov_factor.ndim != 2 or cov_factor.shape[0] != self.dim:
                raise ValueError(f"cov_factor must be ({self.dim}, k)")
        self.cov_factor = cov_factor
        if cond_matrix is not None:
            cond_matrix = np.asarray(cond_matrix, dtype=np.float64)
            if cond_matrix.ndim != 2 or cond_matrix.shape[1] != self.dim:
                raise ValueError(f"cond_matrix must be (M, {self.dim})")
            if cond_sigma <= 0:
                raise ValueError("conditioning requires a positive observation noise")
            if self.dim > self._DENSE_LIMIT:
                raise ValueError("conditioning is only supported for moderate patch sizes")
        self.cond_matrix = cond_matrix
        self.cond_sigma = float(cond_sigma)
        self._dense = self.cond_matrix is not None or self.dim <= 256
        self._cond_cache: dict = {}
        self._gain_cache: dict = {}
        if self.cov_factor is not None:
            self._ftf = self.cov_factor.T @ self.cov_factor
        else:
            self._ftf = None

    # -- prior/posterior plumbing ------------------------------------------

    def _dense_sigma(self) -> np.ndarray:
        sig = (self.noise_floor**2) * np.eye(self.dim)
        if self.cov_factor is not None:
            sig = sig + self.cov_factor @ self.cov_factor.T
        return sig

    def _effective_prior(self, y_cond: np.ndarray | None) -> tuple:
        """(mean, dense covariance or None) after conditioning on y."""
        if self.cond_matrix is None:
            return self.mean, (self._dense_sigma() if self._dense else None)
        if y_cond is None:
            raise ValueError("this denoiser is conditional; y_cond is required")
        y = np.asarray(y_cond, dtype=np.float64).ravel()
        if y.size != self.cond_matrix.shape[0]:
            raise ValueError(
                f"conditioning expects {self.cond_matrix.shape[0]} values, got {y.size}"
            )
        key = y.tobytes()
        got = self._cond_cache.get(key)
        if got is None:
            a = self.cond_matrix
            sigma = self._dense_sigma()
            gram = a @ sigma @ a.T + (self.cond_sigma**2) * np.eye(a.shape[0])
            if not np.all(np.isfinite(gram)):
                raise ValueError("conditional covariance is singular")
            try:
                chol = np.linalg.cholesky(gram)
            except np.linalg.LinAlgError as exc:
                raise ValueError("conditional covariance is singular") from exc
            sa = sigma @ a.T
            solve = np.linalg.solve
            gain = solve(chol.T, solve(chol, sa.T)).T  # Sigma A^T (A Sigma A^T + s^2 I)^-1
            mu = self.mean + gain @ (y - a @ self.mean)
            cov = sigma - gain @ sa.T
            got = (mu, cov)
            self._cond_cache[key] = got
        return got

    def _dense_gain(self, t: int, cov: np.ndarray, key) -> np.ndarray:
        cached = self._gain_cache.get((t, key))
        if cached is None:
            ab = self.schedule.alpha_bar(t)
            lhs = ab * cov + (1.0 - ab) * np.eye(self.dim)
            cached = np.sqrt(ab) * np.linalg.solve(lhs, cov)
            self._gain_cache[(t, key)] = cached
        return cached

    def _apply_gain_lowrank(self, t: int, v: np.ndarray) -> np.ndarray:
        """sqrt(ab) * Sigma (ab Sigma + (1-ab) I)^{-1} v without forming Sigma."""
        ab = self.schedule.alpha_bar(t)
        beta = ab * self.noise_floor**2 + (1.0 - ab)
        if self.cov_factor is None:
            binv = v / beta
        else:
            c = (beta / ab) * np.eye(self._ftf.shape[0]) + self._ftf
            binv = (v - self.cov_factor @ np.linalg.solve(c, self.cov_factor.T @ v)) / beta
        out = (self.noise_floor**2) * binv
        if self.cov_factor is not None:
            out = out + self.cov_factor @ (self.cov_factor.T @ binv)
        return np.sqrt(ab) * out

    def _posterior_mean(self, x_flat: np.ndarray, t: int,
                        y_cond: np.ndarray | None) -> np.ndarray:
        mu, cov = self._effective_prior(y_cond)
        ab = self.schedule.alpha_bar(t)
        resid = x_flat - np.sqrt(ab) * mu
        if cov is not None:
            key = None if self.cond_matrix is None else np.asarray(y_cond, dtype=np.float64).tobytes()
            return mu + self._dense_gain(t, cov, key) @ resid
        return mu + self._apply_gain_lowrank(t, resid)

    # -- denoiser interface -------------------------------------------------

    def predict_eps(self, x_t: np.ndarray, t: int, y_cond: np.ndarray | None = None) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        if not 0 < ab < 1:
            raise ValueError("predict_eps needs a strictly noisy step (0 < alpha_bar < 1)")
        x = np.asarray(x_t, dtype=np.float64).ravel()
        m = self._posterior_mean(x, t, y_cond)
        eps = (x - np.sqrt(ab) * m) / np.sqrt(1.0 - ab)
        return eps.reshape(np.shape(x_t))

    def vjp(self, x_t: np.ndarray, t: int, y_cond: np.ndarray | None,
            cotangent: np.ndarray) -> np.ndarray:
        """The eps map is affine in x_t with a symmetric Jacobian."""
        ab = self.schedule.alpha_bar(t)
        cot = np.asarray(cotangent, dtype=np.float64).ravel()
        mu, cov = self._effective_prior(y_cond)
        if cov is not None:
            key = None if self.cond_matrix is None else np.asarray(y_cond, dtype=np.float64).tobytes()
            gained = self._dense_gain(t, cov, key) @ cot
        else:
            gained = self._apply_gain_lowrank(t, cot)
        out = (cot - np.sqrt(ab) * gained) / np.sqrt(1.0 - ab)
        return out.reshape(np.shape(x_t))


def gaussian_prior_eps(prior: GaussianPriorDenoiser, x_t: np.ndarray, t: int,
                       y_cond: np.ndarray | None = None) -> np.ndarray:
    """Exact noise prediction under a Gaussian prior (see GaussianPriorDenoiser)."""
    return prior.predict_eps(x_t, t, y_cond)
