"""Gaussian process over causal-effect probabilities.

The prior mean and the per-point prior standard deviation come from an
:class:`~safereg.observational.EffectModel`; the covariance is
``sigma(u) sigma(u') exp(-|u - u'|^2 / (2 l^2))`` on controls normalized to
the unit box.  Posteriors are exact (Cholesky) with heteroscedastic noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_triangular

from safereg.errors import InvalidStep, NonFiniteValue, NotPSD, SingularFactorization

JITTER_START = 1e-10
JITTER_MAX = 1e-4
DEFAULT_NOISE_STD = 0.25


class GridFunction:
    """Multilinear interpolation on a rectilinear grid, constant outside it."""

    def __init__(self, axes, values):
        self.axes = tuple(np.asarray(a, dtype=float) for a in axes)
        shape = tuple(len(a) for a in self.axes)
        self.values = np.asarray(values, dtype=float).reshape(shape)
        self._lo = np.array([a[0] for a in self.axes])
        self._hi = np.array([a[-1] for a in self.axes])
        self._interp = RegularGridInterpolator(self.axes, self.values, method="linear")

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return self._interp(np.clip(pts, self._lo, self._hi))


class PriorScaledKernel:
    """k(u, u') = s(u) s(u') exp(-|u - u'|^2 / (2 l^2)) on normalized controls."""

    def __init__(self, sigma_fn: Callable, lower, upper, lengthscale: float = 1.0):
        if lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        self.sigma_fn = sigma_fn
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.lengthscale = float(lengthscale)

    @classmethod
    def from_effect_model(cls, model, lengthscale: float = 1.0) -> "PriorScaledKernel":
        lo, hi = zip(*model.domains)
        return cls(GridFunction(model.axes, model.sigma), lo, hi, lengthscale)

    def normalize(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.lower) / (self.upper - self.lower)

    def sigma(self, points) -> np.ndarray:
        return np.maximum(np.asarray(self.sigma_fn(points), dtype=float), 0.0)

    def __call__(self, x1, x2=None) -> np.ndarray:
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        x2 = x1 if x2 is None else np.atleast_2d(np.asarray(x2, dtype=float))
        a, b = self.normalize(x1), self.normalize(x2)
        d2 = np.maximum((a ** 2).sum(1)[:, None] + (b ** 2).sum(1)[None, :] - 2.0 * a @ b.T, 0.0)
        return self.sigma(x1)[:, None] * self.sigma(x2)[None, :] * np.exp(-d2 / (2.0 * self.lengthscale ** 2))

    def diag(self, points) -> np.ndarray:
        return self.sigma(points) ** 2


class GaussianProcess:
    """Immutable GP posterior; :meth:`update` returns a new instance."""

    def __init__(self, mean_fn: Callable, kernel: PriorScaledKernel, observations: Sequence = ()):
        self.mean_fn = mean_fn
        self.kernel = kernel
        obs = []
        for point, value, noise in observations:
            value, noise = float(value), float(noise)
            if not math.isfinite(value):
                raise NonFiniteValue(f"observation value {value} is not finite")
            if not math.isfinite(noise) or noise < 0:
                raise NonFiniteValue(f"noise std {noise} must be finite and >= 0")
            obs.append((tuple(float(c) for c in np.ravel(point)), value, noise))
        self.observations = tuple(obs)
        self.jitter = 0.0
        self._factorize()

    @classmethod
    def from_effect_model(cls, model, lengthscale: float = 1.0, observations=()) -> "GaussianProcess":
        return cls(GridFunction(model.axes, model.mu), PriorScaledKernel.from_effect_model(model, lengthscale),
                   observations)

    def _factorize(self) -> None:
        if not self.observations:
            self._x = np.zeros((0, len(self.kernel.lower)))
            self._chol = None
            self._alpha = None
            return
        x = np.array([o[0] for o in self.observations])
        y = np.array([o[1] for o in self.observations])
        noise = np.array([o[2] for o in self.observations])
        k = self.kernel(x) + np.diag(noise ** 2)
        jitter = 0.0
        while True:
            try:
                chol = np.linalg.cholesky(k + jitter * np.eye(len(x)) if jitter else k)
                break
            except np.linalg.LinAlgError:
                jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
                if jitter > JITTER_MAX * 1.0001:
                    raise SingularFactorization(
                        f"covariance of {len(x)} observations not factorizable with jitter <= {JITTER_MAX}") from None
        self.jitter = jitter
        self._x = x
        self._chol = chol
        resid = y - self.mean_fn(x)
        self._alpha = solve_triangular(chol.T, solve_triangular(chol, resid, lower=True), lower=False)

    def __len__(self) -> int:
        return len(self.observations)

    def prior_mean(self, points) -> np.ndarray:
        return np.asarray(self.mean_fn(points), dtype=float)

    def posterior(self, query):
        """Posterior means and variances at ``query`` (shape (q, d))."""
        q = np.atleast_2d(np.asarray(query, dtype=float))
        mean = self.prior_mean(q)
        var = self.kernel.diag(q)
        if self._chol is None:
            return mean, var
        ks = self.kernel(self._x, q)
        mean = mean + ks.T @ self._alpha
        v = solve_triangular(self._chol, ks, lower=True)
        var = np.maximum(var - (v ** 2).sum(axis=0), 0.0)
        return mean, var

    def update(self, point, value: float, noise_std: float = DEFAULT_NOISE_STD) -> "GaussianProcess":
        return GaussianProcess(self.mean_fn, self.kernel, self.observations + ((point, value, noise_std),))

    def with_observations(self, observations) -> "GaussianProcess":
        return GaussianProcess(self.mean_fn, self.kernel, observations)

    def observation_kernel_matrix(self) -> np.ndarray:
        return self.kernel(self._x) if len(self) else np.zeros((0, 0))

    def to_dict(self) -> dict:
        return {
            "lengthscale": self.kernel.lengthscale,
            "lower": self.kernel.lower.tolist(),
            "upper": self.kernel.upper.tolist(),
            "jitter": self.jitter,
            "observations": [{"point": list(p), "value": v, "noise_std": e} for p, v, e in self.observations],
        }


def posterior(gp: GaussianProcess, query):
    return gp.posterior(query)


def update(gp: GaussianProcess, point, value, noise_std=DEFAULT_NOISE_STD) -> GaussianProcess:
    return gp.update(point, value, noise_std)


# --- confidence machinery --------------------------------------------------

@dataclass(frozen=True)
class ConfidenceParams:
    """Scale of the confidence half-width.

    ``mode="practical"`` uses a fixed ``beta_sqrt``; ``mode="theoretical"``
    uses ``2 B^2 + 300 gamma_t ln^3(t / (1 - alpha))``.
    """

    rkhs_bound: float = 1.0
    alpha: float = 0.8
    noise_bound: float = DEFAULT_NOISE_STD
    mode: str = "practical"
    beta_sqrt: float = 2.0

    def __post_init__(self):
        if self.rkhs_bound <= 0:
            raise ValueError("rkhs_bound must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.noise_bound <= 0:
            raise ValueError("noise_bound must be positive")
        if self.mode not in ("practical", "theoretical"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "practical" and self.beta_sqrt <= 0:
            raise ValueError("beta_sqrt must be positive")


def information_gain(kernel_matrix, noise: float) -> float:
    """0.5 * ln det(I + K / noise^2)."""
    k = np.atleast_2d(np.asarray(kernel_matrix, dtype=float))
    if k.size == 0:
        return 0.0
    if noise <= 0:
        raise ValueError("noise must be positive")
    if not np.allclose(k, k.T, atol=1e-12):
        raise NotPSD("kernel matrix is not symmetric")
    if np.linalg.eigvalsh(k).min() < -1e-8:
        raise NotPSD("kernel matrix has a negative eigenvalue")
    sign, logdet = np.linalg.slogdet(np.eye(len(k)) + k / noise ** 2)
    return 0.5 * float(logdet)


def max_information_gain(kernel: PriorScaledKernel, candidates, t: int, noise: float) -> float:
    """Greedy estimate of the largest information gain from ``t`` candidate points.

    Picks the point of largest posterior variance at each step; the greedy
    value is within a factor (1 - 1/e) of the maximum (submodularity).
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=float))
    var = kernel.diag(cand).astype(float)
    # rank-one downdates of the candidate variances as points are selected
    basis = np.zeros((0, len(cand)))
    gain = 0.0
    for _ in range(max(0, int(t))):
        j = int(np.argmax(var))
        v = var[j]
        gain += 0.5 * math.log1p(v / noise ** 2)
        col = kernel(cand, cand[j:j + 1]).ravel() - basis.T @ basis[:, j]
        row = col / math.sqrt(v + noise ** 2)
        basis = np.vstack([basis, row])
        var = np.maximum(var - row ** 2, 0.0)
    return gain


def beta(t: int, params: ConfidenceParams, gamma_t: float = 0.0) -> float:
    """Confidence scale beta_t (squared multiplier of the posterior std)."""
    if params.mode == "practical":
        return params.beta_sqrt ** 2
    if t < 1:
        raise InvalidStep(f"step index must be >= 1, got {t}")
    if gamma_t < 0:
        raise ValueError("gamma_t must be >= 0")
    ratio = t / (1.0 - params.alpha)
    log_term = math.log(ratio) ** 3 if ratio > 1.0 else 0.0
    return 2.0 * params.rkhs_bound ** 2 + 300.0 * gamma_t * log_term


def kappa(beta_t, variance):
    """Confidence half-width sqrt(beta) * sqrt(variance)."""
    out = np.sqrt(beta_t) * np.sqrt(np.maximum(variance, 0.0))
    return float(out) if np.ndim(out) == 0 else out
