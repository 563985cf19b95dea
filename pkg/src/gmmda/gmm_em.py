"""Two-component univariate Gaussian mixtures and the classic iterative EM fitter."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIGMA_FLOOR = 1e-4
DENSITY_FLOOR = 1e-300
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class DegenerateComponentError(ValueError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class Gaussian1D:
    weight: float
    mean: float
    std: float

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"mixture weight {self.weight} outside [0, 1]")
        if not self.std > 0:
            raise ValueError(f"stddev must be positive, got {self.std}")


@dataclass(frozen=True)
class Gmm2:
    """Two components ordered by ascending mean; weights sum to one."""
    low: Gaussian1D
    high: Gaussian1D

    def __post_init__(self):
        if abs(self.low.weight + self.high.weight - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        if self.low.mean > self.high.mean:
            raise ValueError("components must be ordered by ascending mean")

    @classmethod
    def from_arrays(cls, pi, mu, sigma) -> "Gmm2":
        pi, mu, sigma = (np.asarray(a, dtype=float) for a in (pi, mu, sigma))
        order = np.argsort(mu, kind="stable")
        comps = [Gaussian1D(float(pi[k]), float(mu[k]), float(sigma[k])) for k in order]
        return cls(*comps)

    @property
    def components(self) -> tuple[Gaussian1D, Gaussian1D]:
        return self.low, self.high

    @property
    def pi(self) -> np.ndarray:
        return np.array([self.low.weight, self.high.weight])

    @property
    def mu(self) -> np.ndarray:
        return np.array([self.low.mean, self.high.mean])

    @property
    def sigma(self) -> np.ndarray:
        return np.array([self.low.std, self.high.std])

    def as_dict(self) -> dict:
        return {"pi": self.pi.tolist(), "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}


@dataclass
class EmTrace:
    iterations: int = 0
    log_likelihood_history: list[float] = field(default_factory=list)
    converged: bool = False


def _component_log_pdf(xs: np.ndarray, mu, sigma) -> np.ndarray:
    """N x 2 matrix of log N(x_i | mu_k, sigma_k)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    z = (xs[:, None] - mu[None, :]) / sigma[None, :]
    return -0.5 * z * z - np.log(sigma)[None, :] - _LOG_SQRT_2PI


def gmm_pdf(model: Gmm2, x) -> float | np.ndarray:
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    dens = np.exp(_component_log_pdf(xs, model.mu, model.sigma)) @ model.pi
    return float(dens[0]) if np.ndim(x) == 0 else dens


def log_likelihood(model: Gmm2, xs) -> float:
    xs = np.asarray(xs, dtype=float).reshape(-1)
    if xs.size == 0:
        raise ValueError("log_likelihood: empty sample")
    dens = np.exp(_component_log_pdf(xs, model.mu, model.sigma)) @ model.pi
    return float(np.sum(np.log(np.maximum(dens, DENSITY_FLOOR))))


def responsibilities(xs, pi, mu, sigma) -> np.ndarray:
    """Posterior component probabilities in the given (unsorted) component order."""
    xs = np.asarray(xs, dtype=float).reshape(-1)
    with np.errstate(divide="ignore"):
        logw = _component_log_pdf(xs, mu, sigma) + np.log(np.asarray(pi, dtype=float))[None, :]
    top = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - top)
    return w / w.sum(axis=1, keepdims=True)


def e_step(model: Gmm2, xs) -> np.ndarray:
    return responsibilities(xs, model.pi, model.mu, model.sigma)


def m_step(xs, gamma, sigma_floor: float = SIGMA_FLOOR, previous: Gmm2 | None = None) -> Gmm2:
    """Closed-form mixture update from soft responsibilities.

    With ``previous`` given, the variance is taken around the previous
    iteration's means instead of the fresh ones (legacy variant).
    """
    xs = np.asarray(xs, dtype=float).reshape(-1)
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (xs.size, 2):
        raise ValueError(f"m_step: gamma shape {gamma.shape} does not match {xs.size} samples")
    nk = gamma.sum(axis=0)
    if np.any(nk <= 0):
        raise DegenerateComponentError(f"m_step: component {int(np.argmin(nk))} has zero responsibility mass")
    pi = nk / xs.size
    mu = (gamma * xs[:, None]).sum(axis=0) / nk
    # gamma columns follow the previous model's sorted order
    centre = mu if previous is None else previous.mu
    var = (gamma * (xs[:, None] - centre[None, :]) ** 2).sum(axis=0) / nk
    sigma = np.maximum(np.sqrt(var), sigma_floor)
    pi = pi / pi.sum()
    return Gmm2.from_arrays(pi, mu, sigma)


def fit_em(xs, init: Gmm2 | None = None, max_iters: int = 200, rel_tol: float = 1e-6,
           sigma_floor: float = SIGMA_FLOOR, legacy_mstep: bool = False) -> tuple[Gmm2, EmTrace]:
    xs = np.asarray(xs, dtype=float).reshape(-1)
    if xs.size < 2:
        raise ValueError("fit_em needs at least two samples")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    model = default_init(xs, sigma_floor) if init is None else init
    ll = log_likelihood(model, xs)
    trace = EmTrace(log_likelihood_history=[ll])
    for it in range(1, max_iters + 1):
        gamma = e_step(model, xs)
        try:
            model = m_step(xs, gamma, sigma_floor, previous=model if legacy_mstep else None)
        except DegenerateComponentError as exc:
            raise DegenerateComponentError(str(exc), iteration=it) from None
        new_ll = log_likelihood(model, xs)
        trace.log_likelihood_history.append(new_ll)
        trace.iterations = it
        if abs(new_ll - ll) / max(1.0, abs(new_ll)) < rel_tol:
            trace.converged = True
            break
        ll = new_ll
    return model, trace


def default_init(xs, sigma_floor: float = SIGMA_FLOOR) -> Gmm2:
    """Means at the 10th/90th percentiles, both stddevs half the sample stddev."""
    xs = np.asarray(xs, dtype=float).reshape(-1)
    if xs.size < 2:
        raise ValueError("default_init needs at least two samples")
    lo, hi = np.quantile(xs, [0.1, 0.9])
    s = max(float(np.std(xs, ddof=1)) / 2.0, sigma_floor)
    return Gmm2(Gaussian1D(0.5, float(lo), s), Gaussian1D(0.5, float(hi), s))
