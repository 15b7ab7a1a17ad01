"""Special functions, link transforms and distribution primitives.

Every positive-parameter gamma in this package uses the (shape, rate)
convention, so the mean of ``Gamma(shape, rate)`` is ``shape / rate``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "GammaParams",
    "digamma",
    "log_gamma",
    "softplus",
    "sigmoid",
    "inv_softplus",
    "logit",
    "log_softplus",
    "gamma_expectations",
    "gamma_entropy",
    "make_rng",
    "sample_gamma",
    "sample_beta",
    "sample_normal",
    "sample_poisson",
    "sample_categorical",
]


def _check_positive(x, name):
    arr = np.asarray(x, dtype=float)
    if not np.all(arr > 0):
        raise ValueError(f"{name} must be positive, got {x!r}")
    return arr


def digamma(x):
    """Psi function, the derivative of ``log_gamma``. Defined for x > 0."""
    arr = _check_positive(x, "digamma argument")
    out = special.digamma(arr)
    return float(out) if out.ndim == 0 else out


def log_gamma(x):
    """Natural log of the gamma function for x > 0."""
    arr = _check_positive(x, "log_gamma argument")
    out = special.gammaln(arr)
    return float(out) if out.ndim == 0 else out


def softplus(x):
    """log(1 + e^x), evaluated without overflow for large |x|."""
    arr = np.asarray(x, dtype=float)
    out = np.logaddexp(0.0, arr)
    return float(out) if out.ndim == 0 else out


def log_softplus(x):
    """log(softplus(x)); stays accurate for very negative x where softplus underflows."""
    arr = np.asarray(x, dtype=float)
    # softplus(x) = e^x (1 - e^x/2 + ...) for x << 0, so log softplus ~ x
    out = np.where(arr < -30.0, arr - 0.5 * np.exp(np.minimum(arr, 0.0)),
                   np.log(np.logaddexp(0.0, np.maximum(arr, -30.0))))
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    arr = np.asarray(x, dtype=float)
    out = special.expit(arr)
    return float(out) if out.ndim == 0 else out


def inv_softplus(y):
    """Inverse of ``softplus``: log(e^y - 1) for y > 0."""
    arr = _check_positive(y, "inv_softplus argument")
    # log(e^y - 1) = y + log(1 - e^-y)
    out = arr + np.log(-np.expm1(-arr))
    return float(out) if out.ndim == 0 else out


def logit(p):
    arr = np.asarray(p, dtype=float)
    if not np.all((arr > 0) & (arr < 1)):
        raise ValueError(f"logit argument must lie in (0, 1), got {p!r}")
    out = special.logit(arr)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GammaParams:
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"invalid gamma parameters shape={self.shape}, rate={self.rate}")

    @property
    def mean(self) -> float:
        return self.shape / self.rate


def gamma_entropy(shape, rate):
    """Differential entropy of Gamma(shape, rate), elementwise."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    return shape - np.log(rate) + special.gammaln(shape) + (1.0 - shape) * special.digamma(shape)


def gamma_expectations(shape, rate=None):
    """Return ``(E[x], E[log x], entropy)`` under Gamma(shape, rate).

    Accepts either a :class:`GammaParams` or broadcastable arrays of
    shapes and rates.
    """
    if isinstance(shape, GammaParams):
        shape, rate = shape.shape, shape.rate
    shape = _check_positive(shape, "gamma shape")
    rate = _check_positive(rate, "gamma rate")
    mean = shape / rate
    mean_log = special.digamma(shape) - np.log(rate)
    ent = gamma_entropy(shape, rate)
    if mean.ndim == 0:
        return float(mean), float(mean_log), float(ent)
    return mean, mean_log, ent


# ---------------------------------------------------------------------------
# samplers; thin wrappers over numpy's Generator that validate parameters


def make_rng(seed=None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_gamma(shape, rate, rng, size=None):
    shape = _check_positive(shape, "gamma shape")
    rate = _check_positive(rate, "gamma rate")
    return rng.gamma(shape, 1.0 / rate, size=size)


def sample_beta(a, b, rng, size=None):
    a = _check_positive(a, "beta a")
    b = _check_positive(b, "beta b")
    return rng.beta(a, b, size=size)


def sample_normal(mean, std, rng, size=None):
    std = np.asarray(std, dtype=float)
    if np.any(std < 0):
        raise ValueError("normal standard deviation must be nonnegative")
    return rng.normal(mean, std, size=size)


def sample_poisson(rate, rng, size=None):
    rate = np.asarray(rate, dtype=float)
    if np.any(rate < 0) or not np.all(np.isfinite(rate)):
        raise ValueError("poisson rate must be finite and nonnegative")
    return rng.poisson(rate, size=size)


def sample_categorical(probs, rng, size=None):
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise ValueError("categorical probabilities must be a nonnegative vector summing to 1")
    return rng.choice(p.size, size=size, p=p)
