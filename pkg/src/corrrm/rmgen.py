"""Sampling correlated random measures and Monte Carlo checks of their laws.

A truncated correlated random measure is built in three steps: a set of
tuples (atom, weight, location) from a stick-breaking gamma (or beta)
process; a draw of a linear-kernel Gaussian process evaluated at the
locations, ``F(l) = l.d + mu`` with ``d`` standard normal; and transformed
weights ``x ~ T(. | w, F(l))``. Reusing one tuple set across many GP/x
draws gives the hierarchical version.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import special

from .mathfn import sigmoid, softplus

logger = logging.getLogger(__name__)

__all__ = [
    "TransformationKind",
    "TupleSet",
    "MeasureDraw",
    "LaplaceCheck",
    "FinitenessReport",
    "stick_weights",
    "sample_gamma_process_tuples",
    "sample_beta_process_tuples",
    "beta_truncation_bias",
    "gp_linear_draw",
    "conditional_mean",
    "transform_weights",
    "pairwise_covariance",
    "mc_pairwise_covariance",
    "normalize_measure",
    "measure_of",
    "sample_hierarchical",
    "laplace_truncation",
    "mc_laplace_check",
    "mc_finiteness_check",
]


class TransformationKind(str, Enum):
    IDENTITY = "identity"
    GAMMA_EXP = "gamma-exp"
    GAMMA_SOFTPLUS = "gamma-softplus"
    BETA_BERNOULLI = "beta-bernoulli"
    GAMMA_BERNOULLI = "gamma-bernoulli"

    @property
    def is_bernoulli(self):
        return self in (TransformationKind.BETA_BERNOULLI, TransformationKind.GAMMA_BERNOULLI)

    @property
    def linear_in_weight(self):
        """True when E[x | w, F] is proportional to w."""
        return not self.is_bernoulli


@dataclass
class TupleSet:
    """Truncated tuple set: ``atoms[k]``, ``weights[k]``, ``locations[k]`` for k < T."""

    atoms: np.ndarray
    weights: np.ndarray
    locations: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        self.atoms = np.asarray(self.atoms)
        T = self.weights.size
        if self.locations.shape[0] != T or self.atoms.shape[0] != T:
            raise ValueError("atoms, weights and locations must have the same length")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and nonnegative")

    @property
    def T(self):
        return self.weights.size

    @property
    def D(self):
        return self.locations.shape[1]


@dataclass
class MeasureDraw:
    tuple_set: TupleSet
    gp_values: np.ndarray
    transformed_weights: np.ndarray


# ---------------------------------------------------------------------------
# tuples


def stick_weights(scale, sticks):
    """w_k = scale * v_k * prod_{j<k} (1 - v_j); works along the last axis."""
    sticks = np.asarray(sticks, dtype=float)
    with np.errstate(divide="ignore"):  # a stick of exactly 1 leaves nothing for later atoms
        log_rest = np.cumsum(np.log1p(-sticks), axis=-1)
    log_rest = np.concatenate([np.zeros(sticks.shape[:-1] + (1,)), log_rest[..., :-1]], axis=-1)
    scale = np.asarray(scale, dtype=float)
    if scale.ndim:
        scale = scale[..., None]
    return scale * sticks * np.exp(log_rest)


def _gamma_atoms(rng, T, n_cols, shape, rate):
    return rng.gamma(shape, 1.0 / rate, size=(T, n_cols))


def sample_gamma_process_tuples(alpha, c, T, D, sigma_l2, rng, atom_sampler=None,
                                scale=None, sticks=None) -> TupleSet:
    """Truncated stick-breaking draw of a gamma process with locations.

    ``s ~ Gamma(alpha, c)``, ``v_k ~ Beta(1, alpha)``, weights from
    :func:`stick_weights`, locations iid ``Normal(0, sigma_l2 I_D)``.
    ``atom_sampler(rng, T)`` returns the T atom payloads; by default the
    atoms are just their indices. ``scale``/``sticks`` pin those draws.
    """
    if not (alpha > 0 and c > 0 and sigma_l2 >= 0):
        raise ValueError("alpha and c must be positive, sigma_l2 nonnegative")
    if T < 1 or D < 0:
        raise ValueError("need T >= 1 and D >= 0")
    s = rng.gamma(alpha, 1.0 / c) if scale is None else float(scale)
    v = rng.beta(1.0, alpha, size=T) if sticks is None else np.asarray(sticks, dtype=float)
    if v.shape != (T,):
        raise ValueError("sticks must have length T")
    w = stick_weights(s, v)
    locs = rng.normal(0.0, np.sqrt(sigma_l2), size=(T, D))
    atoms = np.arange(T) if atom_sampler is None else atom_sampler(rng, T)
    return TupleSet(atoms=atoms, weights=w, locations=locs)


def sample_beta_process_tuples(alpha, T, D, sigma_l2, rng, atom_sampler=None) -> TupleSet:
    """Stick-breaking beta process: ``w_k = prod_{j<=k} nu_j`` with ``nu_j ~ Beta(alpha, 1)``.

    The weights lie in (0, 1) and decrease. The mass discarded by the
    truncation has expectation :func:`beta_truncation_bias`.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    nu = rng.beta(alpha, 1.0, size=T)
    w = np.exp(np.cumsum(np.log(nu)))
    w = np.clip(w, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    locs = rng.normal(0.0, np.sqrt(sigma_l2), size=(T, D))
    atoms = np.arange(T) if atom_sampler is None else atom_sampler(rng, T)
    return TupleSet(atoms=atoms, weights=w, locations=locs)


def beta_truncation_bias(alpha, T):
    """E[sum_{k>T} w_k] for the stick-breaking beta process, alpha * (alpha/(1+alpha))^T."""
    return alpha * (alpha / (1.0 + alpha)) ** T


# ---------------------------------------------------------------------------
# Gaussian process and transformation


def gp_linear_draw(locations, mean, rng, size=None):
    """Evaluate one (or ``size``) linear-kernel GP draws at ``locations``.

    Returns ``locations @ d + mean`` with ``d ~ N(0, I_D)``; shape ``(T,)``
    or ``(size, T)``. ``mean`` may be an array broadcastable to the draws.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    D = locations.shape[1]
    if size is None:
        d = rng.standard_normal(D)
        return locations @ d + mean
    d = rng.standard_normal((size, D))
    return d @ locations.T + np.asarray(mean, dtype=float).reshape(-1, 1) \
        if np.ndim(mean) else d @ locations.T + mean


def _check_weights(kind, weights):
    if kind is TransformationKind.BETA_BERNOULLI and np.any((weights <= 0) | (weights >= 1)):
        raise ValueError("beta-bernoulli transformation needs weights in (0, 1)")


def activation_probability(kind, weights, gp_values):
    kind = TransformationKind(kind)
    weights = np.asarray(weights, dtype=float)
    _check_weights(kind, weights)
    if kind is TransformationKind.BETA_BERNOULLI:
        return sigmoid(special.logit(weights) + gp_values)
    if kind is TransformationKind.GAMMA_BERNOULLI:
        # w e^F / (1 + w e^F) = sigmoid(log w + F)
        with np.errstate(divide="ignore"):
            return sigmoid(np.log(weights) + gp_values)
    raise ValueError(f"{kind.value} is not a Bernoulli transformation")


def conditional_mean(kind, weights, gp_values):
    """E[x | w, F] for each transformation kind."""
    kind = TransformationKind(kind)
    weights = np.asarray(weights, dtype=float)
    gp_values = np.asarray(gp_values, dtype=float)
    if kind is TransformationKind.IDENTITY:
        return np.broadcast_to(weights, np.broadcast_shapes(weights.shape, gp_values.shape)).copy()
    if kind is TransformationKind.GAMMA_EXP:
        return weights * np.exp(gp_values)
    if kind is TransformationKind.GAMMA_SOFTPLUS:
        return weights * softplus(gp_values)
    return activation_probability(kind, weights, gp_values)


def transform_weights(kind, weights, gp_values, rng):
    """Draw transformed weights x_i ~ T(. | w_i, F(l_i)).

    gamma-exp: ``Gamma(w, rate=e^-F)``; gamma-softplus:
    ``Gamma(w, rate=1/softplus(F))``; beta-bernoulli:
    ``Bernoulli(sigmoid(logit(w) + F))``; gamma-bernoulli:
    ``Bernoulli(w e^F / (1 + w e^F))``; identity: ``x = w``.
    """
    kind = TransformationKind(kind)
    weights = np.asarray(weights, dtype=float)
    gp_values = np.asarray(gp_values, dtype=float)
    _check_weights(kind, weights)
    shape = np.broadcast_shapes(weights.shape, gp_values.shape)
    if kind is TransformationKind.IDENTITY:
        return np.broadcast_to(weights, shape).copy()
    if kind is TransformationKind.GAMMA_EXP:
        scale = np.exp(gp_values)
    elif kind is TransformationKind.GAMMA_SOFTPLUS:
        scale = softplus(gp_values)
    else:
        p = activation_probability(kind, weights, gp_values)
        return (rng.random(shape) < p).astype(float)
    w = np.broadcast_to(weights, shape)
    out = np.zeros(shape)
    pos = w > 0
    out[pos] = rng.gamma(w[pos], np.broadcast_to(scale, shape)[pos])
    return out


def pairwise_covariance(kind, w_i, w_j, loc_i, loc_j, mean=0.0, rng=None, n_draws=100_000):
    """Cov(X_i, X_j | tuples) for two distinct atoms.

    For gamma-exp the conditional mean ``w e^F`` is lognormal, giving
    ``w_i w_j e^{2 mean} e^{(l_i.l_i + l_j.l_j)/2} (e^{l_i.l_j} - 1)``.
    Other kinds fall back to :func:`mc_pairwise_covariance` and need ``rng``.
    """
    kind = TransformationKind(kind)
    loc_i = np.asarray(loc_i, dtype=float)
    loc_j = np.asarray(loc_j, dtype=float)
    if loc_i.shape != loc_j.shape:
        raise ValueError("location dimensions differ")
    if kind is TransformationKind.GAMMA_EXP:
        qi, qj, cross = loc_i @ loc_i, loc_j @ loc_j, loc_i @ loc_j
        return float(w_i * w_j * np.exp(2.0 * mean + 0.5 * (qi + qj)) * np.expm1(cross))
    if kind is TransformationKind.IDENTITY:
        return 0.0
    if rng is None:
        raise ValueError(f"no closed form for {kind.value}; pass rng for the Monte Carlo estimate")
    est, _ = mc_pairwise_covariance(kind, w_i, w_j, loc_i, loc_j, mean, n_draws, rng)
    return est


def mc_pairwise_covariance(kind, w_i, w_j, loc_i, loc_j, mean, n_draws, rng, chunk=250_000):
    """Sample covariance of (X_i, X_j) over fresh GP and transformation draws.

    Returns ``(estimate, standard_error)``; the standard error is that of the
    mean of centred cross products.
    """
    kind = TransformationKind(kind)
    locs = np.vstack([loc_i, loc_j])
    w = np.array([w_i, w_j], dtype=float)
    xs = []
    done = 0
    while done < n_draws:
        n = min(chunk, n_draws - done)
        F = gp_linear_draw(locs, mean, rng, size=n)
        xs.append(transform_weights(kind, w, F, rng))
        done += n
    x = np.concatenate(xs) if xs else np.zeros((0, 2))
    centred = x - x.mean(axis=0)
    prod = centred[:, 0] * centred[:, 1]
    n = prod.size
    est = prod.sum() / (n - 1)
    se = prod.std(ddof=1) / np.sqrt(n)
    return float(est), float(se)


# ---------------------------------------------------------------------------
# measures


def normalize_measure(draw) -> np.ndarray:
    """Probability weights x_i / sum_j x_j of a draw (or of a raw weight vector)."""
    x = draw.transformed_weights if isinstance(draw, MeasureDraw) else np.asarray(draw, dtype=float)
    total = x.sum()
    if not total > 0:
        raise ValueError("cannot normalise a measure with zero total mass")
    return x / total


def measure_of(draw: MeasureDraw, atom_mask) -> float:
    """M(A) = sum of transformed weights of atoms whose index is selected by ``atom_mask``."""
    return float(np.sum(draw.transformed_weights[np.asarray(atom_mask)]))


def sample_hierarchical(tuple_set: TupleSet, n_realizations, kind, means, rng):
    """Draw ``n_realizations`` measures that share ``tuple_set``.

    Each realization gets its own GP draw (with mean ``means[u]``, or a
    scalar mean shared by all) and its own transformed weights.
    """
    kind = TransformationKind(kind)
    means = np.broadcast_to(np.asarray(means, dtype=float), (n_realizations,))
    draws = []
    for u in range(n_realizations):
        F = gp_linear_draw(tuple_set.locations, means[u], rng)
        x = transform_weights(kind, tuple_set.weights, F, rng)
        draws.append(MeasureDraw(tuple_set, F, x))
    return draws


# ---------------------------------------------------------------------------
# Laplace functional


@dataclass
class LaplaceCheck:
    mc_estimate: float
    mc_stderr: float
    reference: float
    reference_stderr: float
    reference_kind: str
    truncation: int

    @property
    def stderr(self):
        return float(np.hypot(self.mc_stderr, self.reference_stderr))

    @property
    def z_score(self):
        if self.stderr == 0:
            return 0.0 if self.mc_estimate == self.reference else np.inf
        return (self.mc_estimate - self.reference) / self.stderr

    def passed(self, n_se=3.0):
        return abs(self.mc_estimate - self.reference) <= n_se * self.stderr


def laplace_truncation(base_mass, tol=1e-8):
    """Smallest T with E[prod_{k<=T}(1 - v_k)] = (H/(1+H))^T below ``tol``."""
    ratio = base_mass / (1.0 + base_mass)
    return int(np.ceil(np.log(tol) / np.log(ratio)))


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(80)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def _laplace_exponent(kind, r, F, c):
    """Integral over weights of (1 - E[e^{-r x} | w, F]) against e^{-cw}/w dw.

    For gamma transformations E[e^{-rx}|w,F] = exp(-w lam(F)), and the
    Frullani integral gives log(1 + lam/c).
    """
    if kind is TransformationKind.GAMMA_EXP:
        lam = np.log1p(r * np.exp(F))
    elif kind is TransformationKind.GAMMA_SOFTPLUS:
        lam = np.log1p(r * softplus(F))
    else:
        raise ValueError(f"no reference Laplace exponent for {kind.value}")
    return np.log1p(lam / c)


def mc_laplace_check(kind, base_mass, c, r, n_draws, rng, T=None, D=2, sigma_l2=0.25, mean=0.0,
                     chunk=20_000) -> LaplaceCheck:
    """Compare E[exp(-r M(E))] by direct simulation against its Laplace-functional form.

    The measure's tuples come from a gamma process with base mass
    ``base_mass`` = H(E) and rate ``c`` (g is the constant function 1).
    The reference is analytic, ``(1 + r/c)^-H``, for the identity kind. For
    gamma-exp and gamma-softplus it is the nested form
    ``E_F[exp(-H E_l[log(1 + lam(F(l))/c)])]``: an outer Monte Carlo
    average over GP draws, with the location integral done by Gauss-Hermite
    quadrature since ``F(l) | d ~ N(mean, sigma_l2 |d|^2)``.
    """
    kind = TransformationKind(kind)
    if r < 0:
        raise ValueError("r must be nonnegative")
    if n_draws < 2:
        raise ValueError("need at least two draws for a standard error")
    needed = laplace_truncation(base_mass)
    if T is None:
        T = needed
    elif T < needed:
        raise ValueError(f"truncation T={T} leaves stick mass above 1e-8; need T >= {needed}")

    vals = np.empty(n_draws)
    done = 0
    while done < n_draws:
        n = min(chunk, n_draws - done)
        s = rng.gamma(base_mass, 1.0 / c, size=n)
        v = rng.beta(1.0, base_mass, size=(n, T))
        w = stick_weights(s, v)
        if kind is TransformationKind.IDENTITY:
            total = w.sum(axis=1)
        else:
            locs = rng.normal(0.0, np.sqrt(sigma_l2), size=(n, T, D))
            d = rng.standard_normal((n, D))
            F = np.einsum("ntd,nd->nt", locs, d) + mean
            total = transform_weights(kind, w, F, rng).sum(axis=1)
        vals[done:done + n] = np.exp(-r * total)
        done += n
    mc = float(vals.mean())
    mc_se = float(vals.std(ddof=1) / np.sqrt(n_draws))

    if kind is TransformationKind.IDENTITY:
        ref, ref_se, how = (1.0 + r / c) ** (-base_mass), 0.0, "analytic"
    else:
        d_norm = np.sqrt(rng.chisquare(D, size=n_draws)) if D > 0 else np.zeros(n_draws)
        F = mean + np.sqrt(sigma_l2) * d_norm[:, None] * _GH_NODES[None, :]
        inner = _laplace_exponent(kind, r, F, c) @ _GH_WEIGHTS
        nested = np.exp(-base_mass * inner)
        ref, ref_se, how = float(nested.mean()), float(nested.std(ddof=1) / np.sqrt(n_draws)), "nested"
    return LaplaceCheck(mc, mc_se, float(ref), ref_se, how, T)


# ---------------------------------------------------------------------------
# finiteness


@dataclass
class FinitenessReport:
    kind: str
    sigma_l2: float
    truncations: list
    estimates: list
    relative_increments: list
    growth_slope: float
    verdict: str

    @property
    def convergent(self):
        return self.verdict == "CONVERGENT"


def _expected_gp_factor(kind, weights, loc_sq, mean, sigma_m2, nodes=80):
    """E_F[E[x | w, F]] where F ~ N(mean, |l|^2 + sigma_m2), per atom."""
    var = loc_sq + sigma_m2
    if kind is TransformationKind.IDENTITY:
        return weights
    if kind is TransformationKind.GAMMA_EXP:
        return weights * np.exp(mean + 0.5 * var)
    z, wz = np.polynomial.hermite_e.hermegauss(nodes)
    F = mean + np.sqrt(var)[..., None] * z
    cm = conditional_mean(kind, np.asarray(weights)[..., None], F)
    return cm @ (wz / wz.sum())


def _weight_bins(kind, shape, c, n_bins=80):
    """Geometric bin midpoints and probabilities for Gamma(shape, c) or Beta(shape, 1) weights."""
    if kind is TransformationKind.BETA_BERNOULLI:
        edges = np.concatenate([[0.0], np.logspace(-30, 0, n_bins)])
        cdf = edges ** shape
    else:
        edges = np.concatenate([[0.0], np.logspace(-30, 3, n_bins)]) / c
        cdf = special.gammainc(shape, c * edges)
        cdf[-1] = 1.0
    mass = np.diff(cdf)
    mid = np.sqrt(np.maximum(edges[:-1], edges[1] * 1e-3) * edges[1:])
    mid = np.minimum(mid, 1.0 - 1e-12) if kind is TransformationKind.BETA_BERNOULLI else mid
    return mid, mass


def mc_finiteness_check(kind, sigma_l2, truncations, rng, D=5, base_mass=1.0, c=1.0, mean=0.0,
                        sigma_m2=0.0, n_replicates=16, tol=0.05, chunk=1 << 16) -> FinitenessReport:
    """Track the expected total mass E[sum_{k<=T} x_k] as the truncation T grows.

    Uses the finite approximation of the gamma process, ``T`` atoms with
    ``w_k ~ Gamma(H/T, c)`` and iid ``Normal(0, sigma_l2 I_D)`` locations,
    which converges to the gamma process as T grows. The GP is integrated
    out per atom (exactly for gamma-exp, by quadrature otherwise). For
    kinds linear in the weight, E[w_k] = H/(cT) is used directly and the
    atom sets are nested across T. For the Bernoulli kinds the expected
    count ``T E[p(w, F(l))]`` is averaged over sampled locations with the
    weight law integrated on geometric bins; beta-bernoulli uses
    ``w_k ~ Beta(H/T, 1)``.

    The estimate at each T in ``truncations`` is the median over replicates. The
    verdict is CONVERGENT when the final relative increment is below ``tol``
    and the log-log growth slope over the second half of the schedule is
    below ``tol``; otherwise DIVERGENT.
    """
    kind = TransformationKind(kind)
    truncations = [int(t) for t in truncations]
    if len(truncations) < 3 or any(b <= a for a, b in zip(truncations, truncations[1:])):
        raise ValueError("truncations must be an increasing schedule of at least 3 values")
    t_max = truncations[-1]
    ests = np.empty((n_replicates, len(truncations)))
    for rep in range(n_replicates):
        if kind.linear_in_weight:
            # nested atom sets; E[w_k] = H/(cT) factors out of the running sum
            acc = np.zeros(len(truncations))
            done = 0
            while done < t_max:
                n = min(chunk, t_max - done)
                loc_sq = sigma_l2 * rng.chisquare(D, size=n) if D > 0 else np.zeros(n)
                contrib = _expected_gp_factor(kind, np.ones(n), loc_sq, mean, sigma_m2)
                idx = np.arange(done, done + n)
                for j, T in enumerate(truncations):
                    acc[j] += contrib[idx < T].sum()
                done += n
            ests[rep] = acc * base_mass / (c * np.asarray(truncations))
        else:
            # T E_{l,w,F}[p]: Monte Carlo over locations, binned quadrature over the weight law
            for j, T in enumerate(truncations):
                n_loc = min(T, 4096)
                loc_sq = sigma_l2 * rng.chisquare(D, size=n_loc) if D > 0 else np.zeros(n_loc)
                w_mid, w_mass = _weight_bins(kind, base_mass / T, c)
                per_w = _expected_gp_factor(kind, w_mid[None, :], loc_sq[:, None], mean, sigma_m2, nodes=12)
                ests[rep, j] = T * float(np.mean(per_w @ w_mass))
    med = np.median(ests, axis=0)
    rel_inc = np.abs(np.diff(med)) / np.maximum(np.abs(med[:-1]), 1e-300)
    half = len(truncations) // 2
    logT = np.log(truncations[half:])
    logm = np.log(np.maximum(med[half:], 1e-300))
    slope = float(np.polyfit(logT, logm, 1)[0])
    convergent = rel_inc[-1] < tol and slope < tol
    verdict = "CONVERGENT" if convergent else "DIVERGENT"
    logger.info("finiteness %s sigma_l2=%g: slope %.3g, last increment %.3g -> %s",
                kind.value, sigma_l2, slope, rel_inc[-1], verdict)
    return FinitenessReport(kind.value, float(sigma_l2), truncations, med.tolist(), rel_inc.tolist(),
                            slope, verdict)
