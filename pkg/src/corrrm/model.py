"""Mean-field variational model for correlated nonparametric Poisson factorization.

Notation follows the generative model. Component k has a stick ``V_k``
and atom ``a_k`` (one gamma rate per column); ``w_k = s V_k prod_{j<k}(1-V_j)``.
Row u has a GP vector ``d_u`` and mean ``mu_u``, giving
``g_uk = d_u . l_k + mu_u``, and per-component weights
``x_uk ~ Gamma(w_k, r(g_uk))`` where the rate ``r`` is ``exp(-g)`` or, for
the softplus variant, ``1 / softplus(g)``. Counts are
``y_ui ~ Poisson(sum_k x_uk a_ki)``.

The variational family is gamma for ``x`` and ``a``, point masses for
``s, V, l, alpha, c, d, mu`` and, for every nonzero count, a multinomial
``phi_ui`` over components for the auxiliary split of ``y_ui``. Point-mass
entropies are constants and are left out of the bound.

Local state is batched: a :class:`LocalState` holds the parameters of a
block of rows, and a :class:`RowBlock` holds those rows' nonzero entries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import sparse, special

from .data import SparseCountMatrix
from .mathfn import gamma_entropy, log_softplus, softplus

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


class Variant(str, Enum):
    HGP = "hgp"
    SCALED_HGP = "scaled-hgp"
    CNPF = "cnpf"
    SOFTPLUS_CNPF = "softplus-cnpf"

    @property
    def has_locations(self):
        return self in (Variant.CNPF, Variant.SOFTPLUS_CNPF)

    @property
    def has_mean(self):
        return self is not Variant.HGP

    @property
    def softplus(self):
        return self is Variant.SOFTPLUS_CNPF


class DegenerateStateError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    T: int = 200
    D: int = 25
    sigma_l2: float = 1.0 / 250.0
    sigma_m2: float = 1.0
    atom_shape: float = 0.01
    atom_rate: float = 10.0
    a_alpha: float = 1.0
    b_alpha: float = 0.01
    a_c: float = 1.0
    b_c: float = 0.01
    variant: Variant = Variant.CNPF
    allow_divergent: bool = False
    init_alpha: float = 1.0
    init_c: float = 1.0
    init_jitter: float = 0.1

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.validate()

    def validate(self):
        if self.T < 1 or self.D < 1:
            raise ValueError("T and D must be at least 1")
        for name in ("sigma_l2", "sigma_m2", "atom_shape", "atom_rate", "a_alpha", "b_alpha",
                     "a_c", "b_c", "init_alpha", "init_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.variant.has_locations and self.sigma_l2 >= 1 and not self.allow_divergent:
            raise ValueError(f"sigma_l2={self.sigma_l2} >= 1 gives almost surely infinite rates "
                             "for the linear kernel; set allow_divergent to override")


# ---------------------------------------------------------------------------
# state


@dataclass
class GlobalState:
    """Shared parameters: gamma factors of the atoms and point estimates of the rest."""

    atom_shape: np.ndarray  # (T, I)
    atom_rate: np.ndarray  # (T, I)
    sticks: np.ndarray  # (T,), each in (0, 1)
    scale: float
    locations: np.ndarray  # (T, D)
    alpha: float
    c: float

    @property
    def T(self):
        return self.sticks.size

    @property
    def n_cols(self):
        return self.atom_shape.shape[1]

    @property
    def weights(self) -> np.ndarray:
        log_rest = np.concatenate([[0.0], np.cumsum(np.log1p(-self.sticks))[:-1]])
        return self.scale * self.sticks * np.exp(log_rest)

    def atom_expectations(self):
        """(E[a], E[log a]) with shape (T, I)."""
        cache = self.__dict__.get("_atom_cache")
        if cache is not None:
            return cache
        return self.atom_shape / self.atom_rate, special.digamma(self.atom_shape) - np.log(self.atom_rate)

    def frozen_view(self) -> "GlobalState":
        """Copy whose atom expectations are computed once; for passes that hold atoms fixed."""
        out = self.copy()
        Ea = out.atom_shape / out.atom_rate
        out._atom_cache = (Ea, special.digamma(out.atom_shape) - np.log(out.atom_rate))
        return out

    def copy(self) -> "GlobalState":
        return GlobalState(self.atom_shape.copy(), self.atom_rate.copy(), self.sticks.copy(),
                           float(self.scale), self.locations.copy(), float(self.alpha), float(self.c))

    # unconstrained coordinates: inverse softplus for positives, logit for sticks
    def unconstrained(self) -> dict:
        isp = lambda y: y + np.log(-np.expm1(-y))  # noqa: E731
        return {"scale": float(isp(self.scale)), "sticks": special.logit(self.sticks),
                "locations": self.locations.copy(), "alpha": float(isp(self.alpha)),
                "c": float(isp(self.c))}

    def with_unconstrained(self, theta: dict) -> "GlobalState":
        out = self.copy()
        if "scale" in theta:
            out.scale = float(softplus(theta["scale"]))
        if "sticks" in theta:
            out.sticks = np.clip(special.expit(theta["sticks"]), 1e-12, 1 - 1e-12)
        if "locations" in theta:
            out.locations = np.array(theta["locations"], dtype=float)
        if "alpha" in theta:
            out.alpha = float(softplus(theta["alpha"]))
        if "c" in theta:
            out.c = float(softplus(theta["c"]))
        return out


@dataclass
class LocalState:
    """Per-row parameters for a block of rows.

    ``phi`` (one row per nonzero entry of the block, aligned with
    :class:`RowBlock`) may be ``None``, meaning the auxiliary distributions
    sit at their coordinate optimum for the current ``shape_x``/``rate_x``
    and atoms.
    """

    shape_x: np.ndarray  # (B, T)
    rate_x: np.ndarray  # (B, T)
    d: np.ndarray  # (B, D)
    mu: np.ndarray  # (B,)
    phi: np.ndarray | None = None

    @property
    def n_rows(self):
        return self.shape_x.shape[0]

    def copy(self) -> "LocalState":
        return LocalState(self.shape_x.copy(), self.rate_x.copy(), self.d.copy(), self.mu.copy(),
                          None if self.phi is None else self.phi.copy())

    def take(self, idx) -> "LocalState":
        """Rows ``idx`` of this state (phi dropped)."""
        idx = np.asarray(idx)
        return LocalState(self.shape_x[idx].copy(), self.rate_x[idx].copy(), self.d[idx].copy(),
                          self.mu[idx].copy())

    def x_expectations(self):
        return self.shape_x / self.rate_x, special.digamma(self.shape_x) - np.log(self.rate_x)


@dataclass
class RowBlock:
    """Nonzero entries of a block of rows, renumbered 0..n_rows-1."""

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    counts: np.ndarray
    row_ids: np.ndarray = None
    _lgam: float = field(init=False, repr=False, default=None)

    @classmethod
    def from_matrix(cls, m: SparseCountMatrix, row_ids=None) -> "RowBlock":
        if row_ids is None:
            return cls(m.n_rows, m.n_cols, m.rows, m.cols, m.counts.astype(float),
                       np.arange(m.n_rows))
        sub = m.select_rows(row_ids)
        return cls(sub.n_rows, sub.n_cols, sub.rows, sub.cols, sub.counts.astype(float),
                   np.asarray(row_ids))

    @property
    def nnz(self):
        return self.counts.size

    @property
    def log_factorials(self) -> float:
        if self._lgam is None:
            self._lgam = float(special.gammaln(self.counts + 1.0).sum())
        return self._lgam

    def count_matrix(self, values) -> sparse.csr_matrix:
        return sparse.csr_matrix((values, (self.rows, self.cols)), shape=(self.n_rows, self.n_cols))


class EntryOpCounter:
    """Counts entry-level (nonzero x component) operations; used to check sparsity scaling."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)

    def reset(self):
        self.count = 0


entry_ops = EntryOpCounter()


# ---------------------------------------------------------------------------
# construction


def init_global(config: ModelConfig, n_cols: int, rng) -> GlobalState:
    """Start near the prior: jittered atom shapes, prior-mean sticks, small random locations."""
    T, D = config.T, config.D
    shape = config.atom_shape + config.init_jitter * rng.random((T, n_cols))
    rate = np.full((T, n_cols), config.atom_rate)
    alpha, c = config.init_alpha, config.init_c
    sticks = np.full(T, 1.0 / (1.0 + alpha))
    if config.variant.has_locations:
        locs = rng.normal(0.0, np.sqrt(config.sigma_l2 / 10.0), size=(T, D))
    else:
        locs = np.zeros((T, D))
    return GlobalState(shape, rate, sticks, alpha / c, locs, alpha, c)


def init_local(block: RowBlock, gs: GlobalState, config: ModelConfig) -> LocalState:
    """Prior-centred local state with d = 0, mu = 0 and a data-spread x shape."""
    B, T, D = block.n_rows, gs.T, gs.locations.shape[1]
    totals = np.bincount(block.rows, weights=block.counts, minlength=B)
    g = np.zeros((B, T))
    Ea, _ = gs.atom_expectations()
    shape = gs.weights[None, :] + totals[:, None] / T
    rate = transform_rate(g, config.variant) + Ea.sum(axis=1)[None, :]
    return LocalState(shape, rate, np.zeros((B, D)), np.zeros(B))


def restrict_variant(gs: GlobalState, ls: LocalState | None, variant) -> tuple:
    """Zero the parameters a baseline variant freezes (copies, inputs untouched).

    HGP: locations, d and mu are zero. Scaled HGP: locations and d are zero.
    """
    variant = Variant(variant)
    gs = gs.copy()
    ls = None if ls is None else ls.copy()
    if not variant.has_locations:
        gs.locations[:] = 0.0
        if ls is not None:
            ls.d[:] = 0.0
    if not variant.has_mean and ls is not None:
        ls.mu[:] = 0.0
    return gs, ls


# ---------------------------------------------------------------------------
# GP link


def g_linear(ls: LocalState, gs: GlobalState, variant=Variant.CNPF) -> np.ndarray:
    """g_uk = d_u . l_k + mu_u for the block, shape (B, T); frozen parts read as zero."""
    variant = Variant(variant)
    B = ls.n_rows
    if ls.d.shape[1] != gs.locations.shape[1]:
        raise ValueError("GP vector and location dimensions differ")
    g = ls.d @ gs.locations.T if variant.has_locations else np.zeros((B, gs.T))
    if variant.has_mean:
        g = g + ls.mu[:, None]
    return g


def transform_log_rate(g, variant):
    """log of the prior rate of x given g: -g, or -log softplus(g)."""
    return -log_softplus(g) if Variant(variant).softplus else -np.asarray(g, dtype=float)


def transform_rate(g, variant):
    with np.errstate(over="ignore"):
        return 1.0 / softplus(g) if Variant(variant).softplus else np.exp(-np.asarray(g, dtype=float))


def link_terms(g, w, Ex, variant, second=True):
    """Value, first and second g-derivatives of ``w log r(g) - r(g) E[x]``."""
    with np.errstate(over="ignore", invalid="ignore"):
        if Variant(variant).softplus:
            sp = softplus(g)
            sig = special.expit(g)
            val = -w * log_softplus(g) - Ex / sp
            q = sig / sp
            resid = -w + Ex / sp
            d1 = q * resid
            if not second:
                return val, d1, None
            dq = (sig * (1.0 - sig) * sp - sig * sig) / (sp * sp)
            d2 = dq * resid - q * Ex * sig / (sp * sp)
            return val, d1, d2
        r = np.exp(-g)
        val = -w * g - r * Ex
        d1 = -w + r * Ex
        return val, d1, (-r * Ex if second else None)


# ---------------------------------------------------------------------------
# auxiliary split of nonzero counts


def optimal_phi(block: RowBlock, gs: GlobalState, ls: LocalState) -> np.ndarray:
    """phi_uik proportional to exp(E[log x_uk] + E[log a_ki]), per nonzero entry; (nnz, T)."""
    _, Elogx = ls.x_expectations()
    _, Eloga = gs.atom_expectations()
    logits = Elogx[block.rows] + Eloga.T[block.cols]
    entry_ops.add(logits.size)
    logits -= logits.max(axis=1, keepdims=True)
    phi = np.exp(logits)
    phi /= phi.sum(axis=1, keepdims=True)
    if not np.all(np.isfinite(phi)):
        raise DegenerateStateError("auxiliary probabilities are not finite")
    return phi


def update_phi(block: RowBlock, gs: GlobalState, ls: LocalState) -> LocalState:
    """Set ``ls.phi`` to its coordinate optimum (in place); returns ``ls``."""
    ls.phi = optimal_phi(block, gs, ls)
    return ls


def _implicit_split(block, gs, ls, Elogx=None, Eloga=None):
    """Expected split counts under the optimal phi without forming phi.

    Returns (row_stats (B, T) = sum_i y phi, atom_stats (T, I) = sum_u y phi,
    log normaliser per entry).
    """
    if Elogx is None:
        _, Elogx = ls.x_expectations()
    if Eloga is None:
        _, Eloga = gs.atom_expectations()
    B, T = Elogx.shape
    if block.nnz == 0:
        return np.zeros((B, T)), np.zeros_like(Eloga), np.zeros(0)
    mx = Elogx.max(axis=1, keepdims=True)
    ma = Eloga.max(axis=0, keepdims=True)
    ex = np.exp(Elogx - mx)
    ea = np.exp(Eloga - ma)
    ex_e = ex[block.rows]
    ea_e = ea.T[block.cols]
    norm = np.einsum("nk,nk->n", ex_e, ea_e)
    entry_ops.add(ex_e.size)
    ratio = np.zeros_like(norm)
    good = norm > 1e-250
    ratio[good] = block.counts[good] / norm[good]
    log_norm = np.empty_like(norm)
    log_norm[good] = np.log(norm[good])
    R = block.count_matrix(ratio)
    row_stats = ex * (R @ ea.T)
    atom_stats = ea * (R.T @ ex).T
    if not np.all(good):
        # shifted products underflowed; redo those entries in log space
        bad = np.flatnonzero(~good)
        logits = Elogx[block.rows[bad]] - mx[block.rows[bad]] + Eloga.T[block.cols[bad]] - ma[0, block.cols[bad]][:, None]
        lse = special.logsumexp(logits, axis=1)
        phi = np.exp(logits - lse[:, None]) * block.counts[bad][:, None]
        np.add.at(row_stats, block.rows[bad], phi)
        np.add.at(atom_stats.T, block.cols[bad], phi)
        log_norm[bad] = lse
    log_norm += mx[block.rows, 0] + ma[0, block.cols]
    return row_stats, atom_stats, log_norm


def split_statistics(block: RowBlock, gs: GlobalState, ls: LocalState):
    """(row_stats (B, T), atom_stats (T, I)) of expected auxiliary counts y*phi."""
    if ls.phi is None:
        rs, ats, _ = _implicit_split(block, gs, ls)
        return rs, ats
    yphi = ls.phi * block.counts[:, None]
    entry_ops.add(yphi.size)
    row_stats = np.zeros((ls.n_rows, gs.T))
    np.add.at(row_stats, block.rows, yphi)
    atom_stats = np.zeros((gs.T, gs.n_cols))
    np.add.at(atom_stats.T, block.cols, yphi)
    return row_stats, atom_stats


# ---------------------------------------------------------------------------
# coordinate updates


def update_x(block: RowBlock, gs: GlobalState, ls: LocalState, config: ModelConfig,
             row_stats=None) -> LocalState:
    """Coordinate optimum of q(x) in place.

    shape = w_k + sum_i y_ui phi_uik; rate = r(g_uk) + sum_i E[a_ki]. The
    column sum of E[a] is shared by every row.
    """
    if row_stats is None:
        row_stats, _ = split_statistics(block, gs, ls)
    Ea, _ = gs.atom_expectations()
    g = g_linear(ls, gs, config.variant)
    ls.shape_x = gs.weights[None, :] + row_stats
    ls.rate_x = transform_rate(g, config.variant) + Ea.sum(axis=1)[None, :]
    return ls


def dw(gs: GlobalState, ls: LocalState, config: ModelConfig) -> np.ndarray:
    """d/dw_k of E[log p(x_uk | w_k, g_uk)]: log r(g) - psi(w) + E[log x]; shape (B, T)."""
    _, Elogx = ls.x_expectations()
    g = g_linear(ls, gs, config.variant)
    return transform_log_rate(g, config.variant) - special.digamma(gs.weights)[None, :] + Elogx


def grad_local(gs: GlobalState, ls: LocalState, config: ModelConfig):
    """ELBO gradients with respect to d_u (B, D) and mu_u (B,); frozen blocks are exactly zero."""
    variant = config.variant
    Ex, _ = ls.x_expectations()
    g = g_linear(ls, gs, variant)
    _, d1, _ = link_terms(g, gs.weights[None, :], Ex, variant, second=False)
    if variant.has_locations:
        gd = -ls.d + d1 @ gs.locations
    else:
        gd = np.zeros_like(ls.d)
    if variant.has_mean:
        gmu = -ls.mu / config.sigma_m2 + d1.sum(axis=1)
    else:
        gmu = np.zeros_like(ls.mu)
    return gd, gmu


def local_gp_objective(gs, ls, config, d=None, mu=None):
    """Per-row ELBO terms that depend on (d_u, mu_u), evaluated at the given point."""
    variant = config.variant
    trial = replace(ls, d=ls.d if d is None else d, mu=ls.mu if mu is None else mu)
    Ex, _ = ls.x_expectations()
    g = g_linear(trial, gs, variant)
    val, _, _ = link_terms(g, gs.weights[None, :], Ex, variant, second=False)
    out = val.sum(axis=1)
    if variant.has_locations:
        out = out - 0.5 * np.sum(trial.d ** 2, axis=1)
    if variant.has_mean:
        out = out - 0.5 * trial.mu ** 2 / config.sigma_m2
    return np.where(np.isfinite(out), out, -np.inf)


def local_gp_newton(gs, ls, config):
    """Gradient and Hessian of :func:`local_gp_objective` in the free coordinates.

    Free coordinates are (d, mu) for CNPF variants, (mu,) for the scaled HGP
    and none for the HGP. Returns (grad (B, P), hess (B, P, P)).
    """
    variant = config.variant
    Ex, _ = ls.x_expectations()
    g = g_linear(ls, gs, variant)
    _, d1, d2 = link_terms(g, gs.weights[None, :], Ex, variant)
    B, T = g.shape
    cols = []
    prior = []
    if variant.has_locations:
        cols.append(gs.locations)
        prior += [1.0] * gs.locations.shape[1]
    if variant.has_mean:
        cols.append(np.ones((T, 1)))
        prior.append(1.0 / config.sigma_m2)
    if not cols:
        return np.zeros((B, 0)), np.zeros((B, 0, 0))
    Z = np.hstack(cols)  # (T, P)
    params = []
    if variant.has_locations:
        params.append(ls.d)
    if variant.has_mean:
        params.append(ls.mu[:, None])
    theta = np.hstack(params)
    prior = np.asarray(prior)
    grad = d1 @ Z - theta * prior
    hess = np.einsum("bk,kp,kq->bpq", d2, Z, Z) - np.diag(prior)[None]
    return grad, hess


# ---------------------------------------------------------------------------
# evidence lower bound


def elbo_global(gs: GlobalState, config: ModelConfig) -> float:
    """Terms of the bound that involve only shared parameters."""
    a, s, c = gs.alpha, gs.scale, gs.c
    T = gs.T
    terms = {
        "p(alpha)": config.a_alpha * np.log(config.b_alpha) - special.gammaln(config.a_alpha)
        + (config.a_alpha - 1.0) * np.log(a) - config.b_alpha * a,
        "p(c)": config.a_c * np.log(config.b_c) - special.gammaln(config.a_c)
        + (config.a_c - 1.0) * np.log(c) - config.b_c * c,
        "p(s)": a * np.log(c) - special.gammaln(a) + (a - 1.0) * np.log(s) - c * s,
        "p(V)": T * np.log(a) + (a - 1.0) * np.sum(np.log1p(-gs.sticks)),
    }
    if config.variant.has_locations:
        D = gs.locations.shape[1]
        terms["p(l)"] = (-0.5 * np.sum(gs.locations ** 2) / config.sigma_l2
                         - 0.5 * T * D * np.log(2.0 * np.pi * config.sigma_l2))
    Ea, Eloga = gs.atom_expectations()
    ah, bh = config.atom_shape, config.atom_rate
    terms["p(a)-q(a)"] = np.sum(ah * np.log(bh) - special.gammaln(ah) + (ah - 1.0) * Eloga - bh * Ea
                                + gamma_entropy(gs.atom_shape, gs.atom_rate))
    return _sum_terms(terms)


def _sum_terms(terms):
    bad = [k for k, v in terms.items() if not np.all(np.isfinite(v))]
    if bad:
        raise DegenerateStateError(f"non-finite ELBO term(s): {', '.join(bad)}")
    return float(sum(float(np.sum(v)) for v in terms.values()))


def elbo_local(block: RowBlock, gs: GlobalState, ls: LocalState, config: ModelConfig,
               per_row=False):
    """Row terms of the bound for a block (summed, or one value per row)."""
    variant = config.variant
    B = ls.n_rows
    w = gs.weights[None, :]
    Ex, Elogx = ls.x_expectations()
    Ea, Eloga = gs.atom_expectations()
    g = g_linear(ls, gs, variant)
    logr = transform_log_rate(g, variant)
    with np.errstate(over="ignore"):
        r = transform_rate(g, variant)
    x_terms = (w * logr - special.gammaln(w) + (w - 1.0) * Elogx - r * Ex
               + gamma_entropy(ls.shape_x, ls.rate_x))
    rows = {"p(x)-q(x)": x_terms.sum(axis=1),
            "poisson rate": -(Ex * Ea.sum(axis=1)[None, :]).sum(axis=1)}
    if variant.has_locations:
        rows["p(d)"] = -0.5 * np.sum(ls.d ** 2, axis=1) - 0.5 * ls.d.shape[1] * LOG_2PI
    if variant.has_mean:
        rows["p(mu)"] = -0.5 * ls.mu ** 2 / config.sigma_m2 - 0.5 * np.log(2.0 * np.pi * config.sigma_m2)
    if ls.phi is None:
        _, _, log_norm = _implicit_split(block, gs, ls, Elogx, Eloga)
        per_entry = block.counts * log_norm
    else:
        phi = ls.phi
        entry_ops.add(phi.size)
        inner = Elogx[block.rows] + Eloga.T[block.cols]
        per_entry = block.counts * (np.sum(phi * inner, axis=1) - np.sum(special.xlogy(phi, phi), axis=1))
    per_entry = per_entry - special.gammaln(block.counts + 1.0)
    rows["counts"] = np.bincount(block.rows, weights=per_entry, minlength=B)
    bad = [k for k, v in rows.items() if not np.all(np.isfinite(v))]
    if bad:
        raise DegenerateStateError(f"non-finite ELBO term(s): {', '.join(bad)}")
    total = sum(rows.values())
    return total if per_row else float(total.sum())


def elbo(m, gs: GlobalState, ls: LocalState, config: ModelConfig) -> float:
    """Full bound for matrix ``m`` (a SparseCountMatrix or RowBlock) covering every row of ``ls``."""
    block = m if isinstance(m, RowBlock) else RowBlock.from_matrix(m)
    if block.n_rows != ls.n_rows:
        raise ValueError("local state must cover every row of the matrix")
    return elbo_global(gs, config) + elbo_local(block, gs, ls, config)


# ---------------------------------------------------------------------------
# global gradients


@dataclass
class GlobalGradient:
    """Gradients in unconstrained coordinates plus natural-gradient targets for the atoms.

    ``scale``/``sticks``/``alpha``/``c`` are with respect to the inverse
    softplus (logit for sticks) of the parameter. ``atom_shape_target`` and
    ``atom_rate_target`` are the coordinate-optimal atom parameters; the
    natural gradient is target minus current. ``location_hessian`` is the
    (T, D, D) Hessian of the bound in each location.
    """

    scale: float
    sticks: np.ndarray
    locations: np.ndarray
    alpha: float
    c: float
    atom_shape_target: np.ndarray
    atom_rate_target: np.ndarray
    location_hessian: np.ndarray

    def natural_atom_gradient(self, gs: GlobalState):
        return self.atom_shape_target - gs.atom_shape, self.atom_rate_target - gs.atom_rate

    def as_dict(self):
        return {"scale": self.scale, "sticks": self.sticks, "locations": self.locations,
                "alpha": self.alpha, "c": self.c}


def prior_gradient(gs: GlobalState, config: ModelConfig) -> dict:
    """Constrained-space derivatives of the global prior terms.

    Written as derivatives of the log joint, e.g. (alpha-1)/s - c for the
    gamma prior on s.
    """
    a, s, c, V = gs.alpha, gs.scale, gs.c, gs.sticks
    return {
        "scale": (a - 1.0) / s - c,
        "sticks": -(a - 1.0) / (1.0 - V),
        "alpha": ((config.a_alpha - 1.0) / a - config.b_alpha + np.log(c) - special.digamma(a)
                  + np.log(s) + gs.T / a + np.sum(np.log1p(-V))),
        "c": (config.a_c - 1.0) / c - config.b_c + a / c - s,
    }


def weight_statistics(gs: GlobalState, ls: LocalState, config: ModelConfig) -> np.ndarray:
    """Sum over rows of log r(g_uk) + E[log x_uk], shape (T,).

    With the local state fixed, the bound depends on the stick weights only
    through these sums and the number of rows.
    """
    _, Elogx = ls.x_expectations()
    g = g_linear(ls, gs, config.variant)
    return (transform_log_rate(g, config.variant) + Elogx).sum(axis=0)


def collapsed_weight_terms(gs: GlobalState, ls: LocalState, config: ModelConfig, row_stats):
    """Arrays for the stick objective with q(x) at its optimum for fixed auxiliary splits.

    Returns (row_stats, log r, log(r + sum_i E[a_ki])), each (B, T).
    """
    Ea, _ = gs.atom_expectations()
    g = g_linear(ls, gs, config.variant)
    logr = transform_log_rate(g, config.variant)
    return row_stats, logr, np.log(transform_rate(g, config.variant) + Ea.sum(axis=1)[None, :])


def _row_weight_terms(w, stats, n_rows, collapsed):
    """Value and w-gradient of the row terms of the bound that involve the stick weights."""
    if collapsed is None:
        value = float(np.dot(w, stats) - n_rows * np.sum(special.gammaln(w)))
        return value, stats - n_rows * special.digamma(w)
    R, logr, log_post = collapsed
    wR = w[None, :] + R
    value = float(np.sum(special.gammaln(wR) - special.gammaln(w)[None, :] + w * logr - wR * log_post))
    grad = np.sum(special.digamma(wR) - special.digamma(w)[None, :] + logr - log_post, axis=0)
    return value, grad


def stick_block(gs: GlobalState, stats, n_rows, config: ModelConfig, scale=1.0, collapsed=None):
    """Value and unconstrained gradients of every bound term involving (s, V, alpha, c).

    Row terms are ``scale * sum_k (w_k stats_k - n_rows lgamma(w_k))`` for
    fixed q(x). With ``collapsed`` (from :func:`collapsed_weight_terms`)
    q(x) is instead held at its optimum for each trial w, which gives
    ``sum_uk lgamma(w+R) - lgamma(w) + w log r - (w+R) log(r+A)`` up to
    terms free of w. The prior terms are those of :func:`elbo_global`.
    Returns (value, dict of gradients keyed scale/sticks/alpha/c).
    """
    w = gs.weights
    V = gs.sticks
    s = gs.scale
    a, c = gs.alpha, gs.c
    rows_value, rows_grad = _row_weight_terms(w, stats, n_rows, collapsed)
    value = scale * rows_value
    value += (config.a_alpha * np.log(config.b_alpha) - special.gammaln(config.a_alpha)
              + (config.a_alpha - 1.0) * np.log(a) - config.b_alpha * a
              + config.a_c * np.log(config.b_c) - special.gammaln(config.a_c)
              + (config.a_c - 1.0) * np.log(c) - config.b_c * c
              + a * np.log(c) - special.gammaln(a) + (a - 1.0) * np.log(s) - c * s
              + gs.T * np.log(a) + (a - 1.0) * np.sum(np.log1p(-V)))

    DW = scale * rows_grad
    wDW = w * DW
    prior = prior_gradient(gs, config)
    g_scale = np.sum(wDW) / s + prior["scale"]
    # sum_{j>k} w_j DW_j
    tail = np.concatenate([np.cumsum(wDW[::-1])[::-1][1:], [0.0]])
    g_sticks = wDW / V - tail / (1.0 - V) + prior["sticks"]
    dsp = lambda p: -np.expm1(-p)  # noqa: E731  d softplus / d theta, written in terms of softplus(theta)
    grads = {"scale": float(g_scale * dsp(s)), "sticks": g_sticks * V * (1.0 - V),
             "alpha": float(prior["alpha"] * dsp(a)), "c": float(prior["c"] * dsp(c))}
    return float(value), grads


def grad_global(block: RowBlock, gs: GlobalState, ls: LocalState, config: ModelConfig,
                scale=1.0) -> GlobalGradient:
    """Gradient of the bound in the shared parameters with local state held fixed.

    Row contributions are multiplied by ``scale`` (U / batch size for a
    noisy minibatch objective); prior terms are not.
    """
    variant = config.variant
    w = gs.weights
    T = gs.T
    Ex, _ = ls.x_expectations()
    _, sg = stick_block(gs, weight_statistics(gs, ls, config), ls.n_rows, config, scale)

    D = gs.locations.shape[1]
    if variant.has_locations:
        g = g_linear(ls, gs, variant)
        _, d1, d2 = link_terms(g, w[None, :], Ex, variant)
        g_loc = -gs.locations / config.sigma_l2 + scale * (d1.T @ ls.d)
        hess = scale * np.einsum("uk,ud,ue->kde", d2, ls.d, ls.d) - np.eye(D)[None] / config.sigma_l2
    else:
        g_loc = np.zeros_like(gs.locations)
        hess = np.broadcast_to(-np.eye(D) / config.sigma_l2, (T, D, D)).copy()

    _, atom_stats = split_statistics(block, gs, ls)
    shape_target = config.atom_shape + scale * atom_stats
    rate_target = config.atom_rate + scale * np.broadcast_to(Ex.sum(axis=0)[:, None], gs.atom_shape.shape)

    return GlobalGradient(
        scale=sg["scale"],
        sticks=sg["sticks"],
        locations=g_loc,
        alpha=sg["alpha"],
        c=sg["c"],
        atom_shape_target=shape_target,
        atom_rate_target=np.array(rate_target),
        location_hessian=hess,
    )
