"""Held-out perplexity, exports of a fitted model and synthetic data.

Perplexity follows the document-completion protocol: each held-out row is
refit on its observed fraction with the components fixed, and every test
event is scored under the predictive distribution over columns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import rmgen
from .data import HeldOutSplit, SparseCountMatrix
from .mathfn import make_rng

logger = logging.getLogger(__name__)

EXPORT_MASS_FRACTION = 1e-4


@dataclass
class PerplexityReport:
    perplexity: float
    n_test_events: int
    n_heldout_rows: int
    n_rows_with_empty_obs: int

    def to_text(self):
        return "".join(f"{k}\t{v!r}\n" for k, v in self.__dict__.items())


@dataclass
class CorrelationEdge:
    k: int
    m: int
    rho: float


def predict_column_distribution(Ex, Ea):
    """p(j) proportional to sum_k E[x_k] E[a_kj]; rows of ``Ex`` give one distribution each."""
    Ex = np.asarray(Ex, dtype=float)
    Ea = np.asarray(Ea, dtype=float)
    rates = Ex @ Ea
    total = rates.sum(axis=-1, keepdims=True)
    if np.any(total <= 0) or not np.all(np.isfinite(total)):
        raise ValueError("predictive rates must include at least one positive finite value")
    return rates / total


def perplexity_from_log_probs(log_probs, counts):
    """exp(-sum count * log p / sum count)."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n <= 0:
        raise ValueError("no test events")
    return float(np.exp(-np.dot(counts, log_probs) / n))


def evaluate_perplexity(split, gs: M.GlobalState, config: M.ModelConfig, threads=1, tol=1e-4,
                        max_iters=100) -> PerplexityReport:
    """Score the test half of every held-out row after refitting on its observed half.

    ``split`` is a :class:`HeldOutSplit` or an ``(obs, test)`` pair of
    matrices with matching rows. Only the observed half reaches the refit.
    """
    from .infer import optimize_local

    obs, test = (split.heldout_obs, split.heldout_test) if isinstance(split, HeldOutSplit) else split
    if obs.shape != test.shape:
        raise ValueError("observed and test matrices must have the same shape")
    if test.counts.sum() == 0:
        raise ValueError("held-out test set has no events")
    ls, _ = optimize_local(obs, gs, config, tol=tol, max_iters=max_iters, threads=threads)
    Ex, _ = ls.x_expectations()
    Ea, _ = gs.atom_expectations()
    totals = Ex @ Ea.sum(axis=1)
    rates = np.einsum("nk,kn->n", Ex[test.rows], Ea[:, test.cols])
    log_p = np.log(rates) - np.log(totals[test.rows])
    ppl = perplexity_from_log_probs(log_p, test.counts)
    empty = int(np.sum(obs.row_totals() == 0))
    return PerplexityReport(ppl, int(test.counts.sum()), obs.n_rows, empty)


# ---------------------------------------------------------------------------
# exports


def location_correlations(locations):
    """Cosine similarity matrix of the location vectors."""
    L = np.asarray(locations, dtype=float)
    norms = np.linalg.norm(L, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm location")
    U = L / norms[:, None]
    return np.clip(U @ U.T, -1.0, 1.0)


def exported_components(gs: M.GlobalState):
    """Components whose stick weight exceeds a small fraction of the total mass, heaviest first."""
    w = gs.weights
    order = np.argsort(-w, kind="stable")
    return order[w[order] > EXPORT_MASS_FRACTION * w.sum()]


def component_correlations(gs: M.GlobalState, threshold=0.0, components=None, variant=None):
    """Signed correlation edges ``k < m`` with ``|rho| >= threshold``."""
    if variant is not None and not M.Variant(variant).has_locations:
        raise ValueError(f"variant {M.Variant(variant).value} has no locations; correlations undefined")
    comps = exported_components(gs) if components is None else np.asarray(components)
    norms = np.linalg.norm(gs.locations[comps], axis=1)
    if np.any(norms == 0):
        logger.warning("excluding %d component(s) with zero-norm locations", int(np.sum(norms == 0)))
    comps = np.sort(comps[norms > 0])
    if comps.size == 0:
        return []
    rho = location_correlations(gs.locations[comps])
    edges = []
    for a in range(comps.size):
        for b in range(a + 1, comps.size):
            if abs(rho[a, b]) >= threshold:
                edges.append(CorrelationEdge(int(comps[a]), int(comps[b]), float(rho[a, b])))
    return edges


def effective_components(weights, mass=0.99):
    """Size of the smallest set of heaviest weights holding ``mass`` of the total."""
    w = np.sort(np.asarray(weights, dtype=float))[::-1]
    cum = np.cumsum(w)
    return int(min(np.searchsorted(cum, mass * cum[-1] * (1 - 1e-12)) + 1, w.size))


def export_sticks(gs: M.GlobalState, mass=0.99):
    """((k, w_k) sorted by weight descending, effective component count)."""
    w = gs.weights
    order = np.argsort(-w, kind="stable")
    return [(int(k), float(w[k])) for k in order], effective_components(w, mass)


def export_components(gs: M.GlobalState, col_ids=None, top_n=10, components=None):
    """Top columns of each exported component by E[a]; ties go to the lower column index.

    Returns rows ``(k, rank, col_id, mean_weight)``.
    """
    Ea, _ = gs.atom_expectations()
    top_n = min(int(top_n), gs.n_cols)
    if top_n < 1:
        raise ValueError("top_n must be positive")
    comps = exported_components(gs) if components is None else components
    rows = []
    for k in comps:
        order = np.lexsort((np.arange(gs.n_cols), -Ea[k]))[:top_n]
        for rank, j in enumerate(order):
            rows.append((int(k), rank, j if col_ids is None else col_ids[j], float(Ea[k, j])))
    return rows


def provenance_header(run_config: dict | None, version: str):
    lines = [f"# corrrm {version}"]
    for key, value in sorted((run_config or {}).items()):
        lines.append(f"# {key}={value}")
    return "\n".join(lines) + "\n"


def write_sticks(path, sticks, header=""):
    with open(path, "w") as fh:
        fh.write(header)
        fh.write("k,weight\n")
        for k, w in sticks:
            fh.write(f"{k},{w!r}\n")


def write_edges(path, edges, header=""):
    with open(path, "w") as fh:
        fh.write(header)
        for e in edges:
            fh.write(f"{e.k}\t{e.m}\t{e.rho!r}\n")


def write_components(path, rows, header=""):
    with open(path, "w") as fh:
        fh.write(header)
        for k, rank, col, weight in rows:
            fh.write(f"{k}\t{rank}\t{col}\t{weight!r}\n")


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    n_rows: int = 2000
    n_cols: int = 300
    n_components: int = 15
    D: int = 5
    sigma_l2: float = 0.7
    mean_mu: float = 0.0
    sigma_m2: float = 0.25
    weight_total: float = 15.0
    stick_alpha: float = 10.0
    atom_shape: float = 0.1
    events_per_row: float = 60.0
    kind: str = "gamma-exp"

    def validate(self):
        if self.sigma_l2 >= 1:
            raise ValueError("sigma_l2 >= 1 makes the linear-kernel transformation diverge")
        if min(self.n_rows, self.n_cols, self.n_components, self.D) < 1:
            raise ValueError("sizes must be positive")


@dataclass
class GroundTruth:
    atoms: np.ndarray  # (K, I)
    weights: np.ndarray
    locations: np.ndarray
    d: np.ndarray
    mu: np.ndarray
    x: np.ndarray  # (U, K)

    @property
    def correlation(self):
        return location_correlations(self.locations)


def generate_synthetic(config: SyntheticConfig, seed=None):
    """Draw a count matrix from the correlated Poisson factorization model.

    Returns (SparseCountMatrix, GroundTruth). Atoms are rescaled so an
    average row has about ``events_per_row`` expected events.
    """
    config.validate()
    rng = make_rng(seed)
    K, I, U = config.n_components, config.n_cols, config.n_rows
    sticks = rng.beta(1.0, config.stick_alpha, size=K)
    raw = rmgen.stick_weights(1.0, sticks)
    tuples = rmgen.sample_gamma_process_tuples(
        config.stick_alpha, 1.0, K, config.D, config.sigma_l2, rng,
        atom_sampler=lambda r, T: r.gamma(config.atom_shape, 1.0, size=(T, I)),
        scale=config.weight_total / raw.sum(), sticks=sticks)
    atoms = tuples.atoms
    mu = rng.normal(config.mean_mu, np.sqrt(config.sigma_m2), size=U)
    d = rng.standard_normal((U, config.D))
    F = d @ tuples.locations.T + mu[:, None]
    x = rmgen.transform_weights(config.kind, tuples.weights[None, :], F, rng)
    expected = (rmgen.conditional_mean(config.kind, tuples.weights[None, :], F) @ atoms.sum(axis=1)).mean()
    atoms = atoms * config.events_per_row / expected
    y = rng.poisson(x @ atoms)
    return SparseCountMatrix.from_dense(y), GroundTruth(atoms, tuples.weights, tuples.locations, d, mu, x)
