"""Batch and stochastic variational inference drivers.

Rows are processed in fixed-size chunks. Each row's local optimization
depends only on that row and the shared state, and chunk boundaries do not
depend on the worker count, so fits are bit-identical for any number of
threads.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import HeldOutSplit, SparseCountMatrix
from .mathfn import make_rng
from .optim import (STICK_KEYS, RmsPropState, RobbinsMonroSchedule, apply_preconditioned_update,
                    maximize_stick_block, schedule_rate)

logger = logging.getLogger(__name__)

CHUNK_ROWS = 256
ARMIJO_C = 1e-4


def default_threads():
    try:
        return max(1, int(os.environ.get("CORRRM_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class FitOptions:
    max_iters: int = 200
    min_iters: int = 10
    local_tol: float = 1e-4
    local_max_iters: int = 100
    eval_every: int = 10
    patience: int = 3
    tau: float = 0.1
    rate_offset: float = 100.0
    rate_exponent: float = 0.9
    batch_size: int = 256
    stick_solver: str = "lbfgs"
    stick_burnin: int = 0
    stick_max_iter: int = 100
    with_replacement: bool = False
    threads: int = 1
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def schedule(self):
        return RobbinsMonroSchedule(self.rate_offset, self.rate_exponent)


@dataclass
class FitReport:
    iterations: int = 0
    elbo_trace: list = field(default_factory=list)
    validation_trace: list = field(default_factory=list)  # (iteration, perplexity)
    seconds_per_iteration: list = field(default_factory=list)
    reason: str = "not started"

    def to_text(self):
        lines = [f"iterations\t{self.iterations}", f"convergence\t{self.reason}"]
        if self.seconds_per_iteration:
            lines.append(f"mean_seconds_per_iteration\t{np.mean(self.seconds_per_iteration):.6g}")
        for i, v in enumerate(self.elbo_trace):
            lines.append(f"elbo\t{i}\t{v!r}")
        for it, p in self.validation_trace:
            lines.append(f"validation_perplexity\t{it}\t{p!r}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# local optimization


def _newton_direction(grad, hess):
    """Ascent direction (lam I - H)^-1 grad with lam keeping the system positive definite."""
    if grad.shape[1] == 1:
        curv = -hess[:, 0, 0]
        return grad / np.maximum(curv, 1e-6 * np.maximum(np.abs(curv), 1.0))[:, None]
    evals, evecs = np.linalg.eigh(-hess)
    floor = 1e-6 * np.maximum(np.abs(evals).max(axis=1, keepdims=True), 1.0)
    evals = np.maximum(evals, floor)
    proj = np.einsum("bpq,bp->bq", evecs, grad)
    return np.einsum("bpq,bq->bp", evecs, proj / evals)


def _split_params(theta, variant, D):
    if variant.has_locations:
        return theta[:, :D], theta[:, D]
    return None, theta[:, 0]


def _gp_step(gs, ls, config):
    """One modified-Newton step with Armijo backtracking on (d, mu); updates ls in place."""
    variant = config.variant
    grad, hess = M.local_gp_newton(gs, ls, config)
    if grad.shape[1] == 0:
        return
    D = ls.d.shape[1]
    direction = _newton_direction(grad, hess)
    slope = np.einsum("bp,bp->b", grad, direction)
    f0 = M.local_gp_objective(gs, ls, config)
    theta0 = np.hstack([ls.d, ls.mu[:, None]]) if variant.has_locations else ls.mu[:, None]
    step = np.ones(ls.n_rows)
    accepted = np.zeros(ls.n_rows, dtype=bool)
    d_new, mu_new = ls.d.copy(), ls.mu.copy()
    for _ in range(40):
        todo = ~accepted
        if not todo.any():
            break
        trial = theta0 + step[:, None] * direction
        d_t, mu_t = _split_params(trial, variant, D)
        f1 = M.local_gp_objective(gs, ls, config, d=d_new if d_t is None else d_t, mu=mu_t)
        ok = todo & np.isfinite(f1) & (f1 >= f0 + ARMIJO_C * step * slope)
        if d_t is not None:
            d_new[ok] = d_t[ok]
        mu_new[ok] = mu_t[ok]
        accepted |= ok
        step[~accepted] *= 0.5
    ls.d, ls.mu = d_new, mu_new


def _optimize_chunk(block, gs, config, ls, tol, max_iters):
    """Alternate phi/x coordinate updates and Newton steps on (d, mu) for one chunk."""
    variant = config.variant
    active = np.arange(ls.n_rows)
    iters = np.zeros(ls.n_rows, dtype=int)
    sub_block, sub = block, ls
    for it in range(max_iters):
        Ex_old, _ = sub.x_expectations()
        d_old, mu_old = sub.d.copy(), sub.mu.copy()
        row_stats, _ = M.split_statistics(sub_block, gs, sub)
        M.update_x(sub_block, gs, sub, config, row_stats=row_stats)
        if variant.has_mean or variant.has_locations:
            _gp_step(gs, sub, config)
            M.update_x(sub_block, gs, sub, config, row_stats=row_stats)
        Ex_new, _ = sub.x_expectations()
        change = np.maximum(np.abs(sub.d - d_old).max(axis=1, initial=0.0), np.abs(sub.mu - mu_old))
        # change relative to the row's total expected mass, so idle components do not stall it
        rel = np.abs(Ex_new - Ex_old).max(axis=1) / np.maximum(Ex_old.sum(axis=1), 1e-300)
        ls.shape_x[active], ls.rate_x[active] = sub.shape_x, sub.rate_x
        ls.d[active], ls.mu[active] = sub.d, sub.mu
        iters[active] += 1
        done = (change < tol) & (rel < tol)
        if done.all():
            break
        if done.any():
            keep = np.flatnonzero(~done)
            active = active[keep]
            sub = sub.take(keep)
            sub_block = _sub_block(sub_block, keep)
    return ls, iters


def _sub_block(block: M.RowBlock, keep):
    """Rows ``keep`` (local indices) of a block, renumbered."""
    remap = np.full(block.n_rows, -1)
    remap[keep] = np.arange(keep.size)
    sel = remap[block.rows] >= 0
    return M.RowBlock(keep.size, block.n_cols, remap[block.rows[sel]], block.cols[sel],
                      block.counts[sel], None if block.row_ids is None else block.row_ids[keep])


def _chunks(n):
    return [np.arange(s, min(s + CHUNK_ROWS, n)) for s in range(0, n, CHUNK_ROWS)]


def optimize_local(m, gs: M.GlobalState, config: M.ModelConfig, ls: M.LocalState | None = None,
                   tol=1e-4, max_iters=100, threads=1):
    """Fit the local parameters of every row of ``m`` with the shared state held fixed.

    ``m`` is a SparseCountMatrix or RowBlock; ``ls`` warm-starts the fit.
    Returns (LocalState with phi left implicit, per-row iteration counts).
    """
    block = m if isinstance(m, M.RowBlock) else M.RowBlock.from_matrix(m)
    if ls is None:
        ls = M.init_local(block, gs, config)
    else:
        ls = ls.copy()
        ls.phi = None
    _, ls = M.restrict_variant(gs, ls, config.variant)
    gs = gs.frozen_view()
    chunks = _chunks(block.n_rows)

    def work(idx):
        sub_block = _sub_block(block, idx)
        try:
            out, it = _optimize_chunk(sub_block, gs, config, ls.take(idx), tol, max_iters)
        except M.DegenerateStateError as exc:
            raise M.DegenerateStateError(f"{exc} (rows {block.row_ids[idx[0]]}..{block.row_ids[idx[-1]]})") \
                from None
        return idx, out, it

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(idx) for idx in chunks]
    iters = np.zeros(block.n_rows, dtype=int)
    for idx, out, it in results:
        ls.shape_x[idx], ls.rate_x[idx] = out.shape_x, out.rate_x
        ls.d[idx], ls.mu[idx] = out.d, out.mu
        iters[idx] = it
    return ls, iters


# ---------------------------------------------------------------------------
# drivers


def _frozen(config):
    return () if config.variant.has_locations else ("locations",)


class _Stopper:
    def __init__(self, options: FitOptions, validation, config, threads):
        self.options = options
        self.validation = validation
        self.config = config
        self.threads = threads
        self.best = np.inf
        self.best_state = None
        self.bad = 0

    def check(self, t, gs, report):
        """Return True when fitting should stop after iteration t (1-based)."""
        if self.validation is None or t % self.options.eval_every or t <= self.options.stick_burnin:
            return False
        from .evaluate import evaluate_perplexity

        ppl = evaluate_perplexity(self.validation, gs, self.config, threads=self.threads).perplexity
        report.validation_trace.append((t, ppl))
        logger.info("iteration %d: validation perplexity %.4f", t, ppl)
        if ppl < self.best:
            self.best, self.best_state, self.bad = ppl, gs.copy(), 0
        else:
            self.bad += 1
        if self.bad >= self.options.patience and t >= self.options.min_iters:
            report.reason = f"validation perplexity stopped improving (patience {self.options.patience})"
            return True
        return False


def _maybe_checkpoint(options, t, gs, config):
    if options.checkpoint_every and options.checkpoint_path and t % options.checkpoint_every == 0:
        from .checkpoint import save_checkpoint

        save_checkpoint(options.checkpoint_path, gs, config)


def fit_batch(m: SparseCountMatrix, config: M.ModelConfig, validation: HeldOutSplit | None = None,
              seed=None, options: FitOptions | None = None, init: M.GlobalState | None = None):
    """Batch inference: optimize every row, then one preconditioned global step."""
    options = options or FitOptions()
    rng = make_rng(seed)
    block = M.RowBlock.from_matrix(m)
    gs = init.copy() if init is not None else M.init_global(config, m.n_cols, rng)
    gs, _ = M.restrict_variant(gs, None, config.variant)
    rms = RmsPropState(tau=options.tau)
    schedule = options.schedule()
    stopper = _Stopper(options, validation, config, options.threads)
    report = FitReport(reason="maximum iterations reached")
    ls = None
    for t in range(options.max_iters):
        start = time.perf_counter()
        ls, _ = optimize_local(block, gs, config, ls, options.local_tol, options.local_max_iters,
                               options.threads)
        report.elbo_trace.append(M.elbo(block, gs, ls, config))
        grad = M.grad_global(block, gs, ls, config)
        if t < options.stick_burnin:
            gs = apply_preconditioned_update(gs, grad, rms, atom_rate=1.0, location_rate=1.0,
                                             frozen=_frozen(config) + STICK_KEYS)
        elif options.stick_solver == "lbfgs":
            row_stats, _ = M.split_statistics(block, gs, ls)
            sticks = maximize_stick_block(gs, None, ls.n_rows, config, max_iter=options.stick_max_iter,
                                          collapsed=M.collapsed_weight_terms(gs, ls, config, row_stats))
            gs = apply_preconditioned_update(gs, grad, rms, atom_rate=1.0, location_rate=1.0,
                                             frozen=_frozen(config) + STICK_KEYS)
            gs.scale, gs.sticks, gs.alpha, gs.c = sticks.scale, sticks.sticks, sticks.alpha, sticks.c
        elif options.stick_solver == "rmsprop":
            gs = apply_preconditioned_update(gs, grad, rms, rate=schedule_rate(schedule, t), atom_rate=1.0,
                                             location_rate=1.0, frozen=_frozen(config))
        else:
            raise ValueError(f"unknown stick solver {options.stick_solver!r}")
        report.iterations = t + 1
        report.seconds_per_iteration.append(time.perf_counter() - start)
        logger.debug("batch iteration %d elbo %.6f", t, report.elbo_trace[-1])
        _maybe_checkpoint(options, t + 1, gs, config)
        if stopper.check(t + 1, gs, report):
            break
    if stopper.best_state is not None:
        gs = stopper.best_state
    return gs, report


def minibatch_gradient(block: M.RowBlock, row_idx, gs, config, ls_rows, n_total):
    """U/|B|-scaled noisy global gradient from the rows ``row_idx`` of ``block``."""
    sub = _sub_block(block, np.asarray(row_idx))
    return M.grad_global(sub, gs, ls_rows, config, scale=n_total / len(row_idx))


def fit_svi(m: SparseCountMatrix, config: M.ModelConfig, validation: HeldOutSplit | None = None,
            seed=None, options: FitOptions | None = None, init: M.GlobalState | None = None):
    """Stochastic inference on uniformly sampled row minibatches."""
    options = options or FitOptions()
    U = m.n_rows
    if not 1 <= options.batch_size <= U:
        raise ValueError(f"batch size must lie in [1, {U}]")
    rng = make_rng(seed)
    block = M.RowBlock.from_matrix(m)
    gs = init.copy() if init is not None else M.init_global(config, m.n_cols, rng)
    gs, _ = M.restrict_variant(gs, None, config.variant)
    rms = RmsPropState(tau=options.tau)
    schedule = options.schedule()
    stopper = _Stopper(options, validation, config, options.threads)
    report = FitReport(reason="maximum iterations reached")
    order = np.empty(0, dtype=int)
    for t in range(options.max_iters):
        start = time.perf_counter()
        if options.with_replacement:
            rows = np.sort(rng.integers(0, U, size=options.batch_size))
        else:
            if order.size < options.batch_size:
                order = np.concatenate([order, rng.permutation(U)])
            rows, order = np.sort(order[:options.batch_size]), order[options.batch_size:]
        sub = _sub_block(block, rows)
        ls, _ = optimize_local(sub, gs, config, None, options.local_tol, options.local_max_iters,
                               options.threads)
        grad = M.grad_global(sub, gs, ls, config, scale=U / rows.size)
        rho = schedule_rate(schedule, t)
        report.elbo_trace.append(M.elbo_global(gs, config) + U / rows.size * M.elbo_local(sub, gs, ls, config))
        gs = apply_preconditioned_update(gs, grad, rms, rate=rho, atom_rate=rho, location_rate=rho,
                                         frozen=_frozen(config))
        report.iterations = t + 1
        report.seconds_per_iteration.append(time.perf_counter() - start)
        _maybe_checkpoint(options, t + 1, gs, config)
        if stopper.check(t + 1, gs, report):
            break
    if stopper.best_state is not None:
        gs = stopper.best_state
    return gs, report
