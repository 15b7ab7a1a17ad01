import json

import numpy as np
import pytest

from corrrm import evaluate as E
from corrrm import infer
from corrrm import model as M
from corrrm.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from corrrm.data import SparseCountMatrix, make_heldout_split

from oracles import random_instance


def small_corpus(seed=3, n_rows=60, n_cols=20):
    y, _ = E.generate_synthetic(E.SyntheticConfig(n_rows=n_rows, n_cols=n_cols, n_components=3, D=2,
                                                  events_per_row=25), seed)
    return y


def test_hgp_local_fit_is_coordinate_only():
    _, block, gs, _, config = random_instance("hgp", seed=0)
    ls, _ = infer.optimize_local(block, gs, config, tol=1e-10, max_iters=50)
    assert np.all(ls.d == 0.0) and np.all(ls.mu == 0.0)


@pytest.mark.parametrize("variant", ["scaled-hgp", "cnpf", "softplus-cnpf"])
def test_row_bound_nondecreasing_over_inner_iterations(variant):
    _, block, gs, ls0, config = random_instance(variant, seed=1)
    values = []
    for k in range(1, 25):
        ls, _ = infer.optimize_local(block, gs, config, ls0, tol=0.0, max_iters=k)
        values.append(M.elbo(block, gs, ls, config))
    assert np.all(np.diff(values) >= -1e-9 * np.abs(values[1:]))


@pytest.mark.parametrize("variant", ["hgp", "cnpf", "softplus-cnpf"])
def test_empty_row_reaches_prior_fixed_point(variant):
    Y, _, gs, _, config = random_instance(variant, seed=2)
    Y[1] = 0
    m = SparseCountMatrix.from_dense(Y)
    ls, _ = infer.optimize_local(m, gs, config, tol=1e-12, max_iters=1)
    Ea, _ = gs.atom_expectations()
    g = M.g_linear(ls, gs, config.variant)[1]
    np.testing.assert_allclose(ls.shape_x[1], gs.weights, rtol=1e-14)
    np.testing.assert_allclose(ls.rate_x[1], M.transform_rate(g, config.variant) + Ea.sum(axis=1), rtol=1e-14)


def test_single_cell_fixed_point():
    m = SparseCountMatrix.from_dense(np.array([[50]]))
    config = M.ModelConfig(T=1, D=1, variant="hgp")
    gs, _ = infer.fit_batch(m, config, seed=0, options=infer.FitOptions(max_iters=300, local_tol=1e-10,
                                                                          local_max_iters=500))
    ls, _ = infer.optimize_local(m, gs, config, tol=1e-10, max_iters=500)
    Ex, _ = ls.x_expectations()
    Ea, _ = gs.atom_expectations()
    # the weak atom prior pulls the rate slightly below the count
    assert float(Ex[0, 0] * Ea[0, 0]) == pytest.approx(50.0, rel=0.02)

    # no point on a grid of q(x) beats the fitted local state
    best = M.elbo(m, gs, ls, config)
    for shape in np.geomspace(ls.shape_x[0, 0] / 4, ls.shape_x[0, 0] * 4, 41):
        for rate in np.geomspace(ls.rate_x[0, 0] / 4, ls.rate_x[0, 0] * 4, 41):
            trial = M.LocalState(np.array([[shape]]), np.array([[rate]]), ls.d, ls.mu)
            assert M.elbo(m, gs, trial, config) <= best + 1e-9


def test_thread_count_does_not_change_fit(monkeypatch):
    # small chunks so the worker pool actually splits the rows
    monkeypatch.setattr(infer, "CHUNK_ROWS", 7)
    y = small_corpus()
    config = M.ModelConfig(T=6, D=2, sigma_l2=0.3, variant="cnpf", init_alpha=6.0)
    fits = [infer.fit_batch(y, config, seed=4, options=infer.FitOptions(max_iters=4, threads=t))[0]
            for t in (1, 3)]
    for name in ("atom_shape", "atom_rate", "sticks", "locations"):
        np.testing.assert_array_equal(getattr(fits[0], name), getattr(fits[1], name))
    assert (fits[0].scale, fits[0].alpha, fits[0].c) == (fits[1].scale, fits[1].alpha, fits[1].c)


@pytest.mark.parametrize("variant", ["hgp", "scaled-hgp", "cnpf", "softplus-cnpf"])
def test_batch_trace_nondecreasing(variant):
    y = small_corpus()
    config = M.ModelConfig(T=6, D=2, sigma_l2=0.3, variant=variant, init_alpha=6.0)
    _, report = infer.fit_batch(y, config, seed=1, options=infer.FitOptions(
        max_iters=25, local_tol=1e-8, local_max_iters=200))
    trace = np.array(report.elbo_trace)
    assert len(trace) == report.iterations == 25
    assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace[1:]))


def test_full_batch_noisy_gradient_equals_batch_gradient():
    _, block, gs, ls, config = random_instance("cnpf", seed=3)
    noisy = infer.minibatch_gradient(block, np.arange(block.n_rows), gs, config, ls, block.n_rows)
    exact = M.grad_global(block, gs, ls, config)
    for name, value in exact.as_dict().items():
        np.testing.assert_array_equal(noisy.as_dict()[name], value)
    np.testing.assert_array_equal(noisy.atom_shape_target, exact.atom_shape_target)


@pytest.mark.parametrize("variant", ["scaled-hgp", "cnpf", "softplus-cnpf"])
@pytest.mark.parametrize("seed", range(3))
def test_per_row_gradients_average_to_batch_gradient(variant, seed):
    _, block, gs, ls, config = random_instance(variant, seed=seed, U=7)
    U = block.n_rows
    per_row = [infer.minibatch_gradient(block, [u], gs, config, ls.take([u]), U) for u in range(U)]
    exact = M.grad_global(block, gs, ls, config)
    for name, value in exact.as_dict().items():
        mean = np.mean([g.as_dict()[name] for g in per_row], axis=0)
        np.testing.assert_allclose(mean, value, rtol=1e-10, atol=1e-10)
    for name in ("atom_shape_target", "atom_rate_target"):
        mean = np.mean([getattr(g, name) for g in per_row], axis=0)
        np.testing.assert_allclose(mean, getattr(exact, name), rtol=1e-10)


@pytest.mark.parametrize("fit", [infer.fit_batch, infer.fit_svi])
def test_fixed_seed_bit_identical(fit):
    y = small_corpus()
    config = M.ModelConfig(T=5, D=2, variant="cnpf", init_alpha=5.0)
    opts = infer.FitOptions(max_iters=5, batch_size=20)
    a, ra = fit(y, config, seed=11, options=opts)
    b, rb = fit(y, config, seed=11, options=opts)
    np.testing.assert_array_equal(a.atom_shape, b.atom_shape)
    np.testing.assert_array_equal(a.locations, b.locations)
    assert ra.elbo_trace == rb.elbo_trace


def test_svi_batch_size_validated():
    y = small_corpus(n_rows=10)
    config = M.ModelConfig(T=3, D=2)
    for bad in (0, 11):
        with pytest.raises(ValueError):
            infer.fit_svi(y, config, options=infer.FitOptions(batch_size=bad))


def test_svi_runs_and_keeps_domain():
    y = small_corpus()
    config = M.ModelConfig(T=5, D=2, variant="softplus-cnpf", init_alpha=5.0)
    gs, report = infer.fit_svi(y, config, seed=0, options=infer.FitOptions(max_iters=15, batch_size=16,
                                                                            with_replacement=True))
    assert report.iterations == 15 and len(report.elbo_trace) == 15
    assert np.all(np.isfinite(report.elbo_trace))
    assert np.all((gs.sticks > 0) & (gs.sticks < 1)) and np.all(gs.atom_shape > 0)


def test_stopping_respects_min_iters():
    y = small_corpus(n_rows=80)
    split = make_heldout_split(y, 15, 0.2, seed=0)
    config = M.ModelConfig(T=5, D=2, variant="cnpf", init_alpha=5.0)
    _, report = infer.fit_batch(split.train, config, split, seed=0, options=infer.FitOptions(
        max_iters=40, min_iters=25, eval_every=1, patience=1))
    assert report.iterations >= 25
    assert report.validation_trace
    assert [t for t, _ in report.validation_trace] == list(range(1, report.iterations + 1))


def test_unknown_stick_solver():
    config = M.ModelConfig(T=3, D=2)
    with pytest.raises(ValueError):
        infer.fit_batch(small_corpus(n_rows=10), config, options=infer.FitOptions(max_iters=1, stick_solver="x"))


def test_checkpoint_round_trip(tmp_path):
    _, _, gs, ls, config = random_instance("softplus-cnpf", seed=4)
    path = tmp_path / "c.json"
    save_checkpoint(path, gs, config, ls, extra={"note": 1})
    gs2, config2, ls2, extra = load_checkpoint(path)
    assert config2 == config and extra == {"note": 1}
    for name in ("atom_shape", "atom_rate", "sticks", "locations"):
        np.testing.assert_array_equal(getattr(gs2, name), getattr(gs, name))
    assert (gs2.scale, gs2.alpha, gs2.c) == (gs.scale, gs.alpha, gs.c)
    np.testing.assert_array_equal(ls2.rate_x, ls.rate_x)
    save_checkpoint(tmp_path / "d.json", gs2, config2, ls2, extra=extra)
    assert path.read_bytes() == (tmp_path / "d.json").read_bytes()


def test_checkpoint_rejects_foreign_files(tmp_path):
    _, _, gs, _, config = random_instance("cnpf", seed=0)
    path = tmp_path / "c.json"
    save_checkpoint(path, gs, config)
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)
    path.write_text("not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_periodic_checkpoint_written(tmp_path):
    path = tmp_path / "periodic.json"
    config = M.ModelConfig(T=3, D=2, init_alpha=3.0)
    infer.fit_batch(small_corpus(n_rows=20), config, seed=0, options=infer.FitOptions(
        max_iters=4, checkpoint_every=2, checkpoint_path=str(path)))
    gs, loaded, _, _ = load_checkpoint(path)
    assert loaded == config and gs.T == 3
