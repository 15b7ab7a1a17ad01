import numpy as np
import pytest

from corrrm import evaluate as E
from corrrm import model as M
from corrrm.checkpoint import load_checkpoint, save_checkpoint
from corrrm.cli import main
from corrrm.data import SparseCountMatrix, save_matrix

FAST = ["--T", "5", "--D", "2", "--max-iters", "3", "--min-iters", "1"]


@pytest.fixture
def data(tmp_path):
    y, _ = E.generate_synthetic(E.SyntheticConfig(n_rows=40, n_cols=12, n_components=3, D=2,
                                                  events_per_row=20), 0)
    path = tmp_path / "y.tsv"
    save_matrix(y, path)
    return path


@pytest.fixture
def fitted(tmp_path, data):
    out = tmp_path / "cnpf.json"
    assert main(["fit", str(data), "-o", str(out), "--variant", "cnpf", "--heldout-rows", "8", *FAST]) == 0
    return out


def test_fit_smoke(tmp_path, data):
    out = tmp_path / "hgp.json"
    assert main(["fit", str(data), "-o", str(out), "--variant", "hgp", "--mode", "batch", *FAST]) == 0
    gs, config, _, extra = load_checkpoint(out)
    assert config.variant == "hgp" and gs.T == 5
    assert extra["fit"]["iterations"] == 3
    assert (tmp_path / "hgp.json.report.txt").exists()


def test_fit_svi_smoke(tmp_path, data):
    out = tmp_path / "svi.json"
    assert main(["fit", str(data), "-o", str(out), "--mode", "svi", "--batch-size", "10", *FAST]) == 0


def test_fit_seed_gives_identical_checkpoints(tmp_path, data):
    paths = [tmp_path / f"{i}.json" for i in range(2)]
    for p in paths:
        assert main(["fit", str(data), "-o", str(p), "--seed", "7", *FAST]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_missing_data_file_named(tmp_path, capsys):
    missing = tmp_path / "nowhere.tsv"
    assert main(["fit", str(missing), "-o", str(tmp_path / "x.json")]) != 0
    assert str(missing) in capsys.readouterr().err


def test_malformed_data_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("0\t0\t1\n0\t1\tx\n")
    assert main(["ingest", str(bad), "-o", str(tmp_path / "o.tsv")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_ingest_canonical(tmp_path, data, capsys):
    out = tmp_path / "canon.tsv"
    assert main(["ingest", str(data), "-o", str(out)]) == 0
    assert capsys.readouterr().out.split()[:2] == ["40", "12"]


def test_config_file_and_overrides(tmp_path, data):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk run\nT = 4\nD=3\nvariant=softplus-cnpf\nmax_iters=2\n")
    out = tmp_path / "c.json"
    assert main(["fit", str(data), "-o", str(out), "--config", str(cfg), "--set", "T=6", "--max-iters", "1"]) == 0
    _, config, _, extra = load_checkpoint(out)
    assert (config.T, config.D, config.variant) == (6, 3, "softplus-cnpf")
    assert extra["fit"]["iterations"] == 1


def test_unknown_config_key_is_usage_error(tmp_path, data, capsys):
    assert main(["fit", str(data), "-o", str(tmp_path / "c.json"), "--set", "bogus=1"]) == 1
    assert "bogus" in capsys.readouterr().err


def test_fit_does_not_modify_input(tmp_path, data):
    before = data.read_bytes()
    main(["fit", str(data), "-o", str(tmp_path / "c.json"), "--heldout-rows", "5", *FAST])
    assert data.read_bytes() == before


def test_eval_uniform_model_gives_column_count(tmp_path):
    V = 50
    rng = np.random.default_rng(0)
    m = SparseCountMatrix.from_dense(rng.poisson(2.0, size=(30, V)) + 1)
    data = tmp_path / "u.tsv"
    save_matrix(m, data)
    gs = M.GlobalState(np.ones((1, V)), np.ones((1, V)), np.array([0.5]), 1.0, np.zeros((1, 2)), 1.0, 1.0)
    ckpt = tmp_path / "u.json"
    save_checkpoint(ckpt, gs, M.ModelConfig(T=1, D=2, variant="hgp"))
    report = tmp_path / "r.txt"
    assert main(["eval", str(ckpt), str(data), "--heldout-rows", "10", "-o", str(report)]) == 0
    value = next(line.split("\t")[1] for line in report.read_text().splitlines() if line.startswith("perplexity"))
    assert float(value) == pytest.approx(V, rel=1e-12)


def test_eval_twice_identical(tmp_path, data, fitted):
    reports = [tmp_path / f"r{i}.txt" for i in range(2)]
    for r in reports:
        assert main(["eval", str(fitted), str(data), "-o", str(r)]) == 0
    assert reports[0].read_bytes() == reports[1].read_bytes()
    assert "n_heldout_rows\t8" in reports[0].read_text()


@pytest.mark.parametrize("frac", ["0", "1", "1.5", "-0.1"])
def test_eval_obs_fraction_outside_unit_interval(data, fitted, frac, capsys):
    assert main(["eval", str(fitted), str(data), "--obs-fraction", frac]) == 1
    assert "obs" in capsys.readouterr().err


def test_eval_rejects_foreign_checkpoint(tmp_path, data):
    bogus = tmp_path / "b.json"
    bogus.write_text('{"format": "x"}')
    assert main(["eval", str(bogus), str(data), "--heldout-rows", "4"]) == 1


def test_sample_zero_is_empty(tmp_path, capsys):
    out = tmp_path / "s.tsv"
    assert main(["sample", "--n", "0", "-o", str(out)]) == 0
    assert out.read_bytes() == b""
    assert main(["sample", "--n", "0"]) == 0
    assert capsys.readouterr().out == ""


def test_sample_writes_realizations(tmp_path):
    out = tmp_path / "s.tsv"
    assert main(["sample", "--n", "3", "--T", "4", "-o", str(out), "--seed", "2"]) == 0
    lines = [line for line in out.read_text().splitlines() if not line.startswith("#")]
    assert lines[0].split("\t")[:4] == ["realization", "atom", "w", "x"]
    assert len(lines) == 1 + 3 * 4


def test_verify_laplace_passes(capsys):
    assert main(["verify", "laplace", "--H", "1", "--c", "1", "--r", "1"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "0.5" in out


def test_verify_finiteness_divergent_exit_code(capsys):
    assert main(["verify", "finiteness", "--sigma-l2", "1.5"]) == 2
    assert "DIVERGENT" in capsys.readouterr().out


def test_verify_finiteness_convergent(capsys):
    assert main(["verify", "finiteness", "--sigma-l2", "0.004"]) == 0
    assert "CONVERGENT" in capsys.readouterr().out


def test_export_writes_three_files_with_provenance(tmp_path, fitted):
    prefix = tmp_path / "out"
    assert main(["export", str(fitted), "--prefix", str(prefix)]) == 0
    for suffix in (".sticks.csv", ".components.tsv", ".edges.tsv"):
        text = (tmp_path / f"out{suffix}").read_text()
        assert text.startswith("# corrrm")
        assert "# variant=cnpf" in text


def test_export_rho_threshold(tmp_path, fitted):
    prefix = tmp_path / "out"
    assert main(["export", str(fitted), "--prefix", str(prefix), "--correlations", "--rho-threshold", "0.9"]) == 0
    rows = [line.split("\t") for line in (tmp_path / "out.edges.tsv").read_text().splitlines()
            if not line.startswith("#")]
    assert all(abs(float(r[2])) >= 0.9 for r in rows)
    gs, _, _, _ = load_checkpoint(fitted)
    expected = [e for e in E.component_correlations(gs) if abs(e.rho) >= 0.9]
    assert len(rows) == len(expected)


def test_export_correlations_from_hgp_names_variant(tmp_path, data, capsys):
    ckpt = tmp_path / "h.json"
    main(["fit", str(data), "-o", str(ckpt), "--variant", "hgp", *FAST])
    capsys.readouterr()
    assert main(["export", str(ckpt), "--prefix", str(tmp_path / "o"), "--correlations"]) == 1
    assert "hgp" in capsys.readouterr().err
    assert not (tmp_path / "o.edges.tsv").exists()


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 1
