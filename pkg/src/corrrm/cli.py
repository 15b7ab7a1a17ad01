"""Command-line entry point.

Subcommands: ``ingest``, ``fit``, ``eval``, ``sample``, ``verify`` and
``export``. Exit status is 0 on success, 1 on usage or I/O errors and 2 when
a statistical verification fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluate as E
from . import infer
from . import model as M
from . import rmgen
from .checkpoint import CheckpointError, config_to_dict, load_checkpoint, save_checkpoint
from .data import MatrixFormatError, load_matrix, make_heldout_split, read_dictionary, save_matrix
from .mathfn import make_rng

logger = logging.getLogger("corrrm")

EXIT_OK, EXIT_USAGE, EXIT_STATISTICAL = 0, 1, 2

# keys that never change results; kept out of checkpoints so they stay byte-identical
NON_SEMANTIC = ("threads", "output", "report", "checkpoint_path", "checkpoint_every")

PROFILES = {"desk": {"T": 20, "D": 5}}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run configuration


def _run_defaults():
    out = {f.name: f.default for f in fields(M.ModelConfig)}
    out["variant"] = M.Variant(out["variant"]).value
    out.update({f.name: f.default for f in fields(infer.FitOptions)})
    out.update(seed=0, mode="batch", heldout_rows=0, validation_rows=0, obs_fraction=0.1, split_seed=0)
    return out


RUN_DEFAULTS = _run_defaults()


def _coerce(key, text):
    if key not in RUN_DEFAULTS:
        raise UsageError(f"unknown configuration key {key!r}")
    default = RUN_DEFAULTS[key]
    if isinstance(text, str):
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{key}: expected a boolean, got {text!r}")
            return low in ("true", "1", "yes")
        try:
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except ValueError:
            raise UsageError(f"{key}: cannot parse {text!r}") from None
        if default is None and text.strip().lower() == "none":
            return None
        return text.strip()
    return text


class RunConfig:
    """Fully resolved settings of one run: model, fit options, seeds and split sizes.

    Values come from the defaults, then an optional ``key=value`` file, then
    command-line flags.
    """

    def __init__(self, values=None):
        self.values = dict(RUN_DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        self.values[key] = _coerce(key, value)

    def update_from_file(self, path):
        try:
            with open(path, encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
        for lineno, line in enumerate(lines, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            key, sep, value = text.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            self.set(key.strip(), value.strip())

    def model_config(self):
        names = {f.name for f in fields(M.ModelConfig)}
        try:
            return M.ModelConfig(**{k: v for k, v in self.values.items() if k in names})
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def fit_options(self):
        names = {f.name for f in fields(infer.FitOptions)}
        return infer.FitOptions(**{k: v for k, v in self.values.items() if k in names})

    def semantic(self):
        return {k: v for k, v in sorted(self.values.items()) if k not in NON_SEMANTIC}

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in sorted(self.values.items()))


def _header(settings: dict):
    return E.provenance_header(settings, __version__)


# ---------------------------------------------------------------------------
# helpers


def _load(path, **kwargs):
    try:
        return load_matrix(path, **kwargs)
    except FileNotFoundError:
        raise UsageError(f"data file not found: {path}") from None
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except MatrixFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def _fraction(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return value


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    try:
        return open(path, "w", encoding="utf-8"), True
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args):
    m = _load(args.input, id_mode=args.id_mode, n_rows=args.n_rows, n_cols=args.n_cols,
              dictionary_prefix=args.dictionary_prefix)
    header = [f"corrrm {__version__}", f"source={args.input}", f"id_mode={args.id_mode}"]
    try:
        save_matrix(m, args.output, header=header)
    except OSError as exc:
        raise UsageError(f"cannot write {args.output}: {exc.strerror}") from None
    print(f"{m.n_rows}\t{m.n_cols}\t{m.nnz}\t{int(m.counts.sum())}")
    return EXIT_OK


_FIT_FLAGS = ("variant", "mode", "seed", "threads", "T", "D", "sigma_l2", "max_iters", "min_iters",
              "batch_size", "heldout_rows", "validation_rows", "obs_fraction", "split_seed")


def _resolve_fit_config(args):
    run = RunConfig()
    if args.profile:
        for k, v in PROFILES[args.profile].items():
            run.set(k, v)
    if args.config:
        run.update_from_file(args.config)
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        run.set(key.strip(), value)
    for key in _FIT_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            run.set(key, value)
    if run.values["threads"] < 1:
        raise UsageError("threads must be at least 1")
    if not 0.0 < run.values["obs_fraction"] < 1.0:
        raise UsageError("obs_fraction must lie strictly between 0 and 1")
    if run.values["mode"] not in ("batch", "svi"):
        raise UsageError(f"unknown mode {run.values['mode']!r}")
    return run


def cmd_fit(args):
    run = _resolve_fit_config(args)
    config = run.model_config()
    options = run.fit_options()
    v = run.values
    m = _load(args.data)
    train, validation = m, None
    if v["heldout_rows"]:
        train = make_heldout_split(m, v["heldout_rows"], v["obs_fraction"], seed=v["split_seed"]).train
    if v["validation_rows"]:
        validation = make_heldout_split(train, v["validation_rows"], v["obs_fraction"],
                                        seed=v["split_seed"] + 1)
        train = validation.train
    fit = infer.fit_batch if v["mode"] == "batch" else infer.fit_svi
    gs, report = fit(train, config, validation=validation, seed=v["seed"], options=options)

    extra = {"run_config": run.semantic(), "data_shape": [m.n_rows, m.n_cols],
             "fit": {"iterations": report.iterations, "reason": report.reason}}
    try:
        save_checkpoint(args.output, gs, config, extra=extra)
        report_path = args.report or f"{args.output}.report.txt"
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(_header(run.semantic()))
            fh.write(report.to_text())
    except OSError as exc:
        raise UsageError(f"cannot write output: {exc.strerror}") from None
    logger.info("fit finished after %d iterations: %s", report.iterations, report.reason)
    print(f"checkpoint\t{args.output}\niterations\t{report.iterations}\nconvergence\t{report.reason}")
    return EXIT_OK


def cmd_eval(args):
    gs, config, _, extra = _load_checkpoint(args.checkpoint)
    saved = extra.get("run_config", {})
    n_heldout = args.heldout_rows if args.heldout_rows is not None else saved.get("heldout_rows", 0)
    obs_fraction = args.obs_fraction if args.obs_fraction is not None else saved.get("obs_fraction", 0.1)
    seed = args.seed if args.seed is not None else saved.get("split_seed", 0)
    if not n_heldout:
        raise UsageError("no held-out rows: pass --heldout-rows (the checkpoint was fit on all rows)")
    m = _load(args.data)
    if m.n_cols != gs.n_cols:
        raise UsageError(f"data has {m.n_cols} columns but the checkpoint has {gs.n_cols}")
    if saved and not saved.get("heldout_rows"):
        logger.warning("the checkpoint was fit on all rows; held-out rows were seen in training")
    try:
        split = make_heldout_split(m, n_heldout, obs_fraction, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = E.evaluate_perplexity(split, gs, config, threads=args.threads or infer.default_threads())
    settings = dict(config_to_dict(config), heldout_rows=n_heldout, obs_fraction=obs_fraction,
                    split_seed=seed, checkpoint=args.checkpoint)
    out, close = _open_out(args.output)
    try:
        out.write(_header(settings))
        out.write(report.to_text())
    finally:
        if close:
            out.close()
    return EXIT_OK


def cmd_sample(args):
    rng = make_rng(args.seed)
    try:
        kind = rmgen.TransformationKind(args.kind)
        if args.n < 0:
            raise ValueError("--n must be nonnegative")
        tuples = rmgen.sample_gamma_process_tuples(args.alpha, args.c, args.T, args.D, args.sigma_l2, rng)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.n == 0:
        # nothing to write, not even a header; an output file still exists afterwards
        if args.output:
            open(args.output, "w").close()
        return EXIT_OK
    draws = rmgen.sample_hierarchical(tuples, args.n, kind, args.mean, rng)
    settings = dict(kind=kind.value, n=args.n, T=args.T, D=args.D, alpha=args.alpha, c=args.c,
                    sigma_l2=args.sigma_l2, mean=args.mean, seed=args.seed)
    out, close = _open_out(args.output)
    try:
        out.write(_header(settings))
        locs = [f"loc_{j}" for j in range(args.D)]
        out.write("\t".join(["realization", "atom", "w", "x", *locs]) + "\n")
        for u, draw in enumerate(draws):
            for k in range(tuples.T):
                row = [str(u), str(k), repr(float(tuples.weights[k])),
                       repr(float(draw.transformed_weights[k]))]
                row += [repr(float(v)) for v in tuples.locations[k]]
                out.write("\t".join(row) + "\n")
    finally:
        if close:
            out.close()
    return EXIT_OK


def cmd_verify_laplace(args):
    rng = make_rng(args.seed)
    try:
        res = rmgen.mc_laplace_check(args.kind, args.H, args.c, args.r, args.n_draws, rng,
                                     D=args.D, sigma_l2=args.sigma_l2)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ok = res.passed(args.n_se)
    print(f"estimate\t{res.mc_estimate:.6f} +/- {res.mc_stderr:.6f}")
    print(f"reference\t{res.reference:.6f} +/- {res.reference_stderr:.6f} ({res.reference_kind})")
    print(f"z\t{res.z_score:.3f}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_STATISTICAL


def cmd_verify_finiteness(args):
    rng = make_rng(args.seed)
    truncations = args.truncations or [2 ** j for j in range(6, 17)]
    try:
        rep = rmgen.mc_finiteness_check(args.kind, args.sigma_l2, truncations, rng, D=args.D)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for T, est in zip(rep.truncations, rep.estimates):
        print(f"T={T}\t{est:.6g}")
    print(f"growth_slope\t{rep.growth_slope:.4f}")
    print(rep.verdict)
    return EXIT_OK if rep.convergent else EXIT_STATISTICAL


def cmd_export(args):
    gs, config, _, extra = _load_checkpoint(args.checkpoint)
    settings = dict(extra.get("run_config") or config_to_dict(config), checkpoint=args.checkpoint)
    if args.rho_threshold is not None:
        settings["rho_threshold"] = args.rho_threshold
    header = _header(settings)
    want_corr = args.correlations
    if want_corr and not config.variant.has_locations:
        raise UsageError(f"cannot export correlations: variant {config.variant.value} has no locations")
    explicit = args.sticks or args.components or args.correlations
    if not explicit:
        want_corr = config.variant.has_locations
    col_ids = None
    if args.col_dictionary:
        try:
            col_ids = read_dictionary(args.col_dictionary)
        except (OSError, MatrixFormatError) as exc:
            raise UsageError(f"cannot read column dictionary {args.col_dictionary}: {exc}") from None
        if len(col_ids) != gs.n_cols:
            raise UsageError(f"column dictionary has {len(col_ids)} entries, checkpoint has {gs.n_cols} columns")
    prefix = Path(args.prefix)
    written = []
    try:
        if args.sticks or not explicit:
            sticks, n_eff = E.export_sticks(gs)
            E.write_sticks(f"{prefix}.sticks.csv", sticks, header + f"# effective_components={n_eff}\n")
            written.append(f"{prefix}.sticks.csv")
        if args.components or not explicit:
            rows = E.export_components(gs, col_ids, args.top_n)
            E.write_components(f"{prefix}.components.tsv", rows, header)
            written.append(f"{prefix}.components.tsv")
        if want_corr:
            edges = E.component_correlations(gs, args.rho_threshold or 0.0, variant=config.variant)
            E.write_edges(f"{prefix}.edges.tsv", edges, header)
            written.append(f"{prefix}.edges.tsv")
    except OSError as exc:
        raise UsageError(f"cannot write export: {exc.strerror}") from None
    for path in written:
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="corrrm", description="Correlated random measures and correlated Poisson factorization.")
    p.add_argument("--version", action="version", version=f"corrrm {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="validate a TSV triplet file and write it in canonical form")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--id-mode", choices=["dense", "dictionary"], default="dense")
    s.add_argument("--dictionary-prefix")
    s.add_argument("--n-rows", type=_nonneg_int)
    s.add_argument("--n-cols", type=_nonneg_int)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit", help="fit a model and write a checkpoint")
    s.add_argument("data")
    s.add_argument("-o", "--output", required=True, help="checkpoint path")
    s.add_argument("--report", help="fit report path (default: <output>.report.txt)")
    s.add_argument("--config", help="key=value configuration file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    s.add_argument("--profile", choices=sorted(PROFILES))
    s.add_argument("--variant", choices=[v.value for v in M.Variant])
    s.add_argument("--mode", choices=["batch", "svi"])
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--T", type=int)
    s.add_argument("--D", type=int)
    s.add_argument("--sigma-l2", dest="sigma_l2", type=float)
    s.add_argument("--max-iters", dest="max_iters", type=int)
    s.add_argument("--min-iters", dest="min_iters", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--heldout-rows", dest="heldout_rows", type=_nonneg_int)
    s.add_argument("--validation-rows", dest="validation_rows", type=_nonneg_int)
    s.add_argument("--obs-fraction", dest="obs_fraction", type=_fraction)
    s.add_argument("--split-seed", dest="split_seed", type=int)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("data")
    s.add_argument("-o", "--output", help="report path (default: stdout)")
    s.add_argument("--heldout-rows", type=_nonneg_int)
    s.add_argument("--obs-fraction", type=_fraction)
    s.add_argument("--seed", type=int, help="split seed (default: the one used for fitting)")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw hierarchical correlated random measures")
    s.add_argument("--n", type=int, default=1, help="number of realizations")
    s.add_argument("--kind", default="gamma-exp", choices=[k.value for k in rmgen.TransformationKind
                                                          if k is not rmgen.TransformationKind.BETA_BERNOULLI])
    s.add_argument("--T", type=int, default=50)
    s.add_argument("--D", type=int, default=2)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--c", type=float, default=1.0)
    s.add_argument("--sigma-l2", type=float, default=0.25)
    s.add_argument("--mean", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", help="output path (default: stdout)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("verify", help="Monte Carlo checks of the measure's laws")
    checks = s.add_subparsers(dest="check", required=True, parser_class=_Parser)
    c = checks.add_parser("laplace", help="Laplace functional of the total mass")
    c.add_argument("--H", type=float, default=1.0, help="base measure mass")
    c.add_argument("--c", type=float, default=1.0)
    c.add_argument("--r", type=float, default=1.0)
    c.add_argument("--kind", default="identity", choices=["identity", "gamma-exp", "gamma-softplus"])
    c.add_argument("--n-draws", type=int, default=100_000)
    c.add_argument("--D", type=int, default=2)
    c.add_argument("--sigma-l2", type=float, default=0.25)
    c.add_argument("--n-se", type=float, default=3.0)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_verify_laplace)
    c = checks.add_parser("finiteness", help="growth of the expected total mass with truncation")
    c.add_argument("--sigma-l2", type=float, required=True)
    c.add_argument("--kind", default="gamma-exp", choices=[k.value for k in rmgen.TransformationKind])
    c.add_argument("--D", type=int, default=5)
    c.add_argument("--truncations", type=int, nargs="+")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_verify_finiteness)

    s = sub.add_parser("export", help="sticks, top columns and correlation edges of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--prefix", required=True, help="output path prefix")
    s.add_argument("--sticks", action="store_true")
    s.add_argument("--components", action="store_true")
    s.add_argument("--correlations", action="store_true")
    s.add_argument("--rho-threshold", type=float)
    s.add_argument("--top-n", type=int, default=10)
    s.add_argument("--col-dictionary", help="index<TAB>id file naming the columns")
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except M.DegenerateStateError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
