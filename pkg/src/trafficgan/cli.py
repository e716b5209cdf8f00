"""trafficgan command line.

    trafficgan simulate  --out corpus/
    trafficgan train     --corpus corpus/ --out run/
    trafficgan estimate  --checkpoint run/checkpoint.json --input record.csv --out est/
    trafficgan evaluate  --checkpoint run/checkpoint.json --corpus corpus/ --out eval/
    trafficgan ablate    --checkpoint run/checkpoint.json --corpus corpus/ --out ablation/
    trafficgan gradcheck

Every command takes ``--config FILE`` (TOML, see config.example.toml),
``--set section.key=value`` overrides, ``--seed`` and ``--out``; specific
flags win over ``--set``, which wins over the file.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
divergence, 3 I/O failure, 4 a requested check failed.
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys

import numpy as np

from . import __version__
from .config import load_config, tomllib
from .data import (
    ConfigError,
    MatrixFormatError,
    Scaler,
    TrafficStateMatrix,
    conservation_relative_residual,
    corpus_features,
    generate_corpus,
    load_corpus,
    load_matrix_csv,
    make_mask,
    save_corpus,
    save_matrix_csv,
    to_features,
)
from .estimation import EstimationDivergence, estimate, estimate_batch, reconstruct
from .evaluation import (
    BASELINES,
    TARGETS,
    EmptyEvaluationError,
    baseline_fill,
    corrupt_records,
    grouped_errors,
    mape,
    mse,
    plot_data_rows,
    run_ablation,
    write_plot_csv,
)
from .gan import CheckpointError, GanModel, load_checkpoint, save_checkpoint, train
from .gradcheck import TOLERANCE, run_gradcheck
from .lstm import DivergenceError
from .tensor import ShapeError

log = logging.getLogger("trafficgan")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_DIVERGED = 2
EXIT_IO = 3
EXIT_CHECK = 4


class CheckFailed(Exception):
    """A verification the user asked for did not hold."""


# --------------------------------------------------------------------------- helpers

def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _overrides(args, flags):
    out = {}
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value.strip())
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _config(args, **flags):
    return load_config(args.config, _overrides(args, flags))


def _prepare(out_dir, names, force):
    """Create `out_dir`; refuse to replace any of `names` unless forced."""
    os.makedirs(out_dir, exist_ok=True)
    if not force:
        taken = [n for n in names if os.path.exists(os.path.join(out_dir, n))]
        if taken:
            raise FileExistsError(f"{out_dir}: would overwrite {', '.join(taken)} (use --force)")
    return lambda name: os.path.join(out_dir, name)


def provenance(command, cfg, seeds, **extra):
    doc = {
        "command": command,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": seeds,
        "versions": {"trafficgan": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    doc.update(extra)
    return doc


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _corpus(args, cfg):
    if args.corpus:
        corpus = load_corpus(args.corpus)
    else:
        log.info("no --corpus given; simulating %d records from the config", cfg.corpus.count)
        corpus = generate_corpus(cfg.corpus)
    return corpus


def _load_model(path):
    model, scaler, doc = load_checkpoint(path)
    if scaler is None:
        raise CheckpointError(f"{path}: checkpoint carries no feature scaler")
    return model, scaler, doc


def _check_geometry(model, n, features, what):
    if (n, features) != (model.config.n_steps, model.config.feature_dim):
        raise ShapeError(f"{what} is {n}x{features} but the checkpoint expects "
                         f"{model.config.n_steps}x{model.config.feature_dim}")


def _validation_records(corpus, limit):
    records = corpus.subset("validation") or corpus.records
    ids = [i for i, s in zip(corpus.ids, corpus.split) if s == "validation"] or list(corpus.ids)
    return records[:limit], ids[:limit]


def _default_baseline(corruption):
    return "locf" if corruption.pattern == "future_block" else "column_mean"


def _fmt(v):
    return repr(float(v))


# --------------------------------------------------------------------------- commands

def cmd_simulate(args):
    cfg = _config(args, **{"corpus.seed": args.seed, "corpus.count": args.count, "corpus.preset": args.preset})
    path = _prepare(args.out, ["manifest.json", "provenance.json"], args.force)
    corpus = generate_corpus(cfg.corpus)
    save_corpus(corpus, args.out)
    worst = max(float(np.max(conservation_relative_residual(r), initial=0.0)) for r in corpus.records)
    _write_json(path("provenance.json"), provenance("simulate", cfg, {"corpus": cfg.corpus.seed},
                                                    corpus_id=cfg.corpus.corpus_id(),
                                                    max_relative_conservation_residual=worst))
    rec = corpus.records[0]
    print(f"wrote {len(corpus.records)} records ({rec.n}x{2 * rec.m + 1} features) to {args.out}")
    print(f"max relative conservation residual: {worst:.3e}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args, **{"gan.seed": args.seed, "gan.epochs": args.epochs})
    path = _prepare(args.out, ["checkpoint.json", "history.csv", "provenance.json"], args.force)
    corpus = _corpus(args, cfg)
    train_recs = corpus.subset("train")
    holdout_recs = corpus.subset("validation")
    if not train_recs:
        raise ConfigError("the corpus has no training records")

    if args.resume:
        model, scaler, _ = _load_model(args.resume)
        if model.epochs_done >= cfg.gan.epochs:
            raise ConfigError(f"checkpoint already has {model.epochs_done} epochs; "
                              f"raise --epochs above that to continue")
        model.config = dataclasses.replace(model.config, epochs=cfg.gan.epochs)
    else:
        scaler = Scaler.fit(np.stack([r.physical_features() for r in train_recs]))
        model = GanModel.init(cfg.gan)
    first = train_recs[0]
    _check_geometry(model, first.n, 2 * first.m + 1, "the corpus")

    data = corpus_features(train_recs, scaler)
    holdout = corpus_features(holdout_recs, scaler) if holdout_recs else None
    start = model.epochs_done

    def progress(epoch, history):
        if epoch % 10 == 0 or epoch == model.config.epochs:
            log.info("epoch %d/%d  d_loss %.4f  g_loss %.4f  d_acc %.3f", epoch, model.config.epochs,
                     history.d_loss[-1], history.g_loss[-1], history.d_accuracy[-1])

    model, history = train(model, data, holdout=holdout, progress=progress)
    prov = provenance("train", cfg, {"gan": model.config.seed, "corpus": corpus.config.seed},
                      corpus_id=corpus.config.corpus_id(), resumed_from_epoch=start,
                      epochs_done=model.epochs_done)
    save_checkpoint(path("checkpoint.json"), model, scaler, encoding=cfg.output.encoding, extra=prov)
    rows = [[e, _fmt(d), _fmt(g), _fmt(a)] for e, d, g, a in history.rows()]
    _write_rows(path("history.csv"), ["epoch", "d_loss", "g_loss", "d_accuracy"], rows)
    _write_json(path("provenance.json"), prov)
    if args.figures or cfg.output.figures:
        from .plotting import plot_history
        plot_history(history.rows(), path("history.png"))
    print(f"trained epochs {start + 1}..{model.epochs_done}; "
          f"final held-out discriminator accuracy {history.d_accuracy[-1]:.3f}")
    return EXIT_OK


def _read_mask(path, shape):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        mask = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise MatrixFormatError(f"{path}: mask entries must be 0 or 1 ({exc})") from exc
    if mask.shape != shape:
        raise ShapeError(f"{path}: mask is {mask.shape}, record is {shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise MatrixFormatError(f"{path}: mask entries must be 0 or 1")
    return mask


def _errors_vs_input(est_phys, phys, mask, m):
    """Errors on the hidden entries per column group; groups with nothing hidden are skipped."""
    out = {}
    for target, cols in (("flow", slice(0, m + 1)), ("density", slice(m + 1, None))):
        mk = np.ones_like(mask)
        mk[:, cols] = mask[:, cols]
        try:
            out[target] = {"mse": mse(est_phys, phys, mk), "mape_pct": mape(est_phys, phys, mk)}
        except EmptyEvaluationError:
            continue
    return out


def cmd_estimate(args):
    cfg = _config(args, **{
        "estimate.seed": args.seed, "corruption.seed": args.seed, "weights.lambda_p": args.lambda_p,
        "weights.lambda_c": args.lambda_c, "estimate.iterations": args.iterations,
        "estimate.restarts": args.restarts, "corruption.pattern": args.pattern,
        "corruption.rate": args.rate, "corruption.start_row": args.start_row,
    })
    path = _prepare(args.out, ["reconstruction.csv", "loss_trace.csv", "mask.csv", "plot_data.csv",
                               "provenance.json"], args.force)
    model, scaler, _ = _load_model(args.checkpoint)
    ts = load_matrix_csv(args.input)
    phys = ts.physical_features()
    _check_geometry(model, *phys.shape, args.input)
    fs = to_features(ts, scaler)
    if args.mask_file:
        mask = _read_mask(args.mask_file, phys.shape)
        mask_source = os.path.basename(args.mask_file)
    else:
        mask = make_mask(phys.shape, cfg.corruption, np.random.default_rng(cfg.corruption.seed))
        mask_source = cfg.corruption.pattern
    if not np.any(mask):
        raise ConfigError("the mask hides every entry; nothing to fit")
    y = np.where(mask == 1.0, fs.features, 0.5)

    result = estimate(model, y, mask, cfg.estimate_config(), ts.geometry, scaler)
    observed = mask == 1.0
    # blend in physical units so observed entries are the input values bit for bit
    est_phys = np.where(observed, phys, scaler.inverse(result.gz_hat))
    m = ts.m
    save_matrix_csv(TrafficStateMatrix(flow=est_phys[:, : m + 1], density=est_phys[:, m + 1:],
                                       dt=ts.dt, cell_lengths=ts.cell_lengths), path("reconstruction.csv"))
    _write_rows(path("loss_trace.csv"), ["iteration", "total_loss"],
                [[i, _fmt(v)] for i, v in enumerate(result.loss_trace)])
    _write_rows(path("mask.csv"), [f"c{j}" for j in range(mask.shape[1])], mask.astype(int).tolist())
    baseline = args.baseline or _default_baseline(cfg.corruption)
    base_phys = np.where(observed, phys, scaler.inverse(baseline_fill(y, mask, baseline)))
    write_plot_csv(path("plot_data.csv"), plot_data_rows(phys, est_phys, base_phys, mask, m))

    hidden = int(np.sum(~observed))
    errors = _errors_vs_input(est_phys, phys, mask, m)
    _write_json(path("provenance.json"), provenance(
        "estimate", cfg, {"estimate": cfg.estimate.seed, "corruption": cfg.corruption.seed},
        input=os.path.basename(args.input), mask=mask_source, baseline=baseline,
        restart=result.restart, final_loss=float(result.loss_trace[-1]),
        clipped_inputs=fs.clipped, errors_vs_input=errors))
    if args.figures or cfg.output.figures:
        from .plotting import plot_loss_trace, plot_record
        plot_loss_trace(result.loss_trace, path("loss_trace.png"))
        plot_record(phys, est_phys, mask, m, path("reconstruction.png"), title=os.path.basename(args.input))
    print(f"reconstructed {hidden} of {mask.size} entries; final loss {result.loss_trace[-1]:.6g} "
          f"(restart {result.restart})")
    for target, e in sorted(errors.items()):
        print(f"  {target}: MSE {e['mse']:.6g}  MAPE {e['mape_pct']:.3f}% against the input values")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _config(args, **{"estimate.seed": args.seed, "ablation.max_records": args.max_records,
                           "corruption.pattern": args.pattern})
    path = _prepare(args.out, ["metrics.csv", "provenance.json"], args.force)
    model, scaler, _ = _load_model(args.checkpoint)
    corpus = _corpus(args, cfg)
    records, ids = _validation_records(corpus, cfg.ablation.max_records)
    first = records[0]
    _check_geometry(model, first.n, 2 * first.m + 1, "the corpus")
    feats = corpus_features(records, scaler)
    truth = np.stack([r.physical_features() for r in records])
    seed = cfg.estimate.seed
    ys, masks = corrupt_records(feats, cfg.corruption, seed)
    res = estimate_batch(model, ys, masks, cfg.estimate_config(), first.geometry, scaler)
    methods = {"gan": np.stack([reconstruct(ys[i], masks[i], r.gz_hat) for i, r in enumerate(res)])}
    for b in BASELINES:
        methods[b] = np.stack([baseline_fill(ys[i], masks[i], b) for i in range(len(ys))])
    rows = []
    for name, est in methods.items():
        errs = grouped_errors(scaler.inverse(est), truth, masks, first.m)
        for target in TARGETS:
            e = errs[target]
            rows.append([name, target, _fmt(e["mape_pct"]), _fmt(e["mse"]), e["mape_excluded"]])
    _write_rows(path("metrics.csv"), ["method", "target", "mape_pct", "mse", "mape_excluded"], rows)
    _write_json(path("provenance.json"), provenance("evaluate", cfg, {"estimate": seed},
                                                    corpus_id=corpus.config.corpus_id(), records=ids))
    for r in rows:
        print(f"{r[0]:>13} {r[1]:>7}  MAPE {float(r[2]):8.3f}%  MSE {float(r[3]):12.4f}")
    return EXIT_OK


def _ordering_checks(result, corruption):
    if corruption.pattern == "future_block":
        return {f"full_beats_locf_mse_{t}": result.beats("full", "locf", t) for t in TARGETS}
    return result.ordering_report()


def cmd_ablate(args):
    seeds = args.seeds if args.seeds is not None else ([args.seed] if args.seed is not None else None)
    cfg = _config(args, **{"ablation.seeds": seeds, "ablation.max_records": args.max_records,
                           "corruption.pattern": args.pattern, "weights.lambda_p": args.lambda_p,
                           "weights.lambda_c": args.lambda_c})
    path = _prepare(args.out, ["ablation.csv", "ablation_per_seed.csv", "provenance.json"], args.force)
    model, scaler, _ = _load_model(args.checkpoint)
    corpus = _corpus(args, cfg)
    records, ids = _validation_records(corpus, cfg.ablation.max_records)
    first = records[0]
    _check_geometry(model, first.n, 2 * first.m + 1, "the corpus")
    truth = np.stack([r.physical_features() for r in records])
    baseline = _default_baseline(cfg.corruption)
    figures = args.figures or cfg.output.figures
    n_plots = min(cfg.ablation.plot_records, len(records))
    plotted = []

    def plot_hook(seed, ys, masks, estimates):
        if seed != cfg.ablation.seeds[0]:
            return
        for i in range(n_plots):
            est = scaler.inverse(estimates["full"][i])
            base = scaler.inverse(estimates[baseline][i])
            name = f"plot_{ids[i]}_seed{seed}"
            write_plot_csv(path(name + ".csv"), plot_data_rows(truth[i], est, base, masks[i], first.m))
            if figures:
                from .plotting import plot_record
                plot_record(truth[i], est, masks[i], first.m, path(name + ".png"), title=ids[i])
            plotted.append(name + ".csv")

    result = run_ablation(records, model, scaler, cfg.corruption, cfg.ablation.seeds,
                          estimate_config=cfg.estimate_config(), corpus_id=corpus.config.corpus_id(),
                          plot_hook=plot_hook)
    with open(path("ablation.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(result.to_csv())
    with open(path("ablation_per_seed.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(result.per_seed_csv())
    checks = _ordering_checks(result, cfg.corruption)
    _write_json(path("provenance.json"), provenance(
        "ablate", cfg, {"estimate": cfg.ablation.seeds}, corpus_id=result.corpus_id,
        records=len(records), plot_files=plotted, checks=checks))
    if figures:
        from .plotting import plot_ablation
        plot_ablation(result.rows, path("ablation.png"))

    print(f"{'variant':>13} {'target':>7} {'MAPE %':>9} {'MSE':>13}   (median over seeds {result.seeds})")
    for r in result.rows:
        print(f"{r['variant']:>13} {r['target']:>7} {r['mape_pct']:9.3f} {r['mse']:13.4f}")
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    if args.assert_ordering and not all(checks.values()):
        raise CheckFailed("ordering: " + ", ".join(k for k, ok in checks.items() if not ok))
    return EXIT_OK


def cmd_gradcheck(args):
    report = run_gradcheck(instances=args.instances, seed=args.seed or 0,
                           composed_instances=args.composed, perturb=args.perturb)
    summary = report.summary()
    if args.out:
        path = _prepare(args.out, ["gradcheck.csv"], args.force)
        _write_rows(path("gradcheck.csv"), ["component", "family", "max_relative_error"],
                    [[c, f, _fmt(e)] for (c, f), e in summary.items()])
    print(f"{'component':>10} {'family':>14}  max relative error  (tolerance {TOLERANCE:g})")
    for (comp, fam), err in summary.items():
        print(f"{comp:>10} {fam:>14}  {err:.3e}")
    comp, fam, err = report.worst()
    print(f"worst: {comp}/{fam} {err:.3e} -> {'PASS' if report.passed else 'FAIL'}")
    if not report.passed:
        raise CheckFailed(f"gradient check exceeded {TOLERANCE:g} ({comp}/{fam}: {err:.3e})")
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _seed_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="trafficgan", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--seed", type=int, help="seed for this command's randomness")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.set_defaults(func=func)
        return p

    p = command("simulate", cmd_simulate, "simulate a CTM corpus to CSV files")
    p.add_argument("--count", type=int, help="number of records")
    p.add_argument("--preset", help="corridor preset (i5 or ca52)")

    p = command("train", cmd_train, "train the GAN on a corpus")
    p.add_argument("--corpus", help="corpus directory (default: simulate from the config)")
    p.add_argument("--epochs", type=int, help="total epoch budget")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue training from a checkpoint")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")

    p = command("estimate", cmd_estimate, "reconstruct the missing entries of one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="record CSV (n,m,dt header; cell lengths; rows)")
    p.add_argument("--mask-file", help="CSV of 0/1 entries, 1 = observed (default: corruption config)")
    p.add_argument("--pattern", choices=["random_entries", "detector_outage", "future_block"])
    p.add_argument("--rate", type=float)
    p.add_argument("--start-row", type=int)
    p.add_argument("--lambda-p", type=float)
    p.add_argument("--lambda-c", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--baseline", choices=list(BASELINES), help="baseline written to plot_data.csv")
    p.add_argument("--figures", action="store_true")

    p = command("evaluate", cmd_evaluate, "score the configured estimator and baselines on validation records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--max-records", type=int)
    p.add_argument("--pattern", choices=["random_entries", "detector_outage", "future_block"])

    p = command("ablate", cmd_ablate, "four-variant loss ablation with baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--seeds", type=_seed_list, help="comma-separated estimation seeds")
    p.add_argument("--max-records", type=int)
    p.add_argument("--pattern", choices=["random_entries", "detector_outage", "future_block"])
    p.add_argument("--lambda-p", type=float)
    p.add_argument("--lambda-c", type=float)
    p.add_argument("--assert-ordering", action="store_true", help="exit 4 unless the variant ordering holds")
    p.add_argument("--figures", action="store_true")

    p = command("gradcheck", cmd_gradcheck, "finite-difference audit of every analytic gradient",
                out_required=False)
    p.add_argument("--instances", type=int, default=100, help="random LSTM instances")
    p.add_argument("--composed", type=int, default=20, help="generator/latent instances")
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"trafficgan: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (DivergenceError, EstimationDivergence) as exc:
        print(f"trafficgan: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"trafficgan: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        # ConfigError, ShapeError, MatrixFormatError and CheckpointError are ValueErrors
        print(f"trafficgan: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
