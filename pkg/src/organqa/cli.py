"""``organqa`` command line.

Commands compose as ``gen -> train -> score -> eval -> explain``; ``corrupt-preview``
and ``gradcheck`` are diagnostics. Every command writes only below its output
directory (``--out``, else ``$OUT_DIR``, else ``out_dir`` from the config).

Exit codes: 0 success, 1 other failure (e.g. diverged training or a failed
gradient check), 2 usage error, 3 config-parse, 4 missing-file,
5 schema-mismatch, 6 undefined-metric. Failures print one line to stderr:
``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import torch

from .config import ConfigError, ExperimentConfig, load_config
from .corrupt import calibration_histogram, derive_seed, signed_dice
from .geomstats import TooFewSamplesError
from .metrics import ScoredCase, SchemaError, UndefinedMetricError, read_cases_csv, write_cases_csv
from .nets import build_network
from .neural import CheckpointError, load_checkpoint
from .phantom import AnatomySpec, PhantomFitError, build_dataset, generate_anatomy, read_manifest
from .pipeline import (
    InaccuracyReport,
    TrainingDivergedError,
    UnknownOrganError,
    evaluate,
    explain,
    explanation_volume,
    fit_statistical,
    label_cases,
    load_gaussian_models,
    make_training_pair,
    preprocess_case,
    save_gaussian_models,
    score_dae,
    score_statistical,
    score_vae,
    train,
    write_eval_csv,
    write_eval_json,
)
from .voxelgrid import MultiChannelVolume, OmvFormatError, read_omv, write_omv

log = logging.getLogger("organqa")

EXIT_FAILED = 1
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_SCHEMA = 5
EXIT_UNDEFINED = 6

METHODS = ("dae", "vae-single", "vae-multi", "statistical")


# ---------------------------------------------------------------------------
# helpers


def _threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("THREADS")
    n = int(raw) if raw else (os.cpu_count() or 1)
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def _pmap(fn, items, threads: int) -> list:
    """Order-preserving map over cases, so results do not depend on scheduling."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        uc = cfg.use_case
        cfg = dataclasses.replace(
            cfg,
            use_case=dataclasses.replace(uc, train=dataclasses.replace(uc.train, seed=args.seed)),
            dataset=dataclasses.replace(cfg.dataset, seed=args.seed),
            bootstrap=dataclasses.replace(cfg.bootstrap, seed=args.seed),
        )
    return cfg


def _out_dir(args, cfg=None) -> str:
    out = args.out or os.environ.get("OUT_DIR") or (cfg.out_dir if cfg is not None else "out")
    os.makedirs(out, exist_ok=True)
    return out


def _data_dir(args, cfg) -> str:
    return args.data or cfg.data_dir


def _require(path) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} does not exist")
    return path


def _omv_files(directory) -> list[str]:
    _require(directory)
    files = sorted(glob.glob(os.path.join(directory, "*.omv")))
    if not files:
        raise FileNotFoundError(f"no .omv files in {directory}")
    return files


def _case_id(path) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _method_key(method: str) -> str:
    return method.replace("-", "_")


def _load_model(cfg: ExperimentConfig, method: str, path: str):
    spec = cfg.network_for(_method_key(method))
    model = build_network(spec, cfg.use_case.model_dims, seed=0)
    state = load_checkpoint(_require(path))
    want = model.state_dict()
    missing = sorted(set(want) - set(state))
    unexpected = sorted(set(state) - set(want))
    resized = sorted(k for k in set(want) & set(state) if want[k].shape != state[k].shape)
    if missing or unexpected or resized:
        raise SchemaError(f"checkpoint {path} does not match the configured {method} network "
                          f"({len(missing)} missing, {len(unexpected)} unexpected, {len(resized)} resized tensors)")
    model.load_state_dict(state)
    return model.eval()


def _default_checkpoint(out: str, method: str) -> str:
    if method == "statistical":
        return os.path.join(out, "statistical.txt")
    if method == "vae-single":
        return out
    return os.path.join(out, f"{method}.daew")


def _load_scorer(cfg: ExperimentConfig, method: str, checkpoint: str):
    """A function mapping a raw case to per-organ scores."""
    uc = cfg.use_case
    if method == "statistical":
        models = load_gaussian_models(_require(checkpoint))
        missing = [o for o in uc.organs if o not in models]
        if missing:
            raise SchemaError(f"{checkpoint} has no Gaussian for {missing}")
        return lambda case: score_statistical(models, case, uc)
    if method == "vae-single":
        models = {o: _load_model(cfg, method, os.path.join(checkpoint, f"vae-single_{o}.daew")) for o in uc.organs}
        return lambda case: score_vae(models, case, uc).scores
    model = _load_model(cfg, method, checkpoint)
    if method == "vae-multi":
        return lambda case: score_vae(model, case, uc).scores
    return lambda case: score_dae(model, case, uc).scores


def _manifest_dice(path) -> dict:
    return {(r.case_id, r.organ): r.true_dice for r in read_manifest(_require(path))}


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    """Synthetic train/val ground truth plus a degraded, labeled test set."""
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds, uc = cfg.dataset, cfg.use_case
    n_fit = ds.n_train + ds.n_val
    specs = [
        AnatomySpec(ds.layout, uc.size, uc.spacing, jitter=ds.jitter, seed=derive_seed(ds.seed, split, i))
        for split, n in ((0, n_fit), (1, ds.n_test)) for i in range(n)
    ]
    fit_specs, test_specs = specs[:n_fit], specs[n_fit:]
    anatomies = _pmap(generate_anatomy, fit_specs, _threads(args))
    for split, start, n in (("train", 0, ds.n_train), ("val", ds.n_train, ds.n_val)):
        os.makedirs(os.path.join(out, split), exist_ok=True)
        for i in range(n):
            write_omv(anatomies[start + i], os.path.join(out, split, f"case{i:04d}.omv"))
    rows = build_dataset(test_specs, os.path.join(out, "test"), ds.degraded_fraction,
                         seed=derive_seed(ds.seed, 2), thresholds=dict(uc.thresholds))
    n_bad = sum(r.true_dice < uc.thresholds[r.organ] for r in rows)
    print(f"wrote {ds.n_train} train, {ds.n_val} val and {ds.n_test} test cases to {out} "
          f"({n_bad}/{len(rows)} test organs inaccurate)")
    return 0


def cmd_corrupt_preview(args) -> int:
    """Corrupt one ground-truth case once, and optionally histogram many draws."""
    cfg = _config(args)
    out = _out_dir(args, cfg)
    uc = cfg.use_case
    seed = args.seed if args.seed is not None else 0
    gt = preprocess_case(read_omv(_require(args.case)), uc)
    noisy, _ = make_training_pair(gt, uc, seed)
    name = _case_id(args.case)
    write_omv(noisy, os.path.join(out, f"preview_{name}.omv"))
    with open(os.path.join(out, f"preview_{name}.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["organ", "signed_dice"] + [f"bin{b}" for b in range(10)] * bool(args.histogram))
        for c, organ in enumerate(uc.organs):
            row = [organ, repr(signed_dice(noisy.channel(c), gt.channel(c)))]
            if args.histogram:
                if gt.channel(c).is_empty():
                    row += [0] * 10
                else:
                    h = calibration_histogram([gt.channel(c)], uc.noise[organ], args.histogram, 10,
                                              seed=derive_seed(seed, c))
                    row += [int(v) for v in h.counts]
            w.writerow(row)
            print(" ".join(str(v) for v in row))
    return 0


def _read_split(directory, uc, threads):
    files = _omv_files(directory)
    return _pmap(lambda p: preprocess_case(read_omv(p), uc), files, threads)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    uc = cfg.use_case
    data = _data_dir(args, cfg)
    threads = _threads(args)
    train_set = _read_split(os.path.join(data, "train"), uc, threads)
    val_set = _read_split(os.path.join(data, "val"), uc, threads)
    method = args.method

    def report(rec):
        log.info("epoch %d train %.4f val %.4f%s", rec.epoch, rec.train_loss, rec.val_loss,
                 " *" if rec.checkpointed else "")

    if method == "statistical":
        models = fit_statistical(train_set + val_set, uc)
        save_gaussian_models(models, os.path.join(out, "statistical.txt"))
        print(f"fitted {len(models)} Gaussian models -> {os.path.join(out, 'statistical.txt')}")
        return 0
    spec = cfg.network_for(_method_key(method))
    if method == "vae-single":
        single_uc = dataclasses.replace(uc, flip_pairs=())
        for c, organ in enumerate(uc.organs):
            pick = lambda vols: [MultiChannelVolume((organ,), v.values[c:c + 1], v.spacing) for v in vols]
            model = build_network(spec, uc.model_dims, seed=derive_seed(uc.train.seed, c))
            res = train(model, pick(train_set), pick(val_set), single_uc, out, f"vae-single_{organ}", report)
            print(f"{organ}: best val {res.best_val:.4f} at epoch {res.best_epoch}")
        return 0
    model = build_network(spec, uc.model_dims, seed=uc.train.seed)
    res = train(model, train_set, val_set, uc, out, method, report)
    print(f"{method}: best val {res.best_val:.4f} at epoch {res.best_epoch} "
          f"({len(res.log)} epochs) -> {os.path.join(out, method + '.daew')}")
    return 0


def cmd_score(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    data = _data_dir(args, cfg)
    method = args.method
    scorer = _load_scorer(cfg, method, args.checkpoint or _default_checkpoint(out, method))
    cases_dir = args.cases or os.path.join(data, "test", "auto")
    files = _omv_files(cases_dir)
    manifest = args.manifest or os.path.join(data, "test", "manifest.csv")
    truth = _manifest_dice(manifest) if args.manifest or os.path.exists(manifest) else {}
    results = _pmap(lambda p: scorer(read_omv(p)), files, _threads(args))
    report = InaccuracyReport(method)
    for path, scores in zip(files, results):
        cid = _case_id(path)
        report.add(cid, scores, {o: truth[(cid, o)] for o in scores if (cid, o) in truth})
    path = os.path.join(out, f"scores_{method}.csv")
    write_cases_csv(report.cases, path)
    print(f"scored {len(files)} cases with {method} -> {path}")
    return 0


def _report_method(path) -> str:
    stem = _case_id(path)
    return stem[len("scores_"):] if stem.startswith("scores_") else stem


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    truth = _manifest_dice(args.manifest) if args.manifest else {}
    reports = []
    for path in args.reports:
        cases = read_cases_csv(_require(path))
        filled = []
        for c in cases:
            td = c.true_dice if c.true_dice is not None else truth.get((c.case_id, c.organ))
            if td is None:
                raise SchemaError(f"{path}: no true Dice for {c.case_id}/{c.organ} (pass --manifest)")
            filled.append(ScoredCase(c.case_id, c.organ, c.score, None, td))
        try:
            labeled = label_cases(filled, cfg.use_case.thresholds)
        except UnknownOrganError as exc:
            raise SchemaError(f"{path}: organ {exc.args[0]!r} is not configured") from None
        reports.append(InaccuracyReport(_report_method(path), labeled))
    rows = evaluate(reports, cfg.bootstrap.resamples, cfg.bootstrap.seed)
    write_eval_csv(rows, os.path.join(out, "eval.csv"))
    write_eval_json(rows, os.path.join(out, "eval.json"))
    undefined = [r for r in rows if r.status != "ok"]
    for r in rows:
        print(f"{r.method:12s} {r.organ:20s} {r.metric:5s} {r.point:.3f} [{r.lo:.3f}, {r.hi:.3f}] "
              f"n={r.n_cases} inaccurate={r.pct_inaccurate:.1f}% {r.status}")
    if undefined and args.strict:
        raise UndefinedMetricError(f"{len(undefined)} rows are undefined (single-class organs)")
    return 0


def cmd_explain(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    uc = cfg.use_case
    method = args.method if args.method in ("dae", "vae-multi") else "dae"
    model = _load_model(cfg, method, args.checkpoint or _default_checkpoint(out, method))
    case = read_omv(_require(args.case))
    scored = score_dae(model, case, uc) if method == "dae" else score_vae(model, case, uc)
    organs = args.organ or list(uc.organs)
    unknown = [o for o in organs if o not in uc.organs]
    if unknown:
        raise SchemaError(f"organs {unknown} are not configured")
    maps = {o: explain(scored.preprocessed.channel(o), scored.reconstruction.channel(o)) for o in organs}
    name = _case_id(args.case)
    write_omv(explanation_volume(maps, scored.preprocessed.spacing), os.path.join(out, f"explain_{name}.omv"))
    summary = {o: {"score": scored.scores[o], **maps[o].summary()} for o in organs}
    with open(os.path.join(out, f"explain_{name}.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for o in organs:
        c = maps[o].counts
        print(f"{o:20s} score {scored.scores[o]:.3f} auto-only {c[2]} recon-only {c[3]} "
              f"components {maps[o].component_count()}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import GRAD_TOL, gradient_report

    report = gradient_report(args.seed if args.seed is not None else 0)
    worst = 0.0
    for name, err in report.items():
        print(f"{name:24s} {err:.3e} {'ok' if err <= GRAD_TOL else 'FAIL'}")
        worst = max(worst, err)
    if worst > GRAD_TOL:
        print(f"error: gradcheck: max relative error {worst:.3e} exceeds {GRAD_TOL:g}", file=sys.stderr)
        return EXIT_FAILED
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (YAML)")
    common.add_argument("--seed", type=lambda s: int(s, 0), help="master seed (u64), overrides the config")
    common.add_argument("--out", help="output directory (default: $OUT_DIR, then out_dir in the config)")
    common.add_argument("--threads", type=int, help="worker threads (default: $THREADS, then all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="organqa", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate phantom train/val/test data")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("corrupt-preview", parents=[common], help="corrupt one case with the configured noise")
    p.add_argument("--case", required=True, help="ground-truth OMV")
    p.add_argument("--histogram", type=int, default=0, metavar="N",
                   help="also histogram the signed Dice of N corruptions per organ")
    p.set_defaults(func=cmd_corrupt_preview)

    for name, func, helptext in (("train", cmd_train, "train a model or fit the statistical baseline"),
                                 ("score", cmd_score, "score auto-segmentations")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--method", choices=METHODS, default="dae")
        p.add_argument("--data", help="dataset directory written by gen (default: data_dir in the config)")
        if name == "score":
            p.add_argument("--checkpoint", help="model file (directory for vae-single)")
            p.add_argument("--cases", help="directory of auto-segmentation OMVs")
            p.add_argument("--manifest", help="manifest CSV with true Dice values")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="AUROC/AUPR with bootstrap intervals")
    p.add_argument("--reports", nargs="+", required=True, help="score CSVs (method taken from scores_<method>.csv)")
    p.add_argument("--manifest", help="manifest CSV supplying true Dice values")
    p.add_argument("--strict", action="store_true", help="exit with the undefined-metric code on single-class organs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", parents=[common], help="disagreement map for one case")
    p.add_argument("--method", choices=("dae", "vae-multi"), default="dae")
    p.add_argument("--checkpoint")
    p.add_argument("--case", required=True, help="auto-segmentation OMV")
    p.add_argument("--organ", action="append", help="organ to explain (repeatable; default all)")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient report")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _fail(category: str, exc: BaseException, code: int) -> int:
    msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
    print(f"error: {category}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command != "gradcheck":
            torch.set_num_threads(_threads(args))
        return args.func(args)
    except ConfigError as exc:
        return _fail("config-parse", exc, EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail("missing-file", exc, EXIT_MISSING)
    except (SchemaError, OmvFormatError, CheckpointError) as exc:
        return _fail("schema-mismatch", exc, EXIT_SCHEMA)
    except UndefinedMetricError as exc:
        return _fail("undefined-metric", exc, EXIT_UNDEFINED)
    except (TrainingDivergedError, PhantomFitError, TooFewSamplesError) as exc:
        return _fail("failed", exc, EXIT_FAILED)


if __name__ == "__main__":
    sys.exit(main())
