"""Command-line entry point: ``tiltseg {generate,train,evaluate,report-only,gradcheck}``.

Exit codes: 0 success, 1 usage or input error, 2 runtime failure (divergence,
failed gradient check). Log verbosity comes from ``TILTSEG_LOG_LEVEL``.
"""

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import diffmodel, experiment, segmetrics, synthseg
from .errors import DegenerateClassError, DivergenceError, FormatError, TiltSegError
from .trainer import trace_to_csv

log = logging.getLogger("tiltseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_atomic(path, data):
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _stamp(config_hash, seed):
    return f"config_hash={config_hash} seed={seed}"


# --- generate ------------------------------------------------------------------


def cmd_generate(args):
    data = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        config = synthseg.SynthConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from None
    try:
        dataset = synthseg.generate(config)
    except DegenerateClassError as exc:
        raise UsageError(f"invalid synth config: {exc}") from None
    _write_atomic(args.out, synthseg.to_bytes(dataset))
    log.info("wrote %d samples to %s", len(dataset), args.out)
    return EXIT_OK


# --- train -----------------------------------------------------------------------

_TRAIN_FLAGS = {
    "method": "method",
    "t": "t",
    "gamma": "gamma",
    "focal_gamma": "focal_gamma",
    "alpha": "alpha",
    "eta": "eta",
    "momentum": "momentum",
    "steps": "steps",
    "batch": "batch",
    "partition": "partition",
    "seed": "seed",
    "arch": "arch",
    "eval_fraction": "eval_fraction",
    "k_fraction": "k_fraction",
    "dataset": "dataset",
    "reference": "reference_ious",
}


def _experiment_config(args):
    data = _read_json(args.config) if args.config else {}
    for flag, key in _TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            data[key] = val
    if "dataset" in data and data.get("synth") is not None and args.dataset is not None:
        data.pop("synth")
    try:
        return experiment.ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid experiment config: {exc}") from None


def _load_reference(path):
    if path is None:
        return None
    try:
        return segmetrics.read_iou_csv(path)[1]
    except FileNotFoundError:
        raise UsageError(f"reference IoU file not found: {path}") from None


def _load_dataset(config):
    try:
        return config.load_dataset()
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {config.dataset}") from None
    except FormatError as exc:
        raise UsageError(f"cannot read dataset {config.dataset}: {exc}") from None
    except DegenerateClassError as exc:
        raise UsageError(f"invalid synth config: {exc}") from None


def _fairness_outputs(ious, names, reference, k_fraction, stamp, label):
    """Contents of ious.csv, fairness.json and fairness.txt; IoUs in percent."""
    pct = np.asarray(ious, dtype=np.float64) * 100.0
    iou_csv = segmetrics.write_iou_csv(names, pct, stamp)
    if np.count_nonzero(~np.isnan(pct)) < 2:
        return iou_csv, None, None
    if reference is not None and len(reference) != len(pct):
        raise UsageError(f"reference has {len(reference)} classes, model has {len(pct)}")
    report = segmetrics.fairness_report(pct, reference, k_fraction)
    meta = dict(stamp=stamp, per_class_iou=dict(zip(names, pct.tolist())))
    return iou_csv, report.to_json(**meta) + "\n", f"# {stamp}\n" + report.format_table(label)


def _save_params(path, params, meta):
    arrays = {f"a{i}": a for i, a in enumerate(params.arrays)}
    fd, tmp = tempfile.mkstemp(dir=Path(path).parent, suffix=".npz")
    os.close(fd)
    np.savez(tmp, arch=np.array(params.arch), meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    os.replace(tmp, path)


def _load_params(path):
    path = Path(path)
    if path.is_dir():
        path = path / "params.npz"
    if not path.exists():
        raise UsageError(f"params artifact not found: {path}")
    with np.load(path) as z:
        n = len([k for k in z.files if k[0] == "a" and k[1:].isdigit()])
        params = diffmodel.ModelParams(str(z["arch"]), [z[f"a{i}"] for i in range(n)])
        meta = json.loads(str(z["meta"]))
    return params, meta


def cmd_train(args):
    config = _experiment_config(args)
    reference = _load_reference(config.reference_ious)
    dataset = _load_dataset(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    chash = config.config_hash()
    stamp = _stamp(chash, config.seed)
    train_idx, eval_idx = experiment.split_indices(len(dataset), config.eval_fraction, config.seed)
    train_set = dataset.subset(train_idx)
    tcfg = config.trainer_config()

    start = time.perf_counter()
    try:
        params, trace = experiment.train(
            train_set, config.method, tcfg,
            focal_gamma=config.focal_gamma if config.focal_gamma is not None else 2.0,
            alpha=config.alpha,
        )
    except DivergenceError as exc:
        _write_atomic(out / "trace.csv", trace_to_csv(exc.trace, header_comment=stamp))
        log.error("%s (partial trace of %d steps written)", exc, len(exc.trace))
        return EXIT_RUNTIME
    wall = time.perf_counter() - start

    eval_set = dataset.subset(eval_idx) if len(eval_idx) else train_set
    ious = experiment.evaluate(params, eval_set)
    names = [f"class_{c}" for c in range(dataset.num_classes)]
    iou_csv, fair_json, fair_txt = _fairness_outputs(
        ious, names, reference, config.k_fraction, stamp, config.method
    )
    meta = {
        "config_hash": chash,
        "seed": config.seed,
        "num_classes": dataset.num_classes,
        "eval_indices": [int(i) for i in eval_idx],
        "train_indices": [int(i) for i in train_idx],
        "synth": None if config.dataset else config.synth_config().to_dict(),
        "dataset": config.dataset,
    }
    summary = {
        "config_hash": chash,
        "seed": config.seed,
        "experiment": config.to_dict(),
        "trainer": tcfg.to_dict(),
        "steps_completed": len(trace),
        "final_batch_loss": trace[-1].loss if trace else None,
        "final_weights": list(trace[-1].weights) if trace else [],
        "eval_iou": [None if np.isnan(v) else float(v) for v in ious],
        "wall_time_s": wall,
    }
    _write_atomic(out / "trace.csv", trace_to_csv(trace, header_comment=stamp))
    _save_params(out / "params.npz", params, meta)
    _write_atomic(out / "ious.csv", iou_csv)
    if fair_json is not None:
        _write_atomic(out / "fairness.json", fair_json)
        _write_atomic(out / "fairness.txt", fair_txt)
    _write_atomic(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("trained %s for %d steps in %.2fs", config.method, len(trace), wall)
    if fair_txt:
        print(fair_txt, end="")
    return EXIT_OK


# --- evaluate ----------------------------------------------------------------------


def cmd_evaluate(args):
    params, meta = _load_params(args.params)
    reference = _load_reference(args.reference)
    if args.dataset:
        try:
            dataset = synthseg.load(args.dataset)
        except FileNotFoundError:
            raise UsageError(f"dataset not found: {args.dataset}") from None
        except FormatError as exc:
            raise UsageError(f"cannot read dataset {args.dataset}: {exc}") from None
    elif meta.get("dataset"):
        dataset = synthseg.load(meta["dataset"])
    elif meta.get("synth"):
        dataset = synthseg.generate(synthseg.SynthConfig.from_dict(meta["synth"]))
    else:
        raise UsageError("no dataset given and none recorded in the params artifact")
    if dataset.num_classes != params.num_classes:
        raise UsageError(f"dataset has {dataset.num_classes} classes, model {params.num_classes}")

    if args.split == "all":
        subset = dataset
    else:
        idx = meta.get(f"{args.split}_indices")
        if idx is None or (args.split == "eval" and not idx):
            raise UsageError(f"params artifact records no {args.split} split")
        subset = dataset.subset(idx)
    ious = experiment.evaluate(params, subset)
    stamp = _stamp(meta.get("config_hash", "none"), meta.get("seed", "none"))
    names = [f"class_{c}" for c in range(dataset.num_classes)]
    iou_csv, fair_json, fair_txt = _fairness_outputs(
        ious, names, reference, args.k_fraction, stamp, args.name
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_atomic(out / "ious.csv", iou_csv)
    if fair_json is not None:
        _write_atomic(out / "fairness.json", fair_json)
        _write_atomic(out / "fairness.txt", fair_txt)
        print(fair_txt, end="")
    return EXIT_OK


# --- report-only -------------------------------------------------------------------


def cmd_report_only(args):
    rows = []
    reference = _load_reference(args.reference)
    for path in args.ious:
        try:
            names, ious = segmetrics.read_iou_csv(path)
        except FileNotFoundError:
            raise UsageError(f"IoU file not found: {path}") from None
        if reference is not None and len(reference) != len(ious):
            raise UsageError(f"{path}: {len(ious)} classes vs {len(reference)} in reference")
        ref = reference if reference is not None else (rows[0][2] if rows and args.first_as_reference else None)
        report = segmetrics.fairness_report(ious, ref, args.k_fraction)
        rows.append((Path(path).stem, report, ious))
    text = segmetrics.format_table([(n, r) for n, r, _ in rows])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {n: json.loads(r.to_json()) for n, r, _ in rows}
        _write_atomic(out / "fairness.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
        _write_atomic(out / "fairness.txt", text)
    print(text, end="")
    return EXIT_OK


# --- gradcheck ---------------------------------------------------------------------

GRADCHECK_KINDS = ("mcce", "tce_image", "tce_class", "focal")


def _gradcheck_loss(kind, t, rng, k):
    if kind == "mcce":
        return diffmodel.LossKind.mcce()
    if kind == "tce_image":
        return diffmodel.LossKind.tce_image(t)
    if kind == "tce_class":
        return diffmodel.LossKind.tce_class(t)
    return diffmodel.LossKind.focal(2.0, rng.uniform(0.5, 1.5, size=k))


def gradcheck(kinds, trials, tolerance, t=1.0, seed=0, step=1e-5, arch="linear"):
    """Compare analytic and central-difference gradients on random instances.

    Returns a list of ``(kind, trial, max_rel_err, worst_coordinate)``. The
    error of a coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    results = []
    rng = np.random.default_rng(seed)
    m, h, w, d, k = 2, 4, 4, 2, 3
    for kind in kinds:
        for trial in range(trials):
            feats = rng.normal(size=(m, h, w, d))
            labels = rng.integers(0, k, size=(m, h, w))
            params = diffmodel.ModelParams(
                arch,
                [rng.normal(size=(k, d)), rng.normal(size=k)]
                if arch == "linear"
                else [rng.normal(size=(5, d)), rng.normal(size=5), rng.normal(size=(k, 5)), rng.normal(size=k)],
            )
            loss = _gradcheck_loss(kind, t, rng, k)
            _, g = diffmodel.loss_and_grad(params, feats, labels, loss)
            fd = diffmodel.finite_diff_grad(params, feats, labels, loss, step)
            err = np.abs(g - fd) / np.maximum(1.0, np.abs(g))
            worst = int(np.argmax(err))
            results.append((kind, trial, float(err[worst]), worst))
    return results


def cmd_gradcheck(args):
    kinds = GRADCHECK_KINDS if args.loss == "all" else (args.loss,)
    if args.trials == 0:
        log.warning("trials=0: nothing checked")
        print("gradcheck: 0 trials, vacuous pass")
        return EXIT_OK
    results = gradcheck(kinds, args.trials, args.tolerance, args.t, args.seed, args.step)
    failed = [r for r in results if not r[2] <= args.tolerance]
    for kind in kinds:
        errs = [r[2] for r in results if r[0] == kind]
        print(f"{kind:<10} trials={len(errs):<4} max_rel_err={max(errs):.3e}")
    if failed:
        kind, trial, err, coord = max(failed, key=lambda r: r[2])
        print(
            f"FAIL: {len(failed)} instance(s) above tolerance {args.tolerance:g}; "
            f"worst {kind} trial {trial} coordinate {coord} rel_err {err:.3e}"
        )
        return EXIT_RUNTIME
    print(f"PASS: all {len(results)} instance(s) within tolerance {args.tolerance:g}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="tiltseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a synthetic dataset (SSEG1 file)")
    g.add_argument("--config", help="synthetic generator config (JSON)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="output .sseg path")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write run artifacts")
    t.add_argument("--config", help="experiment config (JSON)")
    t.add_argument("--dataset", help="SSEG1 dataset path")
    t.add_argument("--method", choices=experiment.METHODS)
    t.add_argument("--t", type=float, help="tilt")
    t.add_argument("--gamma", type=float, help="accumulator rate of tce-stochastic")
    t.add_argument("--focal-gamma", type=float)
    t.add_argument("--alpha", help="focal class weights: inverse | uniform")
    t.add_argument("--eta", type=float, help="learning rate")
    t.add_argument("--momentum", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--partition", choices=("overlapping", "disjoint"))
    t.add_argument("--arch", choices=diffmodel.ARCHITECTURES)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-fraction", type=float)
    t.add_argument("--k-fraction", type=float)
    t.add_argument("--reference", help="reference per-class IoU CSV for sorted groups")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="per-class IoU and fairness report of a trained model")
    e.add_argument("--params", required=True, help="params.npz or a train output directory")
    e.add_argument("--dataset", help="SSEG1 dataset (default: the one recorded at training)")
    e.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    e.add_argument("--k-fraction", type=float, default=0.25)
    e.add_argument("--reference", help="reference per-class IoU CSV for sorted groups")
    e.add_argument("--name", default="model", help="row label in the text table")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report-only", help="fairness report from per-class IoU CSV files")
    r.add_argument("ious", nargs="+", help="CSV files of class_name,iou")
    r.add_argument("--reference", help="reference IoU CSV for the sorted groups")
    r.add_argument(
        "--first-as-reference", action="store_true",
        help="rank classes by the first file when --reference is not given",
    )
    r.add_argument("--k-fraction", type=float, default=0.25)
    r.add_argument("--out", help="directory for fairness.json / fairness.txt")
    r.set_defaults(func=cmd_report_only)

    c = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    c.add_argument("--loss", choices=GRADCHECK_KINDS + ("all",), default="all")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--tolerance", type=float, default=1e-5)
    c.add_argument("--t", type=float, default=1.0)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    level = os.environ.get("TILTSEG_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "k_fraction", None) is not None and not 0 < args.k_fraction <= 0.5:
        print("tiltseg: error: --k-fraction must be in (0, 0.5]", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tiltseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"tiltseg: divergence: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TiltSegError, ValueError) as exc:
        print(f"tiltseg: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
