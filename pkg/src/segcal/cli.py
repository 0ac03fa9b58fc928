"""Command line: synth, fit, eval, compare, ablate.

Exit codes: 0 success, 2 usage error, 3 degenerate data, 4 I/O or format error.
Payloads are deterministic for fixed flags and seed; timing goes to stderr only.
"""
import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import calibrators as cal
from .core import IGNORE
from .data import (
    SplitSpec, SyntheticConfig, generate_synthetic, read_container, split_dataset, split_hash,
    write_container, write_manifest,
)
from .errors import ClassCountMismatch, InputError, SegcalError
from .metrics import (
    BinningConfig, BoundaryConfig, dataset_ece, dataset_regional_ece, dataset_split_ece,
    reliability_diagram_data,
)
from .optim import nll_loss, write_loss_trace
from .selector import selector_accuracy_sweep

log = logging.getLogger("segcal")

METHOD_NAMES = {
    "uncal": "Uncal",
    "temp": "TempS",
    "vector": "LogS",
    "dirichlet": "DirS",
    "metacal": "MetaCal*",
    "ensemble": "Ens.",
    "selective": "Selective",
}
COLUMN_ORDER = list(METHOD_NAMES)
ABLATION_TOLERANCE = 0.005


def _positive_float(text):
    value = float(text)
    if not value > 0 or not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {text}")
    return value


def _probability(text):
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _class_count(text):
    value = int(text)
    if not 2 <= value < IGNORE:
        raise argparse.ArgumentTypeError(f"class count must lie in [2, {IGNORE - 1}], got {text}")
    return value


def _size(text):
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 32x32, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _split(text):
    try:
        parts = [float(x) for x in text.split(",")]
        return SplitSpec(*parts)
    except (TypeError, ValueError, InputError) as exc:
        raise argparse.ArgumentTypeError(f"bad split {text!r}: {exc}")


def _rates(text):
    try:
        rates = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate list {text!r}")
    if any(not 0 <= r <= 1 for r in rates):
        raise argparse.ArgumentTypeError("rates must lie in [0, 1]")
    return rates


def _methods(text):
    names = [x.strip() for x in text.split(",") if x.strip()]
    bad = [n for n in names if n not in METHOD_NAMES or n == "uncal"]
    if not names or bad:
        raise argparse.ArgumentTypeError(f"unknown methods {bad}; choose from {COLUMN_ORDER[1:]}")
    return names


def _dump(doc):
    return json.dumps(doc, indent=2) + "\n"


def _write_or_print(doc, out):
    text = _dump(doc)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _splits(dataset, split, seed):
    return split_dataset(dataset, SplitSpec(split.train, split.val, split.test, seed))


# -- synth -----------------------------------------------------------------

def cmd_synth(args):
    h, w = args.size
    cfg = SyntheticConfig(
        num_images=args.images, height=h, width=w, num_classes=args.classes,
        concentration=args.concentration, sharpness=args.sharpness,
        blob_seeds_per_image=args.blobs, boundary_noise=args.boundary_noise,
        boundary_radius=args.boundary_radius, seed=args.seed,
    )
    synth = generate_synthetic(cfg)
    out = Path(args.out)
    write_container(synth.dataset, out)
    manifest = write_manifest(out.with_suffix(".manifest.json"), out.name, synth.dataset, synth.provenance())
    sys.stdout.write(_dump(manifest))
    return 0


# -- fit -------------------------------------------------------------------

def _fit_config(args):
    return cal.FitConfig(binning=BinningConfig(args.bins)).with_seed(args.seed)


def cmd_fit(args):
    dataset = read_container(args.data)
    train, val, _ = _splits(dataset, args.split, args.seed)
    started = time.perf_counter()
    report = cal.FITTERS[args.method](train, val, _fit_config(args))
    Path(args.out).write_text(_dump(cal.params_to_json(report.params, dataset.num_classes)))
    if args.trace and "trace" in report.details:
        write_loss_trace(args.trace, report.details["trace"])
    log.info("fit %s finished in %.3fs", args.method, time.perf_counter() - started)
    sys.stdout.write(_dump(report.to_json(dataset.num_classes)))
    return 0


# -- eval ------------------------------------------------------------------

def _check_classes(doc, params, k):
    declared = doc.get("num_classes")
    if declared is not None and declared != k:
        raise ClassCountMismatch(f"parameters are for {declared} classes, data has {k}")
    shape_k = None
    if isinstance(params, cal.Vector):
        shape_k = len(params.w)
    elif isinstance(params, cal.Dirichlet):
        shape_k = params.W.shape[0]
    elif isinstance(params, cal.Selective):
        shape_k = params.selector.sizes[0]
    if shape_k is not None and shape_k != k:
        raise ClassCountMismatch(f"parameters are for {shape_k} classes, data has {k}")


def cmd_eval(args):
    dataset = read_container(args.data)
    doc = json.loads(Path(args.params).read_text())
    params = cal.params_from_json(doc)
    if isinstance(params, cal.Ensemble):
        raise InputError("ensemble parameters are evaluated with `compare --members`")
    _check_classes(doc, params, dataset.num_classes)
    if args.split is not None:
        dataset = _splits(dataset, args.split, args.seed)[2]
    binning = BinningConfig(args.bins)
    calibrated = list(cal.calibrate(params, dataset))
    before = dataset_ece(cal.calibrate(cal.Identity(), dataset), binning)
    after = dataset_ece(calibrated, binning)
    report = {"method": params.method, "uncalibrated_ece": before.dataset_ece}
    report.update(after.to_json())
    if args.split_correctness:
        report["split_correctness"] = dataset_split_ece(calibrated, binning)
    if args.regional:
        report["regional"] = dataset_regional_ece(calibrated, BoundaryConfig(args.boundary_radius), binning)
    _write_or_print(report, args.out)
    if args.diagram:
        with open(args.diagram, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_low", "bin_high", "acc", "conf", "count", "gap"])
            for row in reliability_diagram_data(after.bins):
                writer.writerow([repr(row[k]) if k != "count" else row[k]
                                 for k in ("low", "high", "acc", "conf", "count", "gap")])
    return 0


# -- compare ---------------------------------------------------------------

def confusion_iou(items, num_classes):
    """Pixel accuracy and per-class IoU from a confusion matrix."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for _, probs, labels in items:
        keep = labels != IGNORE
        pred = probs.argmax(axis=-1)[keep]
        true = labels[keep].astype(np.int64)
        conf += np.bincount(true * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = union > 0
    iou = np.where(present, tp / np.maximum(union, 1), np.nan)
    return float(tp.sum() / max(conf.sum(), 1)), [None if np.isnan(x) else float(x) for x in iou]


def _row(key, items, num_classes, binning, test_hash):
    report = dataset_ece(items, binning)
    probs = np.concatenate([p.reshape(-1, num_classes) for _, p, _ in items])
    labels = np.concatenate([l.ravel() for _, _, l in items])
    pixel_acc, iou = confusion_iou(items, num_classes)
    present = [x for x in iou if x is not None]
    return {
        "method": METHOD_NAMES[key],
        "ece": report.dataset_ece,
        "accuracy": pixel_acc,
        "nll": nll_loss(probs, labels),
        "miou": sum(present) / len(present) if present else None,
        "split": test_hash,
        "note": None,
    }


def _ensemble_items(member_paths, test):
    if not member_paths:
        raise InputError("ensemble needs member logits (--members)")
    members = [read_container(p) for p in member_paths]
    by_id = [{img.image_id: img for img in m.images} for m in members]
    params = cal.Ensemble(len(members))
    items = []
    for img in test.images:
        try:
            logits = [lookup[img.image_id].logits for lookup in by_id]
        except KeyError:
            raise InputError(f"member files lack image {img.image_id}")
        items.append((img.image_id, params.apply(logits), img.labels))
    return items


def run_compare(dataset, methods, split, seed, binning, members=()):
    train, val, test = _splits(dataset, split, seed)
    if len(test) == 0:
        raise InputError("compare needs a non-empty test split")
    cfg = cal.FitConfig(binning=binning).with_seed(seed)
    test_hash = split_hash(test)
    rows = [_row("uncal", list(cal.calibrate(cal.Identity(), test)), dataset.num_classes, binning, test_hash)]
    for key in COLUMN_ORDER[1:]:
        if key not in methods:
            continue
        try:
            if key == "ensemble":
                items = _ensemble_items(members, test)
            else:
                report = cal.FITTERS[key](train, val, cfg)
                items = list(cal.calibrate(report.params, test))
            rows.append(_row(key, items, dataset.num_classes, binning, test_hash))
        except SegcalError as exc:
            rows.append({"method": METHOD_NAMES[key], "ece": None, "accuracy": None, "nll": None,
                         "miou": None, "split": test_hash, "note": str(exc)})
    mark_best(rows)
    return rows


def mark_best(rows):
    scored = [r for r in rows if r.get("ece") is not None]
    best = min(r["ece"] for r in scored) if scored else None
    for r in rows:
        r["best"] = r.get("ece") is not None and r["ece"] == best
    return rows


def _fmt(value, digits=3):
    return "-" if value is None else f"{value:.{digits}f}"


def format_compare_table(rows):
    header = ["Method", "ECE", "Acc", "NLL", "mIoU", ""]
    body = [[r["method"], _fmt(r.get("ece")), _fmt(r.get("accuracy")), _fmt(r.get("nll")),
             _fmt(r.get("miou")), "*best" if r.get("best") else (r.get("note") or "")] for r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(line)).rstrip() for line in [header] + body]
    return "\n".join(lines) + "\n"


def cmd_compare(args):
    dataset = read_container(args.data)
    rows = run_compare(dataset, args.methods, args.split, args.seed, BinningConfig(args.bins), args.members or ())
    sys.stdout.write(format_compare_table(rows))
    doc = {"rows": rows, "bins": args.bins, "seed": args.seed}
    if args.out:
        Path(args.out).write_text(_dump(doc))
    else:
        sys.stdout.write(_dump(doc))
    return 0


# -- ablate ----------------------------------------------------------------

def monotone_verdict(results, tolerance=ABLATION_TOLERANCE):
    eces = [e for _, e in results]
    return all(b <= a + tolerance for a, b in zip(eces, eces[1:]))


def cmd_ablate(args):
    dataset = read_container(args.data)
    results = selector_accuracy_sweep(dataset, args.rates, args.t1, args.t2, args.seed, BinningConfig(args.bins))
    monotone = monotone_verdict(results)
    lines = ["rate    ECE"] + [f"{r:<6.3f}  {e:.4f}" for r, e in results]
    lines.append(f"non-increasing within {ABLATION_TOLERANCE}: {'yes' if monotone else 'no'}")
    sys.stdout.write("\n".join(lines) + "\n")
    doc = {
        "rates": [{"rate": r, "ece": e} for r, e in results],
        "monotone": monotone,
        "tolerance": ABLATION_TOLERANCE,
        "t1": args.t1,
        "t2": args.t2,
    }
    if args.out:
        Path(args.out).write_text(_dump(doc))
    else:
        sys.stdout.write(_dump(doc))
    return 0


# -- parser ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="segcal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic SGCL dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=_positive_int, default=10)
    p.add_argument("--size", type=_size, default=(32, 32))
    p.add_argument("--classes", type=_class_count, default=10)
    p.add_argument("--sharpness", type=_positive_float, default=1.0)
    p.add_argument("--boundary-noise", type=_probability, default=0.0)
    p.add_argument("--boundary-radius", type=int, default=2)
    p.add_argument("--concentration", type=float, default=SyntheticConfig.concentration)
    p.add_argument("--blobs", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a calibrator on the training split")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=["temp", "vector", "dirichlet", "metacal", "selective"])
    p.add_argument("--split", type=_split, default=SplitSpec(0.5, 0.2, 0.3))
    p.add_argument("--bins", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="write the AdamW loss trace as JSON lines")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="evaluate fitted parameters")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--bins", type=_positive_int, default=10)
    p.add_argument("--out")
    p.add_argument("--diagram", help="CSV of reliability bins")
    p.add_argument("--regional", action="store_true", help="boundary vs non-boundary ECE")
    p.add_argument("--boundary-radius", type=int, default=2)
    p.add_argument("--split-correctness", action="store_true")
    p.add_argument("--split", type=_split, help="evaluate only the test part of this split")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="fit and compare calibrators on a shared test split")
    p.add_argument("--data", required=True)
    p.add_argument("--methods", type=_methods, default=["temp", "vector", "dirichlet", "metacal", "selective"])
    p.add_argument("--split", type=_split, default=SplitSpec(0.5, 0.2, 0.3))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=_positive_int, default=10)
    p.add_argument("--members", type=lambda s: s.split(","), help="SGCL files of ensemble members")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", help="ECE as a function of misprediction detection rate")
    p.add_argument("--data", required=True)
    p.add_argument("--rates", type=_rates, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=_positive_int, default=10)
    p.add_argument("--t1", type=_positive_float, default=1e10)
    p.add_argument("--t2", type=_positive_float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except SegcalError as exc:
        print(f"segcal {args.command}: {exc}", file=sys.stderr)
        if exc.exit_code == 3 and args.command == "fit":
            print("hint: fall back to `--method temp` for data without mispredictions", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"segcal {args.command}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
