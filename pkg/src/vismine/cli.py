"""Command-line pipeline: generate data, mine patterns, propose boxes,
evaluate, classify, and inspect weights.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure.  Options resolve as: command-line flag, then config file
(--config or $VISMINE_CONFIG), then built-in default.  The config file is
plain `key = value` lines, # comments allowed; unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .backbone import BackboneSpec, WeightFormatError, forward, load_weights
from .filterbank import builtin_filterbank
from .kernels import ShapeError
from .localize import BBox, deconv_filter, intersect_regions, localize_pattern, region_of
from .metrics import SoftmaxHead, abo, iou, metrics_report, recall_at
from .mining import (
    DivergenceError,
    SingleClassError,
    VisualPattern,
    binarize,
    detect,
    extract_patterns,
    fit_thresholds,
    train_head,
)
from .synth import (
    ImageFormatError,
    ManifestError,
    MotifSpec,
    generate,
    read_image,
    read_manifest,
    write_image,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CONFIG_ENV = "VISMINE_CONFIG"

# every key a config file may set (flags use the same names with dashes)
CONFIG_KEYS = {
    "seed", "jobs", "noise", "size", "motif_size", "margin", "per_class",
    "background", "patterns", "top_k", "q", "l1", "lr", "batch", "iters",
    "tau", "iou_thresh", "max_per_image", "input_size",
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _read_config(path):
    values = {}
    try:
        with open(path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{ln}: expected key = value, got {line!r}")
                key, _, val = line.partition("=")
                key = key.strip().replace("-", "_")
                if key not in CONFIG_KEYS:
                    raise UsageError(f"{path}:{ln}: unknown config key {key!r}")
                values[key] = val.strip()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    return values


def _resolve(ns, config, key, default, cast):
    flag = getattr(ns, key, None)
    if flag is not None:
        return flag
    if key in config:
        try:
            return cast(config[key])
        except ValueError:
            raise UsageError(f"config key {key} has invalid value {config[key]!r}")
    return default


def _config_fingerprint(params: dict) -> str:
    text = ";".join(f"{k}={params[k]}" for k in sorted(params))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _file_fingerprint(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def _load_backbone(weights, input_size) -> BackboneSpec:
    if weights == "builtin":
        return builtin_filterbank(input_size)
    if not os.path.exists(weights):
        raise DataError(f"weights file not found: {weights}")
    return load_weights(weights, input_size)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


# --- parallel forward helpers (top level so they pickle) ---------------------

def _pooled_worker(task):
    spec, image = task
    return forward(spec, image).pooled_values


def _pooled_matrix(spec, images, jobs):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_pooled_worker, [(spec, im) for im in images], chunksize=8))
    else:
        rows = [forward(spec, im).pooled_values for im in images]
    return np.stack(rows)


def _propose_worker(task):
    spec, image, banks, tau, max_per_image = task
    trace = forward(spec, image)
    candidates = []
    for bi, bank in enumerate(banks):
        profile = binarize(trace.pooled_values, bank.thresholds)
        for pattern in bank.patterns:
            if not detect(pattern, profile):
                continue
            res = localize_pattern(image, spec, pattern, bank.thresholds, tau=tau, trace=trace)
            if res is None:
                continue
            region, box = res
            candidates.append((pattern.weight_sum, f"{bi}:{pattern.neuron}", box, pattern))
    candidates.sort(key=lambda t: (-t[0], t[1]))
    picked = candidates[:max_per_image]
    masks = []
    for _, key, box, pattern in picked:
        maps = [deconv_filter(trace, spec, f) for f in pattern.filters]
        norm = [m / m.max() if m.max() > 0 else m for m in maps]
        merged = np.minimum.reduce(norm)
        masks.append((key, box, merged))
    return masks


# --- pattern bank file -------------------------------------------------------

class PatternBank:
    def __init__(self, patterns, thresholds, backbone_fp, config_fp):
        self.patterns = patterns
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.backbone_fp = backbone_fp
        self.config_fp = config_fp


def write_bank(path, bank: PatternBank):
    lines = ["VPBANK 1",
             f"backbone {bank.backbone_fp}",
             f"config {bank.config_fp}",
             "thresholds " + " ".join(_fmt(v) for v in bank.thresholds)]
    for p in bank.patterns:
        fl = " ".join(str(f) for f in p.filters)
        wt = " ".join(_fmt(w) for w in p.weights)
        lines.append(f"pattern {p.neuron} {len(p.filters)} {fl} {wt}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_bank(path) -> PatternBank:
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except FileNotFoundError:
        raise DataError(f"pattern bank not found: {path}")
    if not lines or lines[0] != "VPBANK 1":
        raise DataError(f"bad pattern bank header in {path}")
    backbone_fp = config_fp = None
    thresholds = None
    patterns = []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "backbone":
            backbone_fp = parts[1]
        elif parts[0] == "config":
            config_fp = parts[1]
        elif parts[0] == "thresholds":
            thresholds = np.array([float(v) for v in parts[1:]])
        elif parts[0] == "pattern":
            neuron, k = int(parts[1]), int(parts[2])
            filters = tuple(int(v) for v in parts[3:3 + k])
            weights = tuple(float(v) for v in parts[3 + k:3 + 2 * k])
            patterns.append(VisualPattern(filters=filters, weights=weights, neuron=neuron))
        else:
            raise DataError(f"unknown bank line {parts[0]!r} in {path}")
    if thresholds is None or backbone_fp is None:
        raise DataError(f"bank {path} missing thresholds or backbone fingerprint")
    return PatternBank(patterns, thresholds, backbone_fp, config_fp)


# --- subcommands -------------------------------------------------------------

_MOTIF_COLORS = {
    "cross": (1.0, 1.0, 1.0),
    "ring": (1.0, 1.0, 1.0),
    "checker": (1.0, 1.0, 1.0),
    "corner_l": (1.0, 1.0, 1.0),
    "stripes": (1.0, 1.0, 1.0),
}


def _parse_class_spec(text, motif_size):
    if "=" not in text:
        raise UsageError(f"--class needs NAME=MOTIF[+MOTIF...], got {text!r}")
    name, _, motifs = text.partition("=")
    specs = []
    for item in motifs.split("+"):
        if not item:
            continue
        kind, size, color = item, motif_size, None
        if ":" in item:
            bits = item.split(":")
            kind = bits[0]
            if len(bits) > 1 and bits[1]:
                size = int(bits[1])
            if len(bits) > 2:
                rgb = bits[2].split(",")
                color = (float(rgb[0]), float(rgb[1]), float(rgb[2]))
        if color is None:
            color = _MOTIF_COLORS.get(kind, (1.0, 1.0, 1.0))
        try:
            specs.append(MotifSpec(kind=kind, size=size, color=color))
        except ValueError as exc:
            raise UsageError(str(exc))
    return name, specs


def cmd_gen(ns, config):
    seed = _resolve(ns, config, "seed", 0, int)
    size = _resolve(ns, config, "size", 64, int)
    noise = _resolve(ns, config, "noise", 0.15, float)
    motif_size = _resolve(ns, config, "motif_size", 16, int)
    margin = _resolve(ns, config, "margin", 10, int)
    per_class = _resolve(ns, config, "per_class", 50, int)
    background = _resolve(ns, config, "background", 0, int)
    if not ns.out:
        raise UsageError("gen needs --out DIR")
    if not ns.classes:
        raise UsageError("gen needs at least one --class NAME=MOTIF")
    class_motifs = {}
    counts = {}
    for text in ns.classes:
        name, specs = _parse_class_spec(text, motif_size)
        class_motifs[name] = specs
        counts[name] = per_class
    if background > 0:
        class_motifs["background"] = []
        counts["background"] = background
    try:
        generate(class_motifs, counts, ns.out, image_size=(size, size), noise=noise,
                 seed=seed, margin=margin)
    except ValueError as exc:
        raise DataError(str(exc))
    print(f"wrote {sum(counts.values())} images to {ns.out}")
    return EXIT_OK


def _mining_inputs(ns, config):
    manifest_path = ns.manifest
    if not manifest_path or not os.path.exists(manifest_path):
        raise DataError(f"manifest not found: {manifest_path}")
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    images = [read_image(os.path.join(base, rec.path)) for rec in manifest.images]
    spec = _load_backbone(ns.weights, (manifest.height, manifest.width))
    return manifest, manifest_path, images, spec


def cmd_mine(ns, config):
    seed = _resolve(ns, config, "seed", 0, int)
    jobs = _resolve(ns, config, "jobs", os.cpu_count() or 1, int)
    n_patterns = _resolve(ns, config, "patterns", 20, int)
    top_k = _resolve(ns, config, "top_k", 3, int)
    q = _resolve(ns, config, "q", 0.75, float)
    l1 = _resolve(ns, config, "l1", 1e-3, float)
    lr = _resolve(ns, config, "lr", 0.05, float)
    batch = _resolve(ns, config, "batch", 32, int)
    iters = _resolve(ns, config, "iters", 500, int)
    if not ns.out:
        raise UsageError("mine needs --out BANKFILE")
    manifest, manifest_path, images, spec = _mining_inputs(ns, config)
    labels = np.array([rec.label for rec in manifest.images])
    if ns.positive not in set(labels):
        raise DataError(f"positive class {ns.positive!r} not present in manifest")
    pos_mask = labels == ns.positive
    if ns.negative:
        neg_mask = np.isin(labels, ns.negative)
        missing = set(ns.negative) - set(labels)
        if missing:
            raise DataError(f"negative classes not in manifest: {sorted(missing)}")
    else:
        neg_mask = ~pos_mask
    pooled = _pooled_matrix(spec, images, jobs)
    thresholds = fit_thresholds(pooled[pos_mask], q=q)
    X = binarize(pooled, thresholds)
    sel = pos_mask | neg_mask
    try:
        W, history = train_head(X[sel], pos_mask[sel].astype(float), n_patterns,
                                l1=l1, lr=lr, batch_size=batch, max_iter=iters, seed=seed)
    except SingleClassError as exc:
        raise DataError(str(exc))
    patterns = extract_patterns(W, k=top_k)
    params = dict(seed=seed, patterns=n_patterns, top_k=top_k, q=q, l1=l1, lr=lr,
                  batch=batch, iters=iters, positive=ns.positive,
                  manifest=_file_fingerprint(manifest_path), backbone=spec.fingerprint())
    bank = PatternBank(patterns, thresholds, spec.fingerprint(), _config_fingerprint(params))
    write_bank(ns.out, bank)
    print(f"trained {len(history)} iterations, final loss {history[-1]:.6f}")
    for p in patterns:
        det = np.array([detect(p, x) for x in X])
        pr = det[pos_mask].mean() if pos_mask.any() else 0.0
        nr = det[neg_mask].mean() if neg_mask.any() else 0.0
        print(f"pattern {p.neuron} filters {list(p.filters)} pos-rate {pr:.3f} neg-rate {nr:.3f}")
    print(f"wrote {len(patterns)} patterns to {ns.out}")
    return EXIT_OK


def cmd_propose(ns, config):
    jobs = _resolve(ns, config, "jobs", os.cpu_count() or 1, int)
    tau = _resolve(ns, config, "tau", 0.1, float)
    max_per_image = _resolve(ns, config, "max_per_image", 5, int)
    if not ns.out:
        raise UsageError("propose needs --out BOXFILE")
    manifest, manifest_path, images, spec = _mining_inputs(ns, config)
    banks = [read_bank(p) for p in ns.bank]
    if not banks:
        raise UsageError("propose needs at least one --bank")
    for p, bank in zip(ns.bank, banks):
        if bank.backbone_fp != spec.fingerprint() and not ns.force:
            raise DataError(
                f"bank {p} was mined with backbone {bank.backbone_fp}, current is "
                f"{spec.fingerprint()} (use --force to override)"
            )
    tasks = [(spec, im, banks, tau, max_per_image) for im in images]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_propose_worker, tasks, chunksize=4))
    else:
        results = [_propose_worker(t) for t in tasks]
    params = dict(tau=tau, max_per_image=max_per_image,
                  manifest=_file_fingerprint(manifest_path),
                  banks=",".join(b.config_fp or "-" for b in banks))
    lines = ["VPBOXES 1",
             f"manifest {_file_fingerprint(manifest_path)}",
             f"config {_config_fingerprint(params)}"]
    n_boxes = 0
    for rec, picked in zip(manifest.images, results):
        for key, box, mask in picked:
            lines.append(f"box {rec.path} {key} {box.x_min} {box.y_min} {box.x_max} {box.y_max}")
            n_boxes += 1
            if ns.masks:
                os.makedirs(ns.masks, exist_ok=True)
                stem = os.path.splitext(rec.path)[0]
                name = f"{stem}_{key.replace(':', '_')}.pgm"
                write_image(os.path.join(ns.masks, name), mask)
    with open(ns.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {n_boxes} boxes for {len(images)} images to {ns.out}")
    return EXIT_OK


def read_boxes(path):
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except FileNotFoundError:
        raise DataError(f"box file not found: {path}")
    if not lines or lines[0] != "VPBOXES 1":
        raise DataError(f"bad box file header in {path}")
    manifest_fp = None
    boxes = {}
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "manifest":
            manifest_fp = parts[1]
        elif parts[0] == "config":
            pass
        elif parts[0] == "box":
            image, key = parts[1], parts[2]
            x0, y0, x1, y1 = (int(v) for v in parts[3:7])
            boxes.setdefault(image, []).append(BBox(x_min=x0, y_min=y0, x_max=x1, y_max=y1))
        else:
            raise DataError(f"unknown box line {parts[0]!r} in {path}")
    return manifest_fp, boxes


def cmd_eval(ns, config):
    iou_thresh = _resolve(ns, config, "iou_thresh", 0.5, float)
    if not ns.manifest or not os.path.exists(ns.manifest):
        raise DataError(f"manifest not found: {ns.manifest}")
    manifest = read_manifest(ns.manifest)
    manifest_fp, proposals = read_boxes(ns.boxes)
    if manifest_fp != _file_fingerprint(ns.manifest) and not ns.force:
        raise DataError(
            f"box file {ns.boxes} was produced for manifest {manifest_fp}, not this one "
            "(use --force to override)"
        )
    gts_by_class = {}
    for rec in manifest.images:
        for box in rec.boxes:
            gts_by_class.setdefault(rec.label, []).append((rec.path, box))
    if not gts_by_class:
        raise DataError("manifest has no ground-truth boxes to evaluate against")
    class_abos = {c: abo(g, proposals) for c, g in gts_by_class.items()}
    recalls = {c: recall_at(g, proposals, iou_thresh) for c, g in gts_by_class.items()}
    mean_props = sum(len(v) for v in proposals.values()) / len(manifest.images)
    report = metrics_report(class_abos, recalls, mean_props)
    sys.stdout.write(report)
    if ns.out:
        with open(ns.out, "w") as fh:
            fh.write(report)
    return EXIT_OK


def _bank_features(pooled, banks):
    cols = []
    for bank in banks:
        X = binarize(pooled, bank.thresholds)
        for pattern in bank.patterns:
            cols.append([1.0 if detect(pattern, x) else 0.0 for x in X])
    return np.array(cols, dtype=np.float64).T


def cmd_classify(ns, config):
    seed = _resolve(ns, config, "seed", 0, int)
    jobs = _resolve(ns, config, "jobs", os.cpu_count() or 1, int)
    lr = _resolve(ns, config, "lr", 0.05, float)
    batch = _resolve(ns, config, "batch", 32, int)
    iters = _resolve(ns, config, "iters", 500, int)
    banks = [read_bank(p) for p in ns.bank]
    if not banks:
        raise UsageError("classify needs at least one --bank")
    if not ns.manifest or not os.path.exists(ns.manifest):
        raise DataError(f"manifest not found: {ns.manifest}")
    manifest, _, images, spec = _mining_inputs(ns, config)
    labels = np.array([rec.label for rec in manifest.images])
    pooled = _pooled_matrix(spec, images, jobs)
    features = _bank_features(pooled, banks)
    try:
        clf = SoftmaxHead(lr=lr, batch_size=batch, max_iter=iters, seed=seed).fit(features, labels)
    except SingleClassError as exc:
        raise DataError(str(exc))
    lines = [f"train-accuracy {clf.score(features, labels):.6f}"]
    if ns.test_manifest:
        tm = read_manifest(ns.test_manifest)
        tbase = os.path.dirname(os.path.abspath(ns.test_manifest))
        timgs = [read_image(os.path.join(tbase, rec.path)) for rec in tm.images]
        tpooled = _pooled_matrix(spec, timgs, jobs)
        tfeat = _bank_features(tpooled, banks)
        tlabels = np.array([rec.label for rec in tm.images])
        lines.append(f"test-accuracy {clf.score(tfeat, tlabels):.6f}")
        conf = clf.confusion(tfeat, tlabels)
    else:
        conf = clf.confusion(features, labels)
    lines.append("classes " + " ".join(str(c) for c in clf.classes_))
    for row in conf:
        lines.append("confusion " + " ".join(str(v) for v in row))
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if ns.out:
        with open(ns.out, "w") as fh:
            fh.write(report)
    return EXIT_OK


def cmd_describe_weights(ns, config):
    input_size = _resolve(ns, config, "input_size", 64, int)
    spec = _load_backbone(ns.weights, (input_size, input_size))
    print(spec.describe())
    print(f"fingerprint {spec.fingerprint()}")
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="vismine", description=__doc__)
    parser.add_argument("--config", help="config file of key = value defaults")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        # SUPPRESS so a --config given before the subcommand is not clobbered
        p.add_argument("--config", default=argparse.SUPPRESS)
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out")

    p = sub.add_parser("gen", help="generate a planted-motif dataset")
    common(p)
    p.add_argument("--class", dest="classes", action="append", default=[],
                   metavar="NAME=MOTIF[+MOTIF...]")
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--background", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--motif-size", dest="motif_size", type=int)
    p.add_argument("--margin", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("mine", help="mine patterns for one class")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True, help="PNWT file or 'builtin'")
    p.add_argument("--positive", required=True)
    p.add_argument("--negative", action="append", default=[])
    p.add_argument("--patterns", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--q", type=float)
    p.add_argument("--l1", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("propose", help="localize detected patterns as boxes")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--bank", action="append", default=[])
    p.add_argument("--tau", type=float)
    p.add_argument("--max-per-image", dest="max_per_image", type=int)
    p.add_argument("--masks", help="directory for PGM attribution masks")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("eval", help="score proposals against ground truth")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--iou-thresh", dest="iou_thresh", type=float)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", help="pattern features + softmax classification")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-manifest", dest="test_manifest")
    p.add_argument("--weights", required=True)
    p.add_argument("--bank", action="append", default=[])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("describe-weights", help="print backbone layer summary")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.set_defaults(func=cmd_describe_weights)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
        if not getattr(ns, "command", None):
            raise UsageError("missing subcommand (gen, mine, propose, eval, classify, describe-weights)")
        config_path = ns.config or os.environ.get(CONFIG_ENV)
        config = _read_config(config_path) if config_path else {}
        return ns.func(ns, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ManifestError, ImageFormatError, WeightFormatError, ShapeError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
