"""``dronedet`` command line tying the toolkit modules together.

Exit code 0 means success and 2 means a usage error. Runtime failures exit
with 1 after printing one ``error: type=... message=...`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import anchors as anc
from . import augment as aug
from . import datasetio as dio
from . import dilation as dil
from . import evalkit as ev
from . import matching as mt
from . import pyramid as pyr
from .graph import forward
from .tensorcore import Grid

DET_SCHEMA = "dronedet-detections/1"
WORKERS_ENV = "DRONEDET_WORKERS"


@dataclass
class RunConfig:
    seed: int = 0
    s_min: float = anc.S_MIN
    s_max: float = anc.S_MAX
    scale_decay: str = ""  # comma list; empty means the tabulated-size defaults
    crop_prob: float = 0.6
    blur_prob: float = 0.4
    flip_prob: float = 0.5
    jitter_prob: float = 0.5
    iou_threshold: float = 0.5
    workers: int = 1
    # recorded for reference; nothing here trains
    sgd_momentum: float = 0.9
    weight_decay: float = 0.0005
    learning_rate: float = 1e-3
    lr_decay: float = 0.8
    lr_decay_every_epochs: int = 5
    batch_size: int = 16

    def validate(self):
        for name in ("crop_prob", "blur_prob", "flip_prob", "jitter_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if abs(self.crop_prob + self.blur_prob - 1.0) > 1e-12:
            raise ValueError(f"crop_prob + blur_prob must be 1, got {self.crop_prob + self.blur_prob}")
        return self

    def decay_values(self):
        return [float(v) for v in self.scale_decay.split(",")] if self.scale_decay else None

    def to_text(self) -> str:
        lines = ["# dronedet run config"]
        lines += [f"{k} = {v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {ln}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise ValueError(f"config line {ln}: unknown key {k!r}")
            kw[k] = {"int": int, "float": float}.get(types[k], str)(v)
        return cls(**kw)


def _config(args) -> RunConfig:
    cfg = RunConfig.from_text(Path(args.config).read_text()) if args.config else RunConfig()
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    if getattr(args, "crop_prob", None) is not None and getattr(args, "blur_prob", None) is None:
        cfg.blur_prob = 1.0 - cfg.crop_prob
    if args.workers is None and os.environ.get(WORKERS_ENV):
        cfg.workers = int(os.environ[WORKERS_ENV])
    return cfg.validate()


def _out(line: str = ""):
    sys.stdout.write(line + "\n")


def _echo_seed(cfg: RunConfig):
    sys.stderr.write(f"# seed={cfg.seed}\n")


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- subcommands ------------------------------------------------------------


def cmd_validate_arch(args, cfg):
    g = pyr.build_detector(pyr.BackboneConfig(width_div=args.width_div))
    shapes = g.infer_shapes()
    _out("# schema=dronedet-arch/1")
    _out("feature,channels,size,stride,enhanced_size")
    enh = {r["name"][4:]: r for r in pyr.level_table(g, "enh")}
    sizes = []
    for row in pyr.level_table(g, "of"):
        k = row["name"][3:]
        e = enh.get(k)
        enh_size = f"{e['height']}*{e['width']}" if e else ""
        _out(f"{row['name']},{row['channels']},{row['height']}*{row['width']},{row['stride']},{enh_size}")
        sizes.append(row["height"])
    for name, rates in g.dilation_chains.items():
        res = dil.hdc_check(rates)
        _out(f"# chain {name} rates={','.join(map(str, rates))} hdc={'pass' if res else 'fail'}")
    ok = sizes == [128 // 2 ** i for i in range(8)]
    if args.forward:
        _echo_seed(cfg)
        x = Grid(np.random.default_rng(cfg.seed).normal(size=g.declared_input))
        t0 = time.perf_counter()
        vals = forward(g, x, cfg.seed)
        same = all(vals[k].shape == shapes[k] for k in shapes)
        sys.stderr.write(f"# forward {time.perf_counter() - t0:.2f}s\n")
        _out(f"# forward shapes_match={str(same).lower()} nodes={len(shapes)}")
        ok = ok and same
    if args.dump_graph:
        Path(args.dump_graph).write_text(g.to_text())
    _out(f"# halving_chain={'ok' if ok else 'broken'}")
    return 0 if ok else 1


def cmd_plan_dilations(args, cfg):
    rates = dil.plan_rates(args.depth, args.kernel)
    res = dil.hdc_check(rates, args.kernel)
    _out("# schema=dronedet-dilations/1")
    _out(f"rates={','.join(map(str, rates))}")
    _out(f"distances={','.join(map(str, dil.hdc_distances(rates, args.kernel)))}")
    _out(f"hdc={'pass' if res else 'fail'} reason={res.reason}")
    return 0


def cmd_coverage_map(args, cfg):
    rates = args.rates
    counts = dil.coverage_map(rates, args.kernel, args.grid_size)
    holes = dil.find_holes(counts)
    res = dil.hdc_check(rates, args.kernel)
    _out("# schema=dronedet-coverage/1")
    _out(f"rates={','.join(map(str, rates))} kernel={args.kernel} extent={dil.receptive_extent(rates, args.kernel)}")
    _out(f"holes={'true' if holes else 'false'} hole_cells={len(holes)}")
    _out(f"hdc={'pass' if res else 'fail'} reason={res.reason}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "coverage.csv", "w", newline="") as fh:
            fh.write("# schema=dronedet-coverage-grid/1\n")
            csv.writer(fh, lineterminator="\n").writerows(counts.tolist())
        from .plotting import plot_coverage_map

        plot_coverage_map(counts, out / "coverage.svg", title=f"rates [{', '.join(map(str, rates))}]")
    return 0


def _anchor_configs(args, cfg):
    if args.preset == "ssd300":
        return anc.ssd300_configs(), 300
    return anc.default_configs(cfg.decay_values(), cfg.s_min, cfg.s_max), anc.IMAGE_SIZE


def cmd_gen_anchors(args, cfg):
    configs, size = _anchor_configs(args, cfg)
    t0 = time.perf_counter()
    aset = anc.generate(configs, size)
    sys.stderr.write(f"# generated {len(aset)} anchors in {time.perf_counter() - t0:.3f}s\n")
    if args.summary or not args.csv:
        _out("# schema=dronedet-anchor-summary/1")
        _out("feature,stride,size,scale,ratio,count")
        for row in anc.summary_rows(configs):
            _out(",".join(str(row[k]) for k in ("feature", "stride", "size", "scale", "ratio", "count")))
        _out(f"total,,,,,{len(aset)}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write("# schema=dronedet-anchors/1\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "cell_y", "cell_x", "ratio_tag", "x_min", "y_min", "x_max", "y_max"])
            for i in range(len(aset)):
                cy, cx = aset.cell[i]
                w.writerow([configs[aset.layer[i]].name, cy, cx, aset.ratio_tag[i], *map(repr, map(float, aset.boxes[i]))])
    return 0


def cmd_match(args, cfg):
    records = dio.read_records(args.ann)
    configs, size = _anchor_configs(args, cfg)
    aset = anc.generate(configs, size)

    def one(rec):
        m = mt.match(aset, rec.normalized_boxes(), cfg.iou_threshold)
        layers = aset.layer[m.positive]
        return rec.image_id, len(rec.boxes), m.num_positive, int(m.forced.sum()), np.bincount(layers, minlength=len(configs))

    results = _pmap(one, records, cfg.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hist = np.zeros(len(configs), dtype=int)
    with open(out / "positives.csv", "w", newline="") as fh:
        fh.write("# schema=dronedet-match/1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "gt_boxes", "positives", "forced"])
        for image_id, n_gt, n_pos, n_forced, per_layer in results:
            w.writerow([image_id, n_gt, n_pos, n_forced])
            hist += per_layer
    with open(out / "scale_histogram.csv", "w", newline="") as fh:
        fh.write("# schema=dronedet-match-hist/1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "min_size", "max_size", "matched_anchors"])
        for c, n in zip(configs, hist):
            w.writerow([c.name, c.min_size, c.max_size, int(n)])
    _out(f"images={len(records)} positives={int(hist.sum())}")
    return 0


def _load_image(rec: dio.AnnotationRecord) -> np.ndarray:
    from PIL import Image

    with Image.open(rec.image_path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def _save_ppm(image: np.ndarray, path: Path):
    from PIL import Image

    arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PPM")


def cmd_augment(args, cfg):
    _echo_seed(cfg)
    records = dio.read_records(args.ann)[: args.limit] if args.limit else dio.read_records(args.ann)
    acfg = aug.AugmentConfig(crop_prob=cfg.crop_prob, flip_prob=cfg.flip_prob, jitter_prob=cfg.jitter_prob, out_size=args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(item):
        idx, rec = item
        rng = np.random.default_rng([cfg.seed, idx])
        sample = aug.Sample(_load_image(rec), rec.normalized_boxes(), np.ones(len(rec.boxes), dtype=int))
        res = aug.pipeline(sample, rng, acfg)
        stem = f"{idx:05d}"
        if args.preview:
            _save_ppm(sample.image, out / f"{stem}_before.ppm")
            _save_ppm(res.image, out / f"{stem}_after.ppm")
        boxes = [tuple(float(v) * args.size for v in b) for b in res.boxes]
        ops = ";".join(op for op, _ in res.history)
        return dio.AnnotationRecord(
            f"{rec.image_id}#aug{idx}", str(out / f"{stem}_after.ppm"), args.size, args.size, rec.source,
            boxes, ["drone"] * len(boxes), rec.scenario, rec.unreliable, {**rec.meta, "ops": ops},
        )

    new = _pmap(one, list(enumerate(records)), cfg.workers)
    dio.write_records(new, out / "augmented.jsonl")
    _out(f"augmented={len(new)}")
    return 0


def read_detections(path) -> list[mt.Detection]:
    dets = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if parts[0] == "image_id":
                continue
            if len(parts) not in (6, 7):
                raise ValueError(f"{path}:{ln}: expected 6 or 7 fields, got {len(parts)}")
            box = anc.Box(*map(float, parts[1:5]))
            cls = int(parts[6]) if len(parts) == 7 else 1
            dets.append(mt.Detection(parts[0], box, float(parts[5]), cls, det_id=len(dets)))
    return dets


def cmd_evaluate(args, cfg):
    records = dio.read_records(args.gt)
    if not args.include_unreliable:
        records = dio.evaluable(records)
    gts = dio.ground_truths(records)
    dets = read_detections(args.det)
    report = ev.coco_summary(dets, gts)
    files = ev.emit_report(report, args.out, svg=not args.no_svg)
    _out("# schema=dronedet-eval-summary/1")
    for k, v in report.metrics().items():
        _out(f"{k}={v!r}")
    for kind, p in files.items():
        _out(f"# wrote {kind} {p}")
    return 0


def cmd_dataset(args, cfg):
    if args.action == "ingest":
        records, rejects = dio.ingest(args.layout, args.root)
        dio.write_records(records, args.out)
        if args.rejects:
            with open(args.rejects, "w", newline="") as fh:
                fh.write("# schema=dronedet-rejects/1\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["path", "line", "reason"])
                for r in rejects:
                    w.writerow([r.path, "" if r.line is None else r.line, r.reason])
        _out(f"records={len(records)} rejects={len(rejects)}")
    elif args.action == "split":
        _echo_seed(cfg)
        records = dio.read_records(args.input)
        train, val = dio.split(records, args.val_fraction, cfg.seed)
        out = Path(args.out_dir)
        dio.write_records(train, out / "train.jsonl")
        dio.write_records(val, out / "val.jsonl")
        _out(f"train={len(train)} val={len(val)}")
    elif args.action == "stats":
        records = dio.read_records(args.input)
        if args.tag:
            records = dio.tag_scenario(records)
        _out("# schema=dronedet-dataset-stats/1")
        for k, v in dio.stats(records).items():
            _out(f"{k}={v}")
    return 0


# -- parser -----------------------------------------------------------------

INPUT_PATH_ARGS = ("config", "ann", "gt", "det", "input", "root")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"rates must be positive integers, got {text!r}")
    return vals


def _validate_paths(args):
    for name in INPUT_PATH_ARGS:
        v = getattr(args, name, None)
        if v is not None and not Path(v).exists():
            raise FileNotFoundError(f"--{name} path does not exist: {v}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help=f"worker threads (env {WORKERS_ENV})")
    common.add_argument("--iou-threshold", dest="iou_threshold", type=float)

    p = argparse.ArgumentParser(prog="dronedet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("validate-arch", parents=[common], help="print the pyramid shape/stride table")
    s.add_argument("--width-div", type=int, default=16, help="channel width divisor (1 = full ResNet-50)")
    s.add_argument("--forward", action="store_true", help="also execute a seeded forward pass")
    s.add_argument("--dump-graph", help="write the line-delimited graph description here")
    s.set_defaults(func=cmd_validate_arch)

    s = sub.add_parser("plan-dilations", parents=[common], help="smallest gridding-free rate sequence")
    s.add_argument("--depth", type=int, default=3)
    s.add_argument("--kernel", type=int, default=3)
    s.set_defaults(func=cmd_plan_dilations)

    s = sub.add_parser("coverage-map", parents=[common], help="tap coverage of serial dilated convs")
    s.add_argument("--rates", required=True, type=_int_list, help="comma-separated dilation rates")
    s.add_argument("--kernel", type=int, default=3)
    s.add_argument("--grid-size", type=int)
    s.add_argument("--out", help="directory for coverage.csv and coverage.svg")
    s.set_defaults(func=cmd_coverage_map)

    anchor_opts = argparse.ArgumentParser(add_help=False)
    anchor_opts.add_argument("--preset", choices=("default", "ssd300"), default="default")
    anchor_opts.add_argument("--s-min", dest="s_min", type=float)
    anchor_opts.add_argument("--s-max", dest="s_max", type=float)
    anchor_opts.add_argument("--scale-decay", dest="scale_decay", help="comma-separated per-level decay weights")

    s = sub.add_parser("gen-anchors", parents=[common, anchor_opts], help="enumerate default boxes")
    s.add_argument("--summary", action="store_true")
    s.add_argument("--csv", help="write every anchor to this CSV")
    s.set_defaults(func=cmd_gen_anchors)

    s = sub.add_parser("match", parents=[common, anchor_opts], help="anchor matching statistics")
    s.add_argument("--ann", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("augment", parents=[common], help="run the augmentation pipeline")
    s.add_argument("--ann", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--preview", action="store_true", help="write before/after PPM images")
    s.add_argument("--limit", type=int)
    s.add_argument("--size", type=int, default=512)
    s.add_argument("--crop-prob", dest="crop_prob", type=float)
    s.add_argument("--flip-prob", dest="flip_prob", type=float)
    s.add_argument("--jitter-prob", dest="jitter_prob", type=float)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("evaluate", parents=[common], help="COCO-style AP/AR report")
    s.add_argument("--gt", required=True)
    s.add_argument("--det", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-svg", action="store_true")
    s.add_argument("--include-unreliable", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("dataset", parents=[common], help="ingest, split or summarise annotations")
    dsub = s.add_subparsers(dest="action", metavar="ACTION", required=True)
    d = dsub.add_parser("ingest", parents=[common])
    d.add_argument("--layout", required=True, choices=sorted(dio.LAYOUTS))
    d.add_argument("--root", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--rejects")
    d = dsub.add_parser("split", parents=[common])
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--val-fraction", type=float, default=0.10)
    d = dsub.add_parser("stats", parents=[common])
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--tag", action="store_true", help="apply default scenario rules first")
    s.set_defaults(func=cmd_dataset)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        _validate_paths(args)
        cfg = _config(args)
        return args.func(args, cfg)
    except Exception as e:  # noqa: BLE001 - surfaced as one parseable line
        msg = str(e).replace("\n", " ")
        sys.stderr.write(f"error: type={type(e).__name__} message={msg}\n")
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
