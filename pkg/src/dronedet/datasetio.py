"""One annotation schema for the public drone datasets, with split and tagging helpers.

Canonical file format (UTF-8, one JSON object per line after a schema line)::

    # schema=dronedet-annotations/1
    {"image_id": ..., "image_path": ..., "width": W, "height": H,
     "source": ..., "scenario": null|"indoor"|"urban"|"countryside",
     "unreliable": false, "meta": {...},
     "boxes": [[x_min, y_min, x_max, y_max, "drone"], ...]}

Boxes are pixel corners. Keys are always written in the order above.
"""

from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

ANN_SCHEMA = "dronedet-annotations/1"
SOURCES = ("real_world", "det_fly", "midgard", "drone_vs_bird", "usc_drone")
SCENARIOS = ("indoor", "urban", "countryside")
# higher is harder
DIFFICULTY = {"indoor": 3, "urban": 2, "countryside": 1}
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")


@dataclass
class AnnotationRecord:
    image_id: str
    image_path: str
    width: int
    height: int
    source: str
    boxes: list = field(default_factory=list)  # [(x_min, y_min, x_max, y_max)]
    classes: list = field(default_factory=list)  # parallel to boxes
    scenario: str | None = None
    unreliable: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: image size must be positive")
        if self.source not in SOURCES:
            raise ValueError(f"{self.image_id}: unknown source {self.source!r}")
        if self.scenario is not None and self.scenario not in SCENARIOS:
            raise ValueError(f"{self.image_id}: unknown scenario {self.scenario!r}")
        if len(self.classes) != len(self.boxes):
            raise ValueError(f"{self.image_id}: boxes and classes differ in length")

    def normalized_boxes(self) -> np.ndarray:
        b = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        return b / [self.width, self.height, self.width, self.height]

    def to_json(self) -> str:
        doc = {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "width": self.width,
            "height": self.height,
            "source": self.source,
            "scenario": self.scenario,
            "unreliable": self.unreliable,
            "meta": self.meta,
            "boxes": [[*map(float, b), c] for b, c in zip(self.boxes, self.classes)],
        }
        return json.dumps(doc, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "AnnotationRecord":
        d = json.loads(line)
        return cls(
            image_id=d["image_id"], image_path=d["image_path"], width=int(d["width"]), height=int(d["height"]),
            source=d["source"], boxes=[tuple(b[:4]) for b in d["boxes"]], classes=[b[4] for b in d["boxes"]],
            scenario=d.get("scenario"), unreliable=bool(d.get("unreliable", False)), meta=d.get("meta", {}),
        )


def from_normalized(record: AnnotationRecord, boxes) -> list[tuple]:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * [record.width, record.height, record.width, record.height]
    return [tuple(map(float, row)) for row in b]


@dataclass
class Reject:
    path: str
    reason: str
    line: int | None = None


def write_records(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# schema={ANN_SCHEMA}\n")
        for r in records:
            fh.write(r.to_json() + "\n")
    return path


def read_records(path) -> list[AnnotationRecord]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != f"# schema={ANN_SCHEMA}":
            raise ValueError(f"{path}: expected '# schema={ANN_SCHEMA}', got {first!r}")
        return [AnnotationRecord.from_json(line) for line in fh if line.strip()]


# -- ingestion ---------------------------------------------------------------


def _clamp(box, w, h, path, rejects, line=None):
    x1, y1, x2, y2 = box
    c = (min(max(x1, 0.0), w), min(max(y1, 0.0), h), min(max(x2, 0.0), w), min(max(y2, 0.0), h))
    if c != tuple(box):
        rejects.append(Reject(str(path), f"box {tuple(box)} clamped to image {w}x{h}", line))
    if c[2] <= c[0] or c[3] <= c[1]:
        rejects.append(Reject(str(path), f"box {tuple(box)} empty after clamping; dropped", line))
        return None
    return tuple(float(v) for v in c)


def _find_image(directory: Path, stem: str) -> Path | None:
    for suf in IMAGE_SUFFIXES:
        p = directory / f"{stem}{suf}"
        if p.exists():
            return p
    return None


def _read_meta(path: Path) -> dict:
    meta = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line and not line.startswith("#") and "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    return meta


def _ingest_yolo(root: Path, source: str, class_names: dict, rejects: list) -> list[AnnotationRecord]:
    """images/<stem>.<ext> + labels/<stem>.txt with normalised "cls cx cy w h" rows."""
    records = []
    for labels in sorted(p for p in root.rglob("labels") if p.is_dir()):
        images = labels.parent / "images"
        meta = _read_meta(labels.parent / "meta.txt")
        if labels.parent.name in ("train", "test", "val"):
            meta.setdefault("split", labels.parent.name)
        for txt in sorted(labels.glob("*.txt")):
            img = _find_image(images, txt.stem)
            if img is None:
                rejects.append(Reject(str(txt), "no matching image"))
                continue
            try:
                with Image.open(img) as im:
                    w, h = im.size
            except OSError as e:
                rejects.append(Reject(str(img), f"unreadable image: {e}"))
                continue
            boxes, classes = [], []
            for ln, row in enumerate(txt.read_text(encoding="utf-8").splitlines(), 1):
                if not row.strip():
                    continue
                parts = row.split()
                try:
                    cls, cx, cy, bw, bh = int(parts[0]), *map(float, parts[1:5])
                    if len(parts) != 5:
                        raise ValueError
                except (ValueError, IndexError):
                    rejects.append(Reject(str(txt), f"malformed row {row!r}", ln))
                    continue
                box = ((cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h)
                box = _clamp(box, w, h, txt, rejects, ln)
                if box is not None:
                    boxes.append(box)
                    classes.append(class_names.get(cls, f"class{cls}"))
            rel = img.relative_to(root).with_suffix("")
            records.append(AnnotationRecord(f"{source}/{rel.as_posix()}", str(img), w, h, source, boxes, classes, meta=dict(meta)))
    return records


def _ingest_voc(root: Path, source: str, rejects: list) -> list[AnnotationRecord]:
    """Pascal-VOC XML files; images resolved next to the XML or in sibling image folders."""
    records = []
    for xml in sorted(root.rglob("*.xml")):
        try:
            tree = ET.parse(xml).getroot()
            fname = tree.findtext("filename")
            w = int(float(tree.findtext("size/width")))
            h = int(float(tree.findtext("size/height")))
        except (ET.ParseError, TypeError, ValueError) as e:
            rejects.append(Reject(str(xml), f"malformed annotation: {e}"))
            continue
        img = None
        for d in (xml.parent, xml.parent.parent / "images", xml.parent.parent / "JPEGImages"):
            if fname and (d / fname).exists():
                img = d / fname
                break
        meta = {}
        for key in ("background", "environment", "scene"):
            v = tree.findtext(key)
            if v:
                meta[key] = v.strip()
        boxes, classes = [], []
        for i, obj in enumerate(tree.iter("object")):
            try:
                bb = obj.find("bndbox")
                box = tuple(float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax"))
            except (AttributeError, TypeError, ValueError):
                rejects.append(Reject(str(xml), f"object {i} has no valid bndbox"))
                continue
            box = _clamp(box, w, h, xml, rejects)
            if box is not None:
                boxes.append(box)
                classes.append((obj.findtext("name") or "drone").strip())
        rel = xml.relative_to(root).with_suffix("")
        records.append(AnnotationRecord(
            f"{source}/{rel.as_posix()}", str(img or xml.with_name(fname or xml.stem)), w, h, source, boxes, classes,
            unreliable=source == "usc_drone", meta=meta,
        ))
    return records


def _ingest_dvb(root: Path, rejects: list) -> list[AnnotationRecord]:
    """annotations/<video>.txt rows "frame n [x y w h label]*", frames at images/<video>/<frame>.<ext>."""
    records = []
    ann_dir = root / "annotations"
    for txt in sorted(ann_dir.glob("*.txt")) if ann_dir.is_dir() else []:
        video = txt.stem
        for ln, row in enumerate(txt.read_text(encoding="utf-8").splitlines(), 1):
            parts = row.split()
            if not parts:
                continue
            try:
                frame, n = int(parts[0]), int(parts[1])
                if len(parts) != 2 + 5 * n:
                    raise ValueError(f"expected {n} objects")
            except (ValueError, IndexError) as e:
                rejects.append(Reject(str(txt), f"malformed row: {e}", ln))
                continue
            img = _find_image(root / "images" / video, f"{frame:05d}")
            if img is None:
                rejects.append(Reject(str(txt), f"frame {frame} has no image", ln))
                continue
            with Image.open(img) as im:
                w, h = im.size
            boxes, classes = [], []
            for k in range(n):
                x, y, bw, bh = map(float, parts[2 + 5 * k : 6 + 5 * k])
                box = _clamp((x, y, x + bw, y + bh), w, h, txt, rejects, ln)
                if box is not None:
                    boxes.append(box)
                    classes.append(parts[6 + 5 * k])
            records.append(AnnotationRecord(f"drone_vs_bird/{video}/{frame:05d}", str(img), w, h, "drone_vs_bird",
                                            boxes, classes, meta={"video": video}))
    return records


LAYOUTS = {
    "real_world": lambda root, rej: _ingest_yolo(root, "real_world", {0: "drone"}, rej),
    "midgard": lambda root, rej: _ingest_yolo(root, "midgard", {0: "drone"}, rej),
    "det_fly": lambda root, rej: _ingest_voc(root, "det_fly", rej),
    "usc_drone": lambda root, rej: _ingest_voc(root, "usc_drone", rej),
    "drone_vs_bird": _ingest_dvb,
}


def ingest(layout: str, root) -> tuple[list[AnnotationRecord], list[Reject]]:
    """Read one dataset layout into canonical records plus a rejects report."""
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {sorted(LAYOUTS)}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    rejects: list[Reject] = []
    records = LAYOUTS[layout](root, rejects)
    return records, rejects


# -- splitting and tagging ----------------------------------------------------


def split(records, val_fraction: float = 0.10, seed: int = 0):
    """Seeded, source-stratified train/validation partition.

    The total validation count is round(N * val_fraction); per-source quotas
    use largest remainders so each source lands within one record of its
    exact share.
    """
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    records = list(records)
    groups = defaultdict(list)
    for r in records:
        groups[r.source].append(r)
    sources = sorted(groups)
    total = math.floor(len(records) * val_fraction + 0.5)
    exact = {s: len(groups[s]) * val_fraction for s in sources}
    quota = {s: math.floor(exact[s]) for s in sources}
    leftover = total - sum(quota.values())
    for s in sorted(sources, key=lambda s: (-(exact[s] - quota[s]), s))[:leftover]:
        quota[s] += 1
    rng = np.random.default_rng(seed)
    val_ids = set()
    for s in sources:
        members = sorted(groups[s], key=lambda r: r.image_id)
        perm = rng.permutation(len(members))
        val_ids.update(members[i].image_id for i in perm[: quota[s]])
    train = [r for r in records if r.image_id not in val_ids]
    val = [r for r in records if r.image_id in val_ids]
    return train, val


DEFAULT_SCENARIO_RULES = {
    "midgard": ("environment", {
        "indoor": "indoor", "urban": "urban", "outdoor_urban": "urban",
        "countryside": "countryside", "rural": "countryside", "outdoor_rural": "countryside",
    }),
    "det_fly": ("background", {"city": "urban", "urban": "urban", "field": "countryside", "mountain": "countryside"}),
}


def tag_scenario(records, rules=None) -> list[AnnotationRecord]:
    """Attach difficulty scenarios from source metadata; unmatched records stay untagged."""
    rules = DEFAULT_SCENARIO_RULES if rules is None else rules
    out = []
    for r in records:
        key, table = rules.get(r.source, (None, {}))
        label = r.meta.get(key) if key else None
        scen = table.get(label.lower()) if isinstance(label, str) else None
        out.append(replace(r, scenario=scen) if scen else r)
    return out


def evaluable(records) -> list[AnnotationRecord]:
    """Records usable for default evaluation (drops shared-label sources)."""
    return [r for r in records if not r.unreliable]


def stats(records) -> dict:
    records = list(records)
    areas = [(b[2] - b[0]) * (b[3] - b[1]) for r in records for b in r.boxes]
    return {
        "images": len(records),
        "boxes": sum(len(r.boxes) for r in records),
        "by_source": dict(sorted(Counter(r.source for r in records).items())),
        "by_scenario": dict(sorted(Counter(r.scenario or "untagged" for r in records).items())),
        "unreliable": sum(r.unreliable for r in records),
        "small": sum(a < 32 ** 2 for a in areas),
        "medium": sum(32 ** 2 <= a <= 96 ** 2 for a in areas),
        "large": sum(a > 96 ** 2 for a in areas),
    }


def ground_truths(records, class_map=None):
    """Flatten records into evaluator ground truths (pixel boxes)."""
    from .evalkit import GroundTruth

    class_map = class_map or {"drone": 1}
    out = []
    for r in records:
        for b, c in zip(r.boxes, r.classes):
            if c in class_map:
                out.append(GroundTruth(r.image_id, tuple(b), class_map[c]))
    return out
