import sys

import numpy as np
import pytest
from PIL import Image


def write_image(path, w, h, seed=0):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)
    return path


def make_yolo(root, meta="environment=indoor\n"):
    """3 images, 4 boxes; the last box overhangs the right edge."""
    split = root / "train"
    write_image(split / "images" / "a.png", 64, 48, 1)
    write_image(split / "images" / "b.png", 64, 48, 2)
    write_image(split / "images" / "c.png", 80, 60, 3)
    (split / "labels").mkdir(parents=True)
    (split / "labels" / "a.txt").write_text("0 0.5 0.5 0.25 0.25\n")
    (split / "labels" / "b.txt").write_text("0 0.25 0.25 0.125 0.125\n0 0.75 0.5 0.25 0.25\n")
    (split / "labels" / "c.txt").write_text("0 0.95 0.5 0.2 0.2\n")
    if meta:
        (split / "meta.txt").write_text(meta)
    return root


VOC = """<annotation><filename>{name}</filename><size><width>64</width><height>48</height></size>
<background>{bg}</background>
<object><name>drone</name><bndbox><xmin>4</xmin><ymin>6</ymin><xmax>20</xmax><ymax>18</ymax></bndbox></object>
</annotation>"""


def make_voc(root, n=2, bg="city"):
    for i in range(n):
        write_image(root / "images" / f"f{i}.jpg", 64, 48, i)
        (root / "Annotations").mkdir(parents=True, exist_ok=True)
        (root / "Annotations" / f"f{i}.xml").write_text(VOC.format(name=f"f{i}.jpg", bg=bg))
    return root


def make_dvb(root):
    write_image(root / "images" / "vid" / "00001.png", 64, 48)
    write_image(root / "images" / "vid" / "00002.png", 64, 48)
    (root / "annotations").mkdir(parents=True)
    (root / "annotations" / "vid.txt").write_text("1 1 10 10 8 6 drone\n2 0\n3 1 1 1 1\n")
    return root


@pytest.fixture
def yolo_root(tmp_path):
    return make_yolo(tmp_path / "rw")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
