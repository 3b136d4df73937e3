import re
import subprocess
import sys

import pytest

from dronedet.cli import RunConfig, read_detections, run
from dronedet.dilation import coverage_map, has_holes
from conftest import make_yolo

ERROR_LINE = re.compile(r"^error: type=\w+ message=.+$")


def call(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_no_args_usage_exit_2():
    proc = subprocess.run([sys.executable, "-m", "dronedet"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.startswith("usage:")


def test_unknown_flag_exit_2(capsys):
    code, _, err = call(capsys, "gen-anchors", "--bogus")
    assert code == 2 and "usage:" in err


def test_gen_anchors_summary(capsys):
    code, out, _ = call(capsys, "gen-anchors", "--summary")
    lines = out.splitlines()
    assert code == 0 and lines[0] == "# schema=dronedet-anchor-summary/1"
    assert lines[2] == "of_1,4,128*128,28(56),1:(1,0.5,2),65536"
    assert lines[-1] == "total,,,,,98292"
    code, out, _ = call(capsys, "gen-anchors", "--preset", "ssd300")
    assert out.splitlines()[-1] == "total,,,,,8732"


def test_gen_anchors_csv(capsys, tmp_path):
    path = tmp_path / "a.csv"
    assert call(capsys, "gen-anchors", "--csv", str(path))[0] == 0
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema=dronedet-anchors/1"
    assert lines[1] == "layer,cell_y,cell_x,ratio_tag,x_min,y_min,x_max,y_max"
    assert len(lines) == 2 + 98292


@pytest.mark.parametrize("rates", ["1,2,3", "1,2,4", "3,3,3"])
def test_coverage_map_agrees_with_module(capsys, tmp_path, rates):
    code, out, _ = call(capsys, "coverage-map", "--rates", rates, "--out", str(tmp_path))
    expect = has_holes(coverage_map([int(r) for r in rates.split(",")]))
    assert code == 0 and f"holes={str(expect).lower()}" in out
    assert (tmp_path / "coverage.csv").read_text().startswith("# schema=dronedet-coverage-grid/1")
    assert (tmp_path / "coverage.svg").exists()


def test_coverage_map_gridding_case(capsys):
    assert "holes=true" in call(capsys, "coverage-map", "--rates", "3,3,3")[1]
    assert call(capsys, "coverage-map", "--rates", "0,1")[0] == 2


def test_plan_dilations(capsys):
    code, out, _ = call(capsys, "plan-dilations", "--depth", "3")
    assert code == 0 and "rates=1,2,3" in out and "hdc=pass" in out


def test_validate_arch(capsys, tmp_path):
    code, out, err = call(capsys, "validate-arch", "--forward", "--seed", "4", "--dump-graph", str(tmp_path / "g.txt"))
    assert code == 0
    assert "# halving_chain=ok" in out and "shapes_match=true" in out
    assert "# seed=4" in err
    assert (tmp_path / "g.txt").read_text().startswith("# dronedet-graph/1")


@pytest.fixture
def dataset(tmp_path, capsys):
    root = make_yolo(tmp_path / "rw")
    ann = tmp_path / "ann.jsonl"
    code, out, _ = call(capsys, "dataset", "ingest", "--layout", "midgard", "--root", str(root),
                        "--out", str(ann), "--rejects", str(tmp_path / "rej.csv"))
    assert code == 0 and out.strip() == "records=3 rejects=1"
    return ann


def test_dataset_split_and_stats(capsys, tmp_path, dataset):
    code, out, err = call(capsys, "dataset", "split", "--in", str(dataset), "--out-dir", str(tmp_path / "s"),
                          "--val-fraction", "0.34", "--seed", "2")
    assert code == 0 and out.strip() == "train=2 val=1" and "# seed=2" in err
    code, out, _ = call(capsys, "dataset", "stats", "--in", str(dataset), "--tag")
    assert "images=3" in out and "boxes=4" in out and "'indoor': 3" in out


def test_match(capsys, tmp_path, dataset):
    code, out, _ = call(capsys, "match", "--ann", str(dataset), "--out", str(tmp_path / "m"))
    assert code == 0
    rows = (tmp_path / "m" / "positives.csv").read_text().splitlines()
    assert rows[0] == "# schema=dronedet-match/1" and len(rows) == 2 + 3
    assert all(int(r.split(",")[2]) >= int(r.split(",")[1]) for r in rows[2:])
    hist = (tmp_path / "m" / "scale_histogram.csv").read_text().splitlines()
    assert len(hist) == 2 + 8


def test_augment_reproducible(capsys, tmp_path, dataset, monkeypatch):
    args = ["augment", "--ann", str(dataset), "--preview", "--size", "32", "--seed", "9"]
    assert call(capsys, *args, "--out", str(tmp_path / "a1"))[0] == 0
    monkeypatch.setenv("DRONEDET_WORKERS", "3")
    assert call(capsys, *args, "--out", str(tmp_path / "a2"))[0] == 0
    for name in ("augmented.jsonl", "00000_after.ppm", "00002_before.ppm"):
        a, b = (tmp_path / "a1" / name).read_bytes(), (tmp_path / "a2" / name).read_bytes()
        if name.endswith(".jsonl"):
            a, b = a.replace(b"/a1/", b"/"), b.replace(b"/a2/", b"/")
        assert a == b


def test_evaluate(capsys, tmp_path, dataset):
    det = tmp_path / "det.csv"
    det.write_text("# schema=dronedet-detections/1\nimage_id,x_min,y_min,x_max,y_max,score\n"
                   "midgard/train/images/a,24,18,40,30,0.9\nmidgard/train/images/c,0,0,5,5,0.3,1\n")
    assert len(read_detections(det)) == 2
    code, out, _ = call(capsys, "evaluate", "--gt", str(dataset), "--det", str(det), "--out", str(tmp_path / "e"))
    assert code == 0 and out.startswith("# schema=dronedet-eval-summary/1")
    assert "ar_50=0.25" in out
    first = (tmp_path / "e" / "metrics.csv").read_bytes()
    svg = (tmp_path / "e" / "pr_curve.svg").read_bytes()
    call(capsys, "evaluate", "--gt", str(dataset), "--det", str(det), "--out", str(tmp_path / "e"))
    assert (tmp_path / "e" / "metrics.csv").read_bytes() == first
    assert (tmp_path / "e" / "pr_curve.svg").read_bytes() == svg


def test_runtime_error_line(capsys, tmp_path):
    code, _, err = call(capsys, "evaluate", "--gt", str(tmp_path / "nope"), "--det", "x", "--out", str(tmp_path))
    assert code == 1 and ERROR_LINE.match(err.strip())
    bad = tmp_path / "det.csv"
    bad.write_text("a,1,2\n")
    ann = tmp_path / "ann.jsonl"
    ann.write_text("# schema=dronedet-annotations/1\n")
    code, _, err = call(capsys, "evaluate", "--gt", str(ann), "--det", str(bad), "--out", str(tmp_path / "o"))
    assert code == 1 and "type=ValueError" in err


def test_config_round_trip_and_override(capsys, tmp_path):
    cfg = RunConfig(seed=5, crop_prob=0.7, blur_prob=0.3)
    assert RunConfig.from_text(cfg.to_text()) == cfg
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    _, _, err = call(capsys, "validate-arch", "--config", str(path), "--forward")
    assert "# seed=5" in err
    _, _, err = call(capsys, "validate-arch", "--config", str(path), "--forward", "--seed", "8")
    assert "# seed=8" in err
    path.write_text("crop_prob = 1.5\n")
    code, _, err = call(capsys, "plan-dilations", "--config", str(path))
    assert code == 1 and "crop_prob" in err
    path.write_text("mystery = 1\n")
    assert call(capsys, "plan-dilations", "--config", str(path))[0] == 1
