import json
import os

import numpy as np
import pytest

from psvq import cli
from psvq.cli import CliError, _parse_prefixes, _parse_shape, main


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """Run the full command pipeline once on a tiny problem."""
    out = tmp_path_factory.mktemp("pipeline")
    d = str(out)
    assert main(["phantom", "--kind", "brain", "--grid", "16x16",
                 "--out", d]) == 0
    assert main(["simulate", "--phantom", os.path.join(d, "phantom.psvq"),
                 "--out", d]) == 0
    data = os.path.join(d, "dataset.psvq")
    assert main(["train", "--data", data, "--mode", "fitting",
                 "--epochs", "8", "--out", d]) == 0
    assert main(["infer", "--data", data,
                 "--weights", os.path.join(d, "weights.psvq"),
                 "--out", d]) == 0
    assert main(["reference", "--data", data, "--grid", "30x30",
                 "--voxels", "12", "--out", d]) == 0
    assert main(["compare", "--data", data,
                 "--posterior", os.path.join(d, "posterior.bin"),
                 "--reference", os.path.join(d, "reference.psvq"),
                 "--samples", "200", "--out", d]) == 0
    assert main(["track", "--data", data, "--grid", "20x20",
                 "--voxels", "4", "--prefixes", "5..30..10",
                 "--out", d]) == 0
    assert main(["report", "--dir", d, "--out", d]) == 0
    return out


def test_pipeline_artifacts(pipeline_dir):
    names = {p.name for p in pipeline_dir.iterdir()}
    expect = {"phantom.psvq", "dataset.psvq", "weights.psvq",
              "train_report.csv", "train_meta.json", "posterior.bin",
              "posterior.bin.json", "maps.csv", "infer_meta.json",
              "reference.psvq", "compare.csv", "compare.json",
              "track.csv", "track_meta.json", "report"}
    assert expect <= names
    svgs = {n for n in names if n.endswith(".svg")}
    assert {"map_f.svg", "map_k.svg", "ci_half_f.svg",
            "ci_half_k.svg"} <= svgs
    report_svgs = {p.name for p in (pipeline_dir / "report").iterdir()}
    assert "training.svg" in report_svgs
    assert "rho.svg" in report_svgs
    assert any(n.startswith("ellipses_voxel") for n in report_svgs)


def test_compare_json_contents(pipeline_dir):
    with open(pipeline_dir / "compare.json") as fh:
        summary = json.load(fh)
    for key in ("nrmse_nn_mean_pct", "ci_intersect_pct", "m1_median",
                "m2_gt4_pct", "speed_ratio"):
        assert key in summary
    assert summary["speed_ratio"] > 1.0


def test_track_meta_contents(pipeline_dir):
    with open(pipeline_dir / "track_meta.json") as fh:
        meta = json.load(fh)
    assert meta["n_full"] == 30
    assert meta["prefixes"][-1] == 30
    assert len(meta["coverage"]) == 2


def test_maps_csv_row_count(pipeline_dir):
    lines = (pipeline_dir / "maps.csv").read_text().strip().splitlines()
    with open(pipeline_dir / "infer_meta.json") as fh:
        n_vox = json.load(fh)["n_voxels"]
    assert len(lines) == n_vox + 1


def test_cli_determinism(tmp_path):
    outs = []
    for sub in ("a", "b"):
        d = str(tmp_path / sub)
        assert main(["phantom", "--kind", "brain", "--grid", "12x12",
                     "--out", d]) == 0
        assert main(["simulate", "--phantom",
                     os.path.join(d, "phantom.psvq"), "--out", d]) == 0
        assert main(["train", "--data", os.path.join(d, "dataset.psvq"),
                     "--epochs", "4", "--out", d]) == 0
        assert main(["infer", "--data", os.path.join(d, "dataset.psvq"),
                     "--weights", os.path.join(d, "weights.psvq"),
                     "--out", d]) == 0
        outs.append(d)
    for name in ("phantom.psvq", "dataset.psvq", "weights.psvq",
                 "posterior.bin", "map_f.svg"):
        a = open(os.path.join(outs[0], name), "rb").read()
        b = open(os.path.join(outs[1], name), "rb").read()
        assert a == b, f"{name} differs between identical runs"


def test_error_exit_codes(tmp_path, capsys):
    d = str(tmp_path)
    # missing dataset: validation error, exit 2, JSON on stderr
    code = main(["infer", "--data", os.path.join(d, "nope.psvq"),
                 "--weights", os.path.join(d, "nope2.psvq"), "--out", d])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "CliError"
    assert err["command"] == "infer"
    # bad shape spec
    assert main(["phantom", "--grid", "16by16", "--out", d]) == 2
    capsys.readouterr()
    # missing required argument
    assert main(["simulate", "--out", d]) == 2
    capsys.readouterr()


def test_config_file_resolution(tmp_path, capsys):
    d = str(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"kind": "vial", "grid": "20x20"}))
    assert main(["phantom", "--config", str(cfg), "--out", d]) == 0
    out = capsys.readouterr().out
    assert "vial 20x20" in out
    # CLI flag overrides the config value
    assert main(["phantom", "--config", str(cfg), "--grid", "16x16",
                 "--out", d]) == 0
    assert "vial 16x16" in capsys.readouterr().out
    # malformed config: validation error
    cfg.write_text("[1, 2]")
    assert main(["phantom", "--config", str(cfg), "--out", d]) == 2
    capsys.readouterr()


def test_parse_helpers():
    assert _parse_shape("64x48") == (64, 48)
    assert _parse_shape("8X8") == (8, 8)
    with pytest.raises(CliError):
        _parse_shape("64")
    assert _parse_prefixes("2..6") == [2, 3, 4, 5, 6]
    assert _parse_prefixes("2..10..4") == [2, 6, 10]
    for bad in ("5", "0..4", "6..2", "2..8..0"):
        with pytest.raises(CliError):
            _parse_prefixes(bad)


def test_report_without_artifacts(tmp_path, capsys):
    d = str(tmp_path / "empty")
    os.makedirs(d)
    assert main(["report", "--dir", d, "--out", d]) == 2
    capsys.readouterr()
