"""End-to-end CLI flows on tiny datasets."""

import json

import numpy as np
import pytest

from pmode.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rc = main(["generate", "--count", "6", "--seed", "5", "--profiles", "2",
               "--occlusion-rate", "0.0", "--image-size", "128",
               "--out", str(root / "data")])
    assert rc == 0
    cfg = {
        "dataset": str(root / "data" / "manifest.json"),
        "out_dir": str(root / "run"),
        "epochs": 1,
        "batch_size": 4,
        "max_steps": 1,
        "eval_interval": 1,
        "seed": 0,
        "corner_loss_enabled": False,
        "network": {"input_size": 128, "backbone_preset": "tiny"},
    }
    (root / "cfg.json").write_text(json.dumps(cfg))
    rc = main(["train", "--config", str(root / "cfg.json")])
    assert rc == 0
    return root


def test_generate_writes_manifest(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert len(manifest["frames"]) == 6
    assert (workspace / "data" / "frame_000000.png").exists()


def test_train_writes_checkpoint(workspace):
    assert (workspace / "run" / "best.npz").exists()
    assert (workspace / "run" / "loss_log.csv").exists()


def test_eval_writes_report(workspace):
    rc = main(["eval", "--checkpoint", str(workspace / "run" / "best.npz"),
               "--data", str(workspace / "data" / "manifest.json"),
               "--out", str(workspace / "report.json")])
    assert rc == 0
    report = json.loads((workspace / "report.json").read_text())
    assert {"bbox_map", "segm_map", "hnw_mape", "val_l1"} <= set(report)


def test_infer_outputs(workspace):
    rc = main(["infer", "--checkpoint", str(workspace / "run" / "best.npz"),
               "--frames", str(workspace / "data"),
               "--out", str(workspace / "overlays"),
               "--csv", str(workspace / "dims.csv"),
               "--consistency", str(workspace / "consistency.json")])
    assert rc == 0
    csv_text = (workspace / "dims.csv").read_text()
    assert csv_text.startswith(
        "frame_index,track_id,x1,y1,x2,y2,width_m,height_m,score")
    report = json.loads((workspace / "consistency.json").read_text())
    assert "max_cv" in report and "passed" in report
    overlays = list((workspace / "overlays").glob("*.png"))
    assert len(overlays) == 6


def test_infer_deterministic_csv(workspace):
    for name in ("a.csv", "b.csv"):
        rc = main(["infer", "--checkpoint", str(workspace / "run" / "best.npz"),
                   "--frames", str(workspace / "data"),
                   "--csv", str(workspace / name)])
        assert rc == 0
    assert (workspace / "a.csv").read_bytes() == (workspace / "b.csv").read_bytes()


def test_infer_empty_directory(workspace, tmp_path):
    empty = tmp_path / "none"
    empty.mkdir()
    with pytest.warns(UserWarning):
        rc = main(["infer", "--checkpoint", str(workspace / "run" / "best.npz"),
                   "--frames", str(empty),
                   "--csv", str(tmp_path / "dims.csv"),
                   "--consistency", str(tmp_path / "c.json")])
    assert rc == 0
    assert (tmp_path / "dims.csv").read_text().strip().splitlines() == [
        "frame_index,track_id,x1,y1,x2,y2,width_m,height_m,score"]
    assert json.loads((tmp_path / "c.json").read_text())["passed"] is True


def test_unknown_command_rejected():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
