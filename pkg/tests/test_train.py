"""Training-loop contracts: config round-trip, track-safe splits, smoke
training, bitwise determinism, and divergence handling."""

import math

import numpy as np
import pytest
import torch

from pmode.model import NetworkConfig
from pmode.scene import default_profiles, generate_dataset
from pmode.train import (
    FrameStore,
    TrainConfig,
    TrainingDiverged,
    run_ablation,
    split_by_track,
    train,
)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "data"
    generate_dataset(12, seed=3, profiles=default_profiles((128, 128)),
                     out_dir=out)
    return out / "manifest.json"


def smoke_config(manifest, out_dir, **kw):
    base = dict(dataset=str(manifest), out_dir=str(out_dir), epochs=1,
                batch_size=4, eval_interval=1, seed=0,
                network=NetworkConfig.desk())
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(val_fraction=1.0)
        with pytest.raises(ValueError):
            TrainConfig(lr_schedule="step")
        with pytest.raises(ValueError):
            TrainConfig(depth_mode="concat")
        with pytest.raises(ValueError):
            TrainConfig(eval_interval=0)
        with pytest.raises(ValueError):
            TrainConfig(corner_weight=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(dim_lr_scale=0.0)

    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(dataset="d/manifest.json", epochs=7, seed=11,
                          depth_mode="multiply", corner_loss_enabled=False,
                          network=NetworkConfig.desk(), label="row-a")
        path = tmp_path / "cfg.json"
        cfg.to_json(path)
        assert TrainConfig.from_json(path) == cfg

    def test_missing_dataset_fails_at_launch(self, tmp_path):
        cfg = smoke_config(tmp_path / "nope.json", tmp_path / "run")
        with pytest.raises(FileNotFoundError):
            train(cfg)


class TestSplit:
    def test_tracks_never_straddle(self, small_dataset):
        store = FrameStore(small_dataset, 128)
        train_ids, val_ids = split_by_track(store, 0.2, seed=5)
        assert not set(train_ids) & set(val_ids)
        assert sorted(train_ids + val_ids) == sorted(store.image_ids)
        val_tracks = {store.track_of(i) for i in val_ids}
        train_tracks = {store.track_of(i) for i in train_ids}
        assert not val_tracks & train_tracks

    def test_ratio_and_determinism(self, small_dataset):
        store = FrameStore(small_dataset, 128)
        a = split_by_track(store, 0.2, seed=5)
        assert split_by_track(store, 0.2, seed=5) == a
        n_total = len(store.image_ids)
        assert 0 < len(a[1]) < n_total


class TestFrameStore:
    def test_load_resizes(self, small_dataset):
        store = FrameStore(small_dataset, 128)
        frame = store.load(store.image_ids[0])
        assert frame.image.shape == (128, 128, 3)
        assert len(frame.polygons) >= 1
        for poly in frame.polygons:
            assert poly.min() >= 0 and poly.max() <= 128

    def test_depth_loading(self, small_dataset):
        store = FrameStore(small_dataset, 128, depth_mode="multiply")
        depth = store.load_depth(store.image_ids[0])
        assert depth.shape == (128, 128)
        assert np.isfinite(depth).all() and depth.min() > 0


class TestTrainLoop:
    def test_smoke_one_epoch(self, small_dataset, tmp_path):
        res = train(smoke_config(small_dataset, tmp_path / "run"))
        assert res.best_checkpoint.exists()
        assert not res.diverged
        lines = res.loss_log.read_text().strip().splitlines()
        assert lines[0] == "step,l_seg,l_corner,l_hnw,l_bbox,l_cls,l_total"
        assert len(lines) > 1
        for row in lines[1:]:
            vals = [float(v) for v in row.split(",")[1:]]
            assert all(math.isfinite(v) for v in vals)
        assert len(res.history) >= 1
        assert 0.0 <= res.report.hnw_mape or math.isnan(res.report.hnw_mape)

    def test_bitwise_deterministic(self, small_dataset, tmp_path):
        a = train(smoke_config(small_dataset, tmp_path / "a", max_steps=3))
        b = train(smoke_config(small_dataset, tmp_path / "b", max_steps=3))
        assert a.loss_log.read_bytes() == b.loss_log.read_bytes()
        assert a.history == b.history

    def test_divergence_aborts_with_checkpoint(self, small_dataset, tmp_path):
        cfg = smoke_config(small_dataset, tmp_path / "run",
                           learning_rate=1e18, epochs=3)
        with pytest.raises(TrainingDiverged) as info:
            train(cfg)
        assert info.value.checkpoint is not None
        assert info.value.checkpoint.exists()

    def test_depth_and_no_corner_variants(self, small_dataset, tmp_path):
        res = train(smoke_config(small_dataset, tmp_path / "run",
                                 depth_mode="multiply",
                                 corner_loss_enabled=False, max_steps=2))
        rows = res.loss_log.read_text().strip().splitlines()[1:]
        for row in rows:
            assert float(row.split(",")[2]) == 0.0  # corner column off


class TestAblation:
    def test_needs_two_configs(self, small_dataset, tmp_path):
        with pytest.raises(ValueError):
            run_ablation([smoke_config(small_dataset, tmp_path / "x")])

    def test_rows_and_error_isolation(self, small_dataset, tmp_path):
        good = smoke_config(small_dataset, tmp_path / "g", max_steps=2,
                            label="mask-only", corner_loss_enabled=False)
        bad = smoke_config(tmp_path / "missing.json", tmp_path / "b",
                           label="broken")
        out_csv = tmp_path / "ablation.csv"
        rows = run_ablation([good, bad], out_csv=out_csv)
        assert [r["label"] for r in rows] == ["mask-only", "broken"]
        assert rows[0]["error"] == "" and rows[1]["error"] != ""
        assert math.isnan(rows[1]["hnw_mape"])
        header = out_csv.read_text().splitlines()[0]
        assert header == "label,bbox_map,segm_map,hnw_mape,error"
