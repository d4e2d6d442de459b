"""Network contracts: pyramid shapes, protonet, anchors, box coding,
mask assembly oracle, Fast NMS vs a classical oracle, the dimension head
(shape, gradients, single-sample memorization), detachment, checkpoints."""

import numpy as np
import pytest
import torch

from pmode.losses import hnw_loss
from pmode.model import (
    DetectionCandidate,
    DimensionEstimate,
    DimensionHead,
    NetworkConfig,
    PmodeNet,
    anchors_to_xyxy,
    assemble_instance_mask,
    build_anchors,
    classical_nms_indices,
    crop_mask,
    decode_boxes,
    encode_boxes,
    fast_nms,
    fast_nms_indices,
    feature_sizes,
    infer_frame,
    load_checkpoint,
    match_anchors,
    preprocess,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def desk_model():
    torch.manual_seed(0)
    return PmodeNet(NetworkConfig.desk()).eval()


class TestConfig:
    def test_desk_preset(self):
        cfg = NetworkConfig.desk()
        assert cfg.input_size == 128 and cfg.backbone_preset == "tiny"
        assert cfg.k_prototypes == 32 and cfg.mlp_mask_size == 30
        assert cfg.mlp_layers == 6

    def test_validation(self):
        with pytest.raises(ValueError):
            NetworkConfig(k_prototypes=0)
        with pytest.raises(ValueError):
            NetworkConfig(k_prototypes=101)
        with pytest.raises(ValueError):
            NetworkConfig(backbone_preset="vgg")
        with pytest.raises(ValueError):
            NetworkConfig(mlp_mask_size=64)
        with pytest.raises(ValueError):
            NetworkConfig(mlp_layers=5)

    def test_explicit_layer_override(self):
        cfg = NetworkConfig(mlp_layers=4, mlp_hidden=(64, 16, 8))
        assert cfg.mlp_layers == 4


class TestPyramid:
    def test_tiny_128_level_sizes(self, desk_model):
        x = torch.zeros(1, 3, 128, 128)
        feats = desk_model.extract_pyramid_features(x)
        assert [tuple(f.shape) for f in feats] == [
            (1, 64, 16, 16), (1, 64, 8, 8), (1, 64, 4, 4)]

    def test_zero_image_finite(self, desk_model):
        feats = desk_model.extract_pyramid_features(torch.zeros(1, 3, 128, 128))
        for f in feats:
            assert torch.isfinite(f).all()

    def test_eval_determinism(self, desk_model):
        torch.manual_seed(3)
        x = torch.rand(1, 3, 128, 128)
        with torch.no_grad():
            a = desk_model(x)
            b = desk_model(x)
        for k in a:
            assert torch.equal(a[k], b[k])

    def test_wrong_size_rejected(self, desk_model):
        with pytest.raises(ValueError):
            desk_model.extract_pyramid_features(torch.zeros(1, 3, 64, 64))


class TestShapeMatrix:
    @pytest.mark.parametrize("input_size", [128, 500])
    @pytest.mark.parametrize("k", [8, 32])
    def test_contracts(self, input_size, k):
        torch.manual_seed(1)
        cfg = NetworkConfig(input_size=input_size, k_prototypes=k,
                            backbone_preset="tiny")
        model = PmodeNet(cfg).eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, input_size, input_size))
        q = input_size // 4
        assert tuple(out["protos"].shape) == (1, k, q, q)
        assert (out["protos"] >= 0).all()  # protonet ends in ReLU
        n_anchors = 3 * sum(s * s for s in feature_sizes(input_size))
        assert tuple(out["class_logits"].shape) == (1, n_anchors, 2)
        assert tuple(out["boxes"].shape) == (1, n_anchors, 4)
        assert tuple(out["coeffs"].shape) == (1, n_anchors, k)
        assert (out["coeffs"].abs() <= 1).all()  # tanh branch
        assert len(model.anchors) == n_anchors

    def test_resnet50_like_spot_check(self):
        torch.manual_seed(1)
        cfg = NetworkConfig(input_size=128, k_prototypes=8,
                            backbone_preset="resnet50-like")
        model = PmodeNet(cfg).eval()
        with torch.no_grad():
            out = model(torch.rand(1, 3, 128, 128))
        assert tuple(out["protos"].shape) == (1, 8, 32, 32)
        feats = model.extract_pyramid_features(torch.rand(1, 3, 128, 128))
        assert feats[0].shape[1] == 256


class TestAnchors:
    def test_count_and_bounds(self):
        cfg = NetworkConfig.desk()
        anchors = build_anchors(cfg)
        assert len(anchors) == 3 * (16 * 16 + 8 * 8 + 4 * 4)
        assert np.all(anchors[:, 2:] > 0)
        assert np.all((anchors[:, :2] > 0) & (anchors[:, :2] < 1))

    def test_encode_decode_roundtrip(self, rng):
        anchors = build_anchors(NetworkConfig.desk())
        pick = rng.choice(len(anchors), size=50, replace=False)
        sub = anchors[pick]
        gt = np.stack([
            sub[:, 0] - sub[:, 2] * 0.4, sub[:, 1] - sub[:, 3] * 0.4,
            sub[:, 0] + sub[:, 2] * 0.5, sub[:, 1] + sub[:, 3] * 0.45], axis=1)
        gt = np.clip(gt, 0.02, 0.98)
        dec = decode_boxes(sub, encode_boxes(sub, gt))
        assert np.max(np.abs(dec - gt)) < 1e-9

    def test_match_anchors_best_forced(self):
        cfg = NetworkConfig.desk()
        xyxy = anchors_to_xyxy(build_anchors(cfg))
        # extreme-aspect box: no anchor reaches 0.5 IoU, best still positive
        gt = np.array([[0.1, 0.45, 0.8, 0.55]])
        labels, matched = match_anchors(xyxy, gt)
        assert (labels == 1).sum() >= 1
        assert np.all(matched[labels == 1] == 0)

    def test_match_anchors_bands(self):
        anchors = np.array([[0.1, 0.1, 0.3, 0.3],
                            [0.11, 0.1, 0.31, 0.3],
                            [0.5, 0.5, 0.7, 0.7],
                            [0.176, 0.1, 0.376, 0.3]])
        gt = np.array([[0.1, 0.1, 0.3, 0.3]])
        labels, _ = match_anchors(anchors, gt)
        assert labels[0] == 1          # exact match
        assert labels[1] == 1          # IoU ~0.9
        assert labels[2] == 0          # disjoint -> negative
        assert labels[3] == -1         # IoU ~0.45, ignore band

    def test_no_gt_all_negative(self):
        anchors = np.array([[0.1, 0.1, 0.3, 0.3], [0.4, 0.4, 0.6, 0.6]])
        labels, _ = match_anchors(anchors, np.zeros((0, 4)))
        assert np.all(labels == 0)


class TestAssembly:
    def test_zero_coeffs_half(self, rng):
        protos = rng.normal(size=(4, 8, 8))
        mask = assemble_instance_mask(protos, np.zeros(4))
        assert np.allclose(mask, 0.5, atol=1e-12)

    def test_one_hot_identity(self, rng):
        protos = rng.normal(size=(4, 8, 8))
        e2 = np.eye(4)[2]
        mask = assemble_instance_mask(protos, e2)
        assert np.allclose(mask, 1 / (1 + np.exp(-protos[2])), atol=1e-12)

    def test_bruteforce_oracle(self, rng):
        for _ in range(100):
            protos = rng.normal(size=(4, 8, 8))
            coeffs = rng.normal(size=4)
            mask = assemble_instance_mask(protos, coeffs)
            for r in range(8):
                for c in range(8):
                    lin = sum(coeffs[i] * protos[i, r, c] for i in range(4))
                    want = 1 / (1 + np.exp(-lin))
                    assert abs(mask[r, c] - want) < 1e-6

    def test_length_mismatch(self, rng):
        with pytest.raises(ValueError):
            assemble_instance_mask(rng.normal(size=(4, 8, 8)), np.zeros(5))

    def test_torch_matches_numpy(self, rng):
        protos = rng.normal(size=(6, 8, 8))
        coeffs = rng.normal(size=6)
        a = assemble_instance_mask(protos, coeffs)
        b = assemble_instance_mask(torch.tensor(protos), torch.tensor(coeffs))
        assert np.allclose(a, b.numpy(), atol=1e-12)

    def test_crop_mask(self, rng):
        mask = np.ones((32, 32))
        out = crop_mask(mask, (0.25, 0.5, 0.75, 0.75))
        assert out[16:24, 8:24].all()
        assert out[:16].sum() == 0 and out[:, :8].sum() == 0


def classical_nms_oracle(boxes, scores, thr):
    """Independent sequential NMS used as the oracle."""
    idx = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in idx:
        ok = True
        for j in kept:
            bi, bj = boxes[i], boxes[j]
            ix1, iy1 = max(bi[0], bj[0]), max(bi[1], bj[1])
            ix2, iy2 = min(bi[2], bj[2]), min(bi[3], bj[3])
            inter = max(ix2 - ix1, 0) * max(iy2 - iy1, 0)
            area_i = (bi[2] - bi[0]) * (bi[3] - bi[1])
            area_j = (bj[2] - bj[0]) * (bj[3] - bj[1])
            union = area_i + area_j - inter
            if union > 0 and inter / union > thr:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


class TestFastNMS:
    def test_single_kept(self):
        boxes = np.array([[0.1, 0.1, 0.4, 0.4]])
        assert list(fast_nms_indices(boxes, np.array([0.9]), 0.5, 10)) == [0]

    def test_two_identical_boxes(self):
        boxes = np.array([[0.1, 0.1, 0.4, 0.4], [0.1, 0.1, 0.4, 0.4]])
        kept = fast_nms_indices(boxes, np.array([0.6, 0.9]), 0.5, 10)
        assert list(kept) == [1]

    def test_subset_of_classical(self, rng):
        for _ in range(200):
            n = 50
            x1 = rng.uniform(0, 0.7, n)
            y1 = rng.uniform(0, 0.7, n)
            boxes = np.stack([x1, y1, x1 + rng.uniform(0.05, 0.3, n),
                              y1 + rng.uniform(0.05, 0.3, n)], axis=1)
            scores = rng.uniform(size=n)
            fast = set(fast_nms_indices(boxes, scores, 0.5, n))
            classical = set(classical_nms_oracle(boxes, scores, 0.5))
            assert fast <= classical
            assert set(classical_nms_indices(boxes, scores, 0.5)) == classical

    def test_top_n_and_wrapper(self, rng):
        cands = [DetectionCandidate(class_score=float(s),
                                    box=(0.1 + 0.02 * i, 0.1, 0.9, 0.9),
                                    mask_coeffs=np.zeros(4))
                 for i, s in enumerate(rng.uniform(0.1, 0.99, size=8))]
        kept = fast_nms(cands, 0.99, 3)
        assert len(kept) <= 3
        scores = [c.class_score for c in kept]
        assert scores == sorted(scores, reverse=True)


class TestDimensionHead:
    def test_input_length_contract(self):
        head = DimensionHead(30, 32, (512, 256, 128, 64, 16))
        assert head.input_length() == 932
        out = head(torch.zeros(5, 932))
        assert tuple(out.shape) == (5, 2)
        linears = [m for m in head.net if isinstance(m, torch.nn.Linear)]
        assert len(linears) == 6
        assert [l.out_features for l in linears] == [512, 256, 128, 64, 16, 2]

    def test_finite_on_random_input(self, rng):
        torch.manual_seed(2)
        head = DimensionHead(30, 32, (512, 256, 128, 64, 16))
        out = head(torch.tensor(rng.normal(size=(3, 932)), dtype=torch.float32))
        assert torch.isfinite(out).all()

    def test_gradient_vs_central_differences(self, rng):
        torch.manual_seed(4)
        head = DimensionHead(30, 8, (16, 12, 10, 8, 4)).double()
        x = torch.tensor(rng.normal(size=908), dtype=torch.float64)
        params = list(head.parameters())
        out = head(x[None]).sum()
        grads = torch.autograd.grad(out, params)
        checked = 0
        for p, g in zip(params, grads):
            flat = p.detach().reshape(-1)
            gflat = g.reshape(-1)
            for i in rng.choice(flat.numel(), size=min(5, flat.numel()),
                                replace=False):
                h = 1e-6
                with torch.no_grad():
                    orig = flat[i].item()
                    flat[i] = orig + h
                    hi = head(x[None]).sum().item()
                    flat[i] = orig - h
                    lo = head(x[None]).sum().item()
                    flat[i] = orig
                num = (hi - lo) / (2 * h)
                an = gflat[i].item()
                denom = max(abs(num), abs(an), 1e-8)
                assert abs(num - an) / denom < 1e-4
                checked += 1
        assert checked >= 50

    def test_single_sample_memorization(self, rng):
        torch.manual_seed(7)
        head = DimensionHead(30, 8, (64, 48, 32, 16, 8))
        mask = np.zeros((30, 30)); mask[8:22, 5:25] = 1.0
        x = torch.tensor(np.concatenate([mask.reshape(-1), rng.normal(size=8)]),
                         dtype=torch.float32)[None]
        target = torch.tensor([[1.5, 4.0]])  # (height, width)
        opt = torch.optim.Adam(head.parameters(), lr=1e-3)
        for step in range(2000):
            opt.zero_grad()
            loss = hnw_loss(head(x), target)
            loss.backward()
            opt.step()
            if float(loss.detach()) < 1e-7:
                break
        pred = head(x)[0]
        assert abs(pred[0].item() - 1.5) / 1.5 < 0.01
        assert abs(pred[1].item() - 4.0) / 4.0 < 0.01


class TestDetachment:
    def test_hnw_gradient_zero_on_protonet(self, rng):
        torch.manual_seed(5)
        model = PmodeNet(NetworkConfig.desk())
        model.train()
        img = torch.tensor(rng.normal(size=(1, 3, 128, 128)), dtype=torch.float32)
        out = model(img)
        protos = out["protos"][0]
        coeffs = out["coeffs"][0, 100]
        mask = assemble_instance_mask(protos, coeffs)
        x = model.mlp_input(mask.detach(), coeffs.detach())
        pred = model.dimension_head(x[None])
        loss = hnw_loss(pred, torch.tensor([[1.5, 4.0]]))
        loss.backward()
        for name, p in model.named_parameters():
            if name.startswith(("protonet", "backbone", "fpn", "head")):
                assert p.grad is None or float(p.grad.abs().sum()) == 0.0, name
        dim_grads = [p.grad for p in model.dimension_head.parameters()]
        assert any(g is not None and float(g.abs().sum()) > 0 for g in dim_grads)

    def test_estimates_clamped_non_negative(self, desk_model, rng):
        mask = rng.uniform(size=(32, 32))
        est = desk_model.dimension_head_forward(mask, rng.normal(size=32))
        assert est.width_m >= 0 and est.height_m >= 0

    def test_estimate_validation(self):
        with pytest.raises(ValueError):
            DimensionEstimate(width_m=float("nan"), height_m=1.0)


class TestInference:
    def test_untrained_blank_frame_empty(self, desk_model, rng):
        img = np.full((128, 128, 3), 90, dtype=np.uint8)
        assert infer_frame(desk_model, img) == []

    def test_deterministic_outputs(self, rng):
        torch.manual_seed(9)
        cfg = NetworkConfig(input_size=128, backbone_preset="tiny",
                            score_threshold=0.0, nms_top_n=3)
        model = PmodeNet(cfg).eval()
        img = rng.integers(0, 255, size=(128, 128, 3), dtype=np.uint8)
        a = infer_frame(model, img)
        b = infer_frame(model, img)
        assert len(a) == len(b) > 0
        for (ca, ma, ea), (cb, mb, eb) in zip(a, b):
            assert ca.box == cb.box and ca.class_score == cb.class_score
            assert np.array_equal(ma, mb)
            assert (ea.width_m, ea.height_m) == (eb.width_m, eb.height_m)

    def test_preprocess_shape(self, rng):
        img = rng.integers(0, 255, size=(128, 128, 3), dtype=np.uint8)
        x = preprocess(img)
        assert tuple(x.shape) == (1, 3, 128, 128)
        assert float(x.min()) >= -2.01 and float(x.max()) <= 2.01


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        torch.manual_seed(11)
        model = PmodeNet(NetworkConfig.desk())
        path = tmp_path / "model.npz"
        save_checkpoint(model, path, metadata={"epoch": 3})
        loaded, meta = load_checkpoint(path)
        assert meta == {"epoch": 3}
        assert loaded.config == model.config
        sd_a, sd_b = model.state_dict(), loaded.state_dict()
        assert sd_a.keys() == sd_b.keys()
        for k in sd_a:
            assert torch.equal(sd_a[k], sd_b[k]), k

    def test_version_field_enforced(self, tmp_path):
        model = PmodeNet(NetworkConfig.desk())
        path = tmp_path / "model.npz"
        save_checkpoint(model, path)
        with np.load(path) as z:
            assert str(z["__version__"]) == "pmode-v1"
            arrays = {k: z[k] for k in z.files}
        arrays["__version__"] = np.array("pmode-v0")
        np.savez(path, **arrays)
        with pytest.raises(ValueError):
            load_checkpoint(path)
