import numpy as np
import pytest

import fct

TINY = """
[backbone]
query_size = 32
support_size = 16
stages = 2
[stage1]
channels = 8
layers = 1
heads = 2
sr_ratio = 2
merge_stride = 4
mlp_ratio = 2
[stage2]
channels = 16
layers = 1
heads = 2
sr_ratio = 1
merge_stride = 2
mlp_ratio = 2
[head]
anchor_size = 12
rpn_hidden = 8
roi_size = 3
proposals = 4
stage4_heads = 2
match_hidden = 16
[data]
base_images = 24
pool_images = 60
test_images = 4
min_object = 10
max_object = 15
max_instances = 2
[pretrain]
steps = 4
[train_base]
steps = 4
[finetune]
steps = 3
[baseline_finetune]
steps = 3
"""


def test_iou_and_nms():
    a = np.array([[0, 0, 10, 10], [5, 0, 15, 10]], dtype=float)
    m = fct.iou(a, a)
    assert m.shape == (2, 2)
    assert m[0, 0] == 1.0
    assert m[0, 1] == pytest.approx(50 / 150)
    assert fct.nms(a, [0.2, 0.9], 0.3) == [1]
    with pytest.raises(fct.ShapeError):
        fct.iou(np.zeros((2, 3)), a)


def test_roi_align_identity():
    feat = np.random.default_rng(0).normal(size=(1, 4, 4, 5))
    out = fct.roi_align(feat, np.array([[0.0, 0.0, 64.0, 64.0]]), roi_size=4, sampling_ratio=1, stride=16.0)
    assert out.shape == (1, 4, 4, 5)
    np.testing.assert_allclose(out[0], feat[0], atol=1e-14)


def test_average_precision_hand_case():
    dets = [(0, 0.9, (20, 20, 30, 30)), (0, 0.8, (0, 0, 10, 10))]
    assert fct.average_precision(dets, {0: [(0, 0, 10, 10)]}) == 0.5


def test_attention_masks():
    q, s = fct.attention_masks([0.05] * 20, 4, 4, 2, 2)
    assert q.shape == (4, 4) and s.shape == (2, 2)
    assert np.all(q == 0.5) and np.all(s == 0.5)


def test_config_round_trip():
    text = fct.default_config()
    assert fct.normalize_config(text) == text
    with pytest.raises(fct.ConfigError):
        fct.normalize_config("[nowhere]\nx = 1\n")


def test_backbone_shapes_and_permutation():
    det = fct.Detector.init_two_branch(TINY, seed=1)
    assert det.two_branch
    rng = np.random.default_rng(2)
    q = rng.normal(size=(1, 32, 32, 3))
    s = rng.normal(size=(3, 16, 16, 3))
    fq, fs = det.backbone(q, s)
    assert fq.shape == (1, 4, 4, 16)
    assert fs.shape == (3, 2, 2, 16)
    fq2, fs2 = det.backbone(q, s[[2, 0, 1]])
    assert np.array_equal(fq, fq2)
    assert np.array_equal(fs[[2, 0, 1]], fs2)


def test_three_step_pipeline(tmp_path):
    base, pool, test = fct.generate_corpora(TINY, seed=3)
    assert len(test) == 4
    assert test.image(0).shape == (32, 32, 3)
    step1, l1 = fct.pretrain(base, TINY, seed=3)
    assert len(l1) == 4 and all(np.isfinite(l1))
    assert not step1.two_branch
    step2, _ = fct.train_base(base, step1, TINY, seed=3)
    shots = pool.k_shot(1, 3)
    step3, l3 = fct.finetune(shots, 1, step2, seed=3)
    assert len(l3) == 3
    ap = step3.evaluate(test, shots)
    assert all(0.0 <= v <= 1.0 for v in ap.values())

    path = tmp_path / "model.fctk"
    step3.save(path)
    again = fct.Detector.load(path, TINY)
    for name in step3.parameter_names():
        assert np.array_equal(again.parameter(name), step3.parameter(name))
    with pytest.raises(fct.IoError):
        fct.Detector.load(tmp_path / "missing.fctk")
