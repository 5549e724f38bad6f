import math

import numpy as np
import pytest
import torch

from avdet.dataset import ScoredBox
from avdet.exceptions import ConfigError, ModelStateError, ShapeError, TrainingError
from avdet.student import (StudentDetector, build_student, decode_boxes, delay_toy_dataset, detection_loss,
                           encode_targets, focal_loss)

from gradcheck import max_relative_error
from oracles import bce

W, H = 300, 100


def test_forward_shape_and_finite():
    net = build_student(6)
    obj, box = net(torch.zeros(2, 6, 128, 512))
    gy, gx = net.grid
    assert obj.shape == (2, gy, gx) and box.shape == (2, gy, gx, 4)
    assert torch.isfinite(obj).all() and torch.isfinite(box).all()
    p = torch.sigmoid(obj)
    assert ((p > 0) & (p < 1)).all()
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 2, 128, 512))


def test_channel_count_changes_only_first_layer():
    a = dict(build_student(1).named_parameters())
    b = dict(build_student(6).named_parameters())
    assert a.keys() == b.keys()
    first = next(iter(a))
    assert a[first].shape[1] == 1 and b[first].shape[1] == 6
    diff = [k for k in a if a[k].shape != b[k].shape]
    assert diff == [first]


def test_unsupported_channels():
    for c in (0, 3, 5, 7):
        with pytest.raises(ConfigError):
            build_student(c)


def test_same_seed_same_init():
    a, b = build_student(4, seed=3), build_student(4, seed=3)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    c = build_student(4, seed=4)
    assert not all(torch.equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_focal_values():
    assert focal_loss([[1.0, 0.0]], [[1, 0]]) == pytest.approx(0.0, abs=1e-12)
    assert focal_loss([[0.5]], [[1]], gamma=2.0) == pytest.approx(0.25 * math.log(2), abs=1e-8)
    with pytest.raises(ShapeError):
        focal_loss([[0.5]], [[1, 0]])
    with pytest.raises(ConfigError):
        focal_loss([[0.5]], [[1]], gamma=-1)


def test_focal_gamma_zero_is_bce_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(50):
        shape = tuple(rng.integers(1, 6, size=2))
        p = rng.uniform(1e-4, 1 - 1e-4, size=shape)
        t = (rng.random(shape) < 0.3).astype(int)
        want = float(np.mean([bce(pi, ti) for pi, ti in zip(p.ravel(), t.ravel())]))
        assert focal_loss(p, t, gamma=0.0) == pytest.approx(want, abs=1e-8)
        f = focal_loss(p, t, gamma=2.0)
        assert 0 <= f <= want


def test_detection_loss_gradients_float64():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.standard_normal((2, 4, 12)), requires_grad=True)
    raw_box = torch.tensor(rng.standard_normal((2, 4, 12, 4)), requires_grad=True)
    obj_t = torch.tensor((rng.random((2, 4, 12)) < 0.3).astype(np.float64))
    box_t = torch.tensor(rng.random((2, 4, 12, 4)))

    def loss_fn():
        return detection_loss(logits, torch.sigmoid(raw_box), obj_t, box_t)

    assert max_relative_error(loss_fn, [logits, raw_box], rng, n_per_tensor=20) < 1e-3


def test_student_net_gradients_float64():
    rng = np.random.default_rng(1)
    net = build_student(2, seed=0).double()
    x = torch.tensor(rng.random((2, 2, 128, 512)) * 0.05)
    obj_t = torch.tensor((rng.random((2, 4, 12)) < 0.2).astype(np.float64))
    box_t = torch.tensor(rng.random((2, 4, 12, 4)))

    def loss_fn():
        logits, box = net(x)
        return detection_loss(logits, box, obj_t, box_t)

    assert max_relative_error(loss_fn, list(net.parameters()), rng, n_per_tensor=3) < 1e-3


def test_encode_decode_round_trip():
    rng = np.random.default_rng(2)
    gy, gx = 4, 12
    for _ in range(100):
        k = int(rng.integers(1, 4))
        boxes = []
        for _ in range(k):
            x0, y0 = rng.uniform(0, W - 40), rng.uniform(0, H - 20)
            boxes.append((x0, y0, x0 + rng.uniform(5, 40), y0 + rng.uniform(5, 20)))
        obj, tgt = encode_targets(boxes, (W, H), (gy, gx))
        dec = decode_boxes(obj, tgt, (W, H), threshold=0.5)
        assert len(dec) == int(obj.sum()) <= k
        cw, ch = W / gx, H / gy
        for d in dec:
            cx, cy = 0.5 * (d.x_min + d.x_max), 0.5 * (d.y_min + d.y_max)
            dist = min(max(abs(cx - 0.5 * (b[0] + b[2])) / cw, abs(cy - 0.5 * (b[1] + b[3])) / ch) for b in boxes)
            assert dist <= 0.5 + 1e-6
        # every box whose centre cell is unshared is recovered exactly
        if k == 1:
            (d,) = dec
            assert np.allclose(tuple(d)[:4], boxes[0], atol=1e-3)


def test_decode_single_cell_and_empty():
    gy, gx = 4, 12
    obj = np.zeros((gy, gx))
    box = np.full((gy, gx, 4), 0.5)
    assert decode_boxes(obj, box, (W, H)) == []
    obj[2, 7] = 0.9
    (b,) = decode_boxes(obj, box, (W, H))
    cx, cy = 0.5 * (b.x_min + b.x_max), 0.5 * (b.y_min + b.y_max)
    assert 7 * W / gx <= cx < 8 * W / gx and 2 * H / gy <= cy < 3 * H / gy
    assert isinstance(b, ScoredBox) and b.score == pytest.approx(0.9)


def _toy(n, seed):
    specs, boxes, centres = delay_toy_dataset(n, seed=seed)
    return specs, boxes, centres


def test_all_empty_targets_drive_objectness_down():
    specs, _, _ = _toy(32, 0)
    model = StudentDetector(n_channels=2, epochs=30, lr=1e-3, seed=0).fit(specs, [[] for _ in specs])
    obj, _ = model.predict_raw(specs)
    assert obj.max() < 0.1
    assert all(b == [] for b in model.predict(specs))


def test_same_seed_identical_loss_curves():
    specs, boxes, _ = _toy(24, 1)
    a = StudentDetector(n_channels=2, epochs=3, seed=5).fit(specs, boxes)
    b = StudentDetector(n_channels=2, epochs=3, seed=5).fit(specs, boxes)
    assert a.loss_curve_ == b.loss_curve_


def test_fit_predict_errors(tmp_path):
    specs, boxes, _ = _toy(8, 2)
    with pytest.raises(TrainingError):
        StudentDetector(n_channels=2).fit(specs[:0], [])
    with pytest.raises(ShapeError):
        StudentDetector(n_channels=2).fit(specs, boxes[:-1])
    with pytest.raises(ModelStateError):
        StudentDetector(n_channels=2).predict(specs)
    model = StudentDetector(n_channels=2, epochs=1).fit(specs, boxes)
    with pytest.raises(ShapeError):
        model.predict(np.zeros((1, 6, 128, 512), dtype=np.float32))
    model.save(tmp_path / "s.ckpt")
    again = StudentDetector.load(tmp_path / "s.ckpt")
    assert again.get_params() == model.get_params()
    assert np.array_equal(again.predict_raw(specs)[0], model.predict_raw(specs)[0])


def test_toy_delay_localisation():
    """Box x position is a deterministic function of inter-channel delay."""
    specs, boxes, _ = _toy(160, 10)
    test_specs, _, test_centres = _toy(40, 11)
    model = StudentDetector(n_channels=2, epochs=60, lr=1e-3, seed=0).fit(specs, boxes)
    assert min(model.loss_curve_) < 0.1
    preds = model.predict(test_specs)
    hits = 0
    for pred, cx in zip(preds, test_centres):
        if pred:
            best = max(pred, key=lambda b: b.score)
            hits += abs(0.5 * (best.x_min + best.x_max) - cx) <= 0.1 * W
    assert hits / len(test_centres) >= 0.8
