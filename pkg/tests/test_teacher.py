import math

import numpy as np
import pytest
import torch

from avdet.audio import PairLabel
from avdet.exceptions import ModelStateError, ShapeError, TrainingError
from avdet.teacher import (AudioEncoder, AVDetNet, AVDetTeacher, ImageEncoder, contrastive_loss, heatmap,
                           upsample_bilinear)

from gradcheck import max_relative_error

P, N, I = PairLabel.POSITIVE, PairLabel.NEGATIVE, PairLabel.INCONCLUSIVE


def test_image_embeddings_unit_norm_and_deterministic():
    torch.manual_seed(0)
    enc = ImageEncoder(embed_dim=16)
    x = torch.rand(2, 3, 64, 128)
    f = enc(x)
    assert f.shape == (2, 16, 4, 8)
    assert torch.allclose(f.norm(dim=1), torch.ones(2, 4, 8), atol=1e-5)
    assert torch.equal(enc(x[:1]), enc(x[:1].clone()))


def test_audio_embedding_unit_norm_and_zero_input():
    torch.manual_seed(0)
    enc = AudioEncoder(6, embed_dim=16, zero_init=False)
    f = enc(torch.rand(3, 6, 128, 512))
    assert torch.allclose(f.norm(dim=1), torch.ones(3), atol=1e-5)
    z = torch.zeros(1, 6, 128, 512)
    assert torch.equal(enc(z), enc(2 * z))
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 2, 128, 512))


def test_zero_init_audio_head_gives_identical_embeddings():
    torch.manual_seed(0)
    enc = AudioEncoder(2, embed_dim=8, zero_init=True)
    f = enc(torch.rand(4, 2, 64, 64))
    assert torch.allclose(f, f[:1].expand_as(f))


def test_heatmap_zero_distance_and_antipodal():
    v = np.array([0.6, 0.0, 0.8])
    scores, raw = heatmap(np.tile(v, (2, 3, 1)), v, w=2.0, b=1.5)
    assert np.all(raw == 0)
    assert np.allclose(scores, 1 / (1 + math.exp(-1.5)))
    _, raw = heatmap(-v[None, None, :], v, w=2.0, b=1.5)
    assert raw[0, 0] == pytest.approx(4.0)


def test_heatmap_hand_computation():
    rng = np.random.default_rng(0)
    f_img = rng.standard_normal((2, 2, 3))
    f_aud = rng.standard_normal(3)
    w, b = 0.7, 0.3
    scores, raw = heatmap(f_img, f_aud, w, b)
    for m in range(2):
        for n in range(2):
            d = sum((f_img[m, n, k] - f_aud[k]) ** 2 for k in range(3))
            assert raw[m, n] == pytest.approx(d, abs=1e-12)
            assert scores[m, n] == pytest.approx(1 / (1 + math.exp(-(b - w * d))), abs=1e-12)
    # torch path agrees with the numpy path
    t_scores, t_raw = heatmap(torch.tensor(f_img).permute(2, 0, 1)[None], torch.tensor(f_aud)[None], w, b)
    assert np.allclose(t_raw[0].numpy(), raw) and np.allclose(t_scores[0].numpy(), scores)
    with pytest.raises(ShapeError):
        heatmap(f_img, f_aud[:2], w, b)


def test_contrastive_loss_values():
    eps = 1e-7
    assert float(contrastive_loss([1 - eps, eps], [True, False])) == pytest.approx(0.0, abs=1e-6)
    assert float(contrastive_loss([0.5, 0.5], [True, False])) == pytest.approx(math.log(2), abs=1e-6)
    s = [0.9, 0.6, 0.3, 0.2, 0.7]
    y = [True, True, True, False, False]
    want = -(math.log(0.9) + math.log(0.6) + math.log(0.3) + math.log(0.8) + math.log(0.3)) / 5
    assert float(contrastive_loss(s, y)) == pytest.approx(want, abs=1e-12)
    # clamping keeps saturated scores finite
    assert math.isfinite(float(contrastive_loss([0.0, 1.0], [True, False])))
    with pytest.raises(ShapeError):
        contrastive_loss([0.5], [True, False])


def _tiny_batch(rng, n=4, c=2):
    imgs = torch.tensor(rng.random((n, 3, 32, 64)), dtype=torch.float64)
    specs = torch.tensor(rng.random((n, c, 32, 64)) * 5, dtype=torch.float64)
    y = [True, False] * (n // 2)
    return imgs, specs, y


def test_teacher_gradients_float64():
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    net = AVDetNet(2, embed_dim=8, audio_zero_init=False).double()
    imgs, specs, y = _tiny_batch(rng)

    def loss_fn():
        scores, _ = net(imgs, specs)
        return contrastive_loss(scores.flatten(1).max(dim=1).values, y)

    err = max_relative_error(loss_fn, list(net.parameters()), rng, n_per_tensor=4)
    assert err < 1e-3


def test_image_feature_gradient_wrt_pixels():
    rng = np.random.default_rng(1)
    torch.manual_seed(1)
    enc = ImageEncoder(embed_dim=8).double()
    x = torch.tensor(rng.random((1, 3, 32, 64)), requires_grad=True)
    weights = torch.tensor(rng.standard_normal((1, 8, 2, 4)))
    err = max_relative_error(lambda: (enc(x) * weights).sum(), [x], rng, n_per_tensor=12)
    assert err < 1e-3


def _toy_pairs(n_pos=4, n_neg=4, size=(32, 96), seed=0):
    """Positives show a bright block on a grey road; negatives show the empty road."""
    rng = np.random.default_rng(seed)
    h, w = size
    imgs, specs, labels = [], [], []
    for k in range(n_pos + n_neg):
        im = np.full((h, w, 3), 0.4) + 0.02 * rng.standard_normal((h, w, 3))
        if k < n_pos:
            x0 = int(rng.integers(0, w - 24))
            im[8:24, x0:x0 + 24] = [0.9, 0.2, 0.2]
        imgs.append(np.clip(im, 0, 1).astype(np.float32))
        specs.append((rng.random((1, 32, 64)) * (3.0 if k < n_pos else 1.0)).astype(np.float32))
        labels.append(P if k < n_pos else N)
    return imgs, specs, labels


def _small_teacher(**kw):
    base = dict(n_channels=1, embed_dim=16, image_size=(32, 96), optimizer="adam", lr=3e-3,
                batch_size=8, epochs=60, audio_lr_scale=0.1, seed=0)
    base.update(kw)
    return AVDetTeacher(**base)


def test_toy_convergence():
    imgs, specs, labels = _toy_pairs()
    losses = []
    model = _small_teacher(epochs=200).fit(imgs, specs, labels, callback=lambda e, l: losses.append(l))
    assert model.loss_curve_ == losses
    assert min(model.loss_curve_) < 0.1
    assert len(model.loss_curve_) <= 200


def test_same_seed_identical_parameters():
    imgs, specs, labels = _toy_pairs()
    a = _small_teacher(epochs=5).fit(imgs, specs, labels)
    b = _small_teacher(epochs=5).fit(imgs, specs, labels)
    for (ka, va), (kb, vb) in zip(a.net_.state_dict().items(), b.net_.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_inconclusive_pairs_are_ignored():
    imgs, specs, labels = _toy_pairs()
    rng = np.random.default_rng(9)
    extra_i = [rng.random((32, 96, 3)).astype(np.float32) for _ in range(3)]
    extra_s = [rng.random((1, 32, 64)).astype(np.float32) for _ in range(3)]
    # interleave inconclusive pairs without changing the relative order of the rest
    mixed = list(zip(imgs, specs, labels))
    for k, (im, sp) in enumerate(zip(extra_i, extra_s)):
        mixed.insert(2 * k + 1, (im, sp, I))
    a = _small_teacher(epochs=4).fit(imgs, specs, labels)
    m_imgs, m_specs, m_labels = (list(c) for c in zip(*mixed))
    b = _small_teacher(epochs=4).fit(m_imgs, m_specs, m_labels)
    assert a.loss_curve_ == b.loss_curve_
    for va, vb in zip(a.net_.state_dict().values(), b.net_.state_dict().values()):
        assert torch.equal(va, vb)
    assert all(m_labels[i] is not I for i in b.trained_indices_)


def test_fit_errors_and_state():
    imgs, specs, labels = _toy_pairs()
    with pytest.raises(TrainingError):
        _small_teacher().fit(imgs[:4], specs[:4], labels[:4])
    with pytest.raises(ShapeError):
        _small_teacher().fit(imgs, specs[:-1], labels)
    with pytest.raises(ModelStateError):
        _small_teacher().predict(imgs, specs)


def test_predict_save_load(tmp_path):
    imgs, specs, labels = _toy_pairs()
    model = _small_teacher(epochs=3).fit(imgs, specs, labels)
    hm = model.predict_heatmap(imgs[:2], specs[:2])
    assert hm[0].shape == (32, 96) and np.all((hm[0] > 0) & (hm[0] < 1))
    model.save(tmp_path / "t.ckpt")
    again = AVDetTeacher.load(tmp_path / "t.ckpt")
    assert np.array_equal(again.predict_heatmap(imgs[:2], specs[:2])[1], hm[1])
    assert again.get_params() == model.get_params()
    f = again.embed_image(imgs[0])
    assert f.shape == (2, 6, 16) and np.allclose(np.linalg.norm(f, axis=-1), 1, atol=1e-5)
    assert np.linalg.norm(again.embed_audio(specs[0])) == pytest.approx(1, abs=1e-5)
    model.save(tmp_path / "u.ckpt")
    assert (tmp_path / "t.ckpt").read_bytes() == (tmp_path / "u.ckpt").read_bytes()


def test_upsample_constant_and_max():
    assert np.all(upsample_bilinear(np.full((8, 24), 0.3), 100, 300) == 0.3)
    rng = np.random.default_rng(0)
    for shape, out in [((8, 24), (100, 300)), ((4, 12), (100, 300)), ((3, 5), (17, 23))]:
        g = rng.random(shape)
        h = upsample_bilinear(g, *out)
        assert h.shape == out
        assert abs(h.max() - g.max()) <= 1e-6 and abs(h.min() - g.min()) <= 1e-6
    with pytest.raises(ShapeError):
        upsample_bilinear(np.zeros((4, 4)), 2, 8)


def test_upsample_then_average_recovers_smooth_grid():
    i, j = np.meshgrid(np.arange(8), np.arange(24), indexing="ij")
    g = 0.5 + 0.3 * np.sin(0.35 * i) * np.cos(0.2 * j)
    s = 16
    h = upsample_bilinear(g, 8 * s, 24 * s)
    down = h.reshape(8, s, 24, s).mean(axis=(1, 3))
    assert np.max(np.abs(down - g)) < 2e-2
