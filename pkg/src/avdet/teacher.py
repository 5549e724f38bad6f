"""Audio-visual teacher: image and audio encoders, correspondence heatmap,
per-batch contrastive loss and training."""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import nn

from .audio import PairLabel
from .boxes import extract_boxes
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import ModelStateError, NumericalError, ShapeError, TrainingError

LOG_EPS = 1e-7
SPEC_SCALE = 0.1


def _conv_stack(cin, widths, kernel=3, first_kernel=None, first_stride=2):
    # k=4, s=2, p=1 centres output cell a on input pixel 2a + 0.5, keeping the
    # grid aligned with the cell centres assumed by ``upsample_bilinear``
    layers = []
    for i, w in enumerate(widths):
        k, s = (first_kernel or kernel, first_stride) if i == 0 else (kernel, 2)
        layers += [nn.Conv2d(cin, w, k, stride=s, padding=0 if k == s else (k - 1) // 2), nn.ReLU()]
        cin = w
    return layers


def coordinate_channels(n, h, w, dtype=torch.float32):
    """Two channels holding normalised x and y in [-1, 1]."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype)
    grid = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=0)
    return grid.unsqueeze(0).expand(n, -1, -1, -1)


class ImageEncoder(nn.Module):
    """Four stride-2 conv blocks (total stride 16) and a 1x1 projection.

    With ``coord_channels`` the input is augmented with pixel-coordinate
    planes so that features can encode where in the image they lie.
    """

    def __init__(self, embed_dim=64, widths=(16, 32, 64, 64), coord_channels=False):
        super().__init__()
        self.coord_channels = coord_channels
        cin = 3 + (2 if coord_channels else 0)
        self.layers = nn.ModuleList(_conv_stack(cin, widths, kernel=4) + [nn.Conv2d(widths[-1], embed_dim, 1)])
        self.stride = 2 ** len(widths)

    def forward(self, x, check=False):
        x = x - 0.5
        if self.coord_channels:
            x = torch.cat([x, coordinate_channels(x.shape[0], x.shape[2], x.shape[3], x.dtype)], dim=1)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if check and not torch.isfinite(x).all():
                raise NumericalError("non-finite activation", layer=i)
        return F.normalize(x, dim=1, eps=1e-12)


class AudioEncoder(nn.Module):
    """Conv stack over the ``C x 128 x 512`` stack, global average pool, linear head."""

    def __init__(self, n_channels, embed_dim=64, widths=(16, 32, 64, 64), zero_init=True):
        super().__init__()
        self.n_channels = n_channels
        self.layers = nn.ModuleList(_conv_stack(n_channels, widths, first_kernel=4, first_stride=4))
        self.head = nn.Linear(widths[-1], embed_dim)
        if zero_init:
            # every clip starts at the same embedding, so early training must
            # separate positives from negatives through the image path
            nn.init.zeros_(self.head.weight)

    def forward(self, x, check=False):
        if x.shape[1] != self.n_channels:
            raise ShapeError(f"expected {self.n_channels} spectrogram channels, got {x.shape[1]}")
        x = x * SPEC_SCALE
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if check and not torch.isfinite(x).all():
                raise NumericalError("non-finite activation", layer=i)
        x = self.head(x.mean(dim=(2, 3)))
        if check and not torch.isfinite(x).all():
            raise NumericalError("non-finite activation", layer=len(self.layers))
        return F.normalize(x, dim=1, eps=1e-12)


def squared_distance(f_img, f_aud):
    """Per-cell ``||f_img[:, m, n] - f_aud||^2`` for ``(B, C, H, W)`` and ``(B, C)``."""
    return ((f_img - f_aud[:, :, None, None]) ** 2).sum(dim=1)


def squash(raw_dist, w, b):
    """Distance to score: ``sigmoid(b - w * d)``, strictly decreasing in ``d``."""
    return torch.sigmoid(b - w * raw_dist)


def heatmap(f_img, f_aud, w, b):
    """Scores and raw squared distances for one image feature map and audio vector.

    Accepts numpy ``(H, W, C)`` / ``(C,)`` arrays or batched torch tensors
    ``(B, C, H, W)`` / ``(B, C)``.
    """
    if isinstance(f_img, np.ndarray):
        f_img = np.asarray(f_img, dtype=np.float64)
        f_aud = np.asarray(f_aud, dtype=np.float64)
        if f_img.shape[-1] != f_aud.shape[-1]:
            raise ShapeError("embedding sizes differ")
        raw = np.sum((f_img - f_aud) ** 2, axis=-1)
        return 1.0 / (1.0 + np.exp(-(b - w * raw))), raw
    if f_img.shape[1] != f_aud.shape[1]:
        raise ShapeError("embedding sizes differ")
    raw = squared_distance(f_img, f_aud)
    return squash(raw, w, b), raw


def contrastive_loss(max_scores, is_positive):
    """Mean of ``-log(max H)`` over positives and ``-log(1 - max H)`` over negatives.

    Scores are clamped to ``[1e-7, 1 - 1e-7]`` before the logarithm.
    """
    if not isinstance(max_scores, torch.Tensor):
        max_scores = torch.as_tensor(np.asarray(max_scores, dtype=np.float64))
    y = torch.as_tensor(np.asarray(is_positive, dtype=bool))
    if max_scores.shape != y.shape or y.numel() == 0:
        raise ShapeError("need one label per heatmap and at least one heatmap")
    p = max_scores.clamp(LOG_EPS, 1 - LOG_EPS)
    return -torch.where(y, torch.log(p), torch.log1p(-p)).mean()


class AVDetNet(nn.Module):
    def __init__(self, n_channels, embed_dim=64, coord_channels=False, init_w=2.0, init_b=2.0,
                 audio_zero_init=True):
        super().__init__()
        self.image_encoder = ImageEncoder(embed_dim, coord_channels=coord_channels)
        self.audio_encoder = AudioEncoder(n_channels, embed_dim, zero_init=audio_zero_init)
        # w = softplus(w_raw) keeps the squash slope positive
        self.w_raw = nn.Parameter(torch.tensor(math.log(math.expm1(init_w))))
        self.b = nn.Parameter(torch.tensor(float(init_b)))

    @property
    def w(self):
        return F.softplus(self.w_raw)

    def forward(self, images, specs):
        f_img = self.image_encoder(images)
        f_aud = self.audio_encoder(specs)
        return heatmap(f_img, f_aud, self.w, self.b)


def upsample_bilinear(grid, out_h, out_w):
    """Separable bilinear upsampling of a 2-D grid to ``(out_h, out_w)``.

    Cell ``j`` is pinned to pixel ``floor((j + 0.5) * s)`` (``s`` the scale)
    and pixels in between interpolate linearly, so every cell value appears
    exactly in the output even for non-integer scales and the grid maximum is
    preserved.  Pixels outside the outermost centres take the border value.
    """
    grid = np.asarray(grid, dtype=np.float64)
    gh, gw = grid.shape
    if out_h < gh or out_w < gw:
        raise ShapeError(f"cannot upsample {grid.shape} to ({out_h}, {out_w})")

    def coords(n_out, n_in):
        if n_in == 1:
            return np.zeros(n_out)
        centres = np.minimum(np.floor((np.arange(n_in) + 0.5) * n_out / n_in), n_out - 1)
        return np.interp(np.arange(n_out), centres, np.arange(n_in, dtype=np.float64))

    ry, rx = coords(out_h, gh), coords(out_w, gw)
    rows = np.stack([np.interp(ry, np.arange(gh), grid[:, j]) for j in range(gw)], axis=1)
    return np.stack([np.interp(rx, np.arange(gw), rows[i]) for i in range(out_h)], axis=0)


def _as_image_batch(images, size, dtype=torch.float32):
    """Stack ``(H, W, 3)`` images into ``(N, 3, h, w)`` resized to ``size``."""
    arr = torch.as_tensor(np.stack([np.asarray(im, dtype=np.float32) for im in images]))
    x = arr.permute(0, 3, 1, 2).to(dtype)
    if tuple(x.shape[2:]) != tuple(size):
        x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)
    return x


def random_shift(x, max_shift, rng):
    """Translate each image by up to ``max_shift`` pixels, replicating edges."""
    n, _, h, w = x.shape
    p = max_shift
    padded = F.pad(x, (p, p, p, p), mode="replicate")
    d = rng.integers(0, 2 * p + 1, size=(n, 2))
    return torch.stack([padded[i, :, d[i, 0]:d[i, 0] + h, d[i, 1]:d[i, 1] + w] for i in range(n)])


@contextmanager
def _single_thread():
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(n)


def _labels_to_mask(labels):
    out = []
    for l in labels:
        l = l if isinstance(l, PairLabel) else PairLabel(str(l))
        out.append(l)
    return out


class AVDetTeacher(BaseEstimator):
    """Self-supervised audio-visual vehicle localiser.

    ``fit(images, specs, labels)`` trains on Positive and Negative pairs only;
    ``predict_heatmap`` / ``predict`` return image-resolution heatmaps and
    boxes for new pairs.
    """

    def __init__(self, n_channels=6, embed_dim=64, image_size=(128, 384), coord_channels=False,
                 audio_zero_init=True, optimizer="sgd", lr=1e-3, momentum=0.9, batch_size=16, epochs=20,
                 init_w=2.0, init_b=2.0, audio_lr_scale=1.0, audio_warmup_epochs=0, shift_px=0, seed=0,
                 threshold=0.5, verbose=False):
        self.n_channels = n_channels
        self.embed_dim = embed_dim
        self.image_size = image_size
        self.coord_channels = coord_channels
        self.audio_zero_init = audio_zero_init
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.init_w = init_w
        self.init_b = init_b
        self.audio_lr_scale = audio_lr_scale
        self.audio_warmup_epochs = audio_warmup_epochs
        self.shift_px = shift_px
        self.seed = seed
        self.threshold = threshold
        self.verbose = verbose

    def _build(self):
        torch.manual_seed(self.seed)
        return AVDetNet(self.n_channels, self.embed_dim, self.coord_channels, self.init_w, self.init_b,
                        self.audio_zero_init)

    def _optimizer(self, net):
        audio = list(net.audio_encoder.parameters())
        ids = {id(p) for p in audio}
        params = [{"params": [p for p in net.parameters() if id(p) not in ids]},
                  {"params": audio, "lr": self.lr * self.audio_lr_scale}]
        if self.optimizer == "sgd":
            return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum)
        if self.optimizer == "adam":
            return torch.optim.Adam(params, lr=self.lr)
        raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def fit(self, images, specs, labels, callback=None):
        """Train on the Positive/Negative subset of aligned ``(image, spec, label)`` triples.

        ``specs`` may be any indexable sequence of ``(C, F, T)`` arrays, e.g. a
        lazily computed :class:`~avdet.audio.SpectrogramSequence`.
        """
        labels = _labels_to_mask(labels)
        if not (len(images) == len(specs) == len(labels)):
            raise ShapeError("images, specs and labels must align")
        pos = [i for i, l in enumerate(labels) if l is PairLabel.POSITIVE]
        neg = [i for i, l in enumerate(labels) if l is PairLabel.NEGATIVE]
        if not pos or not neg:
            raise TrainingError(f"need >= 1 positive and >= 1 negative pair, got {len(pos)}/{len(neg)}")
        used = pos + neg
        x_img = _as_image_batch([images[i] for i in used], self.image_size)
        spec_cache = {}

        def spec_batch(idx):
            out = []
            for i in idx:
                if i not in spec_cache:
                    spec_cache[i] = torch.as_tensor(np.asarray(specs[i], dtype=np.float32)).to(torch.float16)
                out.append(spec_cache[i])
            return torch.stack(out).to(torch.float32)

        slot = {i: k for k, i in enumerate(used)}
        rng = np.random.default_rng(self.seed)
        with _single_thread():
            net = self._build()
            opt = self._optimizer(net)
            half = max(self.batch_size // 2, 1)
            n_batches = math.ceil(max(len(pos), len(neg)) / half)
            self.loss_curve_ = []
            self.trained_indices_ = sorted(used)
            for epoch in range(self.epochs):
                opt.param_groups[1]["lr"] = 0.0 if epoch < self.audio_warmup_epochs else self.lr * self.audio_lr_scale
                p_order = rng.permutation(len(pos))
                n_order = rng.permutation(len(neg))
                total = 0.0
                for bi in range(n_batches):
                    bp = [pos[p_order[(bi * half + k) % len(pos)]] for k in range(half)]
                    bn = [neg[n_order[(bi * half + k) % len(neg)]] for k in range(half)]
                    idx = bp + bn
                    imgs = x_img[[slot[i] for i in idx]]
                    if self.shift_px:
                        imgs = random_shift(imgs, self.shift_px, rng)
                    scores, _ = net(imgs, spec_batch(idx))
                    loss = contrastive_loss(scores.flatten(1).max(dim=1).values,
                                            [True] * len(bp) + [False] * len(bn))
                    if not torch.isfinite(loss):
                        raise NumericalError(f"non-finite loss at epoch {epoch}")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    total += float(loss.detach())
                self.loss_curve_.append(total / n_batches)
                if self.verbose:
                    print(f"epoch {epoch}: loss {self.loss_curve_[-1]:.4f}", flush=True)
                if callback is not None:
                    callback(epoch, self.loss_curve_[-1])
        self.net_ = net.eval()
        return self

    # ------------------------------------------------------------ inference

    def _check_state(self):
        if not hasattr(self, "net_"):
            raise ModelStateError("teacher is not trained")
        for name, p in self.net_.named_parameters():
            if not torch.isfinite(p).all():
                raise ModelStateError(f"parameter {name} is not finite")

    def score_grids(self, images, specs, batch_size=32):
        """Raw score grids ``(N, h, w)`` on the encoder's feature grid."""
        self._check_state()
        out = []
        with torch.no_grad(), _single_thread():
            for s in range(0, len(images), batch_size):
                x = _as_image_batch(images[s:s + batch_size], self.image_size)
                a = torch.as_tensor(np.stack([np.asarray(specs[i], dtype=np.float32)
                                              for i in range(s, min(s + batch_size, len(images)))]))
                scores, _ = self.net_(x, a)
                out.append(scores.numpy().astype(np.float64))
        return np.concatenate(out, axis=0) if out else np.zeros((0,))

    def predict_heatmap(self, images, specs):
        """Score grids bilinearly upsampled to each image's resolution."""
        grids = self.score_grids(images, specs)
        return [upsample_bilinear(g, np.shape(im)[0], np.shape(im)[1]) for g, im in zip(grids, images)]

    def predict(self, images, specs):
        """Boxes per image from thresholded, upsampled heatmaps."""
        return [extract_boxes(h, self.threshold) for h in self.predict_heatmap(images, specs)]

    def embed_image(self, image):
        """Unit-norm feature map ``(h, w, C)`` for one ``(H, W, 3)`` image."""
        self._check_state()
        with torch.no_grad():
            f = self.net_.image_encoder(_as_image_batch([image], self.image_size), check=True)
        return f[0].permute(1, 2, 0).numpy()

    def embed_audio(self, spec):
        self._check_state()
        with torch.no_grad():
            f = self.net_.audio_encoder(torch.as_tensor(np.asarray(spec, dtype=np.float32))[None], check=True)
        return f[0].numpy()

    # ------------------------------------------------------------ persistence

    def save(self, path):
        self._check_state()
        arrays = {k: v.detach().cpu().numpy() for k, v in self.net_.state_dict().items()}
        meta = {"kind": "teacher", "params": _jsonable(self.get_params()),
                "loss_curve": list(self.loss_curve_), "n_channels": self.n_channels, "seed": self.seed}
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "teacher":
            raise ValueError(f"{path} is not a teacher checkpoint")
        params = dict(meta["params"])
        params["image_size"] = tuple(params["image_size"])
        model = cls(**params)
        net = model._build()
        net.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
        model.net_ = net.eval()
        model.loss_curve_ = meta.get("loss_curve", [])
        return model


def _jsonable(params):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}
