"""Audio-only student detector distilled from teacher boxes.

A small conv backbone over the ``C x 128 x 512`` spectrogram stack feeds a
dense head that predicts, for every cell of a ``G_y x G_x`` image grid, an
objectness probability and a box ``(cx, cy, w, h)``.  Box centres are
offsets within the cell; sizes are fractions of the image.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import nn

from .audio import SpectrogramParams, spectrogram_stack
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import AudioClip, ScoredBox
from .exceptions import ConfigError, ModelStateError, NumericalError, ShapeError, TrainingError
from .teacher import SPEC_SCALE, _single_thread

EPS = 1e-7
SUPPORTED_CHANNELS = (1, 2, 4, 6)


class StudentNet(nn.Module):
    def __init__(self, n_channels, grid=(4, 12), widths=(16, 32, 64, 64), hidden=256, prior=0.01):
        super().__init__()
        self.n_channels = n_channels
        self.grid = tuple(grid)
        layers, cin = [], n_channels
        for i, w in enumerate(widths):
            if i == 0:
                layers.append(nn.Conv2d(cin, w, 4, stride=4))
            else:
                layers.append(nn.Conv2d(cin, w, 3, stride=2, padding=1))
            layers.append(nn.ReLU())
            cin = w
        self.backbone = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d((4, 16))
        gy, gx = self.grid
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(cin * 64, hidden), nn.ReLU(),
                                  nn.Linear(hidden, gy * gx * 5))
        # objectness starts at a low prior so the many empty cells do not swamp early training
        with torch.no_grad():
            self.head[-1].bias.view(gy, gx, 5)[..., 0] = -math.log((1 - prior) / prior)

    def forward(self, x):
        """Returns ``(objectness logits (B, gy, gx), box params in (0, 1) (B, gy, gx, 4))``."""
        if x.shape[1] != self.n_channels:
            raise ShapeError(f"expected {self.n_channels} spectrogram channels, got {x.shape[1]}")
        gy, gx = self.grid
        out = self.head(self.pool(self.backbone(x * SPEC_SCALE))).view(-1, gy, gx, 5)
        return out[..., 0], torch.sigmoid(out[..., 1:])


def build_student(n_channels, grid=(4, 12), seed=0):
    if n_channels not in SUPPORTED_CHANNELS:
        raise ConfigError("n_channels", f"must be one of {SUPPORTED_CHANNELS}, got {n_channels}")
    torch.manual_seed(seed)
    return StudentNet(n_channels, grid)


def focal_loss(pred_obj, target_obj, gamma=2.0):
    """Mean over cells of ``-(1 - p_t)^gamma * log(p_t)``, probabilities clamped to ``[eps, 1 - eps]``.

    Works on numpy arrays (returns a float) or torch tensors (returns a tensor).
    """
    as_numpy = not isinstance(pred_obj, torch.Tensor)
    p = torch.as_tensor(np.asarray(pred_obj, dtype=np.float64)) if as_numpy else pred_obj
    t = torch.as_tensor(np.asarray(target_obj), dtype=p.dtype) if not isinstance(target_obj, torch.Tensor) \
        else target_obj.to(p.dtype)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {tuple(p.shape)} != target shape {tuple(t.shape)}")
    if gamma < 0:
        raise ConfigError("gamma", "must be >= 0")
    p = p.clamp(EPS, 1 - EPS)
    pt = torch.where(t > 0.5, p, 1 - p)
    loss = (-(1 - pt) ** gamma * torch.log(pt)).mean()
    return float(loss) if as_numpy else loss


def detection_loss(obj_logits, box_pred, obj_t, box_t, gamma=2.0, reg_weight=1.0):
    """Focal objectness term plus smooth-L1 box regression on positive cells."""
    loss = focal_loss(torch.sigmoid(obj_logits), obj_t, gamma)
    pos = obj_t > 0.5
    if pos.any():
        loss = loss + reg_weight * F.smooth_l1_loss(box_pred[pos], box_t[pos], beta=0.1)
    return loss


def encode_targets(boxes, image_size=(300, 100), grid=(4, 12)):
    """Objectness ``(gy, gx)`` and box targets ``(gy, gx, 4)`` for one frame.

    A cell is positive iff a box centre falls in it; when several centres
    share a cell the one nearest the cell centre wins.
    """
    W, H = image_size
    gy, gx = grid
    obj = np.zeros((gy, gx), dtype=np.float32)
    tgt = np.zeros((gy, gx, 4), dtype=np.float32)
    best = np.full((gy, gx), np.inf)
    for b in boxes:
        x0, y0, x1, y1 = (float(v) for v in tuple(b)[:4])
        cx, cy = 0.5 * (x0 + x1) / W * gx, 0.5 * (y0 + y1) / H * gy
        col, row = min(max(int(math.floor(cx)), 0), gx - 1), min(max(int(math.floor(cy)), 0), gy - 1)
        d = math.hypot(cx - (col + 0.5), cy - (row + 0.5))
        if d < best[row, col]:
            best[row, col] = d
            obj[row, col] = 1.0
            tgt[row, col] = (np.clip(cx - col, 0, 1), np.clip(cy - row, 0, 1), (x1 - x0) / W, (y1 - y0) / H)
    return obj, tgt


def decode_boxes(obj, box, image_size=(300, 100), threshold=0.5):
    """Boxes (pixel coordinates, clipped to the image) for cells with objectness above ``threshold``."""
    W, H = image_size
    gy, gx = obj.shape
    out = []
    for row in range(gy):
        for col in range(gx):
            p = float(obj[row, col])
            if p <= threshold:
                continue
            ox, oy, bw, bh = (float(v) for v in box[row, col])
            cx, cy = (col + ox) / gx * W, (row + oy) / gy * H
            x0, x1 = max(cx - bw * W / 2, 0.0), min(cx + bw * W / 2, float(W))
            y0, y1 = max(cy - bh * H / 2, 0.0), min(cy + bh * H / 2, float(H))
            if x1 > x0 and y1 > y0:
                out.append(ScoredBox(x0, y0, x1, y1, p))
    return out


def _stack(specs):
    """One float32 tensor from a sequence of stacks, filled in place to keep peak memory at one copy."""
    first = np.asarray(specs[0], dtype=np.float32)
    out = np.empty((len(specs),) + first.shape, dtype=np.float32)
    out[0] = first
    for i in range(1, len(specs)):
        out[i] = specs[i]
    return torch.from_numpy(out)


class StudentDetector(BaseEstimator):
    """Audio-only box detector trained on (spectrogram stack, teacher boxes) pairs."""

    def __init__(self, n_channels=6, grid=(4, 12), image_size=(300, 100), gamma=2.0, lr=1e-3,
                 epochs=30, batch_size=16, reg_weight=1.0, threshold=0.5, seed=0, verbose=False):
        self.n_channels = n_channels
        self.grid = grid
        self.image_size = image_size
        self.gamma = gamma
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.reg_weight = reg_weight
        self.threshold = threshold
        self.seed = seed
        self.verbose = verbose

    def fit(self, specs, boxes):
        if len(specs) == 0:
            raise TrainingError("empty training set")
        if len(specs) != len(boxes):
            raise ShapeError("specs and boxes must align")
        targets = [encode_targets(b or [], self.image_size, self.grid) for b in boxes]
        obj_t = torch.as_tensor(np.stack([t[0] for t in targets]))
        box_t = torch.as_tensor(np.stack([t[1] for t in targets]))
        x = _stack(specs)
        rng = np.random.default_rng(self.seed)
        with _single_thread():
            net = build_student(self.n_channels, self.grid, self.seed)
            opt = torch.optim.Adam(net.parameters(), lr=self.lr)
            self.loss_curve_ = []
            for epoch in range(self.epochs):
                order = rng.permutation(len(x))
                total, n = 0.0, 0
                for s in range(0, len(order), self.batch_size):
                    idx = torch.as_tensor(order[s:s + self.batch_size])
                    logits, box = net(x[idx])
                    loss = detection_loss(logits, box, obj_t[idx], box_t[idx], self.gamma, self.reg_weight)
                    if not torch.isfinite(loss):
                        raise NumericalError(f"non-finite loss at epoch {epoch}")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    total += float(loss.detach()) * len(idx)
                    n += len(idx)
                self.loss_curve_.append(total / n)
                if self.verbose:
                    print(f"epoch {epoch}: loss {self.loss_curve_[-1]:.4f}", flush=True)
        self.net_ = net.eval()
        return self

    def _check_state(self):
        if not hasattr(self, "net_"):
            raise ModelStateError("student is not trained")
        for name, p in self.net_.named_parameters():
            if not torch.isfinite(p).all():
                raise ModelStateError(f"parameter {name} is not finite")

    def predict_raw(self, specs, batch_size=64):
        """Objectness ``(N, gy, gx)`` and boxes ``(N, gy, gx, 4)``."""
        self._check_state()
        objs, boxes = [], []
        with torch.no_grad(), _single_thread():
            for s in range(0, len(specs), batch_size):
                x = torch.as_tensor(np.stack([np.asarray(specs[i], dtype=np.float32)
                                              for i in range(s, min(s + batch_size, len(specs)))]))
                logits, box = self.net_(x)
                objs.append(torch.sigmoid(logits).numpy())
                boxes.append(box.numpy())
        return np.concatenate(objs), np.concatenate(boxes)

    def predict(self, specs):
        obj, box = self.predict_raw(specs)
        return [decode_boxes(o, b, self.image_size, self.threshold) for o, b in zip(obj, box)]

    def save(self, path):
        self._check_state()
        arrays = {k: v.detach().cpu().numpy() for k, v in self.net_.state_dict().items()}
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        save_checkpoint(path, arrays, {"kind": "student", "params": params, "loss_curve": self.loss_curve_,
                                       "n_channels": self.n_channels, "seed": self.seed})

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "student":
            raise ValueError(f"{path} is not a student checkpoint")
        params = dict(meta["params"])
        params["grid"], params["image_size"] = tuple(params["grid"]), tuple(params["image_size"])
        model = cls(**params)
        net = build_student(model.n_channels, model.grid, model.seed)
        net.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
        model.net_ = net.eval()
        model.loss_curve_ = meta.get("loss_curve", [])
        return model


def delay_toy_dataset(n, seed=0, image_size=(300, 100), box_size=(60, 30), max_delay_s=0.15,
                      burst_s=0.1, sample_rate_hz=44100, params: SpectrogramParams = SpectrogramParams()):
    """Two-channel noise bursts whose inter-channel delay encodes the box x position.

    Channel 1 lags channel 0 by ``(2 * cx / W - 1) * max_delay_s``.  Returns
    ``(specs (n, 2, F, T) float32, boxes, centres_x)``.
    """
    rng = np.random.default_rng(seed)
    W, H = image_size
    bw, bh = box_size
    n_samples = int(round(params.window_s * sample_rate_hz))
    burst = int(round(burst_s * sample_rate_hz))
    env = np.hanning(burst)
    specs, boxes, centres = [], [], []
    for _ in range(n):
        cx = rng.uniform(bw / 2, W - bw / 2)
        delay = (2 * cx / W - 1) * max_delay_s
        start = n_samples // 2 - burst // 2 - int(round(delay * sample_rate_hz / 2))
        lag = int(round(delay * sample_rate_hz))
        sig = np.zeros((2, n_samples))
        noise = rng.standard_normal(burst) * env
        sig[0, start:start + burst] = noise
        sig[1, start + lag:start + lag + burst] = noise
        sig += 1e-3 * rng.standard_normal(sig.shape)
        clip = AudioClip(sig, sample_rate_hz)
        specs.append(spectrogram_stack(clip, params.window_s / 2, params).grid)
        boxes.append([(cx - bw / 2, H / 2 - bh / 2, cx + bw / 2, H / 2 + bh / 2)])
        centres.append(cx)
    return np.stack(specs).astype(np.float32), boxes, np.array(centres)
