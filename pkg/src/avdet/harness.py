"""Experiment orchestration: suite generation, the file-mediated pipeline
(labels -> teacher -> boxes -> student -> predictions -> report), the noise
sweep and report emission."""
from __future__ import annotations

import copy
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio as af
from .baselines import FlowDetector, FrameDifferenceDetector
from .dataset import AudioClip, SceneConfig, generate_scene, load_recorded_scene, render_all, synthesize_audio
from .exceptions import ConfigError, StageError
from .metrics import evaluate, heuristic_precision, labelled_precision
from .student import StudentDetector
from .teacher import AVDetTeacher

CONFIG_DIR = Path(__file__).parent / "configs"
SEED_STRIDE = 10000


# ------------------------------------------------------------------ scenes


@dataclass
class SceneData:
    """Frames, audio and (optional) ground truth of one recording run."""
    name: str
    clip: AudioClip
    timestamps: np.ndarray
    frame_ids: list
    pixels: np.ndarray  # (N, H, W, 3) uint8
    gt: list | None = None  # per-frame box lists, None where unannotated

    def __len__(self):
        return len(self.frame_ids)

    @property
    def image_size(self):
        return int(self.pixels.shape[2]), int(self.pixels.shape[1])

    def image(self, i):
        return self.pixels[i].astype(np.float32) / 255.0

    def images(self, idx=None):
        idx = range(len(self)) if idx is None else idx
        return [self.image(i) for i in idx]

    def with_clip(self, clip):
        out = copy.copy(self)
        out.clip = clip
        return out

    @classmethod
    def from_frames(cls, name, frames, clip):
        pixels = np.stack([np.round(np.asarray(f.pixels) * 255).astype(np.uint8) for f in frames])
        gt = [None if f.gt_boxes is None else [tuple(float(v) for v in b[:4]) for b in f.gt_boxes] for f in frames]
        return cls(name, clip, np.array([f.timestamp_s for f in frames]),
                   [int(f.index) if f.index is not None else i for i, f in enumerate(frames)], pixels, gt)

    @classmethod
    def load(cls, path, name=None):
        rec = load_recorded_scene(path)
        return cls.from_frames(name or Path(path).name, rec.frames, rec.audio)


@functools.lru_cache(maxsize=10)
def _generated(scene_json, seed, name):
    scene = generate_scene(SceneConfig.from_dict(json.loads(scene_json)), seed)
    return SceneData.from_frames(name, render_all(scene), synthesize_audio(scene))


@dataclass
class SuiteConfig:
    """Scene configs and seeds for the training and held-out splits.

    Actual scene seeds are ``seed + 10000 * experiment_seed``.
    """
    scene: dict = field(default_factory=dict)
    train_seeds: list = field(default_factory=lambda: [0])
    test_seeds: list = field(default_factory=lambda: [100])
    test_overrides: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"scene", "train_seeds", "test_seeds", "test_overrides"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown suite field")
        suite = cls(**d)
        SceneConfig.from_dict(suite.scene)
        SceneConfig.from_dict({**suite.scene, **suite.test_overrides})
        if not suite.train_seeds:
            raise ConfigError("train_seeds", "need at least one training scene")
        return suite

    def scene_specs(self, experiment_seed):
        off = SEED_STRIDE * int(experiment_seed)
        train_cfg = json.dumps(self.scene, sort_keys=True)
        test_cfg = json.dumps({**self.scene, **self.test_overrides}, sort_keys=True)
        train = [(train_cfg, s + off, f"train_{k:02d}") for k, s in enumerate(self.train_seeds)]
        test = [(test_cfg, s + off, f"test_{k:02d}") for k, s in enumerate(self.test_seeds)]
        return train, test

    def load(self, experiment_seed):
        train, test = self.scene_specs(experiment_seed)
        return [_generated(*t) for t in train], [_generated(*t) for t in test]


def load_suite(name_or_path):
    p = Path(name_or_path)
    if not p.suffix:
        p = CONFIG_DIR / f"{name_or_path}.json"
    return json.loads(p.read_text())


# ------------------------------------------------------------------ config


def _snr(v):
    if v is None:
        return None
    v = float(v)
    if math.isnan(v):
        raise ConfigError("snr_db", "NaN is not a valid SNR")
    return v


@dataclass
class ExperimentConfig:
    suite: dict = field(default_factory=dict)
    channels: list = field(default_factory=lambda: [6])
    heuristic: dict = field(default_factory=lambda: {"quiet_frac": 0.15, "loud_frac": 0.15, "window_s": 0.2})
    teacher: dict = field(default_factory=dict)
    student: dict | None = None
    student_frame_stride: int = 2
    baselines: list = field(default_factory=lambda: ["framediff"])
    shuffle_control: bool | list = False  # True, or the channel counts that get a control
    snr_db: float | None = None
    snr_list: list = field(default_factory=lambda: [80.0, 40.0, 0.0])
    sweep_channels: int = 6
    seed: int = 0
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if isinstance(self.suite, str):
            self.suite = load_suite(self.suite)
        self.suite_ = SuiteConfig.from_dict(self.suite)
        for c in self.channels:
            if c not in (1, 2, 4, 6):
                raise ConfigError("channels", f"unsupported channel count {c}")
        if not self.channels:
            raise ConfigError("channels", "need at least one channel count")
        q, l = self.heuristic.get("quiet_frac", 0.15), self.heuristic.get("loud_frac", 0.15)
        if not (0 < q and 0 < l and q + l < 1):
            raise ConfigError("heuristic", "need 0 < quiet_frac, loud_frac and quiet_frac + loud_frac < 1")
        for b in self.baselines:
            if b not in ("framediff", "flow"):
                raise ConfigError("baselines", f"unknown baseline {b!r}")
        if isinstance(self.shuffle_control, list):
            if any(c not in self.channels for c in self.shuffle_control):
                raise ConfigError("shuffle_control", "channel counts must be a subset of channels")
        elif not isinstance(self.shuffle_control, bool):
            raise ConfigError("shuffle_control", "must be a bool or a list of channel counts")
        self.snr_db = _snr(self.snr_db)
        self.snr_list = [_snr(v) for v in self.snr_list]
        if self.student_frame_stride < 1:
            raise ConfigError("student_frame_stride", "must be >= 1")
        try:
            AVDetTeacher(**self.teacher)
            if self.student is not None:
                StudentDetector(**self.student)
        except TypeError as exc:
            raise ConfigError("teacher/student", str(exc)) from exc

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown experiment field")
        return cls(**d)

    @classmethod
    def from_file(cls, path, **overrides):
        d = json.loads(Path(path).read_text())
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["snr_db"] = _json_float(self.snr_db)
        d["snr_list"] = [_json_float(v) for v in self.snr_list]
        return d

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)


def standard_config(**overrides):
    """The shipped standard experiment (suite, hyper-parameters) with overrides (None values included)."""
    d = json.loads((CONFIG_DIR / "standard_experiment.json").read_text())
    d.update(overrides)
    return ExperimentConfig.from_dict(d)


# ------------------------------------------------------------------ json io


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    return "inf" if v == math.inf else v


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def boxes_to_json(frame_ids, boxes):
    return [{"frame": int(f), "boxes": [[float(v) for v in b] for b in bs]} for f, bs in zip(frame_ids, boxes)]


def boxes_from_json(entries):
    return {int(e["frame"]): [tuple(b) for b in e["boxes"]] for e in entries}


def labels_to_json(labels, volumes, frame_ids):
    return [{"frame": int(f), "label": l.value, "volume": float(v)} for f, l, v in zip(frame_ids, labels, volumes)]


def labels_from_json(entries):
    return [af.PairLabel(e["label"]) for e in entries]


# ------------------------------------------------------------------ stages


def _stage(name, path, compute, force=False):
    """Run ``compute`` unless ``path`` already exists; wrap failures with the stage name."""
    path = Path(path)
    if path.exists() and not force:
        return
    try:
        compute(path)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with stage context
        if path.exists():
            path.unlink()
        raise StageError(name, exc) from exc


def noise_seed(experiment_seed, scene_index):
    return int(experiment_seed) * 1000 + int(scene_index)


def apply_noise(scenes, snr_db, experiment_seed, offset=0):
    if snr_db is None or snr_db == math.inf:
        return list(scenes), [None] * len(scenes)
    out, measured = [], []
    for k, s in enumerate(scenes):
        noisy = af.add_noise(s.clip, snr_db, noise_seed(experiment_seed, k + offset))
        measured.append(float(np.mean(af.measured_snr_db(s.clip, noisy))))
        out.append(s.with_clip(noisy))
    return out, measured


def classify_scene(scene: SceneData, quiet_frac=0.15, loud_frac=0.15, window_s=0.2):
    vol = af.volume_series(scene.clip, scene.timestamps, window_s)
    return af.classify_pairs(vol, quiet_frac, loud_frac), vol.values


def _pairs(scenes, labels, kinds=(af.PairLabel.POSITIVE, af.PairLabel.NEGATIVE)):
    """``(scene index, frame index, label)`` for frames whose label is in ``kinds``."""
    return [(k, i, l) for k, labs in enumerate(labels) for i, l in enumerate(labs) if l in kinds]


def _spec_sequence(scenes, items, channels):
    return af.SpectrogramSequence([s.clip for s in scenes],
                                  [(k, scenes[k].timestamps[i]) for k, i in items],
                                  use_channels=af.channel_subset(channels))


def train_teacher_on(scenes, labels, channels, hyper, seed, shuffle=False):
    """Fit a teacher on the Positive/Negative pairs of ``scenes``.

    With ``shuffle`` the images are permuted relative to audio and labels (the
    mismatched-pairs control).
    """
    pairs = _pairs(scenes, labels)
    if not pairs:
        raise ConfigError("labels", "no Positive/Negative pairs")
    images = [scenes[k].image(i) for k, i, _ in pairs]
    if shuffle:
        perm = np.random.default_rng([seed, 7]).permutation(len(images))
        images = [images[p] for p in perm]
    specs = _spec_sequence(scenes, [(k, i) for k, i, _ in pairs], channels)
    model = AVDetTeacher(**{**hyper, "n_channels": channels, "seed": seed})
    model.fit(images, specs, [l for _, _, l in pairs])
    return model, pairs


def teacher_boxes(model, scene: SceneData, channels, idx=None):
    idx = list(range(len(scene))) if idx is None else list(idx)
    out = []
    for s in range(0, len(idx), 100):
        chunk = idx[s:s + 100]
        specs = _spec_sequence([scene], [(0, i) for i in chunk], channels)
        out += model.predict(scene.images(chunk), specs)
    return idx, out


def _scene_preds(scene, idx, boxes):
    return boxes_to_json([scene.frame_ids[i] for i in idx], boxes)


def _pool(scenes, preds_by_scene):
    """Flatten per-scene predictions and GT into aligned per-frame lists."""
    P, G = [], []
    for s in scenes:
        pm = boxes_from_json(preds_by_scene.get(s.name, []))
        for i, f in enumerate(s.frame_ids):
            P.append(pm.get(f, []))
            G.append(s.gt[i] if s.gt is not None else None)
    return P, G


def run_experiment(cfg: ExperimentConfig, force=False):
    """Run the full pipeline; returns the report dict (also written to report.json)."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    try:
        train, test = cfg.suite_.load(cfg.seed)
    except Exception as exc:  # noqa: BLE001
        raise StageError("generate", exc) from exc
    train, measured_train = apply_noise(train, cfg.snr_db, cfg.seed)
    test, measured_test = apply_noise(test, cfg.snr_db, cfg.seed, offset=len(train))
    h = cfg.heuristic

    def do_labels(path):
        scenes = []
        for s in train:
            labs, vols = classify_scene(s, h.get("quiet_frac", 0.15), h.get("loud_frac", 0.15),
                                        h.get("window_s", 0.2))
            scenes.append({"scene": s.name, "labels": labels_to_json(labs, vols, s.frame_ids)})
        write_json(path, {"scenes": scenes,
                          "measured_snr_db": [v for v in measured_train + measured_test if v is not None]})

    _stage("classify", out / "labels.json", do_labels, force)
    label_doc = read_json(out / "labels.json")
    labels = [labels_from_json(e["labels"]) for e in label_doc["scenes"]]

    preds_path = out / "preds.json"
    preds = read_json(preds_path) if preds_path.exists() and not force else {}
    training = {}

    def remember(method, fn):
        if method not in preds:
            try:
                preds[method] = fn()
            except Exception as exc:  # noqa: BLE001
                raise StageError(method, exc) from exc

    for C in cfg.channels:
        ckpt = out / f"teacher_c{C}.ckpt"

        def do_teacher(path, C=C):
            model, pairs = train_teacher_on(train, labels, C, cfg.teacher, cfg.seed)
            model.save(path)
            write_json(out / f"teacher_c{C}.log.json", {
                "loss_curve": model.loss_curve_,
                "pairs": [{"scene": train[k].name, "frame": train[k].frame_ids[i], "label": l.value}
                          for k, i, l in pairs]})

        _stage(f"train-teacher (C={C})", ckpt, do_teacher, force)
        teacher = AVDetTeacher.load(ckpt)
        training[f"teacher_c{C}"] = teacher.loss_curve_

        def do_boxes(path, C=C, teacher=teacher):
            doc = {"train": {}, "test": {}}
            for s in train:
                idx, b = teacher_boxes(teacher, s, C, range(0, len(s), cfg.student_frame_stride))
                doc["train"][s.name] = _scene_preds(s, idx, b)
            for s in test:
                idx, b = teacher_boxes(teacher, s, C)
                doc["test"][s.name] = _scene_preds(s, idx, b)
            write_json(path, doc)

        _stage(f"extract-boxes (C={C})", out / f"boxes_c{C}.json", do_boxes, force)
        boxes = read_json(out / f"boxes_c{C}.json")
        remember(f"teacher_c{C}", lambda: boxes["test"])

        if cfg.student is not None:
            def do_student(path, C=C, boxes=boxes):
                items, targets = [], []
                for k, s in enumerate(train):
                    bm = boxes_from_json(boxes["train"][s.name])
                    for i, f in enumerate(s.frame_ids):
                        if f in bm:
                            items.append((k, i))
                            targets.append(bm[f])
                seq = _spec_sequence(train, items, C)
                model = StudentDetector(**{**cfg.student, "n_channels": C, "seed": cfg.seed,
                                           "image_size": train[0].image_size})
                model.fit(seq, targets)
                model.save(path)

            _stage(f"train-student (C={C})", out / f"student_c{C}.ckpt", do_student, force)
            student = StudentDetector.load(out / f"student_c{C}.ckpt")
            training[f"student_c{C}"] = student.loss_curve_

            def student_preds(C=C, student=student):
                res = {}
                for s in test:
                    seq = _spec_sequence([s], [(0, i) for i in range(len(s))], C)
                    res[s.name] = _scene_preds(s, range(len(s)), student.predict(seq))
                return res

            remember(f"student_c{C}", student_preds)

        if cfg.shuffle_control is True or (isinstance(cfg.shuffle_control, list) and C in cfg.shuffle_control):
            cckpt = out / f"control_c{C}.ckpt"

            def do_control(path, C=C):
                model, _ = train_teacher_on(train, labels, C, cfg.teacher, cfg.seed, shuffle=True)
                model.save(path)

            _stage(f"train-control (C={C})", cckpt, do_control, force)
            control = AVDetTeacher.load(cckpt)

            def control_preds(C=C, control=control):
                return {s.name: _scene_preds(s, *teacher_boxes(control, s, C)) for s in test}

            remember(f"control_c{C}", control_preds)

    for b in cfg.baselines:
        det = FrameDifferenceDetector() if b == "framediff" else FlowDetector()
        remember(b, lambda det=det: {s.name: _scene_preds(s, range(len(s)), det.predict(s.images()))
                                     for s in test})
    write_json(preds_path, preds)

    def do_report(path):
        write_json(path, build_report(cfg, train, test, labels, label_doc, preds, training))

    _stage("evaluate", out / "report.json", do_report, force)
    return read_json(out / "report.json")


def build_report(cfg, train, test, labels, label_doc, preds, training):
    all_labels, presence, per_scene = [], [], []
    for s, labs in zip(train, labels):
        if s.gt is None:
            continue
        pres = [bool(g) for g in s.gt]
        pp, npr = heuristic_precision(labs, pres)
        per_scene.append({"scene": s.name, "positive": pp, "negative": npr,
                          "labelled": labelled_precision(labs, pres)})
        all_labels += labs
        presence += pres
    heur = None
    if all_labels:
        pp, npr = heuristic_precision(all_labels, presence)
        heur = {"positive": pp, "negative": npr, "labelled": labelled_precision(all_labels, presence),
                "per_scene": per_scene}
    methods = {}
    image_size = test[0].image_size if test else None
    for name in sorted(preds):
        P, G = _pool(test, preds[name])
        methods[name] = evaluate(P, G, image_size=image_size).to_dict()
    trace = None
    if train:
        vols = [e["volume"] for e in label_doc["scenes"][0]["labels"]]
        v0 = max(vols) if vols else 0.0
        trace = {"scene": train[0].name, "timestamps": [float(t) for t in train[0].timestamps],
                 "volume": [v / v0 if v0 > 0 else 0.0 for v in vols],
                 "labels": [l.value for l in labels[0]]}
    ms = label_doc.get("measured_snr_db") or []
    return {"config": cfg.to_dict(), "heuristic": heur, "methods": methods, "training": training,
            "volume_trace": trace, "measured_snr_db": float(np.mean(ms)) if ms else None}


# ------------------------------------------------------------------ sweep


def _snr_tag(snr):
    return "clean" if snr is None or snr == math.inf else f"{snr:g}dB"


def noise_sweep(cfg: ExperimentConfig, snr_list=None, force=False):
    """Heuristic precision and teacher AP@0.1 for each SNR; writes ``sweep.json``."""
    snr_list = cfg.snr_list if snr_list is None else [_snr(v) for v in snr_list]
    if not snr_list:
        raise ConfigError("snr_list", "empty SNR list")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for snr in snr_list:
        sub = cfg.replace(snr_db=_json_float(snr), channels=[cfg.sweep_channels], student=None, baselines=[],
                          shuffle_control=False, out_dir=str(out / f"snr_{_snr_tag(snr)}"))
        rep = run_experiment(sub, force=force)
        heur = rep["heuristic"] or {}
        rows.append({"snr_db": _json_float(snr), "heuristic_precision": heur.get("labelled"),
                     "positive_precision": heur.get("positive"), "negative_precision": heur.get("negative"),
                     "teacher_ap@0.1": rep["methods"][f"teacher_c{cfg.sweep_channels}"]["ap"]["0.1"],
                     "measured_snr_db": rep["measured_snr_db"]})
    write_json(out / "sweep.json", {"rows": rows})
    return rows


# ------------------------------------------------------------------ report


def _fmt(v, nd=3):
    return "n/a" if v is None else f"{v:.{nd}f}"


def _svg_plot(series, title, xlabel, ylabel, width=480, height=300):
    """Minimal deterministic line-plot SVG; ``series`` is a list of (name, xs, ys)."""
    pad = 45
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys if y is not None]
    x0, x1 = (min(xs_all), max(xs_all)) if xs_all else (0, 1)
    y0, y1 = (min(0.0, min(ys_all)), max(1.0, max(ys_all))) if ys_all else (0, 1)
    x1 = x1 if x1 > x0 else x0 + 1

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">{xlabel}</text>',
             f'<text x="12" y="{height / 2:.1f}" font-size="11" transform="rotate(-90 12 {height / 2:.1f})" '
             f'text-anchor="middle">{ylabel}</text>']
    for k, (name, xs, ys) in enumerate(series):
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys) if y is not None)
        c = colors[k % len(colors)]
        lines.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        lines.append(f'<text x="{width - pad - 4}" y="{pad + 14 * k}" text-anchor="end" font-size="11" '
                     f'fill="{c}">{name}</text>')
    for v in (x0, x1):
        lines.append(f'<text x="{px(v):.2f}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{v:g}</text>')
    for v in (y0, y1):
        lines.append(f'<text x="{pad - 4}" y="{py(v) + 4:.2f}" text-anchor="end" font-size="10">{v:g}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def emit_report(bundle, out_dir):
    """Write ``report.md`` plus SVG plots for a report dict (or run directory).

    ``bundle`` may also carry a ``sweep`` list of rows from :func:`noise_sweep`.
    Returns the list of written paths.
    """
    if isinstance(bundle, (str, Path)):
        d = Path(bundle)
        bundle = read_json(d / "report.json") if (d / "report.json").exists() else {}
        if (d / "sweep.json").exists():
            bundle["sweep"] = read_json(d / "sweep.json")["rows"]
    bundle = bundle or {}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    md = ["# Experiment report", ""]
    missing = [k for k in ("heuristic", "methods", "sweep") if not bundle.get(k)]
    if missing:
        md += [f"Missing stages: {', '.join(missing)}", ""]

    md += ["## Volume heuristic", ""]
    heur = bundle.get("heuristic")
    if heur:
        md += ["| split | positive precision | negative precision | labelled precision |",
               "|---|---|---|---|",
               f"| all training scenes | {_fmt(heur['positive'])} | {_fmt(heur['negative'])} | "
               f"{_fmt(heur['labelled'])} |"]
        md += [f"| {r['scene']} | {_fmt(r['positive'])} | {_fmt(r['negative'])} | {_fmt(r['labelled'])} |"
               for r in heur.get("per_scene", [])]
    else:
        md.append("No results.")
    md.append("")

    md += ["## Detection", ""]
    methods = bundle.get("methods")
    if methods:
        md += ["| method | AP@0.1 | AP@0.2 | AP@0.3 | CD | CD (matched) |", "|---|---|---|---|---|---|"]
        for name in sorted(methods):
            r = methods[name]
            label = name + (" (block matching, approximates learned flow)" if name == "flow" else "")
            md.append(f"| {label} | {_fmt(r['ap'].get('0.1'))} | {_fmt(r['ap'].get('0.2'))} | "
                      f"{_fmt(r['ap'].get('0.3'))} | {_fmt(r['cd'], 1)} | {_fmt(r['cd_matched'], 1)} |")
        md += ["", f"CD adds {_fmt(next(iter(methods.values()))['cd_penalty'], 1)} px per unmatched box."]
    else:
        md.append("No results.")
    md.append("")

    md += ["## Noise sweep", ""]
    sweep = bundle.get("sweep")
    if sweep:
        md += ["| SNR (dB) | heuristic precision | teacher AP@0.1 | measured SNR (dB) |", "|---|---|---|---|"]
        for r in sweep:
            md.append(f"| {r['snr_db']} | {_fmt(r['heuristic_precision'])} | {_fmt(r['teacher_ap@0.1'])} | "
                      f"{_fmt(r.get('measured_snr_db'), 2)} |")
        finite = [r for r in sweep if r["snr_db"] not in (None, "inf")]
        xs = [float(r["snr_db"]) for r in finite]
        svg = _svg_plot([("heuristic precision", xs, [r["heuristic_precision"] for r in finite]),
                         ("teacher AP@0.1", xs, [r["teacher_ap@0.1"] for r in finite])],
                        "Noise sensitivity", "SNR (dB)", "score")
        (out / "sweep.svg").write_text(svg)
        written.append(out / "sweep.svg")
        md += ["", "![noise sweep](sweep.svg)"]
    else:
        md.append("No results.")
    md.append("")

    trace = bundle.get("volume_trace")
    if trace:
        svg = _svg_plot([("V / V0", trace["timestamps"], trace["volume"])],
                        f"Channel-averaged volume ({trace['scene']})", "time (s)", "V / V0")
        (out / "volume.svg").write_text(svg)
        written.append(out / "volume.svg")
        md += ["## Volume trace", "", "![volume](volume.svg)", ""]

    (out / "report.md").write_text("\n".join(md))
    written.insert(0, out / "report.md")
    return written
