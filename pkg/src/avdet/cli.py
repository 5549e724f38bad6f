"""Command-line entry point: ``avdet <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as hz
from .baselines import FlowDetector, FrameDifferenceDetector
from .dataset import SceneConfig, generate_scene, write_scene
from .exceptions import AVDetError, ConfigError, LoadError
from .metrics import evaluate
from .student import StudentDetector
from .teacher import AVDetTeacher

log = logging.getLogger("avdet")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        overrides["out_dir"] = args.out_dir
    if args.config:
        return hz.ExperimentConfig.from_file(args.config, **overrides)
    return hz.standard_config(**overrides)


def cmd_generate(args):
    cfg = _config(args)
    out = Path(args.out)
    train, test = cfg.suite_.scene_specs(cfg.seed)
    for scene_json, seed, name in train + test:
        scene = generate_scene(SceneConfig.from_dict(json.loads(scene_json)), seed)
        write_scene(scene, out / name)
        log.info("wrote %s", out / name)


def cmd_classify(args):
    scene = hz.SceneData.load(args.scene)
    labels, vols = hz.classify_scene(scene, args.quiet_frac, args.loud_frac, args.window_s)
    hz.write_json(args.out, hz.labels_to_json(labels, vols, scene.frame_ids))


def cmd_train_teacher(args):
    cfg = _config(args)
    scenes = [hz.SceneData.load(d) for d in args.scenes]
    h = cfg.heuristic
    labels = [hz.classify_scene(s, h.get("quiet_frac", 0.15), h.get("loud_frac", 0.15),
                                h.get("window_s", 0.2))[0] for s in scenes]
    hyper = dict(cfg.teacher)
    if args.epochs is not None:
        hyper["epochs"] = args.epochs
    model, _ = hz.train_teacher_on(scenes, labels, args.channels, hyper, cfg.seed)
    model.save(args.out)


def cmd_extract_boxes(args):
    model = AVDetTeacher.load(args.teacher)
    if args.threshold is not None:
        model.threshold = args.threshold
    scene = hz.SceneData.load(args.scene)
    idx, boxes = hz.teacher_boxes(model, scene, model.n_channels)
    hz.write_json(args.out, hz._scene_preds(scene, idx, boxes))


def _boxes_for(scenes, box_files):
    if len(box_files) == 1 and len(scenes) > 1:
        doc = hz.read_json(box_files[0])
        return [hz.boxes_from_json(doc[s.name]) for s in scenes]
    if len(box_files) != len(scenes):
        raise ConfigError("boxes", "give one boxes file per scene or one file keyed by scene name")
    return [hz.boxes_from_json(hz.read_json(p)) for p in box_files]


def cmd_train_student(args):
    cfg = _config(args)
    scenes = [hz.SceneData.load(d) for d in args.scenes]
    items, targets = [], []
    for k, (s, bm) in enumerate(zip(scenes, _boxes_for(scenes, args.boxes))):
        for i, f in enumerate(s.frame_ids):
            if f in bm:
                items.append((k, i))
                targets.append(bm[f])
    hyper = dict(cfg.student or {})
    if args.epochs is not None:
        hyper["epochs"] = args.epochs
    model = StudentDetector(**{**hyper, "n_channels": args.channels, "seed": cfg.seed,
                               "image_size": scenes[0].image_size})
    model.fit(hz._spec_sequence(scenes, items, args.channels), targets)
    model.save(args.out)


def cmd_predict(args):
    model = StudentDetector.load(args.student)
    scene = hz.SceneData.load(args.scene)
    seq = hz._spec_sequence([scene], [(0, i) for i in range(len(scene))], model.n_channels)
    hz.write_json(args.out, hz._scene_preds(scene, range(len(scene)), model.predict(seq)))


def cmd_baseline(args):
    scene = hz.SceneData.load(args.scene)
    det = FrameDifferenceDetector(args.threshold or 0.1) if args.method == "framediff" \
        else FlowDetector(args.threshold or 1.0)
    hz.write_json(args.out, hz._scene_preds(scene, range(len(scene)), det.predict(scene.images())))


def cmd_evaluate(args):
    preds = hz.boxes_from_json(hz.read_json(args.preds))
    raw = hz.read_json(args.gt)
    if not isinstance(raw, list):
        raise LoadError(LoadError.MALFORMED_JSON, "annotations must be a list of {frame, boxes}")
    gts = hz.boxes_from_json(raw)
    size = tuple(args.image_size) if args.image_size else None
    meta = Path(args.gt).with_name("meta.json")
    if size is None and meta.exists():
        cam = json.loads(meta.read_text()).get("camera", {})
        if "image_width" in cam:
            size = (cam["image_width"], cam["image_height"])
    rep = evaluate({f: preds.get(f, []) for f in gts}, gts, image_size=size)
    hz.write_json(args.out, rep.to_dict())


def cmd_run(args):
    cfg = _config(args)
    hz.run_experiment(cfg, force=args.force)
    hz.emit_report(cfg.out_dir, cfg.out_dir)


def cmd_noise_sweep(args):
    cfg = _config(args)
    rows = hz.noise_sweep(cfg, args.snr, force=args.force)
    for r in rows:
        print(json.dumps(r, sort_keys=True))


def cmd_report(args):
    for p in hz.emit_report(args.bundle, args.out or args.bundle):
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="avdet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="experiment config JSON (default: shipped standard config)")
        return sp

    sp = add("generate", cmd_generate, "write the synthetic suite in the recorded-scene layout")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = add("classify", cmd_classify, "volume-heuristic labels for one scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--quiet-frac", type=float, default=0.15)
    sp.add_argument("--loud-frac", type=float, default=0.15)
    sp.add_argument("--window-s", type=float, default=0.2)
    sp.add_argument("--out", default="labels.json")

    sp = add("train-teacher", cmd_train_teacher, "train the audio-visual teacher")
    sp.add_argument("--scenes", nargs="+", required=True)
    sp.add_argument("--channels", type=int, choices=[1, 2, 4, 6], default=6)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("extract-boxes", cmd_extract_boxes, "teacher heatmaps to boxes for one scene")
    sp.add_argument("--ckpt", "--teacher", dest="teacher", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out", default="boxes.json")

    sp = add("train-student", cmd_train_student, "distil teacher boxes into the audio-only student")
    sp.add_argument("--boxes", nargs="+", required=True)
    sp.add_argument("--scenes", nargs="+", required=True)
    sp.add_argument("--channels", type=int, choices=[1, 2, 4, 6], default=6)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("predict", cmd_predict, "student boxes for one scene")
    sp.add_argument("--student", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", default="preds.json")

    sp = add("baseline", cmd_baseline, "motion baselines for one scene")
    sp.add_argument("--method", choices=["framediff", "flow"], required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out", default="preds.json")

    sp = add("evaluate", cmd_evaluate, "AP and CD of predictions against annotations")
    sp.add_argument("--preds", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"))
    sp.add_argument("--out", default="report.json")

    sp = add("run", cmd_run, "full pipeline on the configured suite")
    sp.add_argument("--out", dest="out_dir")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--force", action="store_true")

    sp = add("noise-sweep", cmd_noise_sweep, "heuristic precision and teacher AP versus SNR")
    sp.add_argument("--out", dest="out_dir")
    sp.add_argument("--snr", type=float, nargs="+")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--force", action="store_true")

    sp = add("report", cmd_report, "markdown and SVG summary of a run directory")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except (ConfigError, LoadError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AVDetError, ValueError, OSError) as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
