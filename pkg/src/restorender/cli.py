"""Command-line entry point: ``restorender <subcommand> ...``.

Exit codes: 0 success, 1 invalid invocation (bad flag, missing path,
unregistered kind), 2 failure while running.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__, classify as classify_mod, degrade, evaluation, geometry
from .dataset import ToySceneConfig, generate_toy_scene, load_scene, quantize, save_scene, split
from .model import UnknownKindError, interpolate_latents, register_new_kind, render_image
from .serialization import atomic_write_text
from .train import FinetuneConfig, TrainConfig, finetune, init_state, load_checkpoint, save_checkpoint, train

log = logging.getLogger("restorender")

ABLATION_TOGGLES = ("dlm_conv", "dlm_view", "dlm_point", "arm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# validation helpers

def _scene_dir(path) -> Path:
    p = Path(path)
    if not (p / "poses.json").is_file():
        raise UsageError(f"scene directory {p} not found (no poses.json)")
    return p


def _scene_dirs(value) -> list[Path]:
    if not value:
        raise UsageError("--scene is required")
    return [_scene_dir(v) for v in value.split(",") if v]


def _checkpoint_dir(path) -> Path:
    if not path:
        raise UsageError("--checkpoint is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"checkpoint directory {p} not found")
    return p


def _kinds(value, allow_none=False) -> list[str]:
    if not value:
        raise UsageError("--kind is required")
    kinds = [k for k in value.split(",") if k]
    for k in kinds:
        if k not in degrade.KINDS and not (allow_none and k == "none"):
            raise UsageError(f"unknown kind {k!r}; choose from {', '.join(degrade.KINDS)}")
    return kinds


def _single_kind(value, allow_none=False) -> str:
    kinds = _kinds(value, allow_none)
    if len(kinds) != 1:
        raise UsageError("--kind takes exactly one kind here")
    return kinds[0]


def _ablation(value):
    if value is None:
        return None
    if value in ("", "none"):
        return ()
    toggles = tuple(t for t in value.split(",") if t)
    bad = [t for t in toggles if t not in ABLATION_TOGGLES]
    if bad:
        raise UsageError(f"unknown ablation toggle(s) {bad}; choose from {', '.join(ABLATION_TOGGLES)}")
    return toggles


def _read_config(path, cls):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON: {exc}") from None
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"{p}: unknown keys {unknown} for {cls.__name__}")
    return data


def _require_kind(model, kind):
    if kind not in model.kinds:
        raise UsageError(f"kind {kind!r} is not registered in the checkpoint (have {model.kinds})")


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def _save_png(path, image):
    Image.fromarray(quantize(np.asarray(image))).save(path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_make_scenes(args):
    out = _out_dir(args)
    fields = _read_config(args.config, ToySceneConfig)
    if "resolution" in fields:
        fields["resolution"] = tuple(fields["resolution"])
    fields["seed"] = args.seed
    cfg = ToySceneConfig(**fields)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    yield {"scene_config": dataclasses.asdict(cfg)}
    save_scene(generate_toy_scene(cfg), out)


def cmd_corrupt(args):
    src = _scene_dir(args.scene)
    kinds = _kinds(args.kind)
    if len(kinds) > 3 or len(set(kinds)) != len(kinds):
        raise UsageError("--kind takes at most 3 distinct kinds for composition")
    name = "+".join(kinds)
    out = Path(args.out) if args.out else src.with_name(f"{src.name}-{name}-s{args.seed}")
    if out.resolve() == src.resolve():
        raise UsageError("--out must differ from --scene")
    args.out = str(out)
    yield {"kinds": kinds}
    scene = load_scene(src)
    if scene.depths is None and any(k in ("haze", "defocus_blur") for k in kinds):
        raise degrade.MissingDepthError(f"{src}: kinds {kinds} need depth maps")
    cam = scene.views[0].camera
    if len(kinds) == 1:
        images, specs = degrade.degrade_views(scene.images, scene.depths, kinds[0], args.seed, near=cam.near,
                                              far=cam.far)
        spec_dicts = [s.to_dict() for s in specs]
    else:
        per_view = []
        for i in range(len(scene)):
            per_view.append([degrade.sample_spec(k, np.random.default_rng(degrade.view_seed(args.seed, i, k)))
                             for k in kinds])
        images, specs = degrade.degrade_views(scene.images, scene.depths, per_view, args.seed, near=cam.near,
                                              far=cam.far)
        spec_dicts = [[s.to_dict() for s in group] for group in specs]
    save_scene(scene.with_images(images), out)
    meta = {"source": os.path.relpath(src.resolve(), out.resolve()), "kind": name if len(kinds) == 1 else kinds,
            "seed": args.seed, "specs": spec_dicts}
    atomic_write_text(out / "degradation.json", json.dumps(meta, indent=1))


def _training_scenes(dirs):
    scenes = []
    for d in dirs:
        s = load_scene(d)
        scenes.append(s.subset(split(s)[0]))
    return scenes


def cmd_train(args):
    out = _out_dir(args)
    dirs = _scene_dirs(args.scene)
    fields = _read_config(args.config, TrainConfig)
    fields["seed"] = args.seed
    if args.kind:
        fields["kinds"] = tuple(_kinds(args.kind))
    ablation = _ablation(args.ablation)
    if ablation is not None:
        fields["ablation"] = ablation
    try:
        cfg = TrainConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    for k in cfg.kinds:
        if k not in degrade.KINDS:
            raise UsageError(f"unknown kind {k!r}")
    yield {"train_config": cfg.to_dict()}
    state = init_state(cfg)
    out.mkdir(parents=True, exist_ok=True)
    train(state, _training_scenes(dirs), log_path=out / "train_log.jsonl")
    save_checkpoint(state, out)


def cmd_finetune(args):
    out = _out_dir(args)
    ckpt = _checkpoint_dir(args.checkpoint)
    dirs = _scene_dirs(args.scene)
    kind = _single_kind(args.kind)
    fields = _read_config(args.config, FinetuneConfig)
    fields.update(kind=kind, seed=args.seed)
    cfg = FinetuneConfig(**fields)
    state = load_checkpoint(ckpt)
    if kind not in state.model.kinds:
        register_new_kind(state.model, kind)
    elif kind in state.trained_kinds and not cfg.override:
        raise UsageError(f"kind {kind!r} is already trained; set \"override\": true in --config to continue")
    yield {"finetune_config": dataclasses.asdict(cfg), "checkpoint": str(ckpt)}
    out.mkdir(parents=True, exist_ok=True)
    finetune(state, cfg, _training_scenes(dirs), log_path=out / "finetune_log.jsonl")
    save_checkpoint(state, out)


def _render_targets(scene, views):
    """(held-out index, chosen source indices) pairs using the nearest training views."""
    train_idx, test_idx = split(scene)
    if views > len(train_idx):
        raise UsageError(f"--views {views} exceeds the {len(train_idx)} available source views")
    pairs = []
    for ti in test_idx:
        cams = [scene.views[i].camera for i in train_idx]
        near = geometry.nearest_views(scene.views[ti].camera, cams, views)
        pairs.append((ti, [train_idx[j] for j in sorted(near)]))
    return pairs


def _render_common(args, kind_for):
    out = _out_dir(args)
    ckpt = _checkpoint_dir(args.checkpoint)
    src = _scene_dir(args.scene)
    if args.views < 1:
        raise UsageError("--views must be at least 1")
    state = load_checkpoint(ckpt)
    model = state.model
    kind = kind_for(model)
    scene = load_scene(src)
    pairs = _render_targets(scene, args.views)
    yield {"checkpoint": str(ckpt), "targets": [t for t, _ in pairs]}
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(args.seed)
    for ti, chosen in pairs:
        sub = scene.subset(chosen)
        img, _ = render_image(model, sub.images, sub.cameras, scene.views[ti].camera, kind)
        _save_png(out / f"{ti:04d}.png", img)


def cmd_render(args):
    def kind_for(model):
        kind = _single_kind(args.kind, allow_none=True)
        _require_kind(model, kind)
        return kind

    yield from _render_common(args, kind_for)


def cmd_interp_render(args):
    if args.alpha is None or not 0.0 <= args.alpha <= 1.0:
        raise UsageError("--alpha in [0, 1] is required")

    def kind_for(model):
        for k in (args.a, args.b):
            if not k:
                raise UsageError("--a and --b are required")
            _require_kind(model, k)
        return interpolate_latents(model, args.a, args.b, args.alpha)

    yield from _render_common(args, kind_for)


def cmd_eval(args):
    out = _out_dir(args)
    ckpt = _checkpoint_dir(args.checkpoint)
    dirs = _scene_dirs(args.scene)
    if args.views < 1:
        raise UsageError("--views must be at least 1")
    for d in dirs:
        if not (d / "degradation.json").is_file():
            raise UsageError(f"{d}: degradation.json missing (not a corrupted scene)")
    cases = [evaluation.load_case(d) for d in dirs]
    kinds = _kinds(args.kind) if args.kind else sorted({c.kind for c in cases})
    state = load_checkpoint(ckpt)
    for k in kinds:
        _require_kind(state.model, k)
    yield {"checkpoint": str(ckpt), "kinds": kinds}
    report = evaluation.run_benchmark(state.model, cases, kinds, views=args.views, out_dir=out)
    print(evaluation.report_markdown(report), end="")


def cmd_classify(args):
    """Train a classifier (no --checkpoint) or classify a scene's views with one."""
    out = _out_dir(args)
    if args.checkpoint:
        ckpt = _checkpoint_dir(args.checkpoint)
        src = _scene_dir(args.scene)
        clf = classify_mod.load_classifier(ckpt)
        yield {"checkpoint": str(ckpt), "mode": "predict"}
        scene = load_scene(src)
        per_view = [dict(zip(("kind", "confidence"), clf.classify(img))) for img in scene.images]
        result = {"views": per_view, "vote": classify_mod.vote(clf, scene.images)}
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "classification.json", json.dumps(result, indent=1))
        print(result["vote"])
        return
    dirs = _scene_dirs(args.scene)
    kinds = _kinds(args.kind) if args.kind else list(degrade.KINDS)
    if len(kinds) < 2:
        raise UsageError("a classifier needs at least 2 kinds")
    fields = _read_config(args.config, classify_mod.ClassifierConfig)
    fields["seed"] = args.seed
    if "channels" in fields:
        fields["channels"] = tuple(fields["channels"])
    cfg = classify_mod.ClassifierConfig(**fields)
    yield {"classifier_config": dataclasses.asdict(cfg), "kinds": kinds, "mode": "train"}
    clf = classify_mod.train_classifier([load_scene(d) for d in dirs], kinds, cfg)
    classify_mod.save_classifier(clf, out)


COMMANDS = {
    "make-scenes": cmd_make_scenes,
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "render": cmd_render,
    "interp-render": cmd_interp_render,
    "eval": cmd_eval,
    "classify": cmd_classify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="restorender", description="Degradation-conditioned generalizable view synthesis.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scene")
        p.add_argument("--out")
        p.add_argument("--kind")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--views", type=int, default=10)
        p.add_argument("--config")
        p.add_argument("--checkpoint")
        p.add_argument("--ablation")
        if name == "interp-render":
            p.add_argument("--a")
            p.add_argument("--b")
            p.add_argument("--alpha", type=float)
    return parser


def _write_run_json(args, extra, status, started):
    out = Path(args.out) if args.out else None
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": args.command, "version": __version__, "seed": args.seed,
              "args": {k: v for k, v in vars(args).items() if k != "command"}, "resolved": extra,
              "status": status, "seconds": round(time.time() - started, 3)}
    atomic_write_text(out / "run.json", json.dumps(record, indent=1, default=str))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    threads = os.environ.get("RESTORENDER_THREADS")
    try:
        if threads:
            if not threads.isdigit() or int(threads) < 1:
                raise UsageError(f"RESTORENDER_THREADS must be a positive integer, got {threads!r}")
            torch.set_num_threads(int(threads))
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        steps = COMMANDS[args.command](args)
        extra = next(steps, None)  # everything before the first yield is validation
    except (UsageError, UnknownKindError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.error("%s failed: %s: %s", argv, type(exc).__name__, exc)
        return 2
    started = time.time()
    try:
        for _ in steps:
            pass
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        _write_run_json(args, extra, f"failed: {exc}", started)
        return 2
    _write_run_json(args, extra, "ok", started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
