"""Command-line entry point: synth, pretrain, finetune, boost, infer, eval.

Every verb reads one flat ``key = value`` config file (plus ``--set key=value``
overrides), writes its artifacts under ``--out`` and leaves a ``manifest.json``
there. A rerun whose manifest matches a completed one is skipped unless
``--force`` is given.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from . import __version__
from . import boosting as B
from .data import SynthConfig, list_clip_dirs, load_clip, save_clip, synthesize_clip, synthesize_static_clip, to_u8
from .errors import ConfigError, DataFormatError, NumericalError, WSVSODError
from .metrics import EvalReport
from .model import ModelParameters
from .training import TrainConfig, config_from_mapping, parse_flat_config, predict_saliency, train

log = logging.getLogger("wsvsod")

VERBS = ("synth", "pretrain", "finetune", "boost", "infer", "eval")
MANIFEST = "manifest.json"

SYNTH_KEYS = ("n_objects", "motion_model", "texture_seed", "T", "H", "W", "min_size", "max_size", "max_speed", "shape")
# keys owned by the CLI itself: name -> (type, default, help)
EXTRA_KEYS = {
    "data_seed": (int, 0, "base seed for dataset synthesis; clip k of a split uses a derived seed"),
    "n_train": (int, 8, "number of training video clips written by synth"),
    "n_test": (int, 4, "number of held-out video clips written by synth"),
    "n_static": (int, 64, "number of single-frame pretraining clips written by synth"),
    "static_objects": (int, 1, "objects per pretraining still"),
    "good_fraction": (float, 0.7, "share of frames whose fabricated external maps are accurate"),
    "score_threshold": (float, B.SCORE_THRESHOLD, "boost: a frame qualifies when its quality score is strictly above this"),
    "min_ratio": (float, B.MIN_RATIO, "boost: a clip is relabeled when qualified frames exceed this share of T"),
    "iters_per_frame": (int, B.ITERS_PER_FRAME, "boost: stage-two iterations per clip frame"),
}
HELP = {
    "n_objects": "objects per synthetic video frame; object 0 is the moving salient one",
    "motion_model": "translate or static",
    "texture_seed": "seed mixed into object texture generation",
    "T": "frames per synthetic clip",
    "H": "frame height",
    "W": "frame width",
    "min_size": "smallest object extent in pixels",
    "max_size": "largest object extent in pixels",
    "max_speed": "largest per-frame displacement of the salient object",
    "shape": "random, square or ellipse",
    "phase": "set by the verb (pretrain or finetune)",
    "variant": "B, B-Fc, B-Fa, B-Fo, B-Fo-Th, B-Fo-Ta or B-Fo-Ta-L",
    "clip_length": "frames per finetuning window",
    "input_size": "square training resolution after crop and resize",
    "lr": "Adam learning rate",
    "iterations": "optimizer steps (ignored when epochs > 0)",
    "epochs": "passes over the dataset; overrides iterations when > 0",
    "seed": "training seed (weights, sampling, augmentation)",
    "beta1": "weight of the partial cross-entropy term",
    "beta2": "weight of the similarity term",
    "beta3": "weight of the structure term",
    "beta4": "weight of the edge term",
    "similarity_reduction": "mean or sum over labeled pairs",
    "crop_area": "area fraction kept by the random crop",
    "flip_p": "probability of a horizontal flip",
    "edge_source": "image (Sobel of the frame) or mask",
    "pretrain_batch": "stills per pretraining step",
    "backbone": "tiny or resnet50",
    "channels": "comma-separated encoder stage widths (tiny backbone)",
    "strides": "comma-separated encoder stage strides (tiny backbone)",
    "softmax_mode": "channel attention softmax: within each channel vector or across",
    "tiem_cascade": "backward recurrence reads the forward hidden states",
    "infer_window": "frames per recurrent chunk at inference (0: clip_length)",
}


def _train_keys():
    return [f.name for f in dataclasses.fields(TrainConfig)]


def keys_help() -> str:
    lines = ["config keys (flat `key = value` file, or --set key=value):", "  dataset:"]
    synth_defaults = SynthConfig()
    for k in SYNTH_KEYS:
        lines.append(f"    {k:<22} [{getattr(synth_defaults, k)}] {HELP[k]}")
    for k, (_, default, text) in EXTRA_KEYS.items():
        lines.append(f"    {k:<22} [{default}] {text}")
    lines.append("  training:")
    train_defaults = dataclasses.asdict(TrainConfig())
    for k in _train_keys():
        lines.append(f"    {k:<22} [{train_defaults[k]}] {HELP[k]}")
    return "\n".join(lines)


# ---------------------------------------------------------------- config resolution


@dataclasses.dataclass
class Settings:
    synth: SynthConfig
    train: TrainConfig
    extra: Dict[str, object]
    raw: Dict[str, str]


def load_settings(config_path: Optional[str], overrides: List[str], phase: str) -> Settings:
    raw: Dict[str, str] = {}
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file {config_path} not found")
        with open(config_path) as fh:
            raw.update(parse_flat_config(fh.read()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    known = set(SYNTH_KEYS) | set(EXTRA_KEYS) | set(_train_keys())
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    synth_kw = {}
    kinds = {f.name: f.type for f in dataclasses.fields(SynthConfig)}
    for k in SYNTH_KEYS:
        if k in raw:
            typ = int if kinds[k] == "int" else str
            try:
                synth_kw[k] = typ(raw[k])
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from exc
    synth = SynthConfig(**synth_kw)
    extra = {}
    for k, (typ, default, _) in EXTRA_KEYS.items():
        try:
            extra[k] = typ(raw[k]) if k in raw else default
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {exc}") from exc
    train_raw = {k: v for k, v in raw.items() if k in _train_keys()}
    train_raw["phase"] = phase
    cfg = config_from_mapping(TrainConfig, train_raw)
    return Settings(synth, cfg, extra, raw)


# ---------------------------------------------------------------- manifests


def _manifest_body(verb: str, settings: Settings, inputs: dict) -> dict:
    return {
        "verb": verb,
        "artifact_version": __version__,
        "seed": settings.train.seed if verb != "synth" else settings.extra["data_seed"],
        "config": {
            "synth": dataclasses.asdict(settings.synth),
            "train": settings.train.to_dict(),
            "extra": settings.extra,
        },
        "inputs": inputs,
    }


def _canonical(body: dict) -> str:
    return json.dumps(body, sort_keys=True, default=list)


def completed(out_dir: str, body: dict) -> bool:
    path = os.path.join(out_dir, MANIFEST)
    if not os.path.exists(path):
        return False
    try:
        with open(path) as fh:
            old = json.load(fh)
    except (OSError, ValueError):
        return False
    if old.get("status") != "complete":
        return False
    old = {k: v for k, v in old.items() if k not in ("status", "started", "finished", "results")}
    return _canonical(old) == _canonical(json.loads(_canonical(body)))


def write_manifest(out_dir: str, body: dict, status: str, results: Optional[dict] = None):
    os.makedirs(out_dir, exist_ok=True)
    doc = dict(json.loads(_canonical(body)))
    doc["status"] = status
    now = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    doc["started" if status == "running" else "finished"] = now
    if results is not None:
        doc["results"] = results
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=list)


# ---------------------------------------------------------------- verbs


def _split_seed(base: int, split: str, k: int) -> int:
    offset = {"train": 100, "test": 900, "static": 5000}[split]
    return base * 10000 + offset + k


def cmd_synth(args, s: Settings) -> dict:
    s.synth.validate()
    out = args.out
    rng = np.random.default_rng([s.extra["data_seed"], 7])
    for split, n in (("train", s.extra["n_train"]), ("test", s.extra["n_test"])):
        for k in range(n):
            clip = synthesize_clip(s.synth, _split_seed(s.extra["data_seed"], split, k), clip_id=f"{split}{k:03d}")
            d = os.path.join(out, split, clip.clip_id)
            save_clip(clip, d)
            if split == "train":
                p_rgb, p_m, _ = B.fabricate_external_maps(clip.masks, s.extra["good_fraction"], rng)
                B.save_external_maps(d, p_rgb, p_m)
    still_cfg = dataclasses.replace(s.synth, n_objects=s.extra["static_objects"])
    for k in range(s.extra["n_static"]):
        clip = synthesize_static_clip(still_cfg, _split_seed(s.extra["data_seed"], "static", k), clip_id=f"static{k:03d}")
        save_clip(clip, os.path.join(out, "static", clip.clip_id))
    return {"train": s.extra["n_train"], "test": s.extra["n_test"], "static": s.extra["n_static"]}


def _load_init(path: Optional[str]):
    if not path:
        return None
    if not os.path.exists(path):
        raise DataFormatError(f"{path}: checkpoint not found")
    params = ModelParameters.load(path)
    return params


def _adapt_init(params, variant: str):
    """Reuse a checkpoint of another variant by copying the parameters both models share."""
    if params is None or params.config.get("variant") == variant:
        return params
    from .model import ModelConfig, VSODModel
    import torch

    cfg = dict(params.config, variant=variant)
    torch.manual_seed(0)
    target = ModelParameters.from_model(VSODModel(ModelConfig(**cfg)))
    shared = [k for k in target.arrays if k in params.arrays and params.arrays[k].shape == target.arrays[k].shape]
    for k in shared:
        target.arrays[k] = params.arrays[k]
    log.info("initialized %d/%d tensors from a %s checkpoint", len(shared), len(target.arrays), params.config.get("variant"))
    return target


def _train_summary(rows) -> dict:
    return {"iterations": len(rows), "first_loss": rows[0]["total"] if rows else None,
            "last_loss": rows[-1]["total"] if rows else None}


def cmd_pretrain(args, s: Settings) -> dict:
    clips = [load_clip(d) for d in list_clip_dirs(args.data)]
    params = _adapt_init(_load_init(args.init), s.train.variant)
    _, rows = train(s.train, clips, params_in=params, out_dir=args.out)
    return _train_summary(rows)


def _load_pseudo(clip_dirs, pseudo_root):
    sets = []
    for d in clip_dirs:
        cid = os.path.basename(d)
        sets.append(B.PseudoLabelSet.load(os.path.join(pseudo_root, cid)))
    return sets


def cmd_finetune(args, s: Settings) -> dict:
    dirs = list_clip_dirs(args.data)
    clips = [load_clip(d) for d in dirs]
    pseudo = _load_pseudo(dirs, args.pseudo) if args.pseudo else None
    params = _adapt_init(_load_init(args.init), s.train.variant)
    _, rows = train(s.train, clips, params_in=params, out_dir=args.out, pseudo=pseudo)
    return _train_summary(rows)


def cmd_boost(args, s: Settings) -> dict:
    dirs = list_clip_dirs(args.data)
    clips = [load_clip(d) for d in dirs]
    external = [B.load_external_maps(d, c.T) for d, c in zip(dirs, clips)]
    init = _load_init(args.init)
    d_b1 = B.build_stage1(clips, external, s.extra["score_threshold"], s.extra["min_ratio"])
    stage2_init = _adapt_init(init, "B")
    d_b2 = [B.build_stage2(c, lab, s.train, stage2_init, s.extra["iters_per_frame"]) for c, lab in zip(clips, d_b1)]
    for stage, sets in (("stage1", d_b1), ("stage2", d_b2)):
        for c, lab in zip(clips, sets):
            lab.save(os.path.join(args.out, stage, c.clip_id))
    _, rows = train(s.train, clips, params_in=_adapt_init(init, s.train.variant), out_dir=args.out, pseudo=d_b2)
    summary = _train_summary(rows)
    summary["dense_clips_stage1"] = sum(lab.n_dense > 0 for lab in d_b1)
    summary["dense_frames_stage1"] = sum(lab.n_dense for lab in d_b1)
    summary["dense_frames_stage2"] = sum(lab.n_dense for lab in d_b2)
    return summary


def cmd_infer(args, s: Settings) -> dict:
    if not args.checkpoint:
        raise ConfigError("infer needs --checkpoint")
    model = _load_init(args.checkpoint).build()
    window = s.train.infer_window or s.train.clip_length
    n = 0
    for d in list_clip_dirs(args.data):
        clip = load_clip(d)
        maps = predict_saliency(model, clip, window)
        cdir = os.path.join(args.out, clip.clip_id)
        os.makedirs(cdir, exist_ok=True)
        for t, m in enumerate(maps):
            Image.fromarray(to_u8(m)).save(os.path.join(cdir, f"{t:05d}.png"))
        n += len(maps)
    return {"frames": n}


def cmd_eval(args, s: Settings) -> dict:
    if not args.pred:
        raise ConfigError("eval needs --pred")
    dataset = os.path.basename(os.path.normpath(args.data))
    report = EvalReport()
    for d in list_clip_dirs(args.data):
        clip = load_clip(d)
        if clip.masks is None:
            raise DataFormatError(f"{d}: no ground-truth masks to evaluate against")
        for t in range(clip.T):
            f = os.path.join(args.pred, clip.clip_id, f"{t:05d}.png")
            if not os.path.exists(f):
                raise DataFormatError(f"{f}: missing prediction")
            pred = np.asarray(Image.open(f).convert("L"), dtype=np.float64) / 255.0
            if pred.shape != clip.masks[t].shape:
                raise DataFormatError(f"{f}: shape {pred.shape} != mask shape {clip.masks[t].shape}")
            report.add(dataset, clip.clip_id, t, pred, clip.masks[t])
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "report.csv"))
    report.write_json(os.path.join(args.out, "report.json"))
    return report.aggregate()[dataset]


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "boost": cmd_boost, "infer": cmd_infer, "eval": cmd_eval,
}


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="wsvsod",
        description="Scribble-supervised video salient object detection on synthetic clips.",
        epilog=keys_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="directory of clip directories (synth writes, others read)")
    p.add_argument("--init", help="checkpoint to start training from")
    p.add_argument("--checkpoint", help="checkpoint used by infer")
    p.add_argument("--pseudo", help="finetune: directory of per-clip pseudo label sets")
    p.add_argument("--pred", help="eval: directory of predicted maps (clip/frame.png)")
    p.add_argument("--force", action="store_true", help="rerun even if a matching completed manifest exists")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _inputs(args) -> dict:
    def ident(path):
        if not path:
            return None
        path = os.path.abspath(path)
        if os.path.isfile(path):
            st = os.stat(path)
            return {"path": path, "size": st.st_size, "mtime_ns": st.st_mtime_ns}
        return {"path": path}

    return {k: ident(getattr(args, k)) for k in ("data", "init", "checkpoint", "pseudo", "pred")}


def run(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        phase = "pretrain" if args.verb == "pretrain" else "finetune"
        settings = load_settings(args.config, args.overrides, phase)
        if args.verb != "synth" and not args.data:
            raise ConfigError(f"{args.verb} needs --data")
        if args.verb == "synth":
            args.data = None
        body = _manifest_body(args.verb, settings, _inputs(args))
        if not args.force and completed(args.out, body):
            print(f"skipped verb={args.verb} out={args.out} reason=manifest-complete")
            return 0
        write_manifest(args.out, body, "running")
        results = COMMANDS[args.verb](args, settings)
        write_manifest(args.out, body, "complete", results)
        print(json.dumps({"verb": args.verb, "out": args.out, "results": results}, default=float))
        return 0
    except WSVSODError as exc:
        reason = str(exc).replace("\n", " ")
        print(f"error kind={exc.kind} exit={exc.exit_code} reason={reason}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error kind=data exit=2 reason={exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
