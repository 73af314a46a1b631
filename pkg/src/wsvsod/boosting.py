"""Pseudo-label boosting from external saliency maps.

Stage one scores the fused external map of every frame against its scribble
and, for clips with enough trustworthy frames, swaps those frames' scribbles
for the fused map. Stage two fits a small appearance-only model per such clip
and uses its predictions on every frame as the new labels.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from . import losses as L
from .data import BACKGROUND, FOREGROUND, ClipSample, to_u8, to_unit
from .errors import DataFormatError, NumericalError

log = logging.getLogger(__name__)

SCORE_THRESHOLD = 0.98
MIN_RATIO = 0.10
BINARIZE_AT = 0.5
ITERS_PER_FRAME = 8

DENSE, SCRIBBLE = "dense", "scribble"


@dataclass
class PseudoEntry:
    kind: str  # "dense" | "scribble"
    payload: np.ndarray  # (H,W) float map in [0,1] or uint8 scribble codes
    provenance: str = "original"  # "original" | "stage1" | "stage2"


@dataclass
class PseudoLabelSet:
    clip_id: str
    entries: List[PseudoEntry]

    @classmethod
    def from_scribbles(cls, clip: ClipSample) -> "PseudoLabelSet":
        return cls(clip.clip_id, [PseudoEntry(SCRIBBLE, s.copy(), "original") for s in clip.scribbles])

    @property
    def n_dense(self) -> int:
        return sum(e.kind == DENSE for e in self.entries)

    def dense_stack(self, clip: Optional[ClipSample] = None):
        """(T,H,W) dense maps (zeros on scribble frames) and the per-frame dense flag."""
        H, W = self.entries[0].payload.shape
        maps = np.zeros((len(self.entries), H, W), dtype=np.float32)
        valid = np.zeros(len(self.entries), dtype=bool)
        for t, e in enumerate(self.entries):
            if e.kind == DENSE:
                maps[t] = e.payload
                valid[t] = True
        return maps, valid

    def save(self, clip_dir: str):
        out = os.path.join(clip_dir, "pseudo")
        os.makedirs(out, exist_ok=True)
        frames = []
        for t, e in enumerate(self.entries):
            img = to_u8(e.payload) if e.kind == DENSE else e.payload.astype(np.uint8)
            Image.fromarray(img).save(os.path.join(out, f"{t:05d}.png"))
            frames.append({"frame": t, "kind": e.kind, "provenance": e.provenance})
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            json.dump({"clip_id": self.clip_id, "frames": frames}, fh, indent=1)

    @classmethod
    def load(cls, clip_dir: str) -> "PseudoLabelSet":
        out = os.path.join(clip_dir, "pseudo")
        path = os.path.join(out, "manifest.json")
        if not os.path.exists(path):
            raise DataFormatError(f"{path}: missing file")
        with open(path) as fh:
            manifest = json.load(fh)
        entries = []
        for fr in manifest["frames"]:
            f = os.path.join(out, f"{fr['frame']:05d}.png")
            if not os.path.exists(f):
                raise DataFormatError(f"{f}: missing file")
            arr = np.asarray(Image.open(f).convert("L"))
            if fr["kind"] == DENSE:
                entries.append(PseudoEntry(DENSE, to_unit(arr), fr["provenance"]))
            elif fr["kind"] == SCRIBBLE:
                if not np.isin(arr, (0, 1, 2)).all():
                    raise DataFormatError(f"{f}: scribble code outside {{0,1,2}}")
                entries.append(PseudoEntry(SCRIBBLE, arr.astype(np.uint8), fr["provenance"]))
            else:
                raise DataFormatError(f"{path}: unknown entry kind {fr['kind']!r}")
        return cls(manifest["clip_id"], entries)


# ---------------------------------------------------------------- scoring


def fuse_saliency(p_rgb, p_m) -> np.ndarray:
    p_rgb, p_m = np.asarray(p_rgb), np.asarray(p_m)
    if p_rgb.shape != p_m.shape:
        raise ValueError(f"saliency maps differ in shape: {p_rgb.shape} vs {p_m.shape}")
    return p_rgb * p_m


def score_fraction(p, scribble) -> Fraction:
    """Exact quality score; the map is binarized as p >= 0.5."""
    p = np.asarray(p)
    s = np.asarray(scribble)
    fore, back = s == FOREGROUND, s == BACKGROUND
    n_fore, n_back = int(fore.sum()), int(back.sum())
    if n_fore == 0 or n_back == 0:
        raise ValueError("quality score needs at least one foreground and one background scribble pixel")
    on = p >= BINARIZE_AT
    hit_fore = int((on & fore).sum())
    hit_back = int((on & back).sum())
    return Fraction(hit_fore, n_fore) * (1 - Fraction(hit_back, n_back))


def quality_score(p, scribble) -> float:
    """Foreground-stroke coverage times background-stroke avoidance of the binarized map."""
    return float(score_fraction(p, scribble))


def _exceeds(value: Fraction, threshold: float) -> bool:
    return value > Fraction(str(threshold))


def select_frames(fused: np.ndarray, scribbles: np.ndarray, Tr=SCORE_THRESHOLD) -> List[int]:
    chosen = []
    for t, (p, s) in enumerate(zip(fused, scribbles)):
        if not ((s == FOREGROUND).any() and (s == BACKGROUND).any()):
            continue  # unannotated frames cannot be scored
        if _exceeds(score_fraction(p, s), Tr):
            chosen.append(t)
    return chosen


def build_stage1(clips: Sequence[ClipSample], external_maps: Sequence[Tuple[np.ndarray, np.ndarray]],
                 Tr=SCORE_THRESHOLD, ratio=MIN_RATIO) -> List[PseudoLabelSet]:
    """One label set per clip; dense entries only where the clip passes the ratio rule."""
    out = []
    for clip, maps in zip(clips, external_maps):
        if maps is None:
            raise DataFormatError(f"{clip.clip_id}: external saliency maps missing")
        p_rgb, p_m = maps
        if len(p_rgb) != clip.T or len(p_m) != clip.T:
            raise DataFormatError(f"{clip.clip_id}: expected {clip.T} external maps per stream")
        fused = fuse_saliency(p_rgb, p_m)
        chosen = select_frames(fused, clip.scribbles, Tr)
        labels = PseudoLabelSet.from_scribbles(clip)
        if len(chosen) > Fraction(str(ratio)) * clip.T:
            for t in chosen:
                labels.entries[t] = PseudoEntry(DENSE, fused[t].astype(np.float32), "stage1")
        out.append(labels)
    return out


def mixed_supervision_loss(pred, entry: PseudoEntry):
    """Dense entries supervise every pixel; scribble entries fall back to partial CE."""
    if entry.kind == DENSE:
        return L.dense_bce(pred, entry.payload)
    return L.partial_ce(pred, entry.payload)


# ---------------------------------------------------------------- stage two


def build_stage2(clip: ClipSample, d_b1: PseudoLabelSet, base_config=None, params_in=None,
                 iters_per_frame=ITERS_PER_FRAME) -> PseudoLabelSet:
    """Fit an appearance-only model on this clip alone and relabel every frame with it."""
    from .training import TrainConfig, predict_saliency, train

    if d_b1.n_dense == 0:
        return d_b1
    cfg = base_config or TrainConfig()
    cfg = dataclasses.replace(cfg, variant="B", phase="finetune", iterations=iters_per_frame * clip.T, epochs=0)
    try:
        model, _ = train(cfg, [clip], params_in=params_in, pseudo=[d_b1])
    except NumericalError as exc:
        log.warning("%s: stage-2 training diverged (%s); keeping stage-1 labels", clip.clip_id, exc)
        return d_b1
    maps = predict_saliency(model, clip, cfg.clip_length)
    return PseudoLabelSet(clip.clip_id, [PseudoEntry(DENSE, m, "stage2") for m in maps])


def boost(clips: Sequence[ClipSample], external_maps, base_config=None, params_in=None,
          Tr=SCORE_THRESHOLD, ratio=MIN_RATIO):
    """Run both stages; returns (stage-1 sets, stage-2 sets)."""
    d_b1 = build_stage1(clips, external_maps, Tr, ratio)
    d_b2 = [build_stage2(c, s, base_config, params_in) for c, s in zip(clips, d_b1)]
    return d_b1, d_b2


# ---------------------------------------------------------------- external maps on disk


def save_external_maps(clip_dir: str, p_rgb: np.ndarray, p_m: np.ndarray):
    for name, stack in (("rgb", p_rgb), ("flow", p_m)):
        d = os.path.join(clip_dir, "external", name)
        os.makedirs(d, exist_ok=True)
        for t, m in enumerate(stack):
            Image.fromarray(to_u8(m)).save(os.path.join(d, f"{t:05d}.png"))


def load_external_maps(clip_dir: str, T: int):
    stacks = []
    for name in ("rgb", "flow"):
        frames = []
        for t in range(T):
            f = os.path.join(clip_dir, "external", name, f"{t:05d}.png")
            if not os.path.exists(f):
                raise DataFormatError(f"{f}: missing external saliency map for frame {t}")
            frames.append(to_unit(np.asarray(Image.open(f).convert("L"))))
        stacks.append(np.stack(frames))
    return stacks[0], stacks[1]


def fabricate_external_maps(masks: np.ndarray, good_fraction: float, rng: np.random.Generator):
    """Fake external saliency maps with controlled quality.

    Good frames get a lightly blurred, noisy copy of the mask in both streams.
    Bad frames get a motion map displaced by more than half the object size,
    so the fused map misses foreground strokes and lands on background ones.
    Returns (p_rgb, p_m, good_flags).
    """
    masks = np.asarray(masks).astype(np.float64)
    T, H, W = masks.shape
    good = rng.random(T) < good_fraction
    p_rgb = np.empty((T, H, W), dtype=np.float32)
    p_m = np.empty((T, H, W), dtype=np.float32)
    for t in range(T):
        base = ndimage.gaussian_filter(masks[t], 0.7)
        p_rgb[t] = np.clip(base + rng.normal(0, 0.03, (H, W)), 0, 1)
        motion = base
        if not good[t]:
            ys, xs = np.nonzero(masks[t])
            extent = max(np.ptp(ys) if len(ys) else 4, np.ptp(xs) if len(xs) else 4)
            shift = int(extent * 0.75) + 2
            dy, dx = [(shift, 0), (-shift, 0), (0, shift), (0, -shift)][int(rng.integers(4))]
            motion = ndimage.shift(base, (dy, dx), order=0, mode="constant")
        p_m[t] = np.clip(motion + rng.normal(0, 0.03, (H, W)), 0, 1)
    return quantize_maps(p_rgb), quantize_maps(p_m), good


def quantize_maps(x):
    return to_unit(to_u8(x))
