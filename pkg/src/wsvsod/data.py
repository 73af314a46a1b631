"""Synthetic video clips with exact masks, analytic flow, fixations and scribbles.

Clips are stored as stacked arrays rather than per-frame objects; a clip of
length T carries ``images`` (T,3,H,W), ``flows`` (T,2,H,W), ``fixations``
(T,H,W), ``scribbles`` (T,H,W) and optionally ``masks`` (T,H,W).
"""
from __future__ import annotations

import json
import os
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import hsv2rgb
from skimage.morphology import binary_dilation, disk, medial_axis, skeletonize

from .errors import ConfigError, DataFormatError

UNLABELED, FOREGROUND, BACKGROUND = 0, 1, 2

FLO_MAGIC = b"PIEH"
FLO_TAG = 202021.25

# foreground stroke keeps at most this fraction of the skeleton
STROKE_FRACTION = 0.2
BAND_INNER, BAND_OUTER = 3, 6


def to_unit(a: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [0,1]. Single code path so PNG round trips are exact."""
    return a.astype(np.float32) / np.float32(255.0)


def to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(x: np.ndarray) -> np.ndarray:
    return to_unit(to_u8(x))


@dataclass
class SynthConfig:
    n_objects: int = 3
    motion_model: str = "translate"  # "translate" | "static"
    texture_seed: int = 0
    T: int = 12
    H: int = 64
    W: int = 64
    min_size: int = 14
    max_size: int = 22
    max_speed: int = 3
    shape: str = "random"  # "random" | "square" | "ellipse"
    # fixed per-frame displacement (dx, dy) of the salient object; random when None
    velocity: Optional[tuple] = None
    object_size: Optional[int] = None

    def validate(self, min_T: int = 2):
        if self.T < min_T:
            raise ConfigError(f"T must be >= {min_T}, got {self.T}")
        if self.H < 32 or self.W < 32:
            raise ConfigError(f"H and W must be >= 32, got {self.H}x{self.W}")
        if self.n_objects < 1:
            raise ConfigError("n_objects must be >= 1")
        if self.motion_model not in ("translate", "static"):
            raise ConfigError(f"unknown motion_model {self.motion_model!r}")
        if self.shape not in ("random", "square", "ellipse"):
            raise ConfigError(f"unknown shape {self.shape!r}")
        if not 1 <= self.min_size <= self.max_size:
            raise ConfigError("need 1 <= min_size <= max_size")
        size = self.object_size or self.max_size
        if size + 2 > min(self.H, self.W):
            raise ConfigError("objects do not fit in the frame")


@dataclass
class ScribbleLabel:
    labels: np.ndarray  # (H, W) uint8 codes 0/1/2
    annotated: bool = True
    warning: Optional[str] = None

    @property
    def n_foreground(self) -> int:
        return int((self.labels == FOREGROUND).sum())

    @property
    def n_background(self) -> int:
        return int((self.labels == BACKGROUND).sum())


@dataclass(eq=False)
class ClipSample:
    images: np.ndarray
    flows: np.ndarray
    fixations: np.ndarray
    scribbles: np.ndarray
    masks: Optional[np.ndarray] = None
    clip_id: str = "clip"
    annotated: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.annotated is None:
            self.annotated = np.array(
                [(s == FOREGROUND).any() and (s == BACKGROUND).any() for s in self.scribbles], dtype=bool
            )
        self.validate()

    @property
    def T(self) -> int:
        return self.images.shape[0]

    @property
    def H(self) -> int:
        return self.images.shape[2]

    @property
    def W(self) -> int:
        return self.images.shape[3]

    @property
    def rendered_flows(self) -> np.ndarray:
        return render_clip_flows(self.flows)

    def validate(self):
        T, c, H, W = self.images.shape
        if c != 3 or T < 1 or H < 8 or W < 8:
            raise DataFormatError(f"{self.clip_id}: bad image stack shape {self.images.shape}")
        expect = {
            "flows": (T, 2, H, W),
            "fixations": (T, H, W),
            "scribbles": (T, H, W),
        }
        if self.masks is not None:
            expect["masks"] = (T, H, W)
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DataFormatError(f"{self.clip_id}: {name} has shape {got}, expected {shape}")
        if not np.isin(self.scribbles, (0, 1, 2)).all():
            raise DataFormatError(f"{self.clip_id}: scribble codes outside {{0,1,2}}")

    def subclip(self, start: int, stop: int) -> "ClipSample":
        sl = slice(start, stop)
        return ClipSample(
            images=self.images[sl],
            flows=self.flows[sl],
            fixations=self.fixations[sl],
            scribbles=self.scribbles[sl],
            masks=None if self.masks is None else self.masks[sl],
            clip_id=self.clip_id,
            annotated=self.annotated[sl],
        )

    def equals(self, other: "ClipSample") -> bool:
        if self.clip_id != other.clip_id:
            return False
        if (self.masks is None) != (other.masks is None):
            return False
        pairs = [
            (self.images, other.images),
            (self.flows, other.flows),
            (self.fixations, other.fixations),
            (self.scribbles, other.scribbles),
            (self.annotated, other.annotated),
        ]
        if self.masks is not None:
            pairs.append((self.masks, other.masks))
        return all(a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b) for a, b in pairs)


# ---------------------------------------------------------------- flow rendering


def flow_render(uv: np.ndarray, max_magnitude: Optional[float] = None) -> np.ndarray:
    """Color-wheel encoding of a (2,H,W) displacement field into (3,H,W) RGB.

    Hue follows the direction atan2(v, u), saturation the magnitude divided by
    ``max_magnitude`` (the field's own maximum by default), value is fixed at 1.
    """
    uv = np.asarray(uv, dtype=np.float64)
    if uv.ndim != 3 or uv.shape[0] != 2:
        raise ValueError(f"expected (2,H,W) flow, got {uv.shape}")
    u, v = uv
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    if max_magnitude <= 0:
        max_magnitude = 1.0
    hue = np.mod(np.arctan2(v, u) / (2 * np.pi), 1.0)
    sat = np.clip(mag / max_magnitude, 0.0, 1.0)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    return hsv2rgb(hsv).transpose(2, 0, 1).astype(np.float32)


def render_clip_flows(flows: np.ndarray) -> np.ndarray:
    """Render a (T,2,H,W) flow stack with one normalization shared by the clip."""
    flows = np.asarray(flows)
    peak = float(np.hypot(flows[:, 0].astype(np.float64), flows[:, 1]).max()) if flows.size else 0.0
    return np.stack([flow_render(f, peak) for f in flows]).astype(np.float32)


# ---------------------------------------------------------------- scribbles


def _stroke_from_skeleton(skel: np.ndarray, rng: np.random.Generator, fraction: float) -> np.ndarray:
    """A connected piece of the skeleton: breadth-first walk from a random skeleton pixel."""
    pts = np.argwhere(skel)
    out = np.zeros_like(skel, dtype=bool)
    if len(pts) == 0:
        return out
    keep = max(1, int(np.floor(fraction * len(pts))))
    start = tuple(pts[rng.integers(len(pts))])
    H, W = skel.shape
    seen = {start}
    queue = deque([start])
    taken = 0
    while queue and taken < keep:
        y, x = queue.popleft()
        out[y, x] = True
        taken += 1
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < H and 0 <= nx < W and skel[ny, nx] and (ny, nx) not in seen:
                    seen.add((ny, nx))
                    queue.append((ny, nx))
    return out


def _border_band(shape, inset: int = 4) -> np.ndarray:
    H, W = shape
    band = np.zeros(shape, dtype=bool)
    i = min(inset, H // 2 - 1, W // 2 - 1)
    band[i, i : W - i] = True
    band[H - 1 - i, i : W - i] = True
    band[i : H - i, i] = True
    band[i : H - i, W - 1 - i] = True
    return band


def scribble_from_mask(mask: np.ndarray, fixation: np.ndarray, rng_seed: int) -> ScribbleLabel:
    """Fixation-guided scribble for one frame.

    The foreground stroke is cut from the skeleton of the mask component under
    the fixation peak; the background stroke is the skeleton of a ring around
    the dilated mask.
    """
    mask = np.asarray(mask).astype(bool)
    fixation = np.asarray(fixation)
    if mask.shape != fixation.shape:
        raise ValueError(f"mask {mask.shape} and fixation {fixation.shape} differ in shape")
    rng = np.random.default_rng(rng_seed)
    labels = np.zeros(mask.shape, dtype=np.uint8)

    if not mask.any():
        labels[_border_band(mask.shape)] = BACKGROUND
        return ScribbleLabel(labels, annotated=False, warning="empty mask: background-only scribble")

    band = binary_dilation(mask, disk(BAND_OUTER)) & ~binary_dilation(mask, disk(BAND_INNER))
    labels[skeletonize(band)] = BACKGROUND

    if fixation.max() <= 0:
        return ScribbleLabel(labels, annotated=False, warning="no fixation: frame unannotated")

    comps, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    peak = np.unravel_index(np.argmax(fixation), fixation.shape)
    comp_id = comps[peak]
    if comp_id == 0:
        # peak fell off the objects: take the component nearest to it
        _, (iy, ix) = ndimage.distance_transform_edt(comps == 0, return_indices=True)
        comp_id = comps[iy[peak], ix[peak]]
    skel = medial_axis(comps == comp_id, rng=int(rng.integers(2**31)))
    stroke = _stroke_from_skeleton(skel, rng, STROKE_FRACTION)
    labels[stroke] = FOREGROUND

    ok = (labels == FOREGROUND).any() and (labels == BACKGROUND).any()
    return ScribbleLabel(labels, annotated=bool(ok), warning=None if ok else "missing background band")


# ---------------------------------------------------------------- synthesis


def _smooth_noise(rng: np.random.Generator, H: int, W: int, cells: int = 6) -> np.ndarray:
    coarse = rng.random((3, cells + 1, cells + 1))
    zoom = (1, H / (cells + 1), W / (cells + 1))
    return ndimage.zoom(coarse, zoom, order=1, mode="nearest")[:, :H, :W]


def _object_sprite(cfg: SynthConfig, geo: np.random.Generator, tex: np.random.Generator):
    if cfg.object_size is not None:
        h = w = cfg.object_size
    else:
        h, w = (int(v) for v in geo.integers(cfg.min_size, cfg.max_size + 1, size=2))
    kind = cfg.shape if cfg.shape != "random" else ("square", "ellipse")[int(geo.integers(2))]
    if kind == "square":
        shape = np.ones((h, w), dtype=bool)
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2, (w - 1) / 2
        shape = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    base = tex.uniform(0.05, 0.95, size=3)
    base[int(tex.integers(3))] = tex.uniform(0.75, 1.0)
    texture = np.clip(base[:, None, None] + tex.normal(0, 0.05, size=(3, h, w)), 0, 1)
    return shape, texture


def _trajectory(cfg: SynthConfig, geo: np.random.Generator, h: int, w: int, moving: bool):
    y = int(geo.integers(0, cfg.H - h + 1))
    x = int(geo.integers(0, cfg.W - w + 1))
    if not moving:
        return [(y, x)] * cfg.T
    if cfg.velocity is not None:
        vx, vy = (int(v) for v in cfg.velocity)
    else:
        vx = vy = 0
        while vx == 0 and vy == 0:
            vx, vy = (int(v) for v in geo.integers(-cfg.max_speed, cfg.max_speed + 1, size=2))
    path = [(y, x)]
    for _ in range(1, cfg.T):
        nx, ny = x + vx, y + vy
        if nx < 0 or nx > cfg.W - w:
            vx = -vx
            nx = x + vx
        if ny < 0 or ny > cfg.H - h:
            vy = -vy
            ny = y + vy
        x, y = min(max(nx, 0), cfg.W - w), min(max(ny, 0), cfg.H - h)
        path.append((y, x))
    return path


def fixation_map(mask: np.ndarray) -> np.ndarray:
    """Gaussian blob on the mask centroid, peak normalized to exactly 1."""
    H, W = mask.shape
    if not mask.any():
        return np.zeros((H, W), dtype=np.float32)
    cy, cx = np.argwhere(mask).mean(axis=0)
    sigma = max(2.0, 0.3 * np.sqrt(mask.sum()))
    yy, xx = np.mgrid[0:H, 0:W]
    d = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return quantize(d / d.max())


def frame_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def synthesize_clip(config: SynthConfig, seed: int, clip_id: Optional[str] = None, _min_T: int = 2) -> ClipSample:
    """Render a clip whose object 0 is the salient one.

    Object 0 translates rigidly with integer steps (bouncing off the border);
    the remaining objects are static distractors drawn from the same
    appearance distribution, underneath the salient object.
    """
    config.validate(min_T=_min_T)
    T, H, W = config.T, config.H, config.W
    geo = np.random.default_rng(seed)
    tex = np.random.default_rng([config.texture_seed, seed])

    background = np.clip(0.2 + 0.6 * _smooth_noise(tex, H, W), 0, 1)
    background += tex.normal(0, 0.02, size=background.shape)

    sprites, paths = [], []
    for k in range(config.n_objects):
        shape, texture = _object_sprite(config, geo, tex)
        moving = k == 0 and config.motion_model == "translate"
        sprites.append((shape, texture))
        paths.append(_trajectory(config, geo, *shape.shape, moving=moving))

    images = np.empty((T, 3, H, W), dtype=np.float32)
    flows = np.zeros((T, 2, H, W), dtype=np.float32)
    masks = np.zeros((T, H, W), dtype=np.uint8)
    for t in range(T):
        img = background.copy()
        # distractors first so the salient object stays fully visible
        for k in list(range(1, config.n_objects)) + [0]:
            shape, texture = sprites[k]
            y, x = paths[k][t]
            h, w = shape.shape
            region = img[:, y : y + h, x : x + w]
            region[:, shape] = texture[:, shape]
        images[t] = quantize(np.clip(img, 0, 1))
        shape = sprites[0][0]
        y, x = paths[0][t]
        h, w = shape.shape
        masks[t, y : y + h, x : x + w][shape] = 1
        if t > 0:
            py, px = paths[0][t - 1]
            sel = masks[t].astype(bool)
            flows[t, 0][sel] = x - px
            flows[t, 1][sel] = y - py

    fixations = np.stack([fixation_map(m.astype(bool)) for m in masks])
    scribs = [scribble_from_mask(masks[t], fixations[t], frame_seed(seed, t)) for t in range(T)]
    return ClipSample(
        images=images,
        flows=flows,
        fixations=fixations,
        scribbles=np.stack([s.labels for s in scribs]),
        masks=masks,
        clip_id=clip_id or f"clip{seed:05d}",
        annotated=np.array([s.annotated for s in scribs], dtype=bool),
    )


def synthesize_static_clip(config: SynthConfig, seed: int, clip_id: Optional[str] = None) -> ClipSample:
    """A single still image with zero flow, the stand-in for static pretraining data."""
    cfg = SynthConfig(**{**config.__dict__, "T": 1, "motion_model": "static"})
    return synthesize_clip(cfg, seed, clip_id=clip_id or f"still{seed:05d}", _min_T=1)


# ---------------------------------------------------------------- .flo files


def write_flo(path: str, uv: np.ndarray):
    uv = np.asarray(uv, dtype="<f4")
    _, H, W = uv.shape
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", W, H))
        fh.write(uv.transpose(1, 2, 0).tobytes())


def read_flo(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise DataFormatError(f"{path}: not a .flo file (bad magic)")
    W, H = struct.unpack("<ii", raw[4:12])
    body = np.frombuffer(raw[12:], dtype="<f4")
    if W <= 0 or H <= 0 or body.size != 2 * H * W:
        raise DataFormatError(f"{path}: header says {W}x{H} but payload has {body.size} floats")
    return body.reshape(H, W, 2).transpose(2, 0, 1).astype(np.float32)


# ---------------------------------------------------------------- clip directories


def _png(path: str, array: np.ndarray):
    Image.fromarray(array).save(path)


def _read_png(path: str, mode: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DataFormatError(f"{path}: missing file")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except OSError as exc:
        raise DataFormatError(f"{path}: unreadable image ({exc})") from exc


def save_clip(clip: ClipSample, path: str):
    for sub in ("images", "flow", "fix", "scribble") + (("mask",) if clip.masks is not None else ()):
        os.makedirs(os.path.join(path, sub), exist_ok=True)
    for t in range(clip.T):
        name = f"{t:05d}"
        _png(os.path.join(path, "images", name + ".png"), to_u8(clip.images[t].transpose(1, 2, 0)))
        write_flo(os.path.join(path, "flow", name + ".flo"), clip.flows[t])
        _png(os.path.join(path, "fix", name + ".png"), to_u8(clip.fixations[t]))
        _png(os.path.join(path, "scribble", name + ".png"), clip.scribbles[t].astype(np.uint8))
        if clip.masks is not None:
            _png(os.path.join(path, "mask", name + ".png"), (clip.masks[t] > 0).astype(np.uint8) * 255)
    meta = {
        "T": clip.T,
        "H": clip.H,
        "W": clip.W,
        "clip_id": clip.clip_id,
        "annotated": [bool(a) for a in clip.annotated],
    }
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def load_clip(path: str) -> ClipSample:
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise DataFormatError(f"{meta_path}: missing file")
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
            T, H, W = int(meta["T"]), int(meta["H"]), int(meta["W"])
        except (ValueError, KeyError) as exc:
            raise DataFormatError(f"{meta_path}: malformed ({exc})") from exc

    def check(arr, fname, shape):
        if arr.shape != shape:
            raise DataFormatError(f"{fname}: size {arr.shape} does not match meta {shape}")
        return arr

    images, flows, fixations, scribbles, masks = [], [], [], [], []
    has_mask = os.path.isdir(os.path.join(path, "mask"))
    for t in range(T):
        name = f"{t:05d}"
        f = os.path.join(path, "images", name + ".png")
        images.append(to_unit(check(_read_png(f, "RGB"), f, (H, W, 3))).transpose(2, 0, 1))
        f = os.path.join(path, "flow", name + ".flo")
        if os.path.exists(f):
            flows.append(check(read_flo(f), f, (2, H, W)))
        elif t == 0:
            flows.append(np.zeros((2, H, W), dtype=np.float32))
        else:
            raise DataFormatError(f"{f}: missing file")
        f = os.path.join(path, "fix", name + ".png")
        fixations.append(to_unit(check(_read_png(f, "L"), f, (H, W))))
        f = os.path.join(path, "scribble", name + ".png")
        s = check(_read_png(f, "L"), f, (H, W))
        bad = ~np.isin(s, (0, 1, 2))
        if bad.any():
            raise DataFormatError(f"{f}: scribble code {int(s[bad][0])} outside {{0,1,2}}")
        scribbles.append(s.astype(np.uint8))
        if has_mask:
            f = os.path.join(path, "mask", name + ".png")
            masks.append((check(_read_png(f, "L"), f, (H, W)) > 127).astype(np.uint8))
    annotated = meta.get("annotated")
    return ClipSample(
        images=np.stack(images).astype(np.float32),
        flows=np.stack(flows).astype(np.float32),
        fixations=np.stack(fixations),
        scribbles=np.stack(scribbles),
        masks=np.stack(masks) if has_mask else None,
        clip_id=str(meta.get("clip_id", os.path.basename(os.path.normpath(path)))),
        annotated=None if annotated is None else np.array(annotated, dtype=bool),
    )


def list_clip_dirs(root: str) -> list:
    if not os.path.isdir(root):
        raise DataFormatError(f"{root}: not a directory")
    dirs = sorted(
        os.path.join(root, d) for d in os.listdir(root) if os.path.exists(os.path.join(root, d, "meta.json"))
    )
    if not dirs:
        raise DataFormatError(f"{root}: no clip directories (meta.json) found")
    return dirs


def load_clips(root: str) -> list:
    return [load_clip(d) for d in list_clip_dirs(root)]


def stack_clips(clips: Sequence[ClipSample]) -> ClipSample:
    """Concatenate single-frame clips into one pseudo-clip batch of independent frames."""
    return ClipSample(
        images=np.concatenate([c.images for c in clips]),
        flows=np.concatenate([c.flows for c in clips]),
        fixations=np.concatenate([c.fixations for c in clips]),
        scribbles=np.concatenate([c.scribbles for c in clips]),
        masks=None if any(c.masks is None for c in clips) else np.concatenate([c.masks for c in clips]),
        clip_id="+".join(c.clip_id for c in clips),
        annotated=np.concatenate([c.annotated for c in clips]),
    )
