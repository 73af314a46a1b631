"""Pretraining, finetuning and inference loops."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .data import ClipSample, flow_render
from .decoder import Prediction
from .errors import ConfigError, NumericalError
from .model import VARIANTS, ModelConfig, ModelParameters, VSODModel, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "partial_ce", "similarity", "structure", "edge", "total")


@dataclass
class TrainConfig:
    phase: str = "finetune"
    variant: str = "B-Fo-Ta-L"
    clip_length: int = 4
    input_size: int = 64
    lr: float = 1e-4
    iterations: int = 1000
    epochs: int = 0  # when > 0, overrides iterations with epochs * len(dataset)
    seed: int = 0
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 0.3
    beta4: float = 1.0
    similarity_reduction: str = "mean"
    crop_area: float = 0.9
    flip_p: float = 0.5
    edge_source: str = "image"
    pretrain_batch: int = 4
    backbone: str = "tiny"
    channels: tuple = (16, 32, 64, 64)
    strides: tuple = (2, 4, 8, 8)
    softmax_mode: str = "within"
    tiem_cascade: bool = True
    infer_window: int = 0  # 0 -> use clip_length

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.validate()

    def validate(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be pretrain or finetune, got {self.phase!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.clip_length < 1 or self.pretrain_batch < 1:
            raise ConfigError("clip_length and pretrain_batch must be >= 1")
        if self.input_size % max(self.strides):
            raise ConfigError(f"input_size {self.input_size} not divisible by stride {max(self.strides)}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.iterations < 1 and self.epochs < 1:
            raise ConfigError("need iterations >= 1 or epochs >= 1")
        if not 0 < self.crop_area <= 1 or not 0 <= self.flip_p <= 1:
            raise ConfigError("crop_area must be in (0,1] and flip_p in [0,1]")
        if self.edge_source not in ("image", "mask"):
            raise ConfigError("edge_source must be image or mask")
        if self.similarity_reduction not in ("mean", "sum"):
            raise ConfigError("similarity_reduction must be mean or sum")

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.beta1, self.beta2, self.beta3, self.beta4)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, backbone=self.backbone, channels=self.channels, strides=self.strides,
            softmax_mode=self.softmax_mode, tiem_cascade=self.tiem_cascade,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- flat config files


def _coerce(value: str, typ):
    typ = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}.get(typ, typ)
    if typ is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ is tuple:
        return tuple(int(v) for v in value.replace("(", "").replace(")", "").split(",") if v.strip())
    return typ(value.strip())


def parse_flat_config(text: str) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(cls, mapping: Dict[str, str], strict=True):
    kinds = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in kinds:
            if strict:
                raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
            continue
        try:
            kwargs[key] = _coerce(value, kinds[key]) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- batches and augmentation


@dataclass
class Batch:
    images: torch.Tensor  # (T,3,H,W)
    flow_images: torch.Tensor  # (T,3,H,W)
    scribbles: torch.Tensor  # (T,H,W) int64
    edges: torch.Tensor  # (T,H,W)
    masks: Optional[torch.Tensor] = None
    dense: Optional[torch.Tensor] = None  # (T,H,W) pseudo maps
    dense_valid: Optional[torch.Tensor] = None  # (T,) bool, frame supervised by a dense map


def _resize(x: torch.Tensor, size, mode):
    squeeze = x.dim() == 3
    if squeeze:
        x = x[:, None]
    kw = {"align_corners": False} if mode == "bilinear" else {}
    out = F.interpolate(x, size=size, mode=mode, **kw)
    return out[:, 0] if squeeze else out


def make_batch(clip: ClipSample, frames: Sequence[int], rng: Optional[np.random.Generator], cfg: TrainConfig,
               edges: Optional[np.ndarray] = None, dense=None, dense_valid=None) -> Batch:
    """Cut frames out of a clip, apply one flip/crop to every modality, resize to ``input_size``, render flow."""
    idx = np.asarray(frames)
    img = clip.images[idx].astype(np.float32)
    uv = clip.flows[idx].astype(np.float64)
    scr = clip.scribbles[idx].astype(np.int64)
    masks = None if clip.masks is None else clip.masks[idx].astype(np.float32)
    if edges is None:
        edges = L.image_edges(img) if cfg.edge_source == "image" or clip.masks is None else L.mask_edges(clip.masks[idx])
    else:
        edges = edges[idx]
    dmap = None if dense is None else np.asarray(dense, dtype=np.float32)[idx]
    peak = float(np.hypot(clip.flows[:, 0].astype(np.float64), clip.flows[:, 1]).max())

    if rng is not None and rng.random() < cfg.flip_p:
        img, uv, scr, edges = img[..., ::-1], uv[..., ::-1].copy(), scr[..., ::-1], edges[..., ::-1]
        uv[:, 0] = -uv[:, 0]
        masks = None if masks is None else masks[..., ::-1]
        dmap = None if dmap is None else dmap[..., ::-1]

    H, W = img.shape[-2:]
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a))
    img_t, uv_t, scr_t, edge_t = t(img), t(uv), t(scr), t(edges.astype(np.float32))
    mask_t = None if masks is None else t(masks)
    dense_t = None if dmap is None else t(dmap)
    ch, cw, y0, x0 = H, W, 0, 0
    if rng is not None and cfg.crop_area < 1:
        ch = int(round(H * math.sqrt(cfg.crop_area)))
        cw = int(round(W * math.sqrt(cfg.crop_area)))
        y0 = int(rng.integers(0, H - ch + 1))
        x0 = int(rng.integers(0, W - cw + 1))
    S = cfg.input_size
    if (ch, cw) != (S, S):
        crop = lambda a: a[..., y0 : y0 + ch, x0 : x0 + cw]
        img_t = _resize(crop(img_t), (S, S), "bilinear")
        uv_t = _resize(crop(uv_t), (S, S), "bilinear")
        uv_t[:, 0] *= S / cw
        uv_t[:, 1] *= S / ch
        peak *= max(S / cw, S / ch)
        scr_t = _resize(crop(scr_t).double(), (S, S), "nearest").long()
        edge_t = _resize(crop(edge_t), (S, S), "nearest")
        mask_t = None if mask_t is None else _resize(crop(mask_t), (S, S), "nearest")
        dense_t = None if dense_t is None else _resize(crop(dense_t), (S, S), "bilinear")
    flow_img = np.stack([flow_render(f, peak) for f in uv_t.numpy()])
    return Batch(
        images=img_t.float(),
        flow_images=torch.from_numpy(flow_img),
        scribbles=scr_t,
        edges=edge_t.float(),
        masks=mask_t,
        dense=dense_t,
        dense_valid=None if dense_valid is None else torch.as_tensor(np.asarray(dense_valid)[idx], dtype=torch.bool),
    )


# ---------------------------------------------------------------- losses per batch


def supervision_loss(sal, batch: Batch):
    """Partial CE pooled over the scribbled pixels; frames with a dense pseudo map use full BCE."""
    if batch.dense_valid is None or not batch.dense_valid.any():
        codes = batch.scribbles
        if not ((codes == 1) | (codes == 2)).any():
            return sal.sum() * 0
        return L.partial_ce(sal, codes)
    terms = []
    for t in range(sal.shape[0]):
        if batch.dense_valid[t]:
            terms.append(L.dense_bce(sal[t], batch.dense[t]))
        elif ((batch.scribbles[t] == 1) | (batch.scribbles[t] == 2)).any():
            terms.append(L.partial_ce(sal[t], batch.scribbles[t]))
    return torch.stack(terms).mean() if terms else sal.sum() * 0


def compute_losses(model: VSODModel, batch: Batch, cfg: TrainConfig):
    temporal = cfg.phase == "finetune"
    out = model(batch.images, batch.flow_images if model.config.uses_flow else None, temporal=temporal)
    pred = out.prediction
    parts = {
        "partial_ce": supervision_loss(pred.saliency, batch),
        "structure": L.structure_loss(pred.saliency, batch.images),
        "edge": L.edge_loss(pred.edge, batch.edges),
    }
    if cfg.phase == "finetune":
        if model.config.uses_similarity:
            parts["similarity"] = L.clip_similarity_loss(
                out.sim_features, batch.scribbles, model.sim_embed, cfg.similarity_reduction
            )
        else:
            parts["similarity"] = torch.zeros((), dtype=pred.saliency.dtype)
    total = L.total_loss(parts, cfg.weights, cfg.phase)
    return total, parts, out


# ---------------------------------------------------------------- training loop


class Sampler:
    """Draws training batches; pretraining stacks independent stills, finetuning cuts windows."""

    def __init__(self, clips: Sequence[ClipSample], cfg: TrainConfig, rng: np.random.Generator, pseudo=None):
        if not clips:
            raise ConfigError("training dataset is empty")
        self.clips, self.cfg, self.rng = list(clips), cfg, rng
        self.pseudo = pseudo
        self.edges = []
        for c in self.clips:
            if cfg.edge_source == "mask" and c.masks is not None:
                self.edges.append(L.mask_edges(c.masks))
            else:
                self.edges.append(L.image_edges(c.images))

    def epoch_length(self) -> int:
        if self.cfg.phase == "pretrain":
            return max(1, math.ceil(len(self.clips) / self.cfg.pretrain_batch))
        return len(self.clips)

    def _dense(self, k):
        if self.pseudo is None:
            return None, None
        return self.pseudo[k].dense_stack(self.clips[k])

    def draw(self) -> Batch:
        cfg, rng = self.cfg, self.rng
        if cfg.phase == "pretrain":
            picks = rng.choice(len(self.clips), size=min(cfg.pretrain_batch, len(self.clips)), replace=False)
            batches = [make_batch(self.clips[k], [0], rng, cfg, self.edges[k]) for k in picks]
            return Batch(
                images=torch.cat([b.images for b in batches]),
                flow_images=torch.cat([b.flow_images for b in batches]),
                scribbles=torch.cat([b.scribbles for b in batches]),
                edges=torch.cat([b.edges for b in batches]),
            )
        k = int(rng.integers(len(self.clips)))
        clip = self.clips[k]
        n = min(cfg.clip_length, clip.T)
        start = int(rng.integers(0, clip.T - n + 1))
        dense, valid = self._dense(k)
        return make_batch(clip, range(start, start + n), rng, cfg, self.edges[k], dense, valid)


def build_model(cfg: TrainConfig, params_in=None) -> VSODModel:
    torch.manual_seed(cfg.seed)
    if params_in is None:
        return VSODModel(cfg.model_config())
    if isinstance(params_in, VSODModel):
        params_in = ModelParameters.from_model(params_in)
    if params_in.config.get("variant") != cfg.variant:
        raise ConfigError(f"checkpoint variant {params_in.config.get('variant')!r} != config variant {cfg.variant!r}")
    return params_in.build()


def _scalar(v) -> float:
    return v.item() if isinstance(v, torch.Tensor) else float(v)


def train(cfg: TrainConfig, dataset: Sequence[ClipSample], params_in=None, out_dir: Optional[str] = None,
          pseudo=None, max_seconds: Optional[float] = None):
    """Optimize the phase objective with Adam; returns (model, log rows)."""
    cfg.validate()
    torch.set_num_threads(1)
    model = build_model(cfg, params_in)
    model.train()
    rng = np.random.default_rng(cfg.seed)
    sampler = Sampler(dataset, cfg, rng, pseudo)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    epoch_len = sampler.epoch_length()
    total_iters = cfg.epochs * epoch_len if cfg.epochs > 0 else cfg.iterations
    rows: List[dict] = []
    writer = fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "train_log.csv"), "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    t0 = time.time()
    try:
        for it in range(1, total_iters + 1):
            batch = sampler.draw()
            loss, parts, _ = compute_losses(model, batch, cfg)
            if not torch.isfinite(loss):
                detail = ", ".join(f"{k}={_scalar(v):.4g}" for k, v in parts.items())
                raise NumericalError(f"non-finite loss at iteration {it} ({detail})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            row = {"iteration": it, "total": loss.item()}
            row.update({k: _scalar(parts.get(k, 0.0)) for k in ("partial_ce", "similarity", "structure", "edge")})
            rows.append(row)
            if writer:
                writer.writerow(row)
            if out_dir and it % epoch_len == 0:
                save_checkpoint(model, os.path.join(out_dir, "last.ckpt"), iteration=it, phase=cfg.phase)
            if it % 100 == 0:
                log.info("iter %d/%d loss %.4f (%.1fs)", it, total_iters, row["total"], time.time() - t0)
            if max_seconds is not None and time.time() - t0 > max_seconds:
                log.warning("stopping at iteration %d: time budget exhausted", it)
                break
    finally:
        if fh:
            fh.close()
    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "model.ckpt"), iteration=len(rows), phase=cfg.phase)
    return model, rows


def loss_trend(rows: Sequence[dict], window: int = 50, key="total") -> bool:
    """True when the mean of the last ``window`` losses is below the mean of the first."""
    vals = [r[key] for r in rows]
    if len(vals) < 2 * window:
        window = max(1, len(vals) // 2)
    return float(np.mean(vals[-window:])) < float(np.mean(vals[:window]))


# ---------------------------------------------------------------- inference


@torch.no_grad()
def infer(model: VSODModel, clip: ClipSample, window: int = 4) -> List[Prediction]:
    """Per-frame predictions; the recurrent modules run over consecutive chunks of ``window`` frames."""
    model.eval()
    t0 = time.time()
    window = window if window and window > 0 else clip.T
    flow_img = torch.from_numpy(clip.rendered_flows)
    images = torch.from_numpy(clip.images.astype(np.float32))
    dtype = next(model.parameters()).dtype
    preds = []
    for s in range(0, clip.T, window):
        sl = slice(s, min(s + window, clip.T))
        out = model(images[sl].to(dtype), flow_img[sl].to(dtype) if model.config.uses_flow else None)
        p = out.prediction
        for t in range(p.saliency.shape[0]):
            preds.append(Prediction(p.saliency[t], p.edge[t], p.saliency_logits[t], p.edge_logits[t]))
    dt = time.time() - t0
    log.info("inferred %d frames in %.3fs (%.1f fps)", clip.T, dt, clip.T / max(dt, 1e-9))
    return preds


def predict_saliency(model: VSODModel, clip: ClipSample, window: int = 4) -> np.ndarray:
    return np.stack([p.saliency.cpu().numpy() for p in infer(model, clip, window)]).astype(np.float32)
