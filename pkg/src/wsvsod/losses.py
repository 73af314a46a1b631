"""Training objectives for scribble supervision.

All losses take probabilities (post-sigmoid) and clamp them to
``[EPS, 1-EPS]`` before the log, so a saturated perfect fit costs at most
about 1e-7 per labeled element.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import BACKGROUND, FOREGROUND

EPS = 1e-7
STRUCTURE_ALPHA = 10.0
CHARBONNIER_EPS = 1e-6


def _as_tensor(x, like: Optional[torch.Tensor] = None, dtype=None):
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x))
    if like is not None:
        t = t.to(like.device)
    if dtype is not None:
        t = t.to(dtype)
    return t


def bce(prob, target, eps=EPS):
    """Element-wise binary cross-entropy on clamped probabilities."""
    p = prob.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p))


def partial_ce(prob, scribble, eps=EPS):
    """Mean BCE over scribbled pixels; code 1 is target 1, code 2 is target 0."""
    codes = _as_tensor(scribble, like=prob)
    labeled = (codes == FOREGROUND) | (codes == BACKGROUND)
    n = int(labeled.sum())
    if n == 0:
        warnings.warn("partial_ce: no labeled pixels, returning 0", RuntimeWarning, stacklevel=2)
        return (prob * 0).sum()
    target = (codes == FOREGROUND).to(prob.dtype)
    return bce(prob[labeled], target[labeled], eps).sum() / n


def dense_bce(prob, target, eps=EPS):
    return bce(prob, _as_tensor(target, like=prob, dtype=prob.dtype), eps).mean()


# ---------------------------------------------------------------- similarity loss


@dataclass
class SimilarityTarget:
    A: torch.Tensor  # (N, N) label agreement, meaningful where valid
    valid: torch.Tensor  # (N, N) bool, both endpoints labeled


def downsample_scribble(scribble, size):
    """Block-pool codes to ``size``: a cell is fg if it holds any fg, else bg if any bg."""
    codes = _as_tensor(scribble).to(torch.int64)
    H, W = codes.shape[-2:]
    h, w = size
    if H % h or W % w:
        raise ValueError(f"cannot pool {H}x{W} labels onto a {h}x{w} grid")
    # priority: fg=2 > bg=1 > unlabeled=0
    prio = torch.zeros_like(codes)
    prio[codes == BACKGROUND] = 1
    prio[codes == FOREGROUND] = 2
    lead = prio.shape[:-2]
    pooled = prio.reshape(*lead, h, H // h, w, W // w).amax(dim=(-3, -1))
    out = torch.zeros_like(pooled)
    out[pooled == 1] = BACKGROUND
    out[pooled == 2] = FOREGROUND
    return out


def similarity_target(scribble_i, scribble_j, size) -> SimilarityTarget:
    yi = downsample_scribble(scribble_i, size).reshape(-1)
    yj = downsample_scribble(scribble_j, size).reshape(-1)
    # one-hot over (fg, bg); unlabeled rows are zero
    Yi = torch.stack([yi == FOREGROUND, yi == BACKGROUND]).to(torch.float64)
    Yj = torch.stack([yj == FOREGROUND, yj == BACKGROUND]).to(torch.float64)
    A = Yi.T @ Yj
    valid = (yi != 0)[:, None] & (yj != 0)[None, :]
    return SimilarityTarget(A, valid)


def embed(features, embed_conv):
    """(…, C, h, w) -> (…, D, N) after the shared 1x1 embedding."""
    lead = features.shape[:-3]
    e = embed_conv(features.reshape(-1, *features.shape[-3:]))
    return e.reshape(*lead, e.shape[-3], -1)


def similarity_map(f_i, f_j, embed_conv):
    """sigmoid(E_i^T E_j) for single-frame features (C,h,w)."""
    e_i = embed(f_i[None], embed_conv)[0]
    e_j = embed(f_j[None], embed_conv)[0]
    return torch.sigmoid(e_i.T @ e_j)


def similarity_loss(A_hat, target: SimilarityTarget, reduction="mean", eps=EPS):
    valid = target.valid.to(A_hat.device)
    n = int(valid.sum())
    if n == 0:
        warnings.warn("similarity_loss: no labeled pairs, returning 0", RuntimeWarning, stacklevel=2)
        return (A_hat * 0).sum()
    terms = bce(A_hat[valid], target.A.to(A_hat)[valid], eps)
    return terms.sum() / n if reduction == "mean" else terms.sum()


def clip_similarity_loss(features, scribbles, embed_conv, reduction="mean", eps=EPS):
    """Sum over frame pairs i <= j of the pairwise similarity loss, all pairs at once.

    features: (T, C, h, w); scribbles: (T, H, W) codes at input resolution.
    """
    T = features.shape[0]
    h, w = features.shape[-2:]
    E = embed(features, embed_conv)  # (T, D, N)
    A_hat = torch.sigmoid(torch.einsum("idu,jdv->ijuv", E, E))
    y = downsample_scribble(scribbles, (h, w)).reshape(T, -1).to(features.device)
    fg = (y == FOREGROUND).to(features.dtype)
    lab = y != 0
    A = fg[:, None, :, None] * fg[None, :, None, :] + (1 - fg)[:, None, :, None] * (1 - fg)[None, :, None, :]
    valid = (lab[:, None, :, None] & lab[None, :, None, :]).to(features.dtype)
    terms = bce(A_hat, A, eps) * valid
    per_pair = terms.sum(dim=(2, 3))
    if reduction == "mean":
        per_pair = per_pair / valid.sum(dim=(2, 3)).clamp_min(1)
    upper = torch.triu(torch.ones(T, T, dtype=torch.bool, device=features.device))
    return per_pair[upper].sum()


# ---------------------------------------------------------------- structure and edge


def _forward_diff(x, dim):
    """Forward difference padded with zero at the far border so the shape is kept."""
    d = torch.diff(x, dim=dim)
    pad = [0, 0] * (x.dim() - dim % x.dim() - 1) + [0, 1]
    return F.pad(d, pad)


def structure_loss(saliency, image, gate_mask=None, alpha=STRUCTURE_ALPHA):
    """Edge-aware smoothness of the saliency map.

    Per direction d in {x, y}: sqrt(|d s|^2 + 1e-6) * exp(-alpha * mean_c |d I|),
    weighted by ``gate_mask``; averaged over pixels and the two directions.
    saliency: (..., H, W); image: (..., 3, H, W).
    """
    if gate_mask is None:
        gate_mask = torch.ones_like(saliency)
    else:
        gate_mask = _as_tensor(gate_mask, like=saliency, dtype=saliency.dtype)
    total = 0
    for dim in (-1, -2):
        ds = _forward_diff(saliency, dim)
        dI = _forward_diff(image, dim).abs().mean(dim=-3)
        total = total + (torch.sqrt(ds**2 + CHARBONNIER_EPS) * torch.exp(-alpha * dI) * gate_mask).mean()
    return total / 2


def edge_loss(edge_prob, edge_target, eps=EPS):
    return dense_bce(edge_prob, edge_target, eps)


def mask_edges(masks) -> np.ndarray:
    """Boundary pixels of binary masks (mask minus its 4-neighbour erosion)."""
    from scipy import ndimage

    masks = np.asarray(masks).astype(bool)
    out = np.zeros_like(masks)
    cross = ndimage.generate_binary_structure(2, 1)
    for idx in np.ndindex(masks.shape[:-2]):
        m = masks[idx]
        out[idx] = m & ~ndimage.binary_erosion(m, cross, border_value=0)
    return out.astype(np.float32)


def image_edges(images) -> np.ndarray:
    """Thresholded Sobel magnitude of the gray image: mean + 2 std per frame."""
    from skimage.filters import sobel

    images = np.asarray(images, dtype=np.float64)
    gray = images.mean(axis=-3)
    out = np.zeros(gray.shape, dtype=np.float32)
    for idx in np.ndindex(gray.shape[:-2]):
        mag = sobel(gray[idx])
        out[idx] = mag > mag.mean() + 2 * mag.std()
    return out


# ---------------------------------------------------------------- composition


@dataclass
class LossWeights:
    beta1: float = 1.0  # partial cross-entropy
    beta2: float = 1.0  # similarity
    beta3: float = 0.3  # structure
    beta4: float = 1.0  # edge


PHASE_TERMS = {
    "pretrain": (("partial_ce", "beta1"), ("structure", "beta3"), ("edge", "beta4")),
    "finetune": (("partial_ce", "beta1"), ("similarity", "beta2"), ("structure", "beta3"), ("edge", "beta4")),
}


def total_loss(components: Dict[str, object], weights: Optional[LossWeights] = None, phase="finetune"):
    """Weighted sum of the phase's loss terms; pretraining never includes similarity."""
    weights = weights or LossWeights()
    if phase not in PHASE_TERMS:
        raise ValueError(f"unknown phase {phase!r}")
    missing = [name for name, _ in PHASE_TERMS[phase] if name not in components]
    if missing:
        raise ValueError(f"{phase} loss is missing components {missing}")
    return sum(getattr(weights, w) * components[name] for name, w in PHASE_TERMS[phase])
