"""Full network assembly, ablation variants and the checkpoint container."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .amfm import AMFM, AddFusion, AppearanceLateral, ConcatFusion
from .decoder import Decoder, EdgeHead, Prediction
from .encoder import ASPP_RATES, DESK_CHANNELS, DESK_STRIDES, TwoStreamEncoder
from .errors import ConfigError, DataFormatError
from .tiem import TIEM

CHECKPOINT_VERSION = "wsvsod-params/1"

# variant -> (uses flow, fusion kind, stages with a temporal module, similarity loss)
VARIANTS = {
    "B": (False, "lateral", "none", False),
    "B-Fc": (True, "concat", "none", False),
    "B-Fa": (True, "add", "none", False),
    "B-Fo": (True, "amfm", "none", False),
    "B-Fo-Th": (True, "amfm", "top", False),
    "B-Fo-Ta": (True, "amfm", "all", False),
    "B-Fo-Ta-L": (True, "amfm", "all", True),
}
FULL_VARIANT = "B-Fo-Ta-L"


@dataclass
class ModelConfig:
    variant: str = FULL_VARIANT
    backbone: str = "tiny"
    channels: Tuple[int, ...] = DESK_CHANNELS
    strides: Tuple[int, ...] = DESK_STRIDES
    aspp_rates: Tuple[int, ...] = ASPP_RATES
    fusion_channels: int = 32
    decoder_width: int = 32
    sim_dim: int = 32
    softmax_mode: str = "within"
    tiem_cascade: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)

    @property
    def uses_flow(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def fusion(self) -> str:
        return VARIANTS[self.variant][1]

    @property
    def temporal(self) -> str:
        return VARIANTS[self.variant][2]

    @property
    def uses_similarity(self) -> bool:
        return VARIANTS[self.variant][3]


@dataclass
class ModelOutput:
    prediction: Prediction
    sim_features: torch.Tensor  # (T, C, h, w) coarsest stage after temporal modelling
    stages: list


_FUSIONS = {"lateral": AppearanceLateral, "concat": ConcatFusion, "add": AddFusion}


class VSODModel(nn.Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.encoder = TwoStreamEncoder(
            with_motion=cfg.uses_flow, backbone=cfg.backbone, channels=cfg.channels,
            strides=cfg.strides, aspp_rates=cfg.aspp_rates,
        )
        chans = self.encoder.channels
        n = len(chans)
        C = cfg.fusion_channels
        if cfg.fusion == "amfm":
            self.amfm = nn.ModuleList(AMFM(c, c, C, cfg.softmax_mode) for c in chans)
        else:
            self.fusion = nn.ModuleList(_FUSIONS[cfg.fusion](c, c, C) for c in chans)
        if cfg.temporal != "none":
            stages = range(n) if cfg.temporal == "all" else [n - 1]
            self.tiem = nn.ModuleDict({str(k): TIEM(C, cascade=cfg.tiem_cascade) for k in stages})
        self.decoder = Decoder(C, cfg.decoder_width, n)
        self.edge = EdgeHead(chans[0], chans[1], cfg.decoder_width)
        if cfg.uses_similarity:
            self.sim_embed = nn.Conv2d(C, cfg.sim_dim, 1)

    @property
    def fusions(self):
        return self.amfm if self.config.fusion == "amfm" else self.fusion

    def forward(self, images, flow_images=None, temporal=True) -> ModelOutput:
        """images, flow_images: (T,3,H,W) for one clip, time on the leading axis.

        ``temporal=False`` bypasses the recurrent modules, which is how the
        static-image pretraining phase runs.
        """
        cfg = self.config
        out_size = images.shape[-2:]
        f_r = self.encoder.encode(images, "appearance")
        f_m = None
        if cfg.uses_flow:
            if flow_images is None:
                raise ConfigError(f"variant {cfg.variant} needs flow input")
            f_m = self.encoder.encode(flow_images, "motion")
        stages = []
        for k, fusion in enumerate(self.fusions):
            g = fusion(f_r[k], None if f_m is None else f_m[k])
            if temporal and hasattr(self, "tiem") and str(k) in self.tiem:
                g = self.tiem[str(k)](g)
            stages.append(g)
        sal_logits = self.decoder(stages, out_size)
        edge_logits = self.edge(f_r[0], f_r[1], out_size)
        pred = Prediction(
            saliency=torch.sigmoid(sal_logits),
            edge=torch.sigmoid(edge_logits),
            saliency_logits=sal_logits,
            edge_logits=edge_logits,
        )
        return ModelOutput(pred, stages[-1], stages)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------- parameters on disk


@dataclass
class ModelParameters:
    """Named float32 arrays plus the manifest needed to rebuild and validate a model."""

    arrays: Dict[str, np.ndarray]
    config: dict
    version: str = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def manifest(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "shapes": {k: list(v.shape) for k, v in self.arrays.items()},
            "extra": self.extra,
        }

    @classmethod
    def from_model(cls, model: VSODModel, **extra) -> "ModelParameters":
        arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
        return cls(arrays, asdict(model.config), extra=extra)

    def build(self, dtype=torch.float32) -> VSODModel:
        model = VSODModel(ModelConfig(**self.config))
        self.load_into(model)
        return model.to(dtype)

    def load_into(self, model: VSODModel):
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        got = {k: tuple(v.shape) for k, v in self.arrays.items()}
        missing = sorted(set(expected) - set(got))
        unexpected = sorted(set(got) - set(expected))
        if missing or unexpected:
            raise DataFormatError(f"parameter names differ: missing={missing[:3]} unexpected={unexpected[:3]}")
        bad = [k for k in expected if expected[k] != got[k]]
        if bad:
            raise DataFormatError(f"parameter {bad[0]}: shape {got[bad[0]]} != expected {expected[bad[0]]}")
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.arrays.items()})

    def save(self, path: str):
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("manifest.json", json.dumps(self.manifest, indent=1, sort_keys=True))
            for name, arr in self.arrays.items():
                buf = io.BytesIO()
                np.save(buf, np.ascontiguousarray(arr, dtype="<f4"), allow_pickle=False)
                zf.writestr(f"arrays/{name}.npy", buf.getvalue())

    @classmethod
    def load(cls, path: str) -> "ModelParameters":
        try:
            with zipfile.ZipFile(path) as zf:
                manifest = json.loads(zf.read("manifest.json"))
                arrays = {}
                for name, shape in manifest["shapes"].items():
                    arr = np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
                    if list(arr.shape) != list(shape):
                        raise DataFormatError(f"{path}: {name} has shape {arr.shape}, manifest says {shape}")
                    arrays[name] = arr
        except (OSError, KeyError, zipfile.BadZipFile, ValueError) as exc:
            if isinstance(exc, DataFormatError):
                raise
            raise DataFormatError(f"{path}: unreadable checkpoint ({exc})") from exc
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: checkpoint version {manifest.get('version')!r} != {CHECKPOINT_VERSION}")
        return cls(arrays, manifest["config"], manifest["version"], manifest.get("extra", {}))


def save_checkpoint(model: VSODModel, path: str, **extra):
    ModelParameters.from_model(model, **extra).save(path)


def load_checkpoint(path: str) -> VSODModel:
    return ModelParameters.load(path).build()
