"""
Dense Encoder-Decoder Segmentation Model

Densely connected encoder/decoder producing 3-class logits (background, iris,
pupil) at input resolution, soft-argmax pupil and iris centers, and an optional
ellipse-regression head fed by the pooled bottleneck.
"""

import json
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from eyeseg_dg.geometry.ellipse import IRIS, PUPIL, center_of_mass
from eyeseg_dg.tensor import functional as F
from eyeseg_dg.tensor.autodiff import Tensor, concat, stack
from eyeseg_dg.tensor.layers import Conv2d, ConvNormAct, Linear, Module
from eyeseg_dg.utils.config import apply_model_preset
from eyeseg_dg.utils.errors import ConfigError, IntegrityError, ShapeError

logger = logging.getLogger(__name__)

N_CLASSES = 3
ELLIPSE_VALUES = 5
# keeps the center-of-mass denominator positive when a channel underflows
COM_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    growth: float = 1.4
    groups: int = 1
    blocks: int = 4
    height: int = 72
    width: int = 96
    normalization: str = "instance"
    regression_head: bool = True
    dtype: str = "float32"

    def widths(self) -> List[int]:
        return [int(round(self.base_channels * self.growth ** i)) for i in range(self.blocks)]

    def validate(self) -> None:
        """
        Raises:
            ConfigError: On a width/group mismatch or an indivisible resolution
        """
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.growth < 1.0:
            raise ConfigError(f"growth must be >= 1, got {self.growth}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.normalization not in ("instance", "batch"):
            raise ConfigError(f"Unknown normalization '{self.normalization}'")
        for i, w in enumerate(self.widths()):
            if w % self.groups:
                raise ConfigError(f"Block {i} width {w} is not divisible by groups={self.groups}")
        factor = 2 ** (self.blocks - 1)
        if self.height % factor or self.width % factor:
            raise ConfigError(f"Resolution {self.width}x{self.height} is not divisible by {factor} "
                              f"({self.blocks} blocks)")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "ModelConfig":
        """Build from the merged experiment config; a named preset overrides its fields"""
        model = apply_model_preset(config["model"])
        return cls(
            base_channels=int(model["base_channels"]),
            growth=float(model["growth"]),
            groups=int(model["groups"]),
            blocks=int(model["blocks"]),
            height=int(config["registry"]["height"]),
            width=int(config["registry"]["width"]),
            normalization=config["train"]["normalization"],
            regression_head=bool(model["regression_head"]),
            dtype=config["train"]["precision"],
        )


@dataclass
class ModelOutput:
    seg_logits: Tensor
    pupil_center: Tensor                     # (N, 2) as (x, y)
    iris_center: Tensor                      # (N, 2)
    ellipse_params: Optional[Tensor] = None  # (N, 2, 5): pupil, iris
    latent: Optional[Tensor] = None


class DenseBlock(Module):
    """Two grouped 3x3 layers with dense concatenation, then a 1x1 transition"""

    def __init__(self, in_channels: int, width: int, groups: int, norm_kind: str,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv1 = ConvNormAct(in_channels, width, 3, groups, norm_kind, rng, dtype)
        self.conv2 = ConvNormAct(in_channels + width, width, 3, groups, norm_kind, rng, dtype)
        self.transition = ConvNormAct(in_channels + 2 * width, width, 1, 1, norm_kind, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h1 = self.conv1(x)
        h2 = self.conv2(concat([x, h1], axis=1))
        return self.transition(concat([x, h1, h2], axis=1))


class DenseEllipseNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        widths = cfg.widths()
        norm = cfg.normalization

        self.stem = ConvNormAct(1, widths[0], 3, 1, norm, rng, dtype)
        self.encoder = []
        in_channels = widths[0]
        for w in widths:
            self.encoder.append(DenseBlock(in_channels, w, cfg.groups, norm, rng, dtype))
            in_channels = w
        self.decoder = []
        for i in range(cfg.blocks - 2, -1, -1):
            self.decoder.append(DenseBlock(widths[i + 1] + widths[i], widths[i], cfg.groups, norm, rng, dtype))
        self.head = Conv2d(widths[0], N_CLASSES, 1, 1, rng, dtype)

        self.regressor = []
        if cfg.regression_head:
            self.regressor = [Linear(widths[-1], widths[-1], rng, dtype),
                              Linear(widths[-1], 2 * ELLIPSE_VALUES, rng, dtype)]

    def forward(self, images: Tensor) -> ModelOutput:
        """
        Args:
            images: (N, 1, H, W) gray levels in [0, 255]

        Raises:
            ShapeError: If the batch does not match the configured resolution
        """
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (1, cfg.height, cfg.width):
            raise ShapeError(f"Expected a (N, 1, {cfg.height}, {cfg.width}) batch, got {images.shape}")

        h = self.stem(images * (1.0 / 255.0))
        skips = []
        for i, block in enumerate(self.encoder):
            if i > 0:
                h = F.avg_pool2d(h)
            h = block(h)
            skips.append(h)
        latent = h

        for block, i in zip(self.decoder, range(cfg.blocks - 2, -1, -1)):
            h = F.upsample2x(h)
            h = block(concat([h, skips[i]], axis=1))
        logits = self.head(h)

        pupil_center, iris_center = centers_from_logits(logits)
        ellipse = None
        if self.regressor:
            pooled = F.global_avg_pool(latent)
            hidden = F.leaky_relu(self.regressor[0](pooled))
            ellipse = self.regressor[1](hidden).reshape(images.shape[0], 2, ELLIPSE_VALUES)
        return ModelOutput(logits, pupil_center, iris_center, ellipse, latent)


def centers_from_logits(logits: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Soft-argmax centers from 3-class logits

    The pupil center is the center of mass of the pupil probability; the iris
    center uses the iris + pupil probability (the full iris ellipse).
    """
    probs = F.softmax_channels(logits)
    pupil_map = probs[:, PUPIL] + COM_EPS
    iris_map = probs[:, IRIS] + probs[:, PUPIL] + COM_EPS
    px, py = center_of_mass(pupil_map)
    ix, iy = center_of_mass(iris_map)
    return stack([px, py], axis=1), stack([ix, iy], axis=1)


def build_model(cfg: ModelConfig, seed: int = 0) -> DenseEllipseNet:
    """
    Build and initialize a model

    Raises:
        ConfigError: Invalid widths/groups or resolution
    """
    model = DenseEllipseNet(cfg, np.random.default_rng(seed))
    logger.info(f"Built model with widths {cfg.widths()}, groups {cfg.groups}: "
                f"{model.num_parameters()} parameters")
    return model


# ===================== analytic parameter counting =====================

def _conv_params(k: int, c_in: int, c_out: int, groups: int) -> int:
    return c_out * (c_in // groups) * k * k + c_out


def _cna_params(k: int, c_in: int, c_out: int, groups: int) -> int:
    return _conv_params(k, c_in, c_out, groups) + 2 * c_out


def _block_params(c_in: int, w: int, groups: int) -> int:
    return (_cna_params(3, c_in, w, groups) + _cna_params(3, c_in + w, w, groups)
            + _cna_params(1, c_in + 2 * w, w, 1))


def parameter_count(cfg: ModelConfig) -> Dict[str, int]:
    """Closed-form layer-by-layer parameter count"""
    widths = cfg.widths()
    counts = {"stem": _cna_params(3, 1, widths[0], 1)}
    in_channels = widths[0]
    encoder = 0
    for w in widths:
        encoder += _block_params(in_channels, w, cfg.groups)
        in_channels = w
    counts["encoder"] = encoder
    counts["decoder"] = sum(_block_params(widths[i + 1] + widths[i], widths[i], cfg.groups)
                            for i in range(cfg.blocks - 1))
    counts["head"] = _conv_params(1, widths[0], N_CLASSES, 1)
    last = widths[-1]
    counts["regression"] = (last * last + last + last * 2 * ELLIPSE_VALUES + 2 * ELLIPSE_VALUES
                            if cfg.regression_head else 0)
    counts["total"] = sum(counts.values())
    return counts


def model_manifest(cfg: ModelConfig) -> str:
    """Self-describing JSON stored next to checkpoints"""
    return json.dumps({"model": cfg.to_dict(), "parameters": parameter_count(cfg)["total"]},
                      sort_keys=True, indent=2) + "\n"


def load_state(model: Module, arrays: Dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into a model's parameters and buffers"""
    for name, p in model.named_parameters():
        key = f"param.{name}"
        if key not in arrays:
            raise IntegrityError(f"Checkpoint is missing parameter {name}")
        if arrays[key].shape != p.shape:
            raise ShapeError(f"Checkpoint parameter {name} has shape {arrays[key].shape}, model {p.shape}")
        p.data[...] = arrays[key].astype(p.dtype)
    model.load_buffers({k[len("buffer."):]: v for k, v in arrays.items() if k.startswith("buffer.")})


def state_arrays(model: Module) -> Dict[str, np.ndarray]:
    out = {f"param.{name}": p.data for name, p in model.named_parameters()}
    out.update({f"buffer.{name}": b for name, b in model.named_buffers()})
    return out
