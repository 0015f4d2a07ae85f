"""
Augmentation Pipeline

Eleven equiprobable augmentations (seven photometric, three geometric and a
pass-through) plus an independent horizontal flip. Every random draw is kept in
an AugmentationEvent so any augmented sample can be rebuilt bit-exactly.
"""

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import cv2
import numpy as np

from eyeseg_dg.geometry.ellipse import (
    IRIS,
    SimilarityTransform,
    rasterize_ellipse,
    transform_ellipse,
)
from eyeseg_dg.synth.domains import EyeSample
from eyeseg_dg.utils.errors import AugmentationError

logger = logging.getLogger(__name__)

BLUR_WIDTH = 7
FOG_OCTAVES = 4
EXPOSURE_FACTOR = 0.8
FIXED_EXPOSURE_RANGE = 50.0
FLIP_PROBABILITY = 0.5


class AugmentationKind(str, enum.Enum):
    GAUSS_BLUR = "gauss_blur"
    MOTION_BLUR = "motion_blur"
    GAMMA = "gamma"
    EXPOSURE = "exposure"
    GAUSS_NOISE = "gauss_noise"
    SYNTH_LINES = "synth_lines"
    SCALE = "scale"
    ROTATION = "rotation"
    TRANSLATION = "translation"
    SYNTH_FOG = "synth_fog"
    NONE = "none"


KINDS = tuple(AugmentationKind)
PHOTOMETRIC = frozenset({
    AugmentationKind.GAUSS_BLUR, AugmentationKind.MOTION_BLUR, AugmentationKind.GAMMA,
    AugmentationKind.EXPOSURE, AugmentationKind.GAUSS_NOISE, AugmentationKind.SYNTH_LINES,
    AugmentationKind.SYNTH_FOG,
})
GEOMETRIC = frozenset({AugmentationKind.SCALE, AugmentationKind.ROTATION, AugmentationKind.TRANSLATION})


@dataclass
class AugmentSettings:
    exposure_fallback: str = "image_median"    # or "fixed_range"
    exposure_symmetric: bool = False

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "AugmentSettings":
        section = config.get("augment", {})
        return cls(section.get("exposure_fallback", "image_median"),
                   bool(section.get("exposure_symmetric", False)))


@dataclass
class AugmentationEvent:
    """One applied augmentation: its kind, every sampled parameter, the transform if geometric"""
    kind: AugmentationKind
    params: Dict[str, Any] = field(default_factory=dict)
    transform: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "params": self.params, "transform": self.transform}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "AugmentationEvent":
        return cls(AugmentationKind(d["kind"]), dict(d.get("params") or {}), d.get("transform"))


# ===================== photometric operations =====================

def _require(ok: bool, message: str) -> None:
    if not ok:
        raise AugmentationError(message)


def _gauss_blur(image: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    sigma = params["sigma"]
    _require(2.0 <= sigma <= 7.0, f"gauss_blur sigma {sigma} outside [2, 7]")
    return cv2.GaussianBlur(image, (BLUR_WIDTH, BLUR_WIDTH), sigmaX=sigma, sigmaY=sigma)


def motion_kernel(theta: float, width: int = BLUR_WIDTH) -> np.ndarray:
    """Normalized width x width line kernel through the center at angle theta"""
    canvas = np.zeros((width, width), dtype=np.uint8)
    c = width // 2
    dx, dy = c * math.cos(theta), c * math.sin(theta)
    p1 = (int(round(c - dx)), int(round(c - dy)))
    p2 = (int(round(c + dx)), int(round(c + dy)))
    cv2.line(canvas, p1, p2, 1, thickness=1, lineType=cv2.LINE_8)
    kernel = canvas.astype(np.float64)
    return kernel / kernel.sum()


def _motion_blur(image: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    theta = params["theta"]
    _require(0.0 <= theta <= math.pi, f"motion_blur theta {theta} outside [0, pi]")
    return cv2.filter2D(image, -1, motion_kernel(theta))


def _gamma(image: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    gamma = params["gamma"]
    _require(0.6 <= gamma <= 1.4, f"gamma {gamma} outside [0.6, 1.4]")
    return 255.0 * np.power(np.clip(image, 0, 255) / 255.0, gamma)


def _exposure(image: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    delta = params["delta"]
    _require(-255.0 <= delta <= 255.0, f"exposure delta {delta} outside [-255, 255]")
    return image + delta


def _gauss_noise(image: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    sigma = params["sigma"]
    _require(2.0 <= sigma <= 16.0, f"gauss_noise sigma {sigma} outside [2, 16]")
    noise = np.random.default_rng(params["noise_seed"]).normal(0.0, sigma, image.shape)
    return image + noise


def _synth_lines(image: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    segments = params["segments"]
    _require(1 <= len(segments) <= 10, f"synth_lines count {len(segments)} outside [1, 10]")
    layer = np.zeros(image.shape, dtype=np.uint8)
    for x1, y1, x2, y2 in segments:
        cv2.line(layer, (int(x1), int(y1)), (int(x2), int(y2)), 255, thickness=1, lineType=cv2.LINE_8)
    out = image.copy()
    out[layer > 0] = 255.0
    return out


def value_noise(height: int, width: int, seed: int, octaves: int = FOG_OCTAVES) -> np.ndarray:
    """Multi-octave value noise in [0, 1]"""
    rng = np.random.default_rng(seed)
    total = np.zeros((height, width), dtype=np.float64)
    weight = 0.0
    for octave in range(octaves):
        cells = 2 ** (octave + 1)
        grid = rng.random((cells + 1, cells + 1))
        amplitude = 0.5 ** octave
        total += amplitude * cv2.resize(grid, (width, height), interpolation=cv2.INTER_LINEAR)
        weight += amplitude
    total /= weight
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def _synth_fog(image: np.ndarray, params: Dict[str, Any]) -> np.ndarray:
    alpha = params["alpha"]
    _require(0.1 <= alpha <= 0.4, f"synth_fog alpha {alpha} outside [0.1, 0.4]")
    fog = 255.0 * value_noise(image.shape[0], image.shape[1], params["fog_seed"])
    return (1.0 - alpha) * image + alpha * fog


_PHOTOMETRIC_OPS = {
    AugmentationKind.GAUSS_BLUR: _gauss_blur,
    AugmentationKind.MOTION_BLUR: _motion_blur,
    AugmentationKind.GAMMA: _gamma,
    AugmentationKind.EXPOSURE: _exposure,
    AugmentationKind.GAUSS_NOISE: _gauss_noise,
    AugmentationKind.SYNTH_LINES: _synth_lines,
    AugmentationKind.SYNTH_FOG: _synth_fog,
}


def photometric(sample: EyeSample, kind: AugmentationKind, params: Dict[str, Any]) -> EyeSample:
    """
    Apply a photometric augmentation; annotations are carried over untouched

    Raises:
        AugmentationError: Unknown kind or a parameter outside its support
    """
    kind = AugmentationKind(kind)
    if kind not in PHOTOMETRIC:
        raise AugmentationError(f"{kind.value} is not a photometric augmentation")
    image = _PHOTOMETRIC_OPS[kind](sample.image.astype(np.float64), params)
    return sample.replace(image=np.clip(image, 0.0, 255.0))


# ===================== geometric operations =====================

def geometric_transform(kind: AugmentationKind, params: Dict[str, Any], height: int, width: int) -> SimilarityTransform:
    kind = AugmentationKind(kind)
    if kind is AugmentationKind.SCALE:
        s = params["scale"]
        _require(0.5 <= s <= 0.9, f"scale factor {s} outside [0.5, 0.9]")
        return SimilarityTransform.about_center(height, width, scale=s)
    if kind is AugmentationKind.ROTATION:
        phi = params["rotation"]
        _require(-math.pi / 4 <= phi <= math.pi / 4, f"rotation {phi} outside [-pi/4, pi/4]")
        return SimilarityTransform.about_center(height, width, rotation=phi)
    if kind is AugmentationKind.TRANSLATION:
        dx, dy = params["dx"], params["dy"]
        _require(abs(dx) <= width / 3 and abs(dy) <= height / 3, f"translation ({dx}, {dy}) outside W/3, H/3")
        return SimilarityTransform(tx=dx, ty=dy)
    raise AugmentationError(f"{kind.value} is not a geometric augmentation")


def warp_sample(sample: EyeSample, transform: SimilarityTransform) -> EyeSample:
    """Warp image (bilinear, edge replication), mask (nearest) and annotations by one transform"""
    size = (sample.width, sample.height)
    matrix = transform.affine()
    image = cv2.warpAffine(sample.image.astype(np.float64), matrix, size,
                           flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    mask = None
    if sample.seg_mask is not None:
        mask = cv2.warpAffine(sample.seg_mask, matrix, size, flags=cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return sample.replace(
        image=np.clip(image, 0.0, 255.0),
        seg_mask=mask,
        pupil_ellipse=transform_ellipse(sample.pupil_ellipse, transform) if sample.pupil_ellipse else None,
        iris_ellipse=transform_ellipse(sample.iris_ellipse, transform) if sample.iris_ellipse else None,
        pupil_center=transform.apply_point(*sample.pupil_center) if sample.pupil_center else None,
        iris_center=transform.apply_point(*sample.iris_center) if sample.iris_center else None,
    )


def geometric(sample: EyeSample, kind: AugmentationKind, params: Dict[str, Any]) -> EyeSample:
    return warp_sample(sample, geometric_transform(kind, params, sample.height, sample.width))


def hflip(sample: EyeSample) -> EyeSample:
    """Mirror image, mask and annotations about the vertical center line"""
    transform = SimilarityTransform.horizontal_flip(sample.width)
    return sample.replace(
        image=sample.image[:, ::-1].copy(),
        seg_mask=sample.seg_mask[:, ::-1].copy() if sample.seg_mask is not None else None,
        pupil_ellipse=transform_ellipse(sample.pupil_ellipse, transform) if sample.pupil_ellipse else None,
        iris_ellipse=transform_ellipse(sample.iris_ellipse, transform) if sample.iris_ellipse else None,
        pupil_center=transform.apply_point(*sample.pupil_center) if sample.pupil_center else None,
        iris_center=transform.apply_point(*sample.iris_center) if sample.iris_center else None,
    )


def random_hflip(sample: EyeSample, rng: np.random.Generator) -> EyeSample:
    return hflip(sample) if rng.random() < FLIP_PROBABILITY else sample


# ===================== parameter draws =====================

def reference_luminance(sample: EyeSample) -> Optional[float]:
    """Median iris intensity when an iris annotation exists"""
    if sample.seg_mask is not None and np.any(sample.seg_mask == IRIS):
        return float(np.median(sample.image[sample.seg_mask == IRIS]))
    if sample.iris_ellipse is not None:
        region = rasterize_ellipse(sample.iris_ellipse, sample.height, sample.width)
        if sample.pupil_ellipse is not None:
            region &= ~rasterize_ellipse(sample.pupil_ellipse, sample.height, sample.width)
        if region.any():
            return float(np.median(sample.image[region]))
    return None


def _border_point(rng: np.random.Generator, height: int, width: int) -> Tuple[int, int]:
    side = int(rng.integers(4))
    if side == 0:
        return int(rng.integers(width)), 0
    if side == 1:
        return int(rng.integers(width)), height - 1
    if side == 2:
        return 0, int(rng.integers(height))
    return width - 1, int(rng.integers(height))


def draw_params(kind: AugmentationKind, sample: EyeSample, rng: np.random.Generator,
                settings: Optional[AugmentSettings] = None) -> Dict[str, Any]:
    """Sample the parameters of one augmentation from its support"""
    settings = settings or AugmentSettings()
    h, w = sample.height, sample.width
    if kind is AugmentationKind.GAUSS_BLUR:
        return {"sigma": float(rng.uniform(2.0, 7.0))}
    if kind is AugmentationKind.MOTION_BLUR:
        return {"theta": float(rng.uniform(0.0, math.pi))}
    if kind is AugmentationKind.GAMMA:
        return {"gamma": float(rng.uniform(0.6, 1.4))}
    if kind is AugmentationKind.EXPOSURE:
        reference = reference_luminance(sample)
        source = "iris_median"
        if reference is None:
            if settings.exposure_fallback == "fixed_range":
                delta = float(rng.uniform(-FIXED_EXPOSURE_RANGE, FIXED_EXPOSURE_RANGE))
                return {"delta": delta, "reference": None, "source": "fixed_range"}
            reference = float(np.median(sample.image))
            source = "image_median"
        if settings.exposure_symmetric:
            low, high = -EXPOSURE_FACTOR * reference, EXPOSURE_FACTOR * (255.0 - reference)
        else:
            # darkening bounded by the headroom above the reference, brightening by the reference
            low, high = -EXPOSURE_FACTOR * (255.0 - reference), EXPOSURE_FACTOR * reference
        return {"delta": float(rng.uniform(low, high)), "reference": reference, "source": source}
    if kind is AugmentationKind.GAUSS_NOISE:
        return {"sigma": float(rng.uniform(2.0, 16.0)), "noise_seed": int(rng.integers(2 ** 63))}
    if kind is AugmentationKind.SYNTH_LINES:
        count = int(rng.integers(1, 11))
        segments = []
        for _ in range(count):
            segments.append(list(_border_point(rng, h, w) + _border_point(rng, h, w)))
        return {"segments": segments}
    if kind is AugmentationKind.SCALE:
        return {"scale": float(rng.uniform(0.5, 0.9))}
    if kind is AugmentationKind.ROTATION:
        return {"rotation": float(rng.uniform(-math.pi / 4, math.pi / 4))}
    if kind is AugmentationKind.TRANSLATION:
        return {"dx": float(rng.uniform(-w, w) / 3.0), "dy": float(rng.uniform(-h, h) / 3.0)}
    if kind is AugmentationKind.SYNTH_FOG:
        return {"alpha": float(rng.uniform(0.1, 0.4)), "fog_seed": int(rng.integers(2 ** 63))}
    return {}


def replay_event(sample: EyeSample, event: AugmentationEvent) -> EyeSample:
    """Re-apply a recorded augmentation"""
    kind = event.kind
    if kind is AugmentationKind.NONE:
        return sample
    if kind in PHOTOMETRIC:
        return photometric(sample, kind, event.params)
    return geometric(sample, kind, event.params)


def apply_random(sample: EyeSample, rng: np.random.Generator,
                 settings: Optional[AugmentSettings] = None) -> Tuple[EyeSample, AugmentationEvent]:
    """
    Draw one of the eleven kinds uniformly, sample its parameters and apply it

    Returns:
        Tuple of the augmented sample and its replayable event
    """
    kind = KINDS[int(rng.integers(len(KINDS)))]
    params = draw_params(kind, sample, rng, settings)
    event = AugmentationEvent(kind, params)
    if kind in GEOMETRIC:
        event.transform = geometric_transform(kind, params, sample.height, sample.width).to_dict()
    return replay_event(sample, event), event


def augment_sample(sample: EyeSample, seed: int, augment: bool,
                   settings: Optional[AugmentSettings] = None) -> Tuple[EyeSample, Dict[str, Any]]:
    """
    Flip, then optionally augment, from two disjoint substreams of one seed

    Returns:
        Tuple of the sample and a JSON-ready record sufficient for replay
    """
    flip_seq, augment_seq = np.random.SeedSequence(seed).spawn(2)
    flipped = bool(np.random.default_rng(flip_seq).random() < FLIP_PROBABILITY)
    out = hflip(sample) if flipped else sample
    record: Dict[str, Any] = {"sample_id": sample.sample_id, "seed": int(seed), "hflip": flipped, "event": None}
    if augment:
        out, event = apply_random(out, np.random.default_rng(augment_seq), settings)
        record["event"] = event.to_dict()
    return out, record


def replay_record(sample: EyeSample, record: Dict[str, Any]) -> EyeSample:
    out = hflip(sample) if record["hflip"] else sample
    if record.get("event"):
        out = replay_event(out, AugmentationEvent.from_dict(record["event"]))
    return out
