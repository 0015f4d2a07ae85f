"""
Synthetic Eye Domains

Procedural generator of grayscale eye images with exact ground truth. Each
domain is described by a DomainSpec; every sample draws from its own random
stream derived from (master seed, domain, subject, index), so serial and
parallel generation agree bit-for-bit.
"""

import dataclasses
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import yaml

from eyeseg_dg.geometry.ellipse import (
    Ellipse,
    compose_mask,
    coverage_ellipse,
    iris_fully_visible,
)
from eyeseg_dg.utils.config import STOCK_DOMAINS_FILE, locate_key
from eyeseg_dg.utils.errors import ConfigError, IntegrityError, MissingInputError, SynthesisError

logger = logging.getLogger(__name__)

CONDITIONS = ("constrained", "outdoors")
ANNOTATION_PROFILES = ("full", "pupil_iris_centers", "pupil_only")
MAX_PLACEMENT_ATTEMPTS = 100

Point = Tuple[float, float]


@dataclass(frozen=True)
class DomainSpec:
    """
    Appearance and pose distributions of one synthetic domain

    Positions are fractions of the frame ((W-1, H-1) for centers), radii are
    fractions of the image height, luminance values are gray levels.
    """
    name: str
    condition: str = "constrained"
    subjects: int = 4
    annotation_profile: str = "full"
    center_mean: Tuple[float, float] = (0.5, 0.5)
    center_cov: Tuple[Tuple[float, float], Tuple[float, float]] = ((0.002, 0.0), (0.0, 0.002))
    pupil_radius: Tuple[float, float] = (0.08, 0.14)
    iris_ratio: Tuple[float, float] = (1.8, 2.3)
    eccentricity: Tuple[float, float] = (0.75, 1.0)
    iris_offset: float = 0.15
    background: float = 70.0
    iris_level: float = 130.0
    pupil_level: float = 30.0
    gain_spread: float = 0.1
    offset_spread: float = 4.0
    texture_noise: float = 3.0
    blobs: Tuple[int, int] = (0, 0)
    lines: Tuple[int, int] = (0, 0)
    blob_radius: Tuple[float, float] = (1.0, 3.0)
    artifact_intensity: float = 250.0
    bright_pupil_prob: float = 0.0
    bright_pupil_level: Tuple[float, float] = (150.0, 210.0)
    subject_jitter: float = 0.03
    subject_luminance_jitter: float = 6.0
    require_full_iris: bool = False

    def __post_init__(self):
        problems = []
        if self.condition not in CONDITIONS:
            problems.append(f"condition must be one of {CONDITIONS}")
        if self.annotation_profile not in ANNOTATION_PROFILES:
            problems.append(f"annotation_profile must be one of {ANNOTATION_PROFILES}")
        if self.subjects < 1:
            problems.append("subjects must be >= 1")
        for key in ("pupil_radius", "iris_ratio", "blob_radius"):
            lo, hi = getattr(self, key)
            if not 0 < lo <= hi:
                problems.append(f"{key} must satisfy 0 < low <= high")
        if self.iris_ratio[0] <= 1.0:
            problems.append("iris_ratio must exceed 1")
        lo, hi = self.eccentricity
        if not 0 < lo <= hi <= 1:
            problems.append("eccentricity must lie in (0, 1]")
        for key in ("blobs", "lines"):
            lo, hi = getattr(self, key)
            if not 0 <= lo <= hi:
                problems.append(f"{key} must satisfy 0 <= low <= high")
        if not 0.0 <= self.bright_pupil_prob <= 1.0:
            problems.append("bright_pupil_prob must lie in [0, 1]")
        if not 0.0 <= self.gain_spread < 1.0:
            problems.append("gain_spread must lie in [0, 1)")
        cov = np.asarray(self.center_cov, dtype=np.float64)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) < 0):
            problems.append("center_cov must be a symmetric positive semi-definite 2x2 matrix")
        if min(self.texture_noise, self.offset_spread, self.subject_jitter, self.subject_luminance_jitter) < 0:
            problems.append("spreads must be non-negative")
        if problems:
            raise ConfigError(f"Domain '{self.name}': " + "; ".join(problems))

    @classmethod
    def from_mapping(cls, values: Dict[str, Any]) -> "DomainSpec":
        kwargs = {}
        for key, value in values.items():
            if isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            kwargs[key] = value
        return cls(**kwargs)

    def to_mapping(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        return {k: (_listify(v) if isinstance(v, tuple) else v) for k, v in out.items()}


def _listify(value):
    return [_listify(v) if isinstance(v, tuple) else v for v in value]


@dataclass
class EyeSample:
    """One grayscale eye image with its (possibly partial) annotations"""
    image: np.ndarray
    domain: str
    subject: int
    sample_id: str
    seg_mask: Optional[np.ndarray] = None
    pupil_ellipse: Optional[Ellipse] = None
    iris_ellipse: Optional[Ellipse] = None
    pupil_center: Optional[Point] = None
    iris_center: Optional[Point] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not any(v is not None for v in (self.seg_mask, self.pupil_ellipse, self.iris_ellipse,
                                            self.pupil_center, self.iris_center)):
            raise IntegrityError(f"Sample {self.sample_id} carries no annotation")
        if self.seg_mask is not None and self.seg_mask.shape != self.image.shape:
            raise IntegrityError(f"Sample {self.sample_id}: mask extents {self.seg_mask.shape} "
                                 f"differ from image extents {self.image.shape}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def pupil_point(self) -> Optional[Point]:
        if self.pupil_center is not None:
            return self.pupil_center
        return self.pupil_ellipse.center if self.pupil_ellipse is not None else None

    def iris_point(self) -> Optional[Point]:
        if self.iris_center is not None:
            return self.iris_center
        return self.iris_ellipse.center if self.iris_ellipse is not None else None

    def replace(self, **changes) -> "EyeSample":
        return dataclasses.replace(self, **changes)


@dataclass
class DomainDataset:
    """All samples of one domain at a common resolution"""
    name: str
    condition: str
    annotation_profile: str
    height: int
    width: int
    samples: List[EyeSample]
    spec: Optional[DomainSpec] = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[EyeSample]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> EyeSample:
        return self.samples[index]

    def subjects(self) -> List[int]:
        return sorted({s.subject for s in self.samples})

    def sample_ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    def subset(self, keep: Sequence[EyeSample]) -> "DomainDataset":
        return dataclasses.replace(self, samples=list(keep))


@dataclass(frozen=True)
class SubjectTraits:
    """Per-subject offsets applied on top of the domain distributions"""
    center_shift: Tuple[float, float] = (0.0, 0.0)
    luminance_shift: float = 0.0
    radius_scale: float = 1.0


def derive_seed(*parts) -> int:
    """64-bit seed hashed from an ordered tuple of identifiers"""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def sample_seed(master_seed: int, domain: str, subject: int, index) -> int:
    """Seed of one sample's random stream"""
    return derive_seed(master_seed, domain, subject, index)


def make_sample_id(domain: str, subject: int, index: int) -> str:
    return f"{domain}/{subject:03d}/{index:04d}"


def subject_traits(spec: DomainSpec, rng: np.random.Generator) -> SubjectTraits:
    shift = rng.normal(0.0, spec.subject_jitter, 2)
    luminance = rng.normal(0.0, spec.subject_luminance_jitter)
    scale = float(np.clip(1.0 + rng.normal(0.0, 0.05), 0.85, 1.15))
    return SubjectTraits((float(shift[0]), float(shift[1])), float(luminance), scale)


def _draw_pose(spec: DomainSpec, traits: SubjectTraits, rng: np.random.Generator,
               height: int, width: int) -> Tuple[Ellipse, Ellipse]:
    mean = np.asarray(spec.center_mean, dtype=np.float64) + traits.center_shift
    fx, fy = rng.multivariate_normal(mean, np.asarray(spec.center_cov, dtype=np.float64))
    px, py = fx * (width - 1), fy * (height - 1)

    r_pupil = rng.uniform(*spec.pupil_radius) * height * traits.radius_scale
    r_iris = r_pupil * rng.uniform(*spec.iris_ratio)
    ratio = rng.uniform(*spec.eccentricity)
    theta = rng.uniform(-math.pi / 2, math.pi / 2)

    # same camera obliqueness for both ellipses; pupil stays inside the iris
    max_offset = min(spec.iris_offset * r_pupil, max(0.0, r_iris * ratio - r_pupil))
    direction = rng.uniform(-math.pi, math.pi)
    offset = rng.uniform(0.0, max_offset) if max_offset > 0 else 0.0
    ix = px + offset * math.cos(direction)
    iy = py + offset * math.sin(direction)

    pupil = Ellipse.make(px, py, r_pupil, r_pupil * ratio, theta)
    iris = Ellipse.make(ix, iy, r_iris, r_iris * ratio, theta)
    return pupil, iris


def _iris_placed(spec: DomainSpec, iris: Ellipse, height: int, width: int) -> bool:
    if spec.require_full_iris:
        return iris_fully_visible(iris, height, width)
    return 0 <= iris.cx <= width - 1 and 0 <= iris.cy <= height - 1


def _draw_artifacts(spec: DomainSpec, rng: np.random.Generator, height: int, width: int) -> Tuple[np.ndarray, int, int]:
    layer = np.zeros((height, width), dtype=np.uint8)
    n_blobs = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
    for _ in range(n_blobs):
        x = int(round(rng.uniform(0, width - 1)))
        y = int(round(rng.uniform(0, height - 1)))
        radius = max(1, int(round(rng.uniform(*spec.blob_radius))))
        cv2.circle(layer, (x, y), radius, 255, thickness=-1, lineType=cv2.LINE_8)
    n_lines = int(rng.integers(spec.lines[0], spec.lines[1] + 1))
    for _ in range(n_lines):
        p1 = (int(rng.integers(0, width)), int(rng.integers(0, height)))
        p2 = (int(rng.integers(0, width)), int(rng.integers(0, height)))
        cv2.line(layer, p1, p2, 255, thickness=1, lineType=cv2.LINE_8)
    return layer > 0, n_blobs, n_lines


def render_sample(spec: DomainSpec, subject: int, rng: np.random.Generator, height: int = 72,
                  width: int = 96, traits: Optional[SubjectTraits] = None, index: int = 0) -> EyeSample:
    """
    Render one eye image with ground truth per the domain's annotation profile

    Args:
        spec: Domain description
        subject: Subject id attached to the sample
        rng: The sample's own random stream
        height: Image rows
        width: Image columns
        traits: Subject-level offsets; neutral when None
        index: Per-subject image index used in the sample id

    Returns:
        EyeSample: Integer-valued float64 image plus annotations

    Raises:
        SynthesisError: If the iris cannot be placed in frame
    """
    traits = traits or SubjectTraits()
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        pupil, iris = _draw_pose(spec, traits, rng, height, width)
        if _iris_placed(spec, iris, height, width):
            break
    else:
        raise SynthesisError(f"Domain '{spec.name}': could not place the iris in a {width}x{height} "
                             f"frame after {MAX_PLACEMENT_ATTEMPTS} attempts")

    shift = traits.luminance_shift
    background = spec.background + shift
    iris_level = spec.iris_level + shift
    pupil_level = spec.pupil_level + shift
    bright = bool(rng.random() < spec.bright_pupil_prob)
    if bright:
        pupil_level = rng.uniform(*spec.bright_pupil_level)

    image = np.full((height, width), background, dtype=np.float64)
    cover = coverage_ellipse(iris, height, width)
    image += (iris_level - image) * cover
    cover = coverage_ellipse(pupil, height, width)
    image += (pupil_level - image) * cover

    gain = rng.uniform(1.0 - spec.gain_spread, 1.0 + spec.gain_spread)
    offset = rng.normal(0.0, spec.offset_spread)
    image = image * gain + offset + rng.normal(0.0, spec.texture_noise, (height, width))

    artifacts, n_blobs, n_lines = _draw_artifacts(spec, rng, height, width)
    image[artifacts] = spec.artifact_intensity
    image = np.clip(np.rint(image), 0, 255).astype(np.float64)

    profile = spec.annotation_profile
    full = profile == "full"
    return EyeSample(
        image=image,
        domain=spec.name,
        subject=subject,
        sample_id=make_sample_id(spec.name, subject, index),
        seg_mask=compose_mask(pupil, iris, height, width) if full else None,
        pupil_ellipse=pupil if full else None,
        iris_ellipse=iris if full else None,
        pupil_center=pupil.center,
        iris_center=iris.center if profile != "pupil_only" else None,
        meta={"blobs": n_blobs, "lines": n_lines, "bright_pupil": bright},
    )


def make_domain(spec: DomainSpec, images_per_subject: int, master_seed: int = 7,
                height: int = 72, width: int = 96) -> DomainDataset:
    """
    Render every image of a domain

    Subject ids run 0..subjects-1; the result is a pure function of
    (spec, images_per_subject, master_seed, resolution).
    """
    if images_per_subject < 1:
        raise ConfigError(f"images_per_subject must be >= 1, got {images_per_subject}")
    logger.info(f"Rendering domain {spec.name}: {spec.subjects} subjects x {images_per_subject} images")

    samples = []
    for subject in range(spec.subjects):
        traits = subject_traits(spec, np.random.default_rng(sample_seed(master_seed, spec.name, subject, "traits")))
        for index in range(images_per_subject):
            rng = np.random.default_rng(sample_seed(master_seed, spec.name, subject, index))
            samples.append(render_sample(spec, subject, rng, height, width, traits, index))
    return DomainDataset(spec.name, spec.condition, spec.annotation_profile, height, width, samples, spec)


def load_domain_specs(source: str = "stock") -> List[DomainSpec]:
    """
    Parse a YAML list of domain spec mappings

    Args:
        source: "stock" for the shipped specs, else a YAML file path

    Raises:
        MissingInputError: If the file does not exist
        ConfigError: Unknown keys (with line number), invalid values or duplicate names
    """
    path = STOCK_DOMAINS_FILE if source == "stock" else source
    if not os.path.exists(path):
        raise MissingInputError(f"Domain spec file {path} not found")
    with open(path, "r") as f:
        text = f.read()
    try:
        entries = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse {path}: {e}") from e
    prefix = []
    if isinstance(entries, dict):
        entries = entries.get("domains")
        prefix = ["domains"]
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path} must contain a non-empty list of domain specs")

    known = {f.name for f in dataclasses.fields(DomainSpec)}
    specs, names = [], set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(f"{path}: entry {i} must be a mapping with a 'name'")
        for key in entry:
            if key not in known:
                line = locate_key(text, prefix + [i, key])
                where = f" (line {line})" if line else ""
                raise ConfigError(f"{path}: unknown domain spec key '{entry['name']}.{key}'{where}")
        try:
            spec = DomainSpec.from_mapping(entry)
        except TypeError as e:
            raise ConfigError(f"{path}: domain '{entry['name']}': {e}") from e
        if spec.name in names:
            raise ConfigError(f"{path}: duplicate domain name '{spec.name}'")
        names.add(spec.name)
        specs.append(spec)
    return specs
