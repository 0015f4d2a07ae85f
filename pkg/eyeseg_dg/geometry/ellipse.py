"""
Ellipse Geometry

Ellipse representation, rasterization, similarity transforms, moment fitting
and soft center-of-mass extraction.

Coordinates: x rightward, y downward, origin at the center of pixel (0, 0).
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import cv2
import numpy as np

from eyeseg_dg.tensor.autodiff import Tensor
from eyeseg_dg.utils.errors import GeometryError

logger = logging.getLogger(__name__)

BACKGROUND, IRIS, PUPIL = 0, 1, 2
CLASSES = (BACKGROUND, IRIS, PUPIL)

# Per-pixel labels over {background=0, iris=1, pupil=2}
SegMask = np.ndarray


def normalize_angle(theta: float) -> float:
    """Wrap an axis orientation into [-pi/2, pi/2)"""
    wrapped = (theta + math.pi / 2) % math.pi - math.pi / 2
    return -math.pi / 2 if wrapped >= math.pi / 2 else wrapped


@dataclass(frozen=True)
class Ellipse:
    """Center (cx, cy), semi-axes a >= b > 0 and orientation theta of the a-axis"""
    cx: float
    cy: float
    a: float
    b: float
    theta: float

    @classmethod
    def make(cls, cx: float, cy: float, a: float, b: float, theta: float) -> "Ellipse":
        """
        Build a canonical ellipse, swapping axes when b > a

        Raises:
            GeometryError: If an axis is not positive
        """
        a, b = float(a), float(b)
        if not (a > 0 and b > 0):
            raise GeometryError(f"Ellipse semi-axes must be positive, got a={a}, b={b}")
        if b > a:
            a, b = b, a
            theta = theta + math.pi / 2
        return cls(float(cx), float(cy), a, b, normalize_angle(float(theta)))

    @property
    def center(self) -> Tuple[float, float]:
        return (self.cx, self.cy)

    def as_list(self):
        return [self.cx, self.cy, self.a, self.b, self.theta]

    @classmethod
    def from_list(cls, values) -> "Ellipse":
        return cls.make(*values)


def _implicit(e: Ellipse, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    dx = x - e.cx
    dy = y - e.cy
    c, s = math.cos(e.theta), math.sin(e.theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / e.a) ** 2 + (v / e.b) ** 2


def ellipse_contains(e: Ellipse, x: float, y: float) -> bool:
    return bool(_implicit(e, np.float64(x), np.float64(y)) <= 1.0)


def rasterize_ellipse(e: Ellipse, height: int, width: int) -> np.ndarray:
    """
    Binary mask of pixels whose centers satisfy the implicit inequality <= 1

    Args:
        e: Ellipse to draw
        height: Mask rows
        width: Mask columns

    Returns:
        np.ndarray: Boolean (height, width) mask; empty when off-frame
    """
    if height < 1 or width < 1:
        raise GeometryError(f"Mask extents must be >= 1, got {height}x{width}")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return _implicit(e, xs, ys) <= 1.0


def coverage_ellipse(e: Ellipse, height: int, width: int, factor: int = 2) -> np.ndarray:
    """Fractional pixel coverage from factor x factor supersampling (anti-aliasing)"""
    offsets = (np.arange(factor) + 0.5) / factor - 0.5
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    cover = np.zeros((height, width), dtype=np.float64)
    for oy in offsets:
        for ox in offsets:
            cover += _implicit(e, xs + ox, ys + oy) <= 1.0
    return cover / (factor * factor)


def compose_mask(pupil: Ellipse, iris: Ellipse, height: int, width: int) -> SegMask:
    """Pupil drawn over iris drawn over background"""
    mask = np.zeros((height, width), dtype=np.uint8)
    mask[rasterize_ellipse(iris, height, width)] = IRIS
    mask[rasterize_ellipse(pupil, height, width)] = PUPIL
    return mask


def iris_fully_visible(e: Ellipse, height: int, width: int) -> bool:
    """True when the ellipse's bounding box lies inside the pixel-center frame"""
    c, s = math.cos(e.theta), math.sin(e.theta)
    half_w = math.sqrt((e.a * c) ** 2 + (e.b * s) ** 2)
    half_h = math.sqrt((e.a * s) ** 2 + (e.b * c) ** 2)
    return (e.cx - half_w >= 0 and e.cx + half_w <= width - 1
            and e.cy - half_h >= 0 and e.cy + half_h <= height - 1)


# ===================== similarity transforms =====================

_FLIP = np.diag([-1.0, 1.0])


@dataclass(frozen=True)
class SimilarityTransform:
    """
    p -> scale * R(rotation) * F(p) + (tx, ty)

    F mirrors x -> width - 1 - x when ``hflip`` is set, identity otherwise.
    """
    scale: float = 1.0
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    hflip: bool = False
    width: Optional[int] = None

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError(f"Similarity scale must be positive, got {self.scale}")
        if self.hflip and self.width is None:
            raise GeometryError("A horizontal flip needs the image width")

    def _linear(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix"""
        lin = self._linear()
        out = np.eye(3)
        if self.hflip:
            out[:2, :2] = lin @ _FLIP
            out[:2, 2] = lin @ np.array([self.width - 1.0, 0.0]) + [self.tx, self.ty]
        else:
            out[:2, :2] = lin
            out[:2, 2] = [self.tx, self.ty]
        return out

    def affine(self) -> np.ndarray:
        """2x3 forward matrix as consumed by cv2.warpAffine"""
        return self.matrix()[:2]

    @classmethod
    def from_matrix(cls, m: np.ndarray, width: Optional[int] = None) -> "SimilarityTransform":
        lin = m[:2, :2]
        det = float(np.linalg.det(lin))
        reflect = det < 0
        if reflect and width is None:
            raise GeometryError("Reflecting transform needs the image width")
        base = lin @ _FLIP if reflect else lin
        scale = math.sqrt(abs(det))
        rotation = math.atan2(base[1, 0], base[0, 0])
        t = m[:2, 2].copy()
        if reflect:
            t -= base @ np.array([width - 1.0, 0.0])
        return cls(scale, rotation, float(t[0]), float(t[1]), reflect, width if reflect else None)

    def compose(self, first: "SimilarityTransform") -> "SimilarityTransform":
        """Return self o first (apply ``first``, then ``self``)"""
        width = self.width if self.width is not None else first.width
        return SimilarityTransform.from_matrix(self.matrix() @ first.matrix(), width)

    def inverse(self) -> "SimilarityTransform":
        return SimilarityTransform.from_matrix(np.linalg.inv(self.matrix()), self.width)

    def apply_point(self, x: float, y: float) -> Tuple[float, float]:
        m = self.matrix()
        return (float(m[0, 0] * x + m[0, 1] * y + m[0, 2]),
                float(m[1, 0] * x + m[1, 1] * y + m[1, 2]))

    @classmethod
    def about_center(cls, height: int, width: int, scale: float = 1.0, rotation: float = 0.0,
                     shift_x: float = 0.0, shift_y: float = 0.0) -> "SimilarityTransform":
        """Scale and rotate about the image center, then shift"""
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        c, s = math.cos(rotation), math.sin(rotation)
        tx = cx - scale * (c * cx - s * cy) + shift_x
        ty = cy - scale * (s * cx + c * cy) + shift_y
        return cls(scale, rotation, tx, ty)

    @classmethod
    def horizontal_flip(cls, width: int) -> "SimilarityTransform":
        return cls(hflip=True, width=width)

    def to_dict(self):
        return {"scale": self.scale, "rotation": self.rotation, "tx": self.tx, "ty": self.ty,
                "hflip": self.hflip, "width": self.width}

    @classmethod
    def from_dict(cls, d) -> "SimilarityTransform":
        return cls(**d)


def transform_ellipse(e: Ellipse, transform: SimilarityTransform) -> Ellipse:
    """
    Map an ellipse through a similarity transform

    The center goes through the full map, semi-axes scale by ``transform.scale``
    and the orientation shifts by the rotation (negated under a flip).
    """
    cx, cy = transform.apply_point(e.cx, e.cy)
    theta = transform.rotation - e.theta if transform.hflip else e.theta + transform.rotation
    return Ellipse.make(cx, cy, e.a * transform.scale, e.b * transform.scale, theta)


# ===================== moments and centers =====================

def fit_ellipse_moments(mask: np.ndarray) -> Ellipse:
    """
    Ellipse whose first and second central moments match a binary mask

    Raises:
        GeometryError: Fewer than 5 set pixels or degenerate covariance
    """
    binary = (np.asarray(mask) > 0).astype(np.uint8)
    count = int(binary.sum())
    if count < 5:
        raise GeometryError(f"Moment fitting needs at least 5 pixels, got {count}")
    m = cv2.moments(binary, binaryImage=True)
    cx, cy = m["m10"] / m["m00"], m["m01"] / m["m00"]
    cov = np.array([[m["mu20"], m["mu11"]], [m["mu11"], m["mu02"]]]) / m["m00"]
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 1e-9:
        raise GeometryError("Degenerate mask covariance (collinear pixels)")
    # uniform filled ellipse: variance along an axis = semi_axis**2 / 4
    a = 2.0 * math.sqrt(evals[1])
    b = 2.0 * math.sqrt(evals[0])
    major = evecs[:, 1]
    theta = math.atan2(major[1], major[0])
    return Ellipse.make(cx, cy, a, b, theta)


def center_of_mass(prob_map: Union[Tensor, np.ndarray]) -> Tuple[Union[Tensor, float], Union[Tensor, float]]:
    """
    Intensity-weighted mean pixel coordinate (soft-argmax)

    Args:
        prob_map: Non-negative (H, W) plane or (N, H, W) stack; a Tensor input
            yields differentiable Tensor outputs of shape () or (N,)

    Returns:
        Tuple of (x, y)

    Raises:
        GeometryError: Negative values or an all-zero plane
    """
    data = prob_map.data if isinstance(prob_map, Tensor) else np.asarray(prob_map, dtype=np.float64)
    if np.any(data < 0):
        raise GeometryError("center_of_mass needs a non-negative map")
    totals = data.sum(axis=(-2, -1))
    if np.any(totals <= 0):
        raise GeometryError("center_of_mass is undefined for an all-zero map")

    height, width = data.shape[-2:]
    if not isinstance(prob_map, Tensor):
        xs = np.arange(width, dtype=np.float64)
        ys = np.arange(height, dtype=np.float64)
        x = (data.sum(axis=-2) * xs).sum(axis=-1) / totals
        y = (data.sum(axis=-1) * ys).sum(axis=-1) / totals
        if np.ndim(x) == 0:
            return float(x), float(y)
        return x, y

    xs = Tensor(np.arange(width, dtype=data.dtype))
    ys = Tensor(np.arange(height, dtype=data.dtype).reshape(height, 1))
    total = prob_map.sum(axis=(-2, -1))
    x = (prob_map * xs).sum(axis=(-2, -1)) / total
    y = (prob_map * ys).sum(axis=(-2, -1)) / total
    return x, y
