"""
Geometry Module

Ellipses, masks and similarity transforms shared by synthesis, augmentation,
the model and evaluation.
"""

from eyeseg_dg.geometry.ellipse import (
    BACKGROUND,
    IRIS,
    PUPIL,
    Ellipse,
    SimilarityTransform,
    center_of_mass,
    compose_mask,
    fit_ellipse_moments,
    rasterize_ellipse,
    transform_ellipse,
)

__all__ = [
    "BACKGROUND", "IRIS", "PUPIL", "Ellipse", "SimilarityTransform", "center_of_mass",
    "compose_mask", "fit_ellipse_moments", "rasterize_ellipse", "transform_ellipse",
]
