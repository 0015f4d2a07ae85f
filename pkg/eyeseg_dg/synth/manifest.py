"""
Domain Directories

On-disk layout shared by rendered and external datasets:

    <domain>/domain.json      name, condition, annotation_profile, height, width
    <domain>/manifest.jsonl   one record per sample
    <domain>/images/*.pgm     8-bit grayscale images
    <domain>/masks/*.pgm      raw label bytes {0, 1, 2}
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional

import cv2
import numpy as np

from eyeseg_dg.geometry.ellipse import Ellipse, SimilarityTransform, transform_ellipse
from eyeseg_dg.synth.domains import ANNOTATION_PROFILES, CONDITIONS, DomainDataset, EyeSample
from eyeseg_dg.utils.errors import IntegrityError, MissingInputError
from eyeseg_dg.utils.io import atomic_write_text, read_jsonl, read_pgm, write_jsonl, write_pgm

logger = logging.getLogger(__name__)

DOMAIN_FILE = "domain.json"
MANIFEST_FILE = "manifest.jsonl"


def _file_stem(sample_id: str) -> str:
    return sample_id.split("/", 1)[-1].replace("/", "_")


def _point(value) -> Optional[List[float]]:
    return None if value is None else [float(value[0]), float(value[1])]


def write_domain(dataset: DomainDataset, out_dir: str) -> str:
    """
    Write a dataset as a domain directory

    Args:
        dataset: Rendered or ingested domain
        out_dir: Parent directory; the domain lands in out_dir/<name>

    Returns:
        str: The domain directory
    """
    root = os.path.join(out_dir, dataset.name)
    records = []
    for sample in dataset:
        stem = _file_stem(sample.sample_id)
        image_path = os.path.join("images", f"{stem}.pgm")
        write_pgm(os.path.join(root, image_path), sample.image)
        mask_path = None
        if sample.seg_mask is not None:
            mask_path = os.path.join("masks", f"{stem}.pgm")
            write_pgm(os.path.join(root, mask_path), sample.seg_mask)
        records.append({
            "sample_id": sample.sample_id,
            "subject": int(sample.subject),
            "image": image_path,
            "mask": mask_path,
            "pupil_ellipse": sample.pupil_ellipse.as_list() if sample.pupil_ellipse else None,
            "iris_ellipse": sample.iris_ellipse.as_list() if sample.iris_ellipse else None,
            "pupil_center": _point(sample.pupil_center),
            "iris_center": _point(sample.iris_center),
        })

    header = {
        "name": dataset.name,
        "condition": dataset.condition,
        "annotation_profile": dataset.annotation_profile,
        "height": dataset.height,
        "width": dataset.width,
    }
    atomic_write_text(os.path.join(root, DOMAIN_FILE), json.dumps(header, sort_keys=True, indent=2) + "\n")
    write_jsonl(os.path.join(root, MANIFEST_FILE), records)
    logger.info(f"Wrote {len(records)} samples of {dataset.name} to {root}")
    return root


def _resize_transform(src_h: int, src_w: int, height: int, width: int) -> Optional[SimilarityTransform]:
    if (src_h, src_w) == (height, width):
        return None
    if src_h * width != src_w * height:
        raise IntegrityError(f"Aspect ratio of {src_w}x{src_h} differs from the registry's {width}x{height}")
    s = width / src_w
    # pixel centers: x' = (x + 0.5) * s - 0.5
    return SimilarityTransform(scale=s, tx=0.5 * s - 0.5, ty=0.5 * s - 0.5)


def _ingest_record(record: Dict[str, Any], root: str, name: str, index: int,
                   height: int, width: int) -> EyeSample:
    image_file = os.path.join(root, record["image"])
    if not os.path.exists(image_file):
        raise MissingInputError(f"Image {image_file} listed in the manifest does not exist")
    image = read_pgm(image_file).astype(np.float64)
    mask = None
    if record.get("mask"):
        mask = read_pgm(os.path.join(root, record["mask"])).astype(np.uint8)

    pupil_e = Ellipse.from_list(record["pupil_ellipse"]) if record.get("pupil_ellipse") else None
    iris_e = Ellipse.from_list(record["iris_ellipse"]) if record.get("iris_ellipse") else None
    pupil_c = tuple(record["pupil_center"]) if record.get("pupil_center") else None
    iris_c = tuple(record["iris_center"]) if record.get("iris_center") else None

    transform = _resize_transform(image.shape[0], image.shape[1], height, width)
    if transform is not None:
        image = cv2.resize(image, (width, height), interpolation=cv2.INTER_AREA)
        if mask is not None:
            mask = cv2.resize(mask, (width, height), interpolation=cv2.INTER_NEAREST)
        pupil_e = transform_ellipse(pupil_e, transform) if pupil_e else None
        iris_e = transform_ellipse(iris_e, transform) if iris_e else None
        pupil_c = transform.apply_point(*pupil_c) if pupil_c else None
        iris_c = transform.apply_point(*iris_c) if iris_c else None

    subject = int(record["subject"])
    return EyeSample(
        image=image,
        domain=name,
        subject=subject,
        sample_id=record.get("sample_id") or f"{name}/{subject:03d}/{index:04d}",
        seg_mask=mask,
        pupil_ellipse=pupil_e,
        iris_ellipse=iris_e,
        pupil_center=pupil_c if pupil_c is not None else (pupil_e.center if pupil_e else None),
        iris_center=iris_c if iris_c is not None else (iris_e.center if iris_e else None),
    )


def read_domain(directory: str, height: int = 72, width: int = 96) -> DomainDataset:
    """
    Load a domain directory at the registry's common resolution

    Images of another size but the same aspect ratio are resized; their
    annotations are scaled with the same map.

    Raises:
        MissingInputError: If domain.json, the manifest or a listed image is missing
        IntegrityError: On an aspect-ratio mismatch or an invalid header
    """
    header_file = os.path.join(directory, DOMAIN_FILE)
    manifest_file = os.path.join(directory, MANIFEST_FILE)
    for path in (header_file, manifest_file):
        if not os.path.exists(path):
            raise MissingInputError(f"{path} not found")

    with open(header_file, "r") as f:
        header = json.load(f)
    name = header.get("name") or os.path.basename(os.path.normpath(directory))
    condition = header.get("condition", "constrained")
    profile = header.get("annotation_profile", "full")
    if condition not in CONDITIONS or profile not in ANNOTATION_PROFILES:
        raise IntegrityError(f"{header_file}: unsupported condition '{condition}' or profile '{profile}'")

    samples = [_ingest_record(r, directory, name, i, height, width)
               for i, r in enumerate(read_jsonl(manifest_file))]
    logger.info(f"Loaded {len(samples)} samples of {name} from {directory}")
    return DomainDataset(name, condition, profile, height, width, samples)
