"""
File I/O Utilities

CSV, JSON Lines, PGM and atomic write helpers.
"""

import csv
import io
import json
import logging
import os
import tempfile
from typing import Any, Dict, Iterable, List, Optional, Sequence

import cv2
import numpy as np

logger = logging.getLogger(__name__)


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write to a temporary sibling file, then rename over ``path``"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_to_csv(data: List[Dict[str, Any]], filename: str, fieldnames: Optional[Sequence[str]] = None) -> None:
    """
    Save records to a CSV file atomically

    None values are written as empty fields.

    Args:
        data: List of dictionaries to save
        filename: Output file path
        fieldnames: Column order; defaults to the keys of the first record
    """
    if not data and fieldnames is None:
        logger.info(f"No data to save to {filename}")
        return

    fieldnames = list(fieldnames or data[0].keys())
    rows = []
    for record in data:
        rows.append({k: ("" if record.get(k) is None else record.get(k)) for k in fieldnames})

    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    try:
        atomic_write_text(filename, buffer.getvalue())
    except OSError as e:
        logger.error(f"Error saving data to {filename}: {e}")
        raise
    logger.info(f"Saved {len(rows)} records to {filename}")


def load_csv(filename: str) -> List[Dict[str, str]]:
    with open(filename, "r", newline="") as f:
        return list(csv.DictReader(f))


def write_jsonl(filename: str, records: Iterable[Dict[str, Any]]) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_text(filename, text)


def append_jsonl(handle, record: Dict[str, Any]) -> None:
    handle.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(filename: str) -> List[Dict[str, Any]]:
    records = []
    with open(filename, "r") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_pgm(filename: str, image: np.ndarray) -> None:
    """Write an 8-bit single-channel image as binary PGM (P5)"""
    os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
    data = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    ok, encoded = cv2.imencode(".pgm", data)
    if not ok:
        raise OSError(f"Could not encode {filename} as PGM")
    atomic_write_bytes(filename, encoded.tobytes())


def read_pgm(filename: str) -> np.ndarray:
    image = cv2.imread(filename, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise FileNotFoundError(f"Could not read image {filename}")
    return image
