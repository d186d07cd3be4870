"""Load a generated dataset directory: manifest plus image stack."""

from __future__ import annotations

import os

import numpy as np

from .ppm import read_ppm
from .retrieval import ManifestRecord, load_manifest


def load_dataset(data_dir) -> tuple[list[ManifestRecord], np.ndarray]:
    """Read manifest.csv and every referenced image, in record order."""
    manifest_path = os.path.join(data_dir, "manifest.csv")
    records = load_manifest(manifest_path)
    images = np.stack([read_ppm(os.path.join(data_dir, r.path)) for r in records])
    return records, images
