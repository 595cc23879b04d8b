"""Frozen lesion segmenters behind a stable plug-in interface.

The scoring pipeline treats the segmenter as an interchangeable black box:
backends register under a string id, are never updated by any training
path, and every invocation goes through the registry so callers can audit
how often (and whether) segmentation ran. The reference backends are
deterministic and dependency-free - an Otsu threshold restricted to a
brightness band, and a fixed-quantile threshold - both followed by a
largest-connected-component cleanup. Learned segmenters can register
through the same callable interface.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, InvalidInputError


@dataclass
class LesionMask:
    """Binary lesion mask over one slice plus its positive-pixel fraction."""

    mask: np.ndarray
    coverage: float

    @staticmethod
    def from_array(mask):
        mask = np.asarray(mask, dtype=bool)
        return LesionMask(mask=mask, coverage=float(mask.mean()))


def _largest_component(mask):
    if not mask.any():
        return mask
    labels, count = ndimage.label(mask, structure=np.ones((3, 3)))
    if count <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def otsu_threshold(values, bins=256):
    """Threshold maximizing inter-class variance of a value sample."""
    hist, edges = np.histogram(values, bins=bins)
    mids = (edges[:-1] + edges[1:]) / 2.0
    weight1 = np.cumsum(hist)
    weight2 = weight1[-1] - weight1
    csum = np.cumsum(hist * mids)
    mean1 = np.divide(csum, weight1, out=np.zeros_like(csum), where=weight1 > 0)
    mean2 = np.divide(csum[-1] - csum, weight2, out=np.zeros_like(csum), where=weight2 > 0)
    between = weight1[:-1] * weight2[:-1] * (mean1[:-1] - mean2[:-1]) ** 2
    return float(mids[np.argmax(between)])


class OtsuBandBackend:
    """Otsu threshold over a brightness band, then largest component."""

    def __init__(self, band=(0.15, 1.0)):
        self.band = tuple(band)

    def params(self):
        return {"type": "otsu_band", "band": list(self.band)}

    def __call__(self, image):
        lo, hi = self.band
        in_band = (image >= lo) & (image <= hi)
        if not in_band.any():
            return np.zeros_like(image, dtype=bool)
        values = image[in_band]
        if values.max() - values.min() < 1e-9:
            # single-class band: the floor itself is the separator
            threshold = lo
        else:
            threshold = max(otsu_threshold(values), lo)
        return _largest_component(image >= threshold)


class QuantileBackend:
    """Fixed top-quantile threshold, then largest component."""

    def __init__(self, quantile=0.97, floor=0.2):
        self.quantile = quantile
        self.floor = floor

    def params(self):
        return {"type": "quantile", "quantile": self.quantile, "floor": self.floor}

    def __call__(self, image):
        threshold = max(float(np.quantile(image, self.quantile)), self.floor)
        return _largest_component(image >= threshold)


class SegmenterRegistry:
    """Backends keyed by string id, with per-backend invocation counters."""

    def __init__(self):
        self._backends = {}
        self.call_counts = {}

    def register(self, backend_id, backend):
        self._backends[backend_id] = backend
        self.call_counts.setdefault(backend_id, 0)

    def ids(self):
        return sorted(self._backends)

    def get(self, backend_id):
        if backend_id not in self._backends:
            raise ConfigurationError(
                f"unknown segmenter backend {backend_id!r}; registered: {self.ids()}"
            )
        return self._backends[backend_id]

    def segment(self, image, backend_id) -> LesionMask:
        backend = self.get(backend_id)
        image = np.asarray(image, dtype=np.float64)
        if not np.all(np.isfinite(image)):
            raise InvalidInputError("image contains non-finite values")
        self.call_counts[backend_id] += 1
        return LesionMask.from_array(backend(image))

    def checksum(self, backend_id) -> str:
        """Fingerprint of the backend's parameters, for the freeze audit."""
        backend = self.get(backend_id)
        blob = json.dumps(backend.params(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def reset_counts(self):
        for key in self.call_counts:
            self.call_counts[key] = 0


def default_registry() -> SegmenterRegistry:
    registry = SegmenterRegistry()
    registry.register("otsu_lcc", OtsuBandBackend())
    registry.register("quantile_lcc", QuantileBackend())
    return registry


def segment(image, backend_id="otsu_lcc", registry=None) -> LesionMask:
    """One-shot segmentation through a (default) registry."""
    registry = registry or default_registry()
    return registry.segment(image, backend_id)


def save_mask(path, mask):
    """Persist a binary mask as 8-bit PNG (0/255)."""
    arr = (np.asarray(mask, dtype=bool) * np.uint8(255))
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path):
    with Image.open(path) as img:
        return np.asarray(img) >= 128


def extract_lesion_patch(image, mask, size=64):
    """Masked lesion region cropped to its bounding box and resized to a
    fixed square patch; an empty mask yields a zero patch."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros((size, size))
    masked = image * mask
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    crop = masked[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    tens = torch.as_tensor(crop, dtype=torch.float64)[None, None]
    resized = F.interpolate(tens, size=(size, size), mode="bilinear", align_corners=False)
    return resized[0, 0].numpy()
