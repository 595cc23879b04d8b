"""Deterministic phantom pairs standing in for a rated cross-modality corpus.

Each phantom subject is a shared 2D anatomy (random soft ellipses plus a
low-amplitude texture so the spectrum is dense), rendered into two
pseudo-modalities through monotone intensity transfer curves, optionally
carrying a bright tumor disk. The "synthesized" slice is the target slice
pushed through one of five degradations chosen to separate the three score
branches:

    tumor_texture_corrupt  perturbs pixels only inside the tumor mask
    kspace_maskout         zeroes spectrum coefficients only
    gaussian_blur / additive_noise / intensity_shift  hit global structure

Severity 0 always reproduces the target exactly. The oracle rating plays
the role of an aggregated human score: level = quantize(0.9 * (1 - severity))
on the 10-level grid, monotone nonincreasing in severity.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DataError, InvalidArgumentError
from .kspace import forward_kspace

LESION_KINDS = (
    "gaussian_blur",
    "additive_noise",
    "kspace_maskout",
    "intensity_shift",
    "tumor_texture_corrupt",
)
HEALTHY_KINDS = LESION_KINDS[:4]
RATING_LEVELS = tuple(round(i / 10, 1) for i in range(10))


@dataclass
class TumorParams:
    center: tuple  # (row, col)
    radius: float
    brightness: float = 0.92


@dataclass
class PhantomSpec:
    size: int = 64
    ellipses: list = field(default_factory=list)  # (cy, cx, ry, rx, intensity)
    source_gamma: float = 0.7
    target_gamma: float = 1.6
    texture_amp: float = 0.04
    tumor: TumorParams | None = None
    degradation: str = "additive_noise"
    severity: float = 0.5
    seed: int = 0

    @staticmethod
    def drawn(seed, size=64, healthy=False, degradation=None, severity=None):
        """Draw random-but-reproducible structure/tumor params from a seed."""
        rng = np.random.default_rng(np.random.SeedSequence([0x9E11, seed]))
        ellipses = []
        for _ in range(rng.integers(3, 7)):
            cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
            ry, rx = rng.uniform(0.08 * size, 0.3 * size, size=2)
            ellipses.append((cy, cx, ry, rx, rng.uniform(0.25, 0.8)))
        tumor = None
        if not healthy:
            radius = rng.uniform(0.07 * size, 0.14 * size)
            margin = radius + 2
            cy = rng.uniform(margin, size - 1 - margin)
            cx = rng.uniform(margin, size - 1 - margin)
            tumor = TumorParams(center=(cy, cx), radius=radius, brightness=rng.uniform(0.85, 0.98))
        if degradation is None:
            kinds = HEALTHY_KINDS if healthy else LESION_KINDS
            degradation = kinds[int(rng.integers(0, len(kinds)))]
        if severity is None:
            severity = float(rng.uniform(0.0, 1.0))
        return PhantomSpec(
            size=size,
            ellipses=ellipses,
            source_gamma=float(rng.uniform(0.5, 0.9)),
            target_gamma=float(rng.uniform(1.2, 2.0)),
            tumor=tumor,
            degradation=degradation,
            severity=severity,
            seed=seed,
        )


@dataclass
class PhantomSample:
    source: np.ndarray
    target: np.ndarray
    synthesized: np.ndarray
    mask_truth: np.ndarray
    oracle_level: float
    degradation_meta: dict


def quantize_level(value):
    """Snap a [0, 0.9] value to the nearest 10-level grid point (half up)."""
    return min(max(int(np.floor(value * 10 + 0.5)), 0), 9) / 10


def _validate(spec):
    if spec.size < 8:
        raise ConfigurationError(f"phantom size must be >= 8, got {spec.size}")
    if not (0.0 <= spec.severity <= 1.0):
        raise InvalidArgumentError(f"severity must be in [0, 1], got {spec.severity}")
    if spec.degradation not in LESION_KINDS:
        raise ConfigurationError(f"unknown degradation kind: {spec.degradation!r}")
    if spec.degradation == "tumor_texture_corrupt" and spec.tumor is None:
        raise ConfigurationError("tumor_texture_corrupt needs a tumor (healthy spec given)")
    if spec.tumor is not None:
        cy, cx = spec.tumor.center
        r = spec.tumor.radius
        if cy - r < 0 or cx - r < 0 or cy + r > spec.size - 1 or cx + r > spec.size - 1:
            raise ConfigurationError(
                f"tumor (center=({cy:.1f}, {cx:.1f}), radius={r:.1f}) exceeds "
                f"{spec.size}x{spec.size} image bounds"
            )


def _anatomy(spec, rng):
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = np.zeros((size, size))
    for cy, cx, ry, rx, intensity in spec.ellipses:
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        base = np.maximum(base, intensity * inside)
    base = gaussian_filter(base, sigma=1.2)
    base += spec.texture_amp * gaussian_filter(rng.normal(size=(size, size)), sigma=0.8)
    lo, hi = base.min(), base.max()
    span = hi - lo if hi > lo else 1.0
    return 0.05 + 0.65 * (base - lo) / span


def _tumor_mask(spec):
    if spec.tumor is None:
        return np.zeros((spec.size, spec.size), dtype=bool)
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(np.float64)
    cy, cx = spec.tumor.center
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= spec.tumor.radius**2


def _ring_maskout(target, fraction):
    """Zero the highest-frequency fraction of spectrum coefficients.

    Coefficients are taken in conjugate-closed orbits (a coefficient and its
    Hermitian partner together) walking inward from the highest aliased
    frequency, so the degraded image stays real and the zeroed count is
    exactly round(fraction * M * N); when one coefficient short, the next
    self-conjugate singleton in ring order completes the count.
    """
    m, n = target.shape
    total = m * n
    goal = int(round(fraction * total))
    if goal <= 0:
        return target.copy(), {"zeroed": 0, "goal": 0}
    spectrum = forward_kspace(target).values
    fu = np.minimum(np.arange(m), m - np.arange(m))
    fv = np.minimum(np.arange(n), n - np.arange(n))
    dist2 = (fu[:, None] ** 2 + fv[None, :] ** 2).ravel()
    order = np.lexsort((np.arange(total), -dist2))
    seen = np.zeros(total, dtype=bool)
    mask = np.zeros(total, dtype=bool)
    count = 0
    for flat in order:
        if count >= goal:
            break
        if seen[flat]:
            continue
        u, v = divmod(int(flat), n)
        partner = ((m - u) % m) * n + ((n - v) % n)
        orbit = (flat,) if partner == flat else (flat, partner)
        seen[list(orbit)] = True
        if count + len(orbit) > goal:
            continue  # need a singleton to land exactly; keep scanning inward
        mask[list(orbit)] = True
        count += len(orbit)
    spectrum.ravel()[mask] = 0.0
    degraded = np.fft.ifft2(spectrum).real
    return degraded, {"zeroed": int(count), "goal": goal}


def _degrade(target, mask_truth, kind, severity, rng):
    if severity == 0.0:
        return target.copy(), {}
    if kind == "gaussian_blur":
        return gaussian_filter(target, sigma=0.3 + 2.2 * severity), {}
    if kind == "additive_noise":
        noisy = target + rng.normal(0.0, 0.25 * severity, size=target.shape)
        return np.clip(noisy, 0.0, 1.0), {}
    if kind == "kspace_maskout":
        return _ring_maskout(target, severity)
    if kind == "intensity_shift":
        return target * (1.0 - 0.6 * severity), {}
    if kind == "tumor_texture_corrupt":
        out = target.copy()
        scramble = rng.uniform(0.0, 1.0, size=int(mask_truth.sum()))
        out[mask_truth] = (1.0 - severity) * out[mask_truth] + severity * scramble
        return out, {}
    raise ConfigurationError(f"unknown degradation kind: {kind!r}")


def generate(spec: PhantomSpec) -> PhantomSample:
    """Render one phantom subject; deterministic in spec.seed."""
    _validate(spec)
    rng = np.random.default_rng(np.random.SeedSequence([0xA11CE, spec.seed]))
    anatomy = _anatomy(spec, rng)
    mask_truth = _tumor_mask(spec)
    if spec.tumor is not None:
        anatomy = np.maximum(anatomy, spec.tumor.brightness * mask_truth)
        anatomy = gaussian_filter(anatomy, sigma=0.5)
    anatomy = np.clip(anatomy, 0.0, 1.0)
    source = 0.08 + 0.84 * anatomy**spec.source_gamma
    target = anatomy**spec.target_gamma
    synthesized, meta = _degrade(target, mask_truth, spec.degradation, spec.severity, rng)
    meta = {"kind": spec.degradation, "severity": spec.severity, **meta}
    return PhantomSample(
        source=source,
        target=target,
        synthesized=synthesized,
        mask_truth=mask_truth,
        oracle_level=quantize_level(0.9 * (1.0 - spec.severity)),
        degradation_meta=meta,
    )


# ---------------------------------------------------------------------------
# image and manifest I/O


def save_image(path, image):
    """Write a [0, 1] float image as 16-bit grayscale PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 65535.0).astype(np.uint16)).save(path)


def load_image(path):
    """Read a grayscale PNG back into a [0, 1] float64 array."""
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a grayscale image, got shape {arr.shape}")
    return arr / 65535.0


@dataclass
class ManifestRecord:
    id: str
    source_path: Path
    target_path: Path
    synth_path: Path
    healthy: bool
    oracle_level: float
    degradation: dict

    def load_source(self):
        return load_image(self.source_path)

    def load_target(self):
        return load_image(self.target_path)

    def load_synth(self):
        return load_image(self.synth_path)


def build_suite_specs(n, seed, size=64, healthy_every=4):
    """Deterministic suite layout: every healthy_every-th subject is healthy,
    degradation kinds cycle within each group so subsets stay balanced."""
    specs = []
    n_healthy = 0
    n_lesion = 0
    for i in range(n):
        healthy = healthy_every > 0 and i % healthy_every == 0
        if healthy:
            kind = HEALTHY_KINDS[n_healthy % len(HEALTHY_KINDS)]
            n_healthy += 1
        else:
            kind = LESION_KINDS[n_lesion % len(LESION_KINDS)]
            n_lesion += 1
        item_seed = seed * 1_000_003 + i
        sev_rng = np.random.default_rng(np.random.SeedSequence([0x5E7, item_seed]))
        specs.append(
            PhantomSpec.drawn(
                seed=item_seed,
                size=size,
                healthy=healthy,
                degradation=kind,
                severity=float(sev_rng.uniform(0.0, 1.0)),
            )
        )
    return specs


def write_specs(out_dir, specs):
    """Render explicit phantom specs to disk; returns the manifest path.

    Layout: <out_dir>/images/<id>_{src,tgt,syn}.png plus manifest.jsonl.
    Byte-identical across runs with the same specs.
    """
    out_dir = Path(out_dir)
    images = out_dir / "images"
    images.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, spec in enumerate(specs):
        sample = generate(spec)
        item_id = f"p{i:05d}"
        save_image(images / f"{item_id}_src.png", sample.source)
        save_image(images / f"{item_id}_tgt.png", sample.target)
        save_image(images / f"{item_id}_syn.png", sample.synthesized)
        record = {
            "id": item_id,
            "source": f"images/{item_id}_src.png",
            "target": f"images/{item_id}_tgt.png",
            "synth": f"images/{item_id}_syn.png",
            "healthy": spec.tumor is None,
            "oracle_level": sample.oracle_level,
            "degradation": sample.degradation_meta,
            "size": spec.size,
            "seed": spec.seed,
        }
        lines.append(json.dumps(record, sort_keys=True))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def write_suite(out_dir, n, seed, size=64, healthy_every=4):
    """Generate a rated phantom suite on disk; returns the manifest path."""
    return write_specs(out_dir, build_suite_specs(n, seed, size=size, healthy_every=healthy_every))


def load_manifest(path):
    """Parse a manifest written by :func:`write_suite` (or any file matching
    its schema); image paths resolve relative to the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        try:
            records.append(
                ManifestRecord(
                    id=raw["id"],
                    source_path=root / raw["source"],
                    target_path=root / raw["target"],
                    synth_path=root / raw["synth"],
                    healthy=bool(raw["healthy"]),
                    oracle_level=float(raw["oracle_level"]),
                    degradation=raw.get("degradation", {}),
                )
            )
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing manifest key {exc}") from exc
    if not records:
        raise DataError(f"manifest is empty: {path}")
    return records
