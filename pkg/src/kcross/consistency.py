"""Ranking-based inconsistency between metric scores and reference ratings.

The alignment works purely on ranks: count how many reference images sit at
each rating level, sort the raw metric scores, hand each rank range to its
level bucket, and emit i/L (L = number of distinct levels) for every image,
scattered back to original image order. The inconsistency is then the mean
absolute gap between reference levels and aligned scores - lower means the
metric orders images more like the human raters did. Because only ranks
enter, the result is invariant under any strictly monotone transform of the
raw scores.

Also houses the standard full-reference baselines (MAE / PSNR / SSIM) and
the comparison harness that evaluates a set of metrics over a manifest.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigurationError, DataError, InvalidArgumentError, ShapeError

HIGHER_IS_BETTER = "higher_is_better"
LOWER_IS_BETTER = "lower_is_better"


@dataclass
class RankingAlignment:
    """Audit record of one alignment: the sorted distinct reference levels,
    the rank range [start, end) owned by each level, and the aligned scores
    in level units (original image order)."""

    levels: np.ndarray
    pairwise: list
    uniform_result: np.ndarray


def rank_align(ref, syn, direction=HIGHER_IS_BETTER) -> RankingAlignment:
    ref = np.asarray(ref, dtype=np.float64)
    syn = np.asarray(syn, dtype=np.float64)
    if ref.ndim != 1 or syn.ndim != 1 or len(ref) != len(syn):
        raise InvalidArgumentError(
            f"reference and score vectors must be 1D and equally long, "
            f"got {ref.shape} vs {syn.shape}"
        )
    if len(ref) == 0:
        raise InvalidArgumentError("cannot align empty score vectors")
    if direction not in (HIGHER_IS_BETTER, LOWER_IS_BETTER):
        raise InvalidArgumentError(f"unknown direction: {direction!r}")
    keys = -syn if direction == LOWER_IS_BETTER else syn
    order = np.argsort(keys, kind="stable")
    levels, counts = np.unique(ref, return_counts=True)
    n_levels = len(levels)
    pairwise = []
    start = 0
    for count in counts:
        pairwise.append((start, start + int(count)))
        start += int(count)
    level_of_rank = np.repeat(np.arange(n_levels), counts)
    aligned = np.empty(len(ref), dtype=np.float64)
    aligned[order] = level_of_rank / n_levels
    return RankingAlignment(levels=levels, pairwise=pairwise, uniform_result=aligned)


def uniformize(ref, syn, direction=HIGHER_IS_BETTER) -> np.ndarray:
    """Aligned scores in level units, scattered back to input order."""
    return rank_align(ref, syn, direction).uniform_result


def inconsistency(ref, aligned) -> float:
    """Mean absolute gap between reference levels and aligned scores."""
    ref = np.asarray(ref, dtype=np.float64)
    aligned = np.asarray(aligned, dtype=np.float64)
    return float(np.abs(ref - aligned).mean())


def ranking_inconsistency(ref, syn, direction=HIGHER_IS_BETTER) -> float:
    """Convenience: align then measure in one call."""
    return inconsistency(ref, uniformize(ref, syn, direction))


# ---------------------------------------------------------------------------
# baseline full-reference metrics

PSNR_IDENTICAL = math.inf


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mae(x, y) -> float:
    x, y = _check_pair(x, y)
    return float(np.abs(x - y).mean())


def psnr(x, y, data_range=1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images report +inf."""
    x, y = _check_pair(x, y)
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim(x, y, data_range=1.0, window_size=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Structural similarity with the standard 11x11 Gaussian window.

    Windowed means/variances are computed everywhere the window fits
    entirely inside the image (valid region), then averaged.
    """
    x, y = _check_pair(x, y)
    if min(x.shape) < window_size:
        raise ShapeError(
            f"image {x.shape} smaller than the {window_size}x{window_size} ssim window"
        )
    w = _gaussian_window(window_size, sigma)

    def filt(img):
        out = correlate1d(img, w, axis=0, mode="constant")
        return correlate1d(out, w, axis=1, mode="constant")

    half = window_size // 2
    crop = (slice(half, x.shape[0] - half), slice(half, x.shape[1] - half))
    mu_x = filt(x)[crop]
    mu_y = filt(y)[crop]
    sxx = filt(x * x)[crop] - mu_x**2
    syy = filt(y * y)[crop] - mu_y**2
    sxy = filt(x * y)[crop] - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def baseline_metric(x, y, kind) -> float:
    """Named dispatch over the standard baselines."""
    if kind == "mae":
        return mae(x, y)
    if kind == "psnr":
        return psnr(x, y)
    if kind == "ssim":
        return ssim(x, y)
    raise InvalidArgumentError(f"unknown baseline metric: {kind!r}")


# ---------------------------------------------------------------------------
# metric comparison harness


@dataclass
class MetricSpec:
    """A registered metric: scores a (target, synthesized) pair, with its
    better-quality direction declared so ranking can orient itself."""

    name: str
    score: callable  # (target, synthesized, record) -> float
    direction: str = HIGHER_IS_BETTER


BASELINE_METRICS = {
    "mae": MetricSpec("mae", lambda t, s, r: mae(t, s), LOWER_IS_BETTER),
    "psnr": MetricSpec("psnr", lambda t, s, r: psnr(t, s), HIGHER_IS_BETTER),
    "ssim": MetricSpec("ssim", lambda t, s, r: ssim(t, s), HIGHER_IS_BETTER),
}


def external_score_metric(name, score_file, direction=HIGHER_IS_BETTER) -> MetricSpec:
    """Wrap a {image_id: score} JSON file as a metric, so published scores
    from metrics not implemented here can join the comparison table."""
    table = json.loads(Path(score_file).read_text())

    def score(target, synth, record):
        if record.id not in table:
            raise DataError(f"external score file {score_file} lacks id {record.id}")
        return float(table[record.id])

    return MetricSpec(name, score, direction)


def evaluate_metrics(records, metrics, subset_key=None):
    """Score every record under every metric and rank-align against the
    manifest's oracle levels; returns one row per metric.

    subset_key: optional callable record -> str; when given, per-subset
    inconsistency is reported alongside the full-set number.
    """
    if not records:
        raise DataError("no records to evaluate")
    ref = np.array([r.oracle_level for r in records])
    rows = []
    for metric in metrics:
        raw = []
        for record in records:
            target = record.load_target()
            synth = record.load_synth()
            value = metric.score(target, synth, record)
            if math.isinf(value):  # identical-pair sentinel: rank above finite
                value = math.copysign(1e30, value)
            raw.append(float(value))
        raw = np.asarray(raw)
        row = {
            "metric": metric.name,
            "direction": metric.direction,
            "n": len(records),
            "inconsistency": ranking_inconsistency(ref, raw, metric.direction),
        }
        if subset_key is not None:
            by_subset = {}
            keys = [subset_key(r) for r in records]
            for key in sorted(set(keys)):
                idx = [i for i, k in enumerate(keys) if k == key]
                by_subset[key] = ranking_inconsistency(ref[idx], raw[idx], metric.direction)
            row["by_subset"] = by_subset
        rows.append(row)
    return rows


def write_table(rows, json_path, csv_path=None):
    """Emit the comparison table as JSON (and optionally CSV)."""
    json_path = Path(json_path)
    json_path.write_text(json.dumps({"metrics": rows}, indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        subset_names = sorted({k for row in rows for k in row.get("by_subset", {})})
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "direction", "n", "inconsistency", *subset_names])
            for row in rows:
                writer.writerow(
                    [row["metric"], row["direction"], row["n"], f"{row['inconsistency']:.6f}"]
                    + [f"{row.get('by_subset', {}).get(k, ''):.6f}" if k in row.get("by_subset", {}) else "" for k in subset_names]
                )
    return json_path


def backend_stability_report(scorer, records, backend_ids):
    """Inconsistency of the learned score under each segmenter backend.

    Reports the per-backend values and their variance on a fixed suite; the
    meaningfulness of the (small) variance is a property of the data, so
    callers assert only that the report computes.
    """
    ref = np.array([r.oracle_level for r in records])
    per_backend = {}
    original = scorer.backend_id
    try:
        for backend_id in backend_ids:
            scorer.backend_id = backend_id
            raw = np.array(
                [scorer.score_array(r.load_synth(), healthy=r.healthy).eta_total for r in records]
            )
            per_backend[backend_id] = ranking_inconsistency(ref, raw)
    finally:
        scorer.backend_id = original
    values = np.array(list(per_backend.values()))
    return {"per_backend": per_backend, "variance": float(values.var())}


def resolve_metrics(names, scorer=None, external=None):
    """Build MetricSpec list from CLI-style names; 'kcross' needs a scorer."""
    external = external or {}
    specs = []
    for name in names:
        if name in BASELINE_METRICS:
            specs.append(BASELINE_METRICS[name])
        elif name == "kcross":
            if scorer is None:
                raise ConfigurationError(
                    "metric 'kcross' needs trained checkpoints (pass a scorer)"
                )
            specs.append(
                MetricSpec(
                    "kcross",
                    lambda t, s, r: scorer.score_array(s, healthy=r.healthy).eta_total,
                    HIGHER_IS_BETTER,
                )
            )
        elif name in external:
            specs.append(external[name])
        else:
            raise ConfigurationError(f"unknown metric: {name!r}")
    return specs
