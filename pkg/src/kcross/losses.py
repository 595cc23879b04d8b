"""Training objectives for both stages.

Frequency loss: complex feature maps are compared by mapping each complex
value to its plane vector (a, b), so the squared distance per element is
(a_r - a_f)^2 + (b_r - b_f)^2; per layer the spatial (and by default also
channel) mean is taken and layers are summed.

Similarity loss: squared population MMD (biased statistic) between two
batches of structure codes under a bank of RBF kernels,
kappa(x, y) = sum_n eta_n * exp(-||x - y||^2 / (2 * sigma_n)).

Tumor loss: a discrete-Laplacian penalty plus an LPIPS-style perceptual
term over a frozen feature backbone with unit channel normalization,
averaged over backbone layers.

Structure and inconsistency losses are mean absolute errors; the stage
totals are the weighted sums with all weights defaulting to 1.
"""

import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidArgumentError, ShapeError


@dataclass
class LossWeights:
    """Stage-1 term weights and the tumor-loss split; defaults are all 1."""

    tumor: float = 1.0
    structure: float = 1.0
    frequency: float = 1.0
    similarity: float = 1.0
    laplacian: float = 1.0
    lpips: float = 1.0


@dataclass
class MMDKernelBank:
    """Multi-scale RBF bank; weights are normalized to sum to 1."""

    sigmas: tuple = (1.0, 2.0, 4.0, 8.0, 16.0)
    weights: tuple = ()

    def __post_init__(self):
        if not self.sigmas:
            raise ConfigurationError("kernel bank needs at least one sigma")
        if any(s <= 0 for s in self.sigmas):
            raise ConfigurationError(f"kernel sigmas must be positive: {self.sigmas}")
        if not self.weights:
            self.weights = tuple(1.0 for _ in self.sigmas)
        if len(self.weights) != len(self.sigmas):
            raise ConfigurationError(
                f"{len(self.weights)} weights for {len(self.sigmas)} sigmas"
            )
        if any(w <= 0 for w in self.weights):
            raise ConfigurationError(f"kernel weights must be positive: {self.weights}")
        total = sum(self.weights)
        self.weights = tuple(w / total for w in self.weights)


def frequency_loss(features_real, features_fake, channel_mean=True):
    """Sum over layers of the mean squared plane distance between paired
    complex feature maps."""
    if len(features_real) != len(features_fake):
        raise ShapeError(
            f"feature lists differ in length: {len(features_real)} vs {len(features_fake)}"
        )
    total = None
    for layer, (mr, mf) in enumerate(zip(features_real, features_fake)):
        if mr.shape != mf.shape:
            raise ShapeError(
                f"layer {layer} feature shapes differ: "
                f"{tuple(mr.shape)} vs {tuple(mf.shape)}"
            )
        dist = (mr.real - mf.real) ** 2 + (mr.imag - mf.imag) ** 2
        term = dist.mean() if channel_mean else dist.sum(dim=1).mean()
        total = term if total is None else total + term
    if total is None:
        raise InvalidArgumentError("empty feature lists")
    return total


def _kernel_means(a, b, bank):
    sq = ((a.unsqueeze(1) - b.unsqueeze(0)) ** 2).sum(-1)
    k = None
    for sigma, weight in zip(bank.sigmas, bank.weights):
        term = weight * torch.exp(-sq / (2.0 * sigma))
        k = term if k is None else k + term
    return k.mean()


def similarity_loss(h_src, h_tgt, bank=None):
    """Squared population MMD (biased statistic) between two code batches."""
    bank = bank or MMDKernelBank()
    if h_src.dim() != 2 or h_tgt.dim() != 2:
        raise InvalidArgumentError("structure codes must be 2D (batch, dim)")
    if h_src.shape[0] == 0 or h_tgt.shape[0] == 0:
        raise InvalidArgumentError("empty batch in similarity loss")
    if h_src.shape[1] != h_tgt.shape[1]:
        raise ShapeError(
            f"code dims differ: {h_src.shape[1]} vs {h_tgt.shape[1]}", axis="feature"
        )
    return (
        _kernel_means(h_src, h_src, bank)
        - 2.0 * _kernel_means(h_src, h_tgt, bank)
        + _kernel_means(h_tgt, h_tgt, bank)
    )


_LAPLACIAN_STENCIL = ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0))


def laplacian(x):
    """3x3 discrete Laplacian with replicate padding; accepts (B,1,H,W)."""
    if x.dim() != 4 or x.shape[1] != 1:
        raise ShapeError(f"laplacian expects (B,1,H,W), got {tuple(x.shape)}")
    kernel = torch.tensor(_LAPLACIAN_STENCIL, dtype=x.dtype, device=x.device)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    return F.conv2d(padded, kernel[None, None])


class FeatureBackbone(nn.Module):
    """Frozen random conv stack used as the perceptual feature extractor."""

    def __init__(self, in_channels=1, widths=(16, 32, 64, 64), seed=0x5EED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_prev = in_channels
        for width in widths:
            conv = nn.Conv2d(c_prev, width, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen)
                    * (2.0 / (c_prev * 9)) ** 0.5
                )
                conv.bias.zero_()
            layers.append(conv)
            c_prev = width
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
            feats.append(h)
        return feats


_BACKBONES = {}


def register_backbone(name, module):
    _BACKBONES[name] = module


def get_backbone(name="random4"):
    if name == "random4" and name not in _BACKBONES:
        _BACKBONES[name] = FeatureBackbone()
    if name not in _BACKBONES:
        raise ConfigurationError(
            f"unknown perceptual backbone {name!r}; registered: {sorted(_BACKBONES)}"
        )
    return _BACKBONES[name]


def _unit_channel_normalize(feat, eps=1e-10):
    norm = feat.pow(2).sum(dim=1, keepdim=True).sqrt()
    return feat / (norm + eps)


def lpips_distance(x, x_hat, backbone):
    """Average over backbone layers of the mean squared difference between
    unit-channel-normalized feature maps."""
    feats_x = backbone(x)
    feats_y = backbone(x_hat)
    terms = [
        (_unit_channel_normalize(fx) - _unit_channel_normalize(fy)).pow(2).mean()
        for fx, fy in zip(feats_x, feats_y)
    ]
    return sum(terms) / len(terms)


def tumor_loss(x, x_hat, weights=None, backbone="random4"):
    """Laplacian + LPIPS-style penalty over the lesion patch pair."""
    weights = weights or LossWeights()
    if x.shape != x_hat.shape:
        raise ShapeError(f"patch shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if isinstance(backbone, str):
        backbone = get_backbone(backbone)
    if backbone is None:
        raise ConfigurationError("tumor loss needs a registered feature backbone")
    lap = ((laplacian(x) - laplacian(x_hat)) ** 2).mean()
    if weights.lpips == 0.0:
        return weights.laplacian * lap
    if next(backbone.parameters()).dtype != x.dtype:
        backbone = backbone.to(x.dtype)
    return weights.laplacian * lap + weights.lpips * lpips_distance(x, x_hat, backbone)


def structure_loss(x, x_hat):
    """Mean absolute reconstruction error."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


def inconsistency_loss(score_total, rating, penalty="l1"):
    """Mean absolute gap between aligned scores and rating levels.

    Both inputs must already live on the common [0, 1] rating scale
    (scores after ranking alignment). A squared-error variant is kept
    behind the penalty switch for comparison.
    """
    if score_total.shape != rating.shape:
        raise ShapeError(
            f"shapes differ: {tuple(score_total.shape)} vs {tuple(rating.shape)}"
        )
    for name, values in (("score", score_total), ("rating", rating)):
        if (values < 0).any() or (values > 1).any():
            raise InvalidArgumentError(
                f"{name} values outside [0, 1]; align scores to the rating scale first"
            )
    if penalty == "l1":
        return (score_total - rating).abs().mean()
    if penalty == "mse":
        return ((score_total - rating) ** 2).mean()
    raise InvalidArgumentError(f"unknown penalty: {penalty!r}")


def stage1_total(tumor, structure, frequency, similarity, weights=None):
    weights = weights or LossWeights()
    return (
        weights.tumor * tumor
        + weights.structure * structure
        + weights.frequency * frequency
        + weights.similarity * similarity
    )


def stage2_total(inconsistency):
    return inconsistency


class LossLogger:
    """Appends one JSON line per (step, loss_name, value)."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a")

    def log(self, step, loss_name, value):
        self._fh.write(
            json.dumps({"step": int(step), "loss_name": loss_name, "value": float(value)})
            + "\n"
        )
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
