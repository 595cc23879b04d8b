"""Triple-branch scoring network and the score aggregation.

The branch set holds modality-private tumor and complex branches (separate
parameter sets for source and target; only the target side is trained by
stage 1, the source side exists for symmetry) and one literally shared
structure branch used by both modalities. Real branches mirror the complex
U-Net layout with ordinary conv / batchnorm / leaky-ReLU blocks. Every
encoder pools its deepest feature map (global average pool + linear
projection) into a fixed-width code that feeds the score networks:

    natural score   = 2-layer MLP on (tumor code + structure code)
    complex score   = modulus of two stacked complex dense layers
    total score     = natural + complex

Scoring a healthy slice skips segmentation and the tumor summand entirely;
the structure code alone drives the natural score.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import arrays_to_module, load_arrays, module_to_arrays, save_arrays
from .complex_nn import ComplexLinear, ComplexTensor, ComplexUNet, ComplexUNetSpec
from .errors import ShapeError, StateError
from .kspace import forward_kspace
from .segmentation import extract_lesion_patch

CODE_DIM = 512


@dataclass
class ModelConfig:
    image_size: int = 64
    depth: int = 3
    base_channels: int = 16
    code_dim: int = CODE_DIM
    patch_size: int = 64
    negative_slope: float = 0.2
    spectrum_scale: str = "mn"  # "mn": divide spectra by M*N; "none": raw
    nat_combine: str = "sum"  # "sum" | "concat" of tumor and structure codes
    score_hidden: int = 256


def spectrum_scale_factor(cfg, shape):
    if cfg.spectrum_scale == "mn":
        return 1.0 / float(shape[0] * shape[1])
    if cfg.spectrum_scale == "none":
        return 1.0
    raise ShapeError(f"unknown spectrum_scale mode {cfg.spectrum_scale!r}")


def spectrum_to_tensor(values, cfg, dtype=torch.float32):
    """Raw complex spectrum -> scaled (1,1,H,W) complex tensor pair."""
    scaled = np.asarray(values) * spectrum_scale_factor(cfg, values.shape)
    return ComplexTensor.from_numpy(scaled[None, None], dtype=dtype)


def image_to_tensor(image, dtype=torch.float32):
    return torch.as_tensor(np.asarray(image), dtype=dtype)[None, None]


def combine_codes(cfg, f_tumor, f_structure):
    """Natural-score input; f_tumor is None on the healthy path, which
    leaves the structure code untouched (sum mode) or zero-padded."""
    if cfg.nat_combine == "concat":
        if f_tumor is None:
            f_tumor = torch.zeros_like(f_structure)
        return torch.cat([f_tumor, f_structure], dim=-1)
    if f_tumor is None:
        return f_structure
    return f_tumor + f_structure


class RealBranch(nn.Module):
    """Conv encoder/decoder plus a pooled code head (one pseudo-modality)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        enc = []
        c_prev = 1
        for c in chans:
            enc += [
                nn.Conv2d(c_prev, c, 4, stride=2, padding=1),
                nn.BatchNorm2d(c),
                nn.LeakyReLU(cfg.negative_slope),
            ]
            c_prev = c
        self.encoder = nn.Sequential(*enc)
        self.project = nn.Linear(chans[-1], cfg.code_dim)
        dec = []
        for i in range(len(chans) - 1, 0, -1):
            dec += [
                nn.ConvTranspose2d(chans[i], chans[i - 1], 4, stride=2, padding=1),
                nn.BatchNorm2d(chans[i - 1]),
                nn.ReLU(),
            ]
        dec += [
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(chans[0], 1, 3, padding=1),
            nn.Tanh(),
        ]
        self.decoder = nn.Sequential(*dec)

    def encode(self, x):
        feat = self.encoder(x)
        return self.project(feat.mean(dim=(2, 3))), feat

    def forward(self, x):
        code, feat = self.encode(x)
        return self.decoder(feat), code


class ComplexBranch(nn.Module):
    """Complex U-Net plus a pooled complex code head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.unet = ComplexUNet(
            ComplexUNetSpec(
                depth=cfg.depth,
                base_channels=cfg.base_channels,
                negative_slope=cfg.negative_slope,
            )
        )
        deepest = cfg.base_channels * 2 ** (cfg.depth - 1)
        self.project = ComplexLinear(deepest, cfg.code_dim)

    def encode(self, z):
        feats = self.unet.encode(z)
        deepest = feats[-1]
        pooled = ComplexTensor(deepest.real.mean(dim=(2, 3)), deepest.imag.mean(dim=(2, 3)))
        return self.project(pooled), feats

    def forward(self, z):
        recon, feats = self.unet(z)
        deepest = feats[-1]
        pooled = ComplexTensor(deepest.real.mean(dim=(2, 3)), deepest.imag.mean(dim=(2, 3)))
        return recon, self.project(pooled), feats


class BranchSet(nn.Module):
    """All feature branches; structure is a single shared parameter set."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.structure = RealBranch(self.cfg)
        self.tumor_src = RealBranch(self.cfg)
        self.tumor_tgt = RealBranch(self.cfg)
        self.complex_src = ComplexBranch(self.cfg)
        self.complex_tgt = ComplexBranch(self.cfg)
        self.trained = False

    def save(self, path, extra_meta=None):
        meta = {"model_config": asdict(self.cfg), "trained": self.trained}
        meta.update(extra_meta or {})
        return save_arrays(path, module_to_arrays(self, "branches."), meta)

    @staticmethod
    def load(path):
        arrays, meta = load_arrays(path)
        cfg = ModelConfig(**meta["model_config"])
        branches = BranchSet(cfg)
        arrays_to_module(branches, arrays, "branches.")
        branches.trained = bool(meta.get("trained", False))
        return branches


class ScoreNetworks(nn.Module):
    """The two score heads mapping pooled codes to scalar quality scores.

    Inputs pass through a fixed per-dimension standardization (buffers set
    once from the stage-2 training codes, identity until then). For the
    natural head this is an affine reparameterization of its first linear
    layer; for the complex head the mean shift and the real positive
    per-dimension scale are complex-affine, so neither changes the function
    class - they only condition the regression.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        nat_in = self.cfg.code_dim * (2 if self.cfg.nat_combine == "concat" else 1)
        self.natural = nn.Sequential(
            nn.Linear(nat_in, self.cfg.score_hidden),
            nn.ReLU(),
            nn.Linear(self.cfg.score_hidden, 1),
        )
        self.complex_fc1 = ComplexLinear(self.cfg.code_dim, self.cfg.score_hidden)
        self.complex_fc2 = ComplexLinear(self.cfg.score_hidden, 1)
        self.register_buffer("nat_input_mean", torch.zeros(nat_in))
        self.register_buffer("nat_input_scale", torch.ones(nat_in))
        self.register_buffer("complex_input_mean_real", torch.zeros(self.cfg.code_dim))
        self.register_buffer("complex_input_mean_imag", torch.zeros(self.cfg.code_dim))
        self.register_buffer("complex_input_scale", torch.ones(self.cfg.code_dim))
        self.trained = False

    def set_input_stats(self, natural_codes, complex_codes, eps=1e-6):
        """Freeze standardization buffers from the training-code batches."""
        with torch.no_grad():
            self.nat_input_mean.copy_(natural_codes.mean(dim=0))
            self.nat_input_scale.copy_(natural_codes.std(dim=0) + eps)
            mean_r = complex_codes.real.mean(dim=0)
            mean_i = complex_codes.imag.mean(dim=0)
            rms = torch.sqrt(
                ((complex_codes.real - mean_r) ** 2 + (complex_codes.imag - mean_i) ** 2).mean(dim=0)
            )
            self.complex_input_mean_real.copy_(mean_r)
            self.complex_input_mean_imag.copy_(mean_i)
            self.complex_input_scale.copy_(rms + eps)

    def natural_score(self, features):
        expected = self.natural[0].in_features
        if features.shape[-1] != expected:
            raise ShapeError(
                f"natural score net expects {expected}-dim codes, got {features.shape[-1]}",
                axis="feature",
            )
        features = (features - self.nat_input_mean) / self.nat_input_scale
        return self.natural(features).squeeze(-1)

    def combine_codes(self, f_tumor, f_structure):
        return combine_codes(self.cfg, f_tumor, f_structure)

    def complex_score(self, features: ComplexTensor):
        if features.real.shape[-1] != self.cfg.code_dim:
            raise ShapeError(
                f"complex score net expects {self.cfg.code_dim}-dim codes, "
                f"got {features.real.shape[-1]}",
                axis="feature",
            )
        features = ComplexTensor(
            (features.real - self.complex_input_mean_real) / self.complex_input_scale,
            (features.imag - self.complex_input_mean_imag) / self.complex_input_scale,
        )
        out = self.complex_fc2(self.complex_fc1(features))
        return out.abs().squeeze(-1)

    def save(self, path, extra_meta=None):
        meta = {"model_config": asdict(self.cfg), "trained": self.trained}
        meta.update(extra_meta or {})
        return save_arrays(path, module_to_arrays(self, "score_nets."), meta)

    @staticmethod
    def load(path):
        arrays, meta = load_arrays(path)
        cfg = ModelConfig(**meta["model_config"])
        nets = ScoreNetworks(cfg)
        arrays_to_module(nets, arrays, "score_nets.")
        nets.trained = bool(meta.get("trained", False))
        return nets


@dataclass
class ScoreReport:
    """Per-image scoring result plus branch feature summaries for audit."""

    eta_complex: float
    eta_nat: float
    eta_total: float
    rank_aligned: bool = False
    health_path: bool = False
    features: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(
            {
                "eta_complex": self.eta_complex,
                "eta_nat": self.eta_nat,
                "eta_total": self.eta_total,
                "rank_aligned": self.rank_aligned,
                "health_path": self.health_path,
                "features": self.features,
            },
            sort_keys=True,
        )


class KCrossScorer:
    """Bundles trained branches, score nets and the segmenter for scoring.

    Scoring is read-only on weights: modules are put in eval mode and all
    computation runs under no_grad, so repeated calls on the same image are
    bit-identical.
    """

    def __init__(self, branches, score_nets, segmenter_registry, backend_id="otsu_lcc"):
        self.branches = branches
        self.score_nets = score_nets
        self.registry = segmenter_registry
        self.backend_id = backend_id

    def _require_trained(self):
        if not self.branches.trained:
            raise StateError("branch set is untrained; run stage-1 training first")
        if not self.score_nets.trained:
            raise StateError("score networks are untrained; run stage-2 training first")

    def extract_codes(self, synth, healthy):
        """Pooled codes for one synthesized slice, honoring the health path."""
        cfg = self.branches.cfg
        self.branches.eval()
        with torch.no_grad():
            spectrum = forward_kspace(synth).values
            z = spectrum_to_tensor(spectrum, cfg)
            f_complex, _ = self.branches.complex_tgt.encode(z)
            f_structure, _ = self.branches.structure.encode(image_to_tensor(synth))
            f_tumor = None
            coverage = None
            if not healthy:
                lesion = self.registry.segment(synth, self.backend_id)
                coverage = lesion.coverage
                patch = extract_lesion_patch(synth, lesion.mask, cfg.patch_size)
                f_tumor, _ = self.branches.tumor_tgt.encode(image_to_tensor(patch))
        return {
            "complex": f_complex,
            "structure": f_structure,
            "tumor": f_tumor,
            "mask_coverage": coverage,
        }

    def score_array(self, synth, healthy=False, require_trained=True) -> ScoreReport:
        if require_trained:
            self._require_trained()
        codes = self.extract_codes(synth, healthy)
        self.score_nets.eval()
        with torch.no_grad():
            eta_complex = float(self.score_nets.complex_score(codes["complex"]).item())
            combined = self.score_nets.combine_codes(codes["tumor"], codes["structure"])
            eta_nat = float(self.score_nets.natural_score(combined).item())
        features = {
            "complex_code_norm": float(codes["complex"].abs().square().sum().sqrt().item()),
            "structure_code_norm": float(codes["structure"].norm().item()),
            "tumor_code_norm": (
                None if codes["tumor"] is None else float(codes["tumor"].norm().item())
            ),
            "mask_coverage": codes["mask_coverage"],
        }
        return ScoreReport(
            eta_complex=eta_complex,
            eta_nat=eta_nat,
            eta_total=eta_nat + eta_complex,
            rank_aligned=False,
            health_path=bool(healthy),
            features=features,
        )

    def score_manifest(self, records, out_path=None):
        """Score every manifest record; optionally write JSON lines keyed by id."""
        reports = {}
        for record in records:
            reports[record.id] = self.score_array(record.load_synth(), healthy=record.healthy)
        if out_path is not None:
            with open(out_path, "w") as fh:
                for image_id in sorted(reports):
                    fh.write(json.dumps({"id": image_id, **json.loads(reports[image_id].to_json())}) + "\n")
        return reports
