"""Two-stage training: branch pretraining, then score-network regression.

Stage 1 updates the three branch groups with their own optimizers, one step
per group per batch, in a fixed order: the complex branch on the spectrum
reconstruction penalty, the tumor branch on the lesion-patch loss, the
shared structure branch on the code-similarity plus reconstruction losses.
Only target-side tumor/complex branches train; the source side is parked.

Stage 2 freezes the branches, caches every item's pooled codes once, and
regresses the summed score onto the rating levels. The rank alignment is
piecewise constant (zero gradient almost everywhere), so gradient steps run
on the raw-score regression penalty while the rank-aligned inconsistency is
recomputed over the full set each epoch and logged as the monitored
objective. Only score-network parameters change.

Determinism: the seed fixes parameter init and the data order (per-epoch
permutations are drawn from per-epoch seeded generators), checkpoints carry
optimizer moments plus early-stop counters, so a resumed run finishes in
exactly the same state as an uninterrupted one.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .complex_nn import ComplexTensor
from .consistency import uniformize
from .errors import ConfigurationError, DataError, StateError
from .kspace import forward_kspace
from .losses import (
    LossLogger,
    LossWeights,
    MMDKernelBank,
    frequency_loss,
    inconsistency_loss,
    similarity_loss,
    stage1_total,
    structure_loss,
    tumor_loss,
)
from .model import (
    BranchSet,
    KCrossScorer,
    ModelConfig,
    ScoreNetworks,
    combine_codes,
    image_to_tensor,
    spectrum_to_tensor,
)
from .segmentation import default_registry, extract_lesion_patch


@dataclass
class TrainConfig:
    stage1_epochs: int = 40
    stage2_epochs: int = 20
    batch_size: int = 8
    lr: float = 2e-4
    stage2_lr: float = 2e-4
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 5
    segmenter_backend: str = "otsu_lcc"
    lpips_backbone: str = "random4"
    freq_channel_mean: bool = True
    inconsistency_penalty: str = "l1"
    stage2_schedule: str = "cosine"  # "cosine" | "constant"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    kernel_bank: MMDKernelBank = field(default_factory=MMDKernelBank)

    def validate(self):
        for name in ("stage1_epochs", "stage2_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr <= 0 or self.stage2_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigurationError("val_fraction must be in [0, 1)")
        return self


def epoch_permutation(seed, stage, epoch, n):
    rng = np.random.default_rng(np.random.SeedSequence([seed, stage, epoch]))
    return rng.permutation(n)


def split_indices(seed, n, val_fraction):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEAD]))
    perm = rng.permutation(n)
    n_val = int(np.floor(val_fraction * n))
    return perm[n_val:], perm[:n_val]


def state_checksum(module):
    """Order-independent fingerprint of a module's parameters and buffers."""
    blob = b"".join(
        t.detach().cpu().numpy().tobytes() for _, t in sorted(module.state_dict().items())
    )
    return hashlib.sha256(blob).hexdigest()


class Stage1Data:
    """Everything stage 1 reads, cached as tensors once per run."""

    def __init__(self, records, cfg, registry, model_cfg):
        if not records:
            raise ConfigurationError("empty dataset")
        self.records = records
        sources, targets, spec_r, spec_i = [], [], [], []
        patches, lesion_flags = [], []
        for record in records:
            source = record.load_source()
            target = record.load_target()
            sources.append(image_to_tensor(source))
            targets.append(image_to_tensor(target))
            z = spectrum_to_tensor(forward_kspace(target).values, model_cfg)
            spec_r.append(z.real)
            spec_i.append(z.imag)
            if record.healthy:
                patches.append(torch.zeros(1, 1, model_cfg.patch_size, model_cfg.patch_size))
                lesion_flags.append(False)
            else:
                lesion = registry.segment(target, cfg.segmenter_backend)
                patch = extract_lesion_patch(target, lesion.mask, model_cfg.patch_size)
                patches.append(image_to_tensor(patch))
                lesion_flags.append(True)
        self.source = torch.cat(sources)
        self.target = torch.cat(targets)
        self.spectrum = ComplexTensor(torch.cat(spec_r), torch.cat(spec_i))
        self.patches = torch.cat(patches)
        self.lesion_flags = np.array(lesion_flags)

    def spectrum_batch(self, idx):
        return ComplexTensor(self.spectrum.real[idx], self.spectrum.imag[idx])

    def __len__(self):
        return len(self.records)


def _complex_branch_loss(branch, z, cfg):
    """Spectrum reconstruction penalty: plane distances between the input
    (plus its encoder features) and the reconstruction (re-encoded)."""
    recon, feats_in = branch.unet(z)
    feats_out = branch.unet.encode(recon)
    return frequency_loss([z] + feats_in, [recon] + feats_out, cfg.freq_channel_mean)


def _structure_branch_losses(branch, source, target, cfg):
    recon_s, code_s = branch(source)
    recon_t, code_t = branch(target)
    sim = similarity_loss(code_s, code_t, cfg.kernel_bank)
    stru = (structure_loss(source, recon_s) + structure_loss(target, recon_t)) / 2.0
    return sim, stru


def _nan_guard(loss, run_dir, branches, tag):
    if not torch.isfinite(loss):
        snapshot = Path(run_dir) / "checkpoints" / f"nan_snapshot_{tag}.kcrx"
        branches.save(snapshot, extra_meta={"nan_at": tag})
        raise StateError(f"non-finite {tag} loss; diagnostic snapshot at {snapshot}")


def _optimizer_param_names(branches):
    return {
        "complex": [f"complex_tgt.{n}" for n, _ in branches.complex_tgt.named_parameters()],
        "tumor": [f"tumor_tgt.{n}" for n, _ in branches.tumor_tgt.named_parameters()],
        "structure": [f"structure.{n}" for n, _ in branches.structure.named_parameters()],
    }


def _save_stage1_checkpoint(path, branches, optimizers, names, meta):
    arrays = ckpt.module_to_arrays(branches, "branches.")
    for group, opt in optimizers.items():
        arrays.update(ckpt.optimizer_to_arrays(opt, names[group], prefix=f"optim.{group}."))
    return ckpt.save_arrays(path, arrays, meta)


def _eval_stage1(branches, data, idx, cfg, batch_size):
    """Validation pass in eval mode; returns the weighted stage-1 total."""
    branches.eval()
    sums = {"frequency": 0.0, "tumor": 0.0, "similarity": 0.0, "structure": 0.0}
    batches = 0
    tumor_batches = 0
    with torch.no_grad():
        for start in range(0, len(idx), batch_size):
            b = idx[start : start + batch_size]
            sums["frequency"] += _complex_branch_loss(
                branches.complex_tgt, data.spectrum_batch(b), cfg
            ).item()
            sim, stru = _structure_branch_losses(
                branches.structure, data.source[b], data.target[b], cfg
            )
            sums["similarity"] += sim.item()
            sums["structure"] += stru.item()
            lesioned = b[data.lesion_flags[b]]
            if len(lesioned) >= 1:
                patches = data.patches[lesioned]
                recon, _ = branches.tumor_tgt(patches)
                sums["tumor"] += tumor_loss(
                    patches, recon, cfg.loss_weights, cfg.lpips_backbone
                ).item()
                tumor_batches += 1
            batches += 1
    means = {k: v / max(batches, 1) for k, v in sums.items()}
    if tumor_batches:
        means["tumor"] = sums["tumor"] / tumor_batches
    total = stage1_total(
        torch.tensor(means["tumor"]),
        torch.tensor(means["structure"]),
        torch.tensor(means["frequency"]),
        torch.tensor(means["similarity"]),
        cfg.loss_weights,
    ).item()
    return total, means


def train_stage1(records, cfg, run_dir, model_cfg=None, registry=None, resume=None):
    """Branch pretraining; returns (branches, final checkpoint path)."""
    cfg.validate()
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    model_cfg = model_cfg or ModelConfig()
    registry = registry or default_registry()

    seg_checksum_before = registry.checksum(cfg.segmenter_backend)
    data = Stage1Data(records, cfg, registry, model_cfg)

    torch.manual_seed(cfg.seed)
    branches = BranchSet(model_cfg)
    optimizers = {
        "complex": torch.optim.Adam(branches.complex_tgt.parameters(), lr=cfg.lr),
        "tumor": torch.optim.Adam(branches.tumor_tgt.parameters(), lr=cfg.lr),
        "structure": torch.optim.Adam(branches.structure.parameters(), lr=cfg.lr),
    }
    names = _optimizer_param_names(branches)
    epoch_start = 0
    best_val = float("inf")
    patience_left = cfg.patience
    if resume is not None:
        arrays, meta = ckpt.load_arrays(resume)
        ckpt.arrays_to_module(branches, arrays, "branches.")
        for group, opt in optimizers.items():
            ckpt.arrays_to_optimizer(opt, arrays, names[group], prefix=f"optim.{group}.")
        epoch_start = int(meta["epoch_next"])
        best_val = float(meta["best_val"])
        patience_left = int(meta["patience_left"])

    train_idx, val_idx = split_indices(cfg.seed, len(data), cfg.val_fraction)
    latest = run_dir / "checkpoints" / "stage1_latest.kcrx"
    step = epoch_start * ((len(train_idx) + cfg.batch_size - 1) // cfg.batch_size)
    with LossLogger(run_dir / "logs" / "losses_stage1.jsonl") as logger:
        for epoch in range(epoch_start, cfg.stage1_epochs):
            branches.train()
            perm = train_idx[epoch_permutation(cfg.seed, 1, epoch, len(train_idx))]
            for start in range(0, len(perm), cfg.batch_size):
                batch = perm[start : start + cfg.batch_size]
                if len(batch) < 2:
                    continue  # batchnorm needs >= 2 rows
                # complex branch (spectrum reconstruction)
                optimizers["complex"].zero_grad()
                loss_freq = _complex_branch_loss(
                    branches.complex_tgt, data.spectrum_batch(batch), cfg
                )
                _nan_guard(loss_freq, run_dir, branches, "frequency")
                loss_freq.backward()
                optimizers["complex"].step()
                logger.log(step, "frequency", loss_freq.item())
                # tumor branch (lesion patch reconstruction)
                lesioned = batch[data.lesion_flags[batch]]
                if len(lesioned) >= 2:
                    optimizers["tumor"].zero_grad()
                    patches = data.patches[lesioned]
                    recon, _ = branches.tumor_tgt(patches)
                    loss_tum = tumor_loss(patches, recon, cfg.loss_weights, cfg.lpips_backbone)
                    _nan_guard(loss_tum, run_dir, branches, "tumor")
                    loss_tum.backward()
                    optimizers["tumor"].step()
                    logger.log(step, "tumor", loss_tum.item())
                # shared structure branch (similarity + reconstruction)
                optimizers["structure"].zero_grad()
                sim, stru = _structure_branch_losses(
                    branches.structure, data.source[batch], data.target[batch], cfg
                )
                loss_structure = cfg.loss_weights.similarity * sim + cfg.loss_weights.structure * stru
                _nan_guard(loss_structure, run_dir, branches, "structure")
                loss_structure.backward()
                optimizers["structure"].step()
                logger.log(step, "similarity", sim.item())
                logger.log(step, "structure", stru.item())
                step += 1

            if len(val_idx):
                val_total, val_means = _eval_stage1(branches, data, val_idx, cfg, cfg.batch_size)
                logger.log(step, "val_total", val_total)
                if val_total < best_val - 1e-9:
                    best_val = val_total
                    patience_left = cfg.patience
                else:
                    patience_left -= 1
            meta = {
                "stage": 1,
                "epoch_next": epoch + 1,
                "best_val": best_val,
                "patience_left": patience_left,
                "model_config": asdict(model_cfg),
                "trained": epoch + 1 >= cfg.stage1_epochs or patience_left <= 0,
                "seed": cfg.seed,
            }
            _save_stage1_checkpoint(latest, branches, optimizers, names, meta)
            if len(val_idx) and patience_left <= 0:
                break

    if registry.checksum(cfg.segmenter_backend) != seg_checksum_before:
        raise StateError("segmenter backend parameters changed during training")
    branches.trained = True
    final = run_dir / "checkpoints" / "stage1_final.kcrx"
    branches.save(final, extra_meta={"stage": 1, "seed": cfg.seed})
    return branches, final


def cache_stage2_codes(records, branches, cfg, registry, ratings=None):
    """Frozen-branch code extraction for every item, honoring the health path.

    ratings: optional {image_id: level}; defaults to the manifest's oracle
    levels. Raises a data error listing unrated ids."""
    levels = []
    missing = []
    for record in records:
        if ratings is not None:
            if record.id not in ratings:
                missing.append(record.id)
            else:
                levels.append(float(ratings[record.id]))
        else:
            levels.append(float(record.oracle_level))
    if missing:
        raise DataError(f"missing ratings for {len(missing)} images: {sorted(missing)[:20]}")
    scorer = KCrossScorer(branches, None, registry, cfg.segmenter_backend)
    nat_inputs, comp_r, comp_i = [], [], []
    for record in records:
        codes = scorer.extract_codes(record.load_synth(), healthy=record.healthy)
        nat_inputs.append(combine_codes(branches.cfg, codes["tumor"], codes["structure"]))
        comp_r.append(codes["complex"].real)
        comp_i.append(codes["complex"].imag)
    return {
        "natural": torch.cat(nat_inputs),
        "complex": ComplexTensor(torch.cat(comp_r), torch.cat(comp_i)),
        "levels": torch.tensor(levels, dtype=torch.float32),
    }


def _raw_scores(nets, cache, idx=None):
    nat = cache["natural"] if idx is None else cache["natural"][idx]
    comp = (
        cache["complex"]
        if idx is None
        else ComplexTensor(cache["complex"].real[idx], cache["complex"].imag[idx])
    )
    return nets.natural_score(nat) + nets.complex_score(comp)


def aligned_inconsistency(nets, cache, cfg):
    """Rank-aligned inconsistency of the current score nets over the set."""
    nets.eval()
    with torch.no_grad():
        raw = _raw_scores(nets, cache).numpy()
    levels = cache["levels"].numpy()
    aligned = uniformize(levels, raw)
    return inconsistency_loss(
        torch.tensor(aligned), torch.tensor(levels, dtype=torch.float64), cfg.inconsistency_penalty
    ).item()


def train_stage2(records, branches, cfg, run_dir, registry=None, ratings=None):
    """Score-network regression against rating levels; returns (nets, path)."""
    cfg.validate()
    if not records:
        raise ConfigurationError("empty dataset")
    if not branches.trained:
        raise StateError("stage-1 branches are untrained")
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    registry = registry or default_registry()

    for p in branches.parameters():
        p.requires_grad_(False)
    branches.eval()
    checksum_before = state_checksum(branches)

    cache = cache_stage2_codes(records, branches, cfg, registry, ratings)
    n = len(records)

    torch.manual_seed(np.random.SeedSequence([cfg.seed, 2]).generate_state(1)[0])
    nets = ScoreNetworks(branches.cfg)
    nets.set_input_stats(cache["natural"], cache["complex"])
    optimizer = torch.optim.Adam(nets.parameters(), lr=cfg.stage2_lr)
    if cfg.stage2_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=cfg.stage2_epochs, eta_min=cfg.stage2_lr * 0.01
        )
    elif cfg.stage2_schedule == "constant":
        scheduler = None
    else:
        raise ConfigurationError(f"unknown stage2_schedule {cfg.stage2_schedule!r}")
    surrogate_penalty = cfg.inconsistency_penalty

    with LossLogger(run_dir / "logs" / "losses_stage2.jsonl") as logger:
        logger.log(0, "inconsistency_aligned", aligned_inconsistency(nets, cache, cfg))
        step = 0
        for epoch in range(cfg.stage2_epochs):
            nets.train()
            perm = epoch_permutation(cfg.seed, 2, epoch, n)
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                optimizer.zero_grad()
                raw = _raw_scores(nets, cache, idx)
                diff = raw - cache["levels"][idx]
                loss = diff.abs().mean() if surrogate_penalty == "l1" else (diff**2).mean()
                if not torch.isfinite(loss):
                    raise StateError(f"non-finite stage-2 loss at step {step}")
                loss.backward()
                optimizer.step()
                logger.log(step, "inconsistency_surrogate", loss.item())
                step += 1
            if scheduler is not None:
                scheduler.step()
            logger.log(step, "inconsistency_aligned", aligned_inconsistency(nets, cache, cfg))

    if state_checksum(branches) != checksum_before:
        raise StateError("stage 2 mutated branch parameters; stages must stay disjoint")
    nets.trained = True
    path = run_dir / "checkpoints" / "stage2_final.kcrx"
    nets.save(path, extra_meta={"stage": 2, "seed": cfg.seed})
    return nets, path
