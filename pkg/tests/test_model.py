import hashlib

import numpy as np
import pytest
import torch

from kcross.complex_nn import ComplexTensor
from kcross.errors import ShapeError, StateError
from kcross.losses import LossWeights, tumor_loss
from kcross.model import (
    BranchSet,
    KCrossScorer,
    ModelConfig,
    ScoreNetworks,
    ScoreReport,
    image_to_tensor,
    spectrum_to_tensor,
)
from kcross.phantom import PhantomSpec, generate
from kcross.segmentation import default_registry

SMALL = ModelConfig(image_size=32, depth=2, base_channels=4, code_dim=16, patch_size=32, score_hidden=8)


def small_scorer(seed=0, trained=True):
    torch.manual_seed(seed)
    branches = BranchSet(SMALL)
    nets = ScoreNetworks(SMALL)
    branches.trained = trained
    nets.trained = trained
    return KCrossScorer(branches, nets, default_registry())


def phantom_image(seed=3, healthy=False, size=32):
    spec = PhantomSpec.drawn(seed=seed, size=size, healthy=healthy, severity=0.4)
    return generate(spec).synthesized


def state_checksum(module):
    blob = b"".join(
        t.detach().cpu().numpy().tobytes() for _, t in sorted(module.state_dict().items())
    )
    return hashlib.sha256(blob).hexdigest()


class TestScoreNetworks:
    def test_zero_codes_zero_final_layer_gives_zero(self):
        nets = ScoreNetworks(SMALL)
        with torch.no_grad():
            nets.natural[2].weight.zero_()
            nets.natural[2].bias.zero_()
            nets.complex_fc2.weight_a.zero_()
            nets.complex_fc2.weight_b.zero_()
            nets.complex_fc2.bias_real.zero_()
            nets.complex_fc2.bias_imag.zero_()
        f = torch.zeros(1, SMALL.code_dim)
        assert nets.natural_score(f).item() == 0.0
        z = ComplexTensor(torch.zeros(1, SMALL.code_dim), torch.zeros(1, SMALL.code_dim))
        assert nets.complex_score(z).item() == 0.0

    def test_natural_matches_dense_oracle(self):
        torch.manual_seed(2)
        nets = ScoreNetworks(SMALL).double()
        rng = np.random.default_rng(0)
        f = rng.normal(size=(3, SMALL.code_dim))
        got = nets.natural_score(torch.tensor(f)).detach().numpy()
        w1 = nets.natural[0].weight.detach().numpy()
        b1 = nets.natural[0].bias.detach().numpy()
        w2 = nets.natural[2].weight.detach().numpy()
        b2 = nets.natural[2].bias.detach().numpy()
        want = (np.maximum(f @ w1.T + b1, 0.0) @ w2.T + b2).squeeze(-1)
        assert np.abs(got - want).max() < 1e-6

    def test_complex_matches_dense_oracle(self):
        torch.manual_seed(3)
        nets = ScoreNetworks(SMALL).double()
        rng = np.random.default_rng(1)
        z = rng.normal(size=(2, SMALL.code_dim)) + 1j * rng.normal(size=(2, SMALL.code_dim))
        got = nets.complex_score(ComplexTensor.from_numpy(z, dtype=torch.float64))
        w1 = nets.complex_fc1.weight_a.detach().numpy() + 1j * nets.complex_fc1.weight_b.detach().numpy()
        b1 = nets.complex_fc1.bias_real.detach().numpy() + 1j * nets.complex_fc1.bias_imag.detach().numpy()
        w2 = nets.complex_fc2.weight_a.detach().numpy() + 1j * nets.complex_fc2.weight_b.detach().numpy()
        b2 = nets.complex_fc2.bias_real.detach().numpy() + 1j * nets.complex_fc2.bias_imag.detach().numpy()
        want = np.abs((z @ w1.T + b1) @ w2.T + b2).squeeze(-1)
        assert np.abs(got.detach().numpy() - want).max() < 1e-6

    def test_conjugation_symmetry(self):
        torch.manual_seed(4)
        nets = ScoreNetworks(SMALL).double()
        rng = np.random.default_rng(2)
        z = rng.normal(size=(1, SMALL.code_dim)) + 1j * rng.normal(size=(1, SMALL.code_dim))
        score = nets.complex_score(ComplexTensor.from_numpy(z, dtype=torch.float64)).item()
        with torch.no_grad():
            for layer in (nets.complex_fc1, nets.complex_fc2):
                layer.weight_b.mul_(-1.0)
                layer.bias_imag.mul_(-1.0)
        conj_score = nets.complex_score(
            ComplexTensor.from_numpy(np.conj(z), dtype=torch.float64)
        ).item()
        assert score == pytest.approx(conj_score, rel=1e-12)

    def test_dim_mismatch(self):
        nets = ScoreNetworks(SMALL)
        with pytest.raises(ShapeError):
            nets.natural_score(torch.zeros(1, 7))
        with pytest.raises(ShapeError):
            nets.complex_score(ComplexTensor(torch.zeros(1, 7), torch.zeros(1, 7)))

    def test_concat_combine_mode(self):
        cfg = ModelConfig(**{**SMALL.__dict__, "nat_combine": "concat"})
        nets = ScoreNetworks(cfg)
        combined = nets.combine_codes(torch.ones(1, cfg.code_dim), torch.zeros(1, cfg.code_dim))
        assert combined.shape == (1, 2 * cfg.code_dim)
        assert nets.natural_score(combined).shape == (1,)


class TestScorer:
    def test_healthy_path_skips_segmentation(self):
        scorer = small_scorer()
        img = phantom_image(healthy=True)
        report = scorer.score_array(img, healthy=True)
        assert report.health_path
        assert all(count == 0 for count in scorer.registry.call_counts.values())
        assert report.features["tumor_code_norm"] is None

    def test_lesion_path_calls_segmentation_once(self):
        scorer = small_scorer()
        img = phantom_image(healthy=False)
        report = scorer.score_array(img, healthy=False)
        assert not report.health_path
        assert scorer.registry.call_counts["otsu_lcc"] == 1
        assert report.features["mask_coverage"] > 0

    def test_deterministic_reports(self):
        scorer = small_scorer()
        img = phantom_image()
        a = scorer.score_array(img)
        b = scorer.score_array(img)
        assert a.eta_total == b.eta_total
        assert a.eta_complex == b.eta_complex
        assert a.eta_nat == b.eta_nat

    def test_eta_additivity_exact(self):
        scorer = small_scorer()
        report = scorer.score_array(phantom_image())
        assert report.eta_total - report.eta_nat - report.eta_complex == 0.0

    def test_untrained_raises(self):
        scorer = small_scorer(trained=False)
        with pytest.raises(StateError):
            scorer.score_array(phantom_image())

    def test_segmentation_failure_propagates_on_lesion_path(self):
        scorer = small_scorer()
        scorer.backend_id = "not_a_backend"
        from kcross.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            scorer.score_array(phantom_image(), healthy=False)
        # the healthy path never consults the backend, so it still works
        report = scorer.score_array(phantom_image(healthy=True), healthy=True)
        assert report.health_path

    def test_backend_swap_leaves_other_branches_bit_identical(self):
        scorer = small_scorer()
        img = phantom_image()
        scorer.backend_id = "otsu_lcc"
        a = scorer.score_array(img)
        scorer.backend_id = "quantile_lcc"
        b = scorer.score_array(img)
        assert a.eta_complex == b.eta_complex
        assert a.features["complex_code_norm"] == b.features["complex_code_norm"]
        assert a.features["structure_code_norm"] == b.features["structure_code_norm"]

    def test_report_json(self):
        report = ScoreReport(eta_complex=0.25, eta_nat=0.5, eta_total=0.75, health_path=True)
        parsed = __import__("json").loads(report.to_json())
        assert parsed["eta_total"] == 0.75
        assert parsed["health_path"] is True


class TestBranchSet:
    def test_structure_branch_is_shared_object(self):
        branches = BranchSet(SMALL).eval()
        # one parameter set: source and target paths run the same module
        s = image_to_tensor(phantom_image(seed=1))
        t = image_to_tensor(phantom_image(seed=2))
        before = state_checksum(branches.structure)
        with torch.no_grad():
            _, code_s = branches.structure(s)
            _, code_t = branches.structure(t)
        assert code_s.shape == code_t.shape
        # same checksum: the two paths cannot diverge because there is one module
        assert state_checksum(branches.structure) == before

    def test_tumor_gradient_privacy(self):
        branches = BranchSet(SMALL)
        patch = image_to_tensor(phantom_image(seed=5))
        recon, _ = branches.tumor_tgt(torch.cat([patch, patch]))
        loss = tumor_loss(torch.cat([patch, patch]), recon, LossWeights(lpips=0.0))
        loss.backward()
        assert any(
            p.grad is not None and p.grad.abs().sum() > 0
            for p in branches.tumor_tgt.parameters()
        )
        assert all(p.grad is None for p in branches.tumor_src.parameters())
        assert all(p.grad is None for p in branches.structure.parameters())

    def test_save_load_reproduces_outputs(self, tmp_path):
        torch.manual_seed(6)
        branches = BranchSet(SMALL)
        branches.trained = True
        img = phantom_image(seed=9)
        branches.eval()
        with torch.no_grad():
            _, want = branches.structure(image_to_tensor(img))
        path = branches.save(tmp_path / "branches.kcrx")
        loaded = BranchSet.load(path)
        assert loaded.trained
        loaded.eval()
        with torch.no_grad():
            _, got = loaded.structure(image_to_tensor(img))
        assert torch.equal(got, want)

    def test_score_nets_save_load(self, tmp_path):
        torch.manual_seed(7)
        nets = ScoreNetworks(SMALL)
        nets.trained = True
        f = torch.randn(2, SMALL.code_dim)
        want = nets.natural_score(f).detach()
        path = nets.save(tmp_path / "nets.kcrx")
        loaded = ScoreNetworks.load(path)
        assert loaded.trained
        assert torch.equal(loaded.natural_score(f).detach(), want)


def test_spectrum_scaling_modes():
    from kcross.kspace import forward_kspace

    img = phantom_image(seed=11)
    spectrum = forward_kspace(img).values
    cfg = ModelConfig(spectrum_scale="mn")
    z = spectrum_to_tensor(spectrum, cfg)
    assert z.real.abs().max() <= 1.0 + 1e-6  # DC of a [0,1] image / MN is its mean
    raw = spectrum_to_tensor(spectrum, ModelConfig(spectrum_scale="none"))
    assert raw.real.abs().max() > 1.0
