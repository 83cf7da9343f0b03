"""Tests for the two-scale prosody encoder and its loss terms."""

import math

import numpy as np
import pytest
import torch

from latentspeech import prosody
from latentspeech.config import TrainingConfig
from conftest import tiny_model_config


def make_encoder(**kwargs):
    torch.manual_seed(0)
    cfg = tiny_model_config()
    return prosody.ProsodyEncoder(cfg, d_text=cfg.d_model, **kwargs).eval(), cfg


class TestReparameterize:
    def test_zero_eps_returns_mean(self):
        mu = torch.randn(3, 4)
        sigma = torch.rand(3, 4) + 0.1
        sample = prosody.reparameterize(mu, sigma, eps=torch.zeros_like(mu))
        torch.testing.assert_close(sample.z, mu)

    def test_fixed_eps_deterministic(self):
        mu, sigma = torch.randn(2, 4), torch.rand(2, 4) + 0.1
        eps = torch.randn(2, 4)
        z1 = prosody.reparameterize(mu, sigma, eps=eps).z
        z2 = prosody.reparameterize(mu, sigma, eps=eps).z
        torch.testing.assert_close(z1, z2)

    def test_sample_mean_approaches_mu(self):
        torch.manual_seed(7)
        mu = torch.tensor([0.5, -1.0])
        sigma = torch.tensor([0.3, 2.0])
        draws = torch.stack(
            [prosody.reparameterize(mu, sigma).z for _ in range(20000)]
        )
        se = sigma / math.sqrt(20000)
        assert torch.all((draws.mean(dim=0) - mu).abs() < 3 * se)

    def test_eps_recorded(self):
        eps = torch.randn(1, 4)
        sample = prosody.reparameterize(torch.zeros(1, 4), torch.ones(1, 4), eps=eps)
        torch.testing.assert_close(sample.eps, eps)
        torch.testing.assert_close(sample.z, eps)


class TestKl:
    def test_standard_normal_is_zero(self):
        kl = prosody.kl_standard_normal(torch.zeros(5), torch.ones(5))
        assert kl.item() == pytest.approx(0.0, abs=1e-12)

    def test_unit_mean_shift(self):
        kl = prosody.kl_standard_normal(torch.tensor([1.0]), torch.tensor([1.0]))
        assert kl.item() == pytest.approx(0.5, abs=1e-9)

    def test_doubled_sigma(self):
        kl = prosody.kl_standard_normal(
            torch.tensor([0.0], dtype=torch.float64), torch.tensor([2.0], dtype=torch.float64)
        )
        assert kl.item() == pytest.approx(1.5 - math.log(2.0), abs=1e-9)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            mu = torch.from_numpy(rng.standard_normal((3, 4)))
            sigma = torch.from_numpy(rng.uniform(0.05, 3.0, (3, 4)))
            assert prosody.kl_standard_normal(mu, sigma).item() >= 0.0

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            prosody.kl_standard_normal(torch.zeros(2), torch.tensor([1.0, 0.0]))

    def test_mask_excludes_padding(self):
        mu = torch.ones(1, 3, 2)
        sigma = torch.ones(1, 3, 2)
        mask = torch.tensor([[1.0, 1.0, 0.0]])
        kl = prosody.kl_standard_normal(mu, sigma, mask)
        assert kl.item() == pytest.approx(2 * 2 * 0.5, abs=1e-9)


class TestPosteriorMeanLoss:
    def test_zero_at_equality(self):
        mu = torch.randn(1, 4, 16)
        assert prosody.posterior_mean_loss(mu, mu.clone()).item() == 0.0

    def test_single_step_hand_value(self):
        mu = torch.zeros(1, 1, 16)
        mu[0, 0, 0] = 1.0
        loss = prosody.posterior_mean_loss(mu, torch.zeros(1, 1, 16))
        assert loss.item() == pytest.approx(1.0 / 16.0, abs=1e-9)

    def test_quadratic_scaling(self):
        mu = torch.randn(1, 3, 4)
        hat = torch.randn(1, 3, 4)
        base = prosody.posterior_mean_loss(mu, hat).item()
        doubled = prosody.posterior_mean_loss(2 * mu, 2 * hat).item()
        assert doubled == pytest.approx(4 * base, rel=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            prosody.posterior_mean_loss(torch.zeros(1, 2, 4), torch.zeros(1, 3, 4))

    def test_mask_excludes_padding(self):
        mu = torch.ones(1, 2, 4)
        hat = torch.zeros(1, 2, 4)
        mask = torch.tensor([[1.0, 0.0]])
        assert prosody.posterior_mean_loss(mu, hat, mask).item() == pytest.approx(1.0)


class TestAssembleProsody:
    def test_zero_inputs(self):
        z = prosody.assemble_prosody(torch.zeros(1, 8), torch.zeros(1, 3, 4), 3)
        torch.testing.assert_close(z, torch.zeros(1, 3, 12))

    def test_single_step_concat(self):
        z_g = torch.randn(1, 8)
        z_l = torch.randn(1, 1, 4)
        z = prosody.assemble_prosody(z_g, z_l, 1)
        torch.testing.assert_close(z[0, 0, :8], z_g[0])
        torch.testing.assert_close(z[0, 0, 8:], z_l[0, 0])

    def test_global_slice_constant_across_rows(self):
        z = prosody.assemble_prosody(torch.randn(2, 8), torch.randn(2, 5, 4), 5)
        for n in range(1, 5):
            torch.testing.assert_close(z[:, n, :8], z[:, 0, :8])

    def test_single_scale_variants(self):
        g_only = prosody.assemble_prosody(torch.randn(1, 8), None, 4)
        assert g_only.shape == (1, 4, 8)
        l_only = prosody.assemble_prosody(None, torch.randn(1, 4, 4), 4)
        assert l_only.shape == (1, 4, 4)
        with pytest.raises(ValueError):
            prosody.assemble_prosody(None, None, 4)


class TestEncoderShapes:
    def test_paper_scale_dims(self):
        # default config carries the published latent sizes
        torch.manual_seed(0)
        cfg = TrainingConfig(dropout=0.0)
        enc = prosody.ProsodyEncoder(cfg, d_text=cfg.d_model).eval()
        mel = torch.randn(1, 20, 80)
        g, h_g = enc.encode_global(mel)
        assert g.mu.shape == g.sigma.shape == g.z.shape == (1, 32)
        assert h_g.shape == (1, 20, 128)
        h_text = torch.randn(1, 9, cfg.d_model)
        h_l = enc.hidden_features(h_text, g.z)
        local, weights = enc.encode_local(h_l, h_g)
        assert local.mu.shape == local.sigma.shape == local.z.shape == (1, 9, 16)
        assert enc.predict_local_mean(h_l).shape == (1, 9, 16)
        z = prosody.assemble_prosody(g.z, local.z, 9)
        assert z.shape == (1, 9, 48)

    def test_global_frame_count_tracks_input(self):
        enc, cfg = make_encoder()
        for m in (6, 13):
            _, h_g = enc.encode_global(torch.randn(1, m, 80))
            assert h_g.shape == (1, m, cfg.d_enc)

    def test_zero_eps_gives_posterior_mean(self):
        enc, cfg = make_encoder()
        mel = torch.randn(1, 10, 80)
        g, h_g = enc.encode_global(mel, eps=torch.zeros(1, cfg.latent_global_dim))
        torch.testing.assert_close(g.z, g.mu)
        h_l = enc.hidden_features(torch.randn(1, 4, cfg.d_model), g.z)
        local, _ = enc.encode_local(h_l, h_g, eps=torch.zeros(1, 4, cfg.latent_local_dim))
        torch.testing.assert_close(local.z, local.mu)

    def test_attention_rows_sum_to_one(self):
        enc, cfg = make_encoder()
        g, h_g = enc.encode_global(torch.randn(1, 10, 80))
        h_l = enc.hidden_features(torch.randn(1, 4, cfg.d_model), g.z)
        _, weights = enc.encode_local(h_l, h_g)
        torch.testing.assert_close(weights.sum(dim=-1), torch.ones(1, 4))

    def test_sigma_strictly_positive(self):
        enc, cfg = make_encoder()
        g, h_g = enc.encode_global(torch.randn(2, 12, 80) * 10)
        assert torch.all(g.sigma > 0)


class TestStopGradient:
    def test_post_loss_touches_only_predictor(self):
        enc, cfg = make_encoder()
        enc.train()
        h_text = torch.randn(2, 4, cfg.d_model, requires_grad=True)
        mel = torch.randn(2, 10, 80)
        g, h_g = enc.encode_global(mel)
        h_l = enc.hidden_features(h_text, g.z)
        local, _ = enc.encode_local(h_l, h_g)
        mu_hat = enc.predict_local_mean(h_l)
        loss = prosody.posterior_mean_loss(local.mu.detach(), mu_hat)
        loss.backward()
        assert h_text.grad is None or h_text.grad.abs().sum() == 0
        for name, p in enc.named_parameters():
            inside = name.startswith("mean_predictor")
            has_grad = p.grad is not None and p.grad.abs().sum() > 0
            if inside:
                continue  # some predictor params may legitimately be zero-grad
            assert not has_grad, f"{name} got gradient from the posterior-mean loss"
        grads = [
            p.grad.abs().sum().item()
            for name, p in enc.named_parameters()
            if name.startswith("mean_predictor") and p.grad is not None
        ]
        assert sum(grads) > 0


class TestVariantComposition:
    def test_local_only_has_no_global_head(self):
        enc, _ = make_encoder(use_global=False, condition_local_on_global=False)
        keys = list(enc.state_dict().keys())
        assert not any(k.startswith("global_posterior") for k in keys)
        assert any(k.startswith("local_posterior") for k in keys)

    def test_global_only_has_no_local_machinery(self):
        enc, _ = make_encoder(use_local=False)
        keys = list(enc.state_dict().keys())
        assert not any("local" in k or "hidden_encoder" in k or "mean_predictor" in k for k in keys)

    def test_local_only_consumes_text_alone(self):
        enc, cfg = make_encoder(use_global=False, condition_local_on_global=False)
        h_text = torch.randn(1, 5, cfg.d_model)
        h_l = enc.hidden_features(h_text, None)
        assert h_l.shape == (1, 5, cfg.d_enc)

    def test_no_scales_rejected(self):
        cfg = tiny_model_config()
        with pytest.raises(ValueError):
            prosody.ProsodyEncoder(cfg, d_text=cfg.d_model, use_global=False, use_local=False)
