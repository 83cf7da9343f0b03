"""Sampling mode contracts, determinism, and synthesis outputs."""

import json

import numpy as np
import pytest
import scipy.io.wavfile
import torch

from conftest import build_corpus, tiny_model_config
from latentspeech import data
from latentspeech.errors import (
    ConfigError,
    DataError,
    DegenerateOutputError,
    VocabularyError,
)
from latentspeech.model import build_variant
from latentspeech.synthesis import SamplingSpec, Synthesizer, sample_prior
from latentspeech.training import Trainer

N_SYMBOLS = 8


def make_model(variant="himuv", seed=0):
    torch.manual_seed(seed)
    model = build_variant(variant, tiny_model_config(), N_SYMBOLS)
    return model.eval()


def text_hidden(model, n_phones=5, seed=1):
    gen = torch.Generator().manual_seed(seed)
    ids = torch.randint(1, N_SYMBOLS, (1, n_phones), generator=gen)
    with torch.no_grad():
        return model.text_encoder(ids)


def draw(model, h, spec, seed=None):
    if seed is not None:
        spec.seed = seed
    gen = torch.Generator().manual_seed(spec.seed)
    with torch.no_grad():
        return sample_prior(model, h, spec, gen)


class TestSamplingSpec:
    def test_default_is_valid(self):
        SamplingSpec().validate()

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError, match="mode"):
            SamplingSpec(mode="both").validate()

    def test_negative_tau_rejected(self):
        with pytest.raises(ConfigError, match="tau"):
            SamplingSpec(tau=-0.5).validate()

    def test_negative_tau_override_rejected(self):
        with pytest.raises(ConfigError, match="tau_l"):
            SamplingSpec(tau_l=-1.0).validate()

    def test_fixed_latent_in_full_mode_rejected(self):
        spec = SamplingSpec(mode="full", fixed_z_g=np.zeros(8, dtype=np.float32))
        with pytest.raises(ConfigError, match="full"):
            spec.validate()

    def test_resolved_taus_full(self):
        assert SamplingSpec(mode="full", tau=0.7).resolved_taus() == (0.7, 0.7)

    def test_resolved_taus_overrides(self):
        spec = SamplingSpec(mode="full", tau=1.0, tau_g=0.2, tau_l=0.9)
        assert spec.resolved_taus() == (0.2, 0.9)

    def test_resolved_taus_frozen_scales(self):
        assert SamplingSpec(mode="global_only", tau=1.0).resolved_taus() == (1.0, 0.0)
        assert SamplingSpec(mode="local_only", tau=1.0).resolved_taus() == (0.0, 1.0)
        assert SamplingSpec(mode="none", tau=1.0).resolved_taus() == (0.0, 0.0)


class TestSamplePrior:
    def test_zero_temperature_full_is_deterministic_baseline(self):
        # tau=0 collapses full mode onto z^g = 0 and z^l = predicted mean
        model = make_model()
        h = text_hidden(model)
        z, audit = draw(model, h, SamplingSpec(mode="full", tau=0.0, seed=3))
        z_g = torch.tensor(audit["z_g"])
        z_l = torch.tensor(audit["z_l"])
        assert torch.all(z_g == 0)
        with torch.no_grad():
            mu_hat = model.local_prior_mean(h, torch.zeros(1, model.config.latent_global_dim))
        assert torch.allclose(z_l, mu_hat.squeeze(0))
        assert audit["z_g_source"] == "zero"
        assert audit["z_l_source"] == "predicted_mean"

    def test_assembled_width_and_layout(self):
        model = make_model()
        h = text_hidden(model, n_phones=4)
        z, audit = draw(model, h, SamplingSpec(mode="full", tau=1.0, seed=0))
        assert z.shape == (1, 4, model.config.latent_dim)
        z_g = torch.tensor(audit["z_g"])
        # global slice is replicated across steps, local slice is per step
        for n in range(4):
            assert torch.allclose(z[0, n, : model.config.latent_global_dim], z_g)

    def test_same_seed_same_draw(self):
        model = make_model()
        h = text_hidden(model)
        _, audit_a = draw(model, h, SamplingSpec(mode="full", tau=1.0), seed=11)
        _, audit_b = draw(model, h, SamplingSpec(mode="full", tau=1.0), seed=11)
        assert audit_a["z_g"] == audit_b["z_g"]
        assert audit_a["z_l"] == audit_b["z_l"]

    def test_different_seed_different_draw(self):
        model = make_model()
        h = text_hidden(model)
        _, audit_a = draw(model, h, SamplingSpec(mode="full", tau=1.0), seed=1)
        _, audit_b = draw(model, h, SamplingSpec(mode="full", tau=1.0), seed=2)
        assert audit_a["z_g"] != audit_b["z_g"]
        assert audit_a["z_l"] != audit_b["z_l"]

    def test_global_only_local_record_is_seed_invariant(self):
        model = make_model()
        h = text_hidden(model)
        audits = [
            draw(model, h, SamplingSpec(mode="global_only", tau=1.0), seed=s)[1]
            for s in range(6)
        ]
        local_records = {json.dumps(a["z_l"]) for a in audits}
        global_records = {json.dumps(a["z_g"]) for a in audits}
        assert len(local_records) == 1
        assert len(global_records) == 6
        assert all(a["z_l_source"] == "predicted_mean" for a in audits)
        assert all(a["z_g_source"] == "sampled" for a in audits)

    def test_global_only_honors_fixed_local(self):
        model = make_model()
        h = text_hidden(model, n_phones=5)
        fixed = np.full((5, model.config.latent_local_dim), 0.25, dtype=np.float32)
        z, audit = draw(model, h, SamplingSpec(mode="global_only", tau=1.0, fixed_z_l=fixed), seed=0)
        assert audit["z_l_source"] == "fixed"
        assert np.allclose(np.array(audit["z_l"]), fixed)
        assert torch.allclose(z[0, :, model.config.latent_global_dim :], torch.tensor(fixed))

    def test_local_only_global_frozen_at_zero(self):
        model = make_model()
        h = text_hidden(model)
        audits = [
            draw(model, h, SamplingSpec(mode="local_only", tau=1.0), seed=s)[1]
            for s in range(4)
        ]
        assert all(np.allclose(a["z_g"], 0.0) for a in audits)
        assert all(a["z_g_source"] == "zero" for a in audits)
        assert len({json.dumps(a["z_l"]) for a in audits}) == 4

    def test_local_only_fixed_global_conditions_the_mean(self):
        model = make_model()
        h = text_hidden(model)
        fixed = np.ones(model.config.latent_global_dim, dtype=np.float32)
        _, audit_zero = draw(model, h, SamplingSpec(mode="local_only", tau=0.0), seed=0)
        _, audit_ones = draw(
            model, h, SamplingSpec(mode="local_only", tau=0.0, fixed_z_g=fixed), seed=0
        )
        assert audit_ones["z_g_source"] == "fixed"
        assert np.allclose(audit_ones["z_g"], 1.0)
        # conditioning on a different z^g moves the predicted local mean
        assert audit_zero["z_l"] != audit_ones["z_l"]

    def test_none_mode_is_fully_deterministic(self):
        model = make_model()
        h = text_hidden(model)
        _, audit_a = draw(model, h, SamplingSpec(mode="none", tau=5.0), seed=1)
        _, audit_b = draw(model, h, SamplingSpec(mode="none", tau=5.0), seed=99)
        assert audit_a["z_g"] == audit_b["z_g"]
        assert audit_a["z_l"] == audit_b["z_l"]
        assert audit_a["tau_g"] == 0.0 and audit_a["tau_l"] == 0.0

    def test_audit_carries_spec_fields(self):
        model = make_model()
        h = text_hidden(model)
        _, audit = draw(model, h, SamplingSpec(mode="full", tau=0.5, seed=7))
        assert audit["mode"] == "full"
        assert audit["tau"] == 0.5
        assert audit["seed"] == 7
        assert audit["tau_g"] == 0.5 and audit["tau_l"] == 0.5

    def test_global_component_sd_matches_tau(self):
        # pooled z^g entries across draws: sample SD within 3 SE of tau
        model = make_model()
        h = text_hidden(model)
        values = []
        for s in range(300):
            _, audit = draw(model, h, SamplingSpec(mode="global_only", tau=1.0), seed=s)
            values.extend(audit["z_g"])
        sd = np.std(values, ddof=1)
        se = 1.0 / np.sqrt(2 * (len(values) - 1))
        assert abs(sd - 1.0) <= 3 * se

    def test_gvae_has_no_local_record(self):
        model = make_model("gvae")
        h = text_hidden(model)
        z, audit = draw(model, h, SamplingSpec(mode="full", tau=1.0), seed=0)
        assert z.shape[-1] == model.config.latent_global_dim
        assert audit["z_l"] is None and audit["z_l_source"] == "absent"

    def test_gvae_rejects_local_only(self):
        model = make_model("gvae")
        h = text_hidden(model)
        with pytest.raises(ConfigError, match="local"):
            draw(model, h, SamplingSpec(mode="local_only", tau=1.0), seed=0)

    def test_lvae_has_no_global_record(self):
        model = make_model("lvae")
        h = text_hidden(model)
        z, audit = draw(model, h, SamplingSpec(mode="full", tau=1.0), seed=0)
        assert z.shape[-1] == model.config.latent_local_dim
        assert audit["z_g"] is None and audit["z_g_source"] == "absent"

    def test_lvae_rejects_global_only(self):
        model = make_model("lvae")
        h = text_hidden(model)
        with pytest.raises(ConfigError, match="global"):
            draw(model, h, SamplingSpec(mode="global_only", tau=1.0), seed=0)

    def test_backbone_yields_no_latents(self):
        model = make_model("backbone")
        h = text_hidden(model)
        z, audit = draw(model, h, SamplingSpec(mode="full", tau=1.0), seed=0)
        assert z is None
        assert audit["z_g_source"] == "absent" and audit["z_l_source"] == "absent"

    def test_fixed_shape_mismatch_rejected(self):
        model = make_model()
        h = text_hidden(model, n_phones=5)
        bad = np.zeros((3, model.config.latent_local_dim), dtype=np.float32)
        with pytest.raises(ConfigError, match="shape"):
            draw(model, h, SamplingSpec(mode="global_only", tau=1.0, fixed_z_l=bad), seed=0)


@pytest.fixture(scope="module")
def toy_checkpoint(tmp_path_factory):
    """A briefly trained checkpoint plus its corpus vocabulary."""
    root = tmp_path_factory.mktemp("synth")
    manifest = build_corpus(root / "corpus", n_utterances=4)
    config = tiny_model_config(
        adversarial=False,
        total_steps=20,
        checkpoint_every=20,
        warmup_steps=5,
        kl_ramp_start=2,
        kl_ramp_end=10,
        log_every=10,
    )
    data.preprocess_corpus(manifest, root / "cache", config)
    cache = data.CorpusCache(root / "cache")
    trainer = Trainer(config, cache, root / "run")
    trainer.train(steps=3)
    # an untrained predictor rounds every duration to zero; nudge the bias so
    # synthesis mechanics are testable without a long fit
    with torch.no_grad():
        trainer.model.duration_predictor.projection.bias.fill_(1.2)
    path = trainer.save(root / "run" / "ckpt.pt")
    trainer.close()
    return path


@pytest.fixture(scope="module")
def synthesizer(toy_checkpoint):
    return Synthesizer.from_checkpoint(toy_checkpoint)


TEXT = "AA B IY K"


class TestSynthesizer:
    def test_output_shapes_are_consistent(self, synthesizer):
        result = synthesizer.synthesize(TEXT, SamplingSpec(mode="full", tau=1.0, seed=0))
        n = len(TEXT.split())
        assert result.mel.shape == (result.n_frames, synthesizer.config.n_mels)
        assert result.mel.dtype == np.float32
        assert result.durations.shape == (n,)
        assert result.n_frames == int(result.durations.sum())
        assert result.pitch.shape == (n,) and result.pitch_hz.shape == (n,)

    def test_zero_temperature_ignores_seed(self, synthesizer):
        spec_a = SamplingSpec(mode="full", tau=0.0, seed=1)
        spec_b = SamplingSpec(mode="full", tau=0.0, seed=999)
        a = synthesizer.synthesize(TEXT, spec_a)
        b = synthesizer.synthesize(TEXT, spec_b)
        assert np.array_equal(a.mel, b.mel)
        assert np.array_equal(a.durations, b.durations)
        assert np.array_equal(a.pitch, b.pitch)

    def test_same_seed_bitwise_identical(self, synthesizer):
        spec = SamplingSpec(mode="full", tau=1.0, seed=42)
        a = synthesizer.synthesize(TEXT, spec)
        b = synthesizer.synthesize(TEXT, spec)
        assert np.array_equal(a.mel, b.mel)

    def test_reload_reproduces_bitwise(self, toy_checkpoint, synthesizer):
        # a second load from the same file stands in for a process restart
        again = Synthesizer.from_checkpoint(toy_checkpoint)
        spec = SamplingSpec(mode="full", tau=1.0, seed=5)
        assert np.array_equal(
            synthesizer.synthesize(TEXT, spec).mel, again.synthesize(TEXT, spec).mel
        )

    def test_different_seeds_differ(self, synthesizer):
        a = synthesizer.synthesize(TEXT, SamplingSpec(mode="full", tau=1.0, seed=1))
        b = synthesizer.synthesize(TEXT, SamplingSpec(mode="full", tau=1.0, seed=2))
        assert not np.array_equal(a.mel, b.mel)

    def test_empty_text_rejected(self, synthesizer):
        with pytest.raises(DataError, match="empty"):
            synthesizer.synthesize("   ", SamplingSpec())

    def test_unknown_symbol_rejected(self, synthesizer):
        with pytest.raises(VocabularyError, match="ZZ"):
            synthesizer.synthesize("AA ZZ", SamplingSpec())

    def test_all_zero_durations_raise(self):
        model = make_model()
        with torch.no_grad():
            model.duration_predictor.projection.weight.zero_()
            model.duration_predictor.projection.bias.fill_(-5.0)
        synth = Synthesizer(model, {"AA": 1, "B": 2}, 0.0, 1.0, True)
        with pytest.raises(DegenerateOutputError, match="zero"):
            synth.synthesize("AA B", SamplingSpec(mode="none"))

    def test_pitch_denormalization_uses_stats(self):
        model = make_model()
        synth = Synthesizer(model, {"AA": 1}, pitch_mean=100.0, pitch_sd=20.0, normalize_pitch=True)
        out = synth.denormalize_pitch(np.array([0.0, 1.0, -0.5], dtype=np.float32))
        assert np.allclose(out, [100.0, 120.0, 90.0])

    def test_pitch_passthrough_when_unnormalized(self):
        model = make_model()
        synth = Synthesizer(model, {"AA": 1}, pitch_mean=100.0, pitch_sd=20.0, normalize_pitch=False)
        raw = np.array([180.0, 0.0], dtype=np.float32)
        assert np.array_equal(synth.denormalize_pitch(raw), raw)

    def test_write_sample_outputs(self, synthesizer, tmp_path):
        result = synthesizer.synthesize(TEXT, SamplingSpec(mode="full", tau=1.0, seed=3))
        paths = synthesizer.write_sample(result, tmp_path, "sample000")
        assert paths["mel"].name == "sample000_mel.npy"
        assert np.array_equal(np.load(paths["mel"]), result.mel)
        sidecar = json.loads(paths["sidecar"].read_text())
        assert sidecar["n_frames"] == result.n_frames
        assert sidecar["hop_length"] == synthesizer.config.hop_length
        assert sidecar["sample_rate"] == synthesizer.config.sample_rate
        assert sidecar["durations"] == result.durations.tolist()
        assert len(sidecar["pitch"]) == len(TEXT.split())
        assert sidecar["pitch_hz"] == [float(v) for v in result.pitch_hz]
        assert sidecar["audit"]["mode"] == "full"
        assert sidecar["audit"]["seed"] == 3
        assert "wav" not in paths

    def test_write_sample_with_wav(self, synthesizer, tmp_path):
        result = synthesizer.synthesize(TEXT, SamplingSpec(mode="full", tau=0.0, seed=0))
        paths = synthesizer.write_sample(result, tmp_path, "s", wav_iterations=4)
        rate, wav = scipy.io.wavfile.read(paths["wav"])
        assert rate == synthesizer.config.sample_rate
        assert len(wav) == (result.n_frames - 1) * synthesizer.config.hop_length

    def test_checkpoint_carries_corpus_vocab(self, synthesizer):
        from conftest import PHONES

        assert sorted(synthesizer.vocab) == sorted(PHONES)
