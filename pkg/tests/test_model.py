import numpy as np
import pytest
import torch

from avqvc.errors import ConfigError, ShapeError
from avqvc.model import (
    ModelConfig,
    VoiceConversionModel,
    build_model,
    count_parameters,
)
from avqvc.vq import quantize

from conftest import MICRO_MODEL


def _features(t, n_mels, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(t, n_mels))


@pytest.fixture()
def model():
    return build_model(MICRO_MODEL)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(kernel_size=4)  # even kernels shift frame alignment
    with pytest.raises(ConfigError):
        ModelConfig(latent_dim=0)
    with pytest.raises(ConfigError):
        ModelConfig(encoder_depth=0)
    c = ModelConfig(n_mels=12, latent_dim=8)
    assert ModelConfig.from_dict(c.to_dict()) == c


def test_everything_runs_in_float64(model):
    assert all(p.dtype == torch.float64 for p in model.parameters())
    out = model.encode(_features(9, MICRO_MODEL.n_mels))
    assert out.dtype == torch.float64


def test_construction_is_deterministic():
    a = build_model(MICRO_MODEL)
    b = build_model(MICRO_MODEL)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    different = build_model(ModelConfig(**{**MICRO_MODEL.to_dict(), "seed": 1}))
    assert not all(
        torch.equal(pa, pb)
        for pa, pb in zip(a.parameters(), different.parameters())
    )


def test_speaker_is_time_mean_of_residual(model):
    bundle = model.decompose(_features(17, MICRO_MODEL.n_mels))
    residual = (bundle.latents - bundle.quantized).mean(dim=0)
    assert torch.allclose(bundle.speaker, residual, atol=1e-15)


def test_quantized_rows_are_codebook_entries(model):
    bundle = model.decompose(_features(12, MICRO_MODEL.n_mels))
    entries = model.codebook.detach().numpy()
    q = bundle.quantized.detach().numpy()
    for t, idx in enumerate(bundle.indices):
        assert q[t].tobytes() == entries[idx].tobytes()


def test_content_equals_quantized_in_value(model):
    bundle = model.decompose(_features(12, MICRO_MODEL.n_mels))
    assert torch.equal(bundle.content, bundle.quantized)


@pytest.mark.parametrize("t", [1, 2, 7, 33])
def test_any_length_round_trips(model, t):
    x = _features(t, MICRO_MODEL.n_mels, seed=t)
    bundle = model.decompose(x)
    assert bundle.latents.shape == (t, MICRO_MODEL.latent_dim)
    assert bundle.indices.shape == (t,)
    assert bundle.speaker.shape == (MICRO_MODEL.latent_dim,)
    y = model.self_reconstruct(x)
    assert y.shape == (t, MICRO_MODEL.n_mels)


def test_reordering_latent_frames_keeps_speaker(model):
    bundle = model.decompose(_features(20, MICRO_MODEL.n_mels))
    rng = np.random.default_rng(1)
    perm = rng.permutation(20)
    latents_p = bundle.latents[perm]
    result = quantize(latents_p.detach(), model.codebook.detach())
    speaker_p = (latents_p - result.quantized).mean(dim=0)
    assert torch.allclose(speaker_p, bundle.speaker, atol=1e-12)
    assert np.array_equal(result.indices, bundle.indices[perm])


def test_constant_residual_is_recovered_exactly(model):
    entries = model.codebook.detach()
    k = entries.shape[0]
    gaps = torch.cdist(entries, entries) + torch.eye(k) * 1e9
    half_gap = float(gaps.min()) / 2.0
    rng = np.random.default_rng(2)
    direction = rng.normal(size=entries.shape[1])
    c = torch.from_numpy(direction / np.linalg.norm(direction)) * (half_gap / 2)
    idx = np.array([0, 3, 1, 3, 2, 0])
    latents = entries[idx] + c[None, :]
    result = quantize(latents, entries)
    assert np.array_equal(result.indices, idx)
    speaker = (latents - result.quantized).mean(dim=0)
    assert torch.allclose(speaker, c, atol=1e-12)


def test_zeroed_projection_gives_zero_latents(model):
    proj = model.encoder.net[-1]
    with torch.no_grad():
        proj.weight.zero_()
        proj.bias.zero_()
    latents = model.encode(_features(10, MICRO_MODEL.n_mels))
    assert torch.equal(latents, torch.zeros_like(latents))
    # speaker embedding is then -mean(quantized) of the all-ties entry
    bundle = model.decompose(_features(10, MICRO_MODEL.n_mels))
    assert np.all(bundle.indices == bundle.indices[0])


def test_decoder_consumes_content_plus_broadcast_speaker(model):
    x = _features(11, MICRO_MODEL.n_mels)
    bundle = model.decompose(x)
    seen = {}

    def tap(module, args):
        seen["input"] = args[0].detach().clone()

    handle = model.decoder.register_forward_pre_hook(tap)
    try:
        model.decode(bundle.content, bundle.speaker)
    finally:
        handle.remove()
    expect = (bundle.content + bundle.speaker[None, :]).detach()
    assert torch.equal(seen["input"].squeeze(0), expect)


def test_decode_additivity(model):
    x = _features(8, MICRO_MODEL.n_mels)
    bundle = model.decompose(x)
    merged = model.decode(
        (bundle.content + bundle.speaker[None, :]).detach(),
        torch.zeros(MICRO_MODEL.latent_dim, dtype=torch.float64),
    )
    split = model.decode(bundle.content, bundle.speaker)
    assert torch.equal(merged, split.detach())


def test_self_reconstruct_matches_manual_path(model):
    x = _features(14, MICRO_MODEL.n_mels)
    bundle = model.decompose(x)
    manual = model.decode(bundle.content, bundle.speaker)
    assert torch.equal(model.self_reconstruct(x), manual)


def test_batch_and_single_paths_agree(model):
    x = _features(13, MICRO_MODEL.n_mels)
    single = model.decompose(x)
    batch = torch.from_numpy(np.stack([x, x]))
    latents, indices, quantized, content, speaker = model.decompose_batch(batch)
    assert torch.equal(latents[0], single.latents)
    assert np.array_equal(indices[0], single.indices)
    assert torch.equal(speaker[0], single.speaker)
    assert torch.equal(speaker[0], speaker[1])


def test_shape_errors(model):
    with pytest.raises(ShapeError):
        model.encode(_features(5, MICRO_MODEL.n_mels + 1))
    with pytest.raises(ShapeError):
        model.encode(np.zeros(10))
    with pytest.raises(ShapeError):
        model.decode(torch.zeros(5, MICRO_MODEL.latent_dim, dtype=torch.float64),
                     torch.zeros(1, MICRO_MODEL.latent_dim, dtype=torch.float64))
    with pytest.raises(ShapeError):
        model.decode_batch(torch.zeros(5, MICRO_MODEL.latent_dim, dtype=torch.float64),
                           torch.zeros(MICRO_MODEL.latent_dim, dtype=torch.float64))


def test_full_scale_parameter_count():
    model = VoiceConversionModel(ModelConfig.full_scale())
    n = count_parameters(model)
    assert 2_000_000 < n < 20_000_000


def test_count_parameters_micro(model):
    total = sum(p.numel() for p in model.parameters())
    assert count_parameters(model) == total
    assert any(p is model.codebook for p in model.parameters())
