import numpy as np
import pytest
import torch

from avqvc.conversion import (
    ConversionResult,
    convert,
    convert_utterance,
    griffin_lim,
    mel_to_linear,
    save_wav,
    synthesize_waveform,
)
from avqvc.errors import DataError, ShapeError
from avqvc.frontend import (
    AudioClip,
    FeatureCorpus,
    FeatureStats,
    FrontendConfig,
    Utterance,
    band_centers,
    compute_mel,
    load_audio,
)
from avqvc.model import build_model

from conftest import MICRO_MODEL


@pytest.fixture()
def model():
    return build_model(MICRO_MODEL)


def _features(t, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(t, MICRO_MODEL.n_mels))


def test_convert_to_self_is_self_reconstruction(model):
    x = _features(18)
    out = convert(model, x, x)
    with torch.no_grad():
        expect = model.self_reconstruct(x).numpy()
    assert np.array_equal(out, expect)


def test_converted_output_tracks_source_length(model):
    src = _features(20, seed=1)
    tgt = _features(35, seed=2)
    out = convert(model, src, tgt)
    assert out.shape == (20, MICRO_MODEL.n_mels)
    assert out.dtype == np.float64


def test_convert_validates_shapes(model):
    with pytest.raises(ShapeError):
        convert(model, _features(10), np.zeros((5, MICRO_MODEL.n_mels + 2)))
    with pytest.raises(ShapeError):
        convert(model, np.zeros(7), _features(10))


def test_convert_utterance_normalization_round_trip(model):
    rng = np.random.default_rng(3)
    items = [Utterance("a", f"u{i}", rng.normal(loc=2.0, size=(25, MICRO_MODEL.n_mels)))
             for i in range(3)]
    stats = FeatureStats.from_corpus(FeatureCorpus(items=items))
    src, tgt = items[0], items[1]
    result = convert_utterance(model, src, tgt, stats=stats)
    manual = stats.invert(convert(model, stats.apply(src.features),
                                  stats.apply(tgt.features)))
    assert np.array_equal(result.features, manual)
    assert result.source_speaker == "a" and result.target_speaker == "a"
    raw = convert_utterance(model, src, tgt, stats=None)
    assert np.array_equal(raw.features, convert(model, src.features, tgt.features))
    assert isinstance(result, ConversionResult) and result.waveform is None


def test_mel_to_linear_shapes_and_validation():
    config = FrontendConfig()
    rng = np.random.default_rng(0)
    mags = mel_to_linear(rng.normal(size=(4, config.n_mels)), config)
    assert mags.shape == (4, config.fft_size // 2 + 1)
    assert np.all(mags >= 0.0)
    with pytest.raises(ShapeError):
        mel_to_linear(rng.normal(size=(4, config.n_mels + 1)), config)


def test_waveform_length_follows_frame_count():
    config = FrontendConfig()
    rng = np.random.default_rng(1)
    log_mel = rng.normal(scale=0.5, size=(8, config.n_mels))
    wav = synthesize_waveform(log_mel, config, n_iters=2)
    assert wav.shape == ((8 - 1) * config.hop_size,)


def test_all_floor_frames_synthesize_silence_with_warning():
    config = FrontendConfig()
    log_mel = np.full((6, config.n_mels), np.log(config.log_floor))
    with pytest.warns(RuntimeWarning, match="log floor"):
        wav = synthesize_waveform(log_mel, config, n_iters=2)
    assert np.max(np.abs(wav)) < 1e-3


def test_tone_survives_analysis_synthesis_round_trip():
    config = FrontendConfig()
    sr = config.sample_rate
    t = np.arange(int(sr * 0.3)) / sr
    tone = 0.5 * np.sin(2 * np.pi * 1000.0 * t)
    clip = AudioClip(samples=tone, sample_rate=sr, speaker_id="s", utterance_id="u")
    mel = compute_mel(clip, config)
    wav = synthesize_waveform(mel.frames, config, n_iters=5)
    spectrum = np.abs(np.fft.rfft(wav))
    freqs = np.fft.rfftfreq(len(wav), d=1.0 / sr)
    peak = freqs[int(np.argmax(spectrum))]
    centers = band_centers(config)
    k = int(np.argmin(np.abs(centers - 1000.0)))
    band_width = centers[k + 1] - centers[k]
    assert abs(peak - 1000.0) <= band_width


def test_griffin_lim_is_deterministic():
    config = FrontendConfig()
    rng = np.random.default_rng(2)
    mags = np.abs(rng.normal(size=(5, config.fft_size // 2 + 1)))
    a = griffin_lim(mags, config, n_iters=3)
    b = griffin_lim(mags, config, n_iters=3)
    assert np.array_equal(a, b)


def test_save_wav_round_trip(tmp_path):
    sr = 16000
    t = np.arange(4000) / sr
    wav = 0.4 * np.sin(2 * np.pi * 440.0 * t)
    out = tmp_path / "s" / "tone.wav"
    out.parent.mkdir()
    save_wav(out, wav, sample_rate=sr)
    clip = load_audio(out)
    assert clip.sample_rate == sr
    assert np.allclose(clip.samples, wav, atol=1.0 / 32767 + 1e-9)


def test_save_wav_rejects_bad_input(tmp_path):
    with pytest.raises(DataError):
        save_wav(tmp_path / "x.wav", np.zeros((10, 2)))
    with pytest.raises(DataError):
        save_wav(tmp_path / "x.wav", np.zeros(0))


def test_trained_conversion_moves_toward_target_speaker(trained_avqvc, synth_corpus,
                                                        corpus_split):
    model = trained_avqvc.model
    _, held = corpus_split
    by = held.by_speaker()
    speakers = held.speakers
    hits = 0
    total = 0
    for src_spk, tgt_spk in [(speakers[0], speakers[1]), (speakers[2], speakers[3])]:
        for src in by[src_spk][:2]:
            tgt = by[tgt_spk][0]
            out = convert(model, src.features, tgt.features)
            want = synth_corpus.render(src.utterance_id, tgt_spk).mean(axis=0)
            stay = src.features.mean(axis=0)
            got = out.mean(axis=0)
            total += 1
            if np.linalg.norm(got - want) < np.linalg.norm(got - stay):
                hits += 1
    assert hits == total
