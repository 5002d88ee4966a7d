import json
import re
import subprocess
import sys

import numpy as np
import pytest
from scipy.io import wavfile

from avqvc.cli import main, read_config, split_speakers
from avqvc.errors import ConfigError
from avqvc.frontend import load_corpus
from avqvc.training import load_checkpoint

FAST_CFG = """
# integration-sized settings
corpus.n_speakers = 3
corpus.utterances_per_speaker = 10
corpus.feature_dim = 16
corpus.frames_per_utterance = 24
corpus.n_symbols = 4

model.latent_dim = 4
model.codebook_size = 5
model.encoder_width = 8
model.encoder_depth = 1
model.decoder_width = 8
model.decoder_depth = 1
model.kernel_size = 3

train.steps = 5
train.batch_size = 4
train.segment_len = 16
train.learning_rate = 1e-3
train.log_every = 100
"""


@pytest.fixture()
def cfg(tmp_path):
    path = tmp_path / "fast.cfg"
    path.write_text(FAST_CFG)
    return path


def _manifest(path):
    return json.loads(path.read_text())


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    assert "prepare" in out and "sweep" in out
    assert "train.steps" in out  # config keys are documented
    assert "AVQVC_CACHE_ROOT" in out


def test_installed_entry_point_runs():
    proc = subprocess.run(["avqvc", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "0.1.0" in proc.stdout


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == 1


def test_unknown_config_key_names_the_key(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.steps = 5\nmodel.depth = 3\n")
    code = main(["synth-corpus", "--config", str(bad), "--out", str(tmp_path / "c")])
    assert code == 1
    err = capsys.readouterr().err
    assert "model.depth" in err and "bad.cfg:2" in err


def test_config_parsing_details(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\ntrain.steps= 12\ncorpus.offset_scale =0.25\n")
    raw = read_config(path)
    assert raw == {"train.steps": "12", "corpus.offset_scale": "0.25"}
    missing = tmp_path / "absent.cfg"
    with pytest.raises(ConfigError):
        read_config(missing)
    malformed = tmp_path / "m.cfg"
    malformed.write_text("just words\n")
    with pytest.raises(ConfigError):
        read_config(malformed)


def test_missing_corpus_is_data_error(tmp_path):
    code = main(["train", "--corpus", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "m.ckpt")])
    assert code == 2


def test_convert_missing_source_is_data_error(tmp_path, cfg, capsys):
    corpus_dir = tmp_path / "corpus"
    ckpt = tmp_path / "m.ckpt"
    assert main(["synth-corpus", "--config", str(cfg), "--out", str(corpus_dir)]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--out", str(ckpt)]) == 0
    tgt = sorted(corpus_dir.glob("*/*.npy"))[0]
    code = main(["convert", "--ckpt", str(ckpt),
                 "--source", str(tmp_path / "absent.npy"),
                 "--target", str(tgt), "--out", str(tmp_path / "out.npy")])
    assert code == 2
    assert "absent.npy" in capsys.readouterr().err


def test_convert_rejects_unknown_output_extension(tmp_path, cfg, capsys):
    corpus_dir = tmp_path / "corpus"
    ckpt = tmp_path / "m.ckpt"
    assert main(["synth-corpus", "--config", str(cfg), "--out", str(corpus_dir)]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--out", str(ckpt)]) == 0
    src = sorted(corpus_dir.glob("*/*.npy"))[0]
    code = main(["convert", "--ckpt", str(ckpt), "--source", str(src),
                 "--target", str(src), "--out", str(tmp_path / "out.txt")])
    assert code == 1


def test_full_pipeline_and_idempotence(tmp_path, cfg, capsys):
    corpus_dir = tmp_path / "corpus"
    ckpt = tmp_path / "run" / "model.ckpt"
    out_npy = tmp_path / "converted.npy"
    report = tmp_path / "report.json"
    sweep_dir = tmp_path / "sweep"

    assert main(["synth-corpus", "--config", str(cfg), "--out", str(corpus_dir)]) == 0
    assert (corpus_dir / "corpus.json").is_file()
    assert (corpus_dir / "manifest.json").is_file()

    assert main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--out", str(ckpt)]) == 0
    assert ckpt.is_file()
    metrics = ckpt.with_name(ckpt.name + ".metrics.log")
    assert len(metrics.read_text().splitlines()) == 5  # one line per step
    manifest = _manifest(ckpt.with_name(ckpt.name + ".manifest.json"))
    assert manifest["command"] == "train"
    assert manifest["config"]["train"]["steps"] == 5
    assert manifest["config"]["model"]["n_mels"] == 16  # follows corpus dim

    corpus = load_corpus(corpus_dir)
    utts = sorted(corpus_dir.glob("*/*.npy"))
    src, tgt = str(utts[0]), str(utts[-1])
    assert main(["convert", "--ckpt", str(ckpt), "--source", src,
                 "--target", tgt, "--out", str(out_npy)]) == 0
    converted = np.load(out_npy)
    assert converted.shape == (24, 16)

    assert main(["eval", "--ckpt", str(ckpt), "--corpus", str(corpus_dir),
                 "--out", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert "disentanglement" in payload
    assert -2.0 <= payload["disentanglement"]["separation"] <= 2.0

    assert main(["sweep", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--sizes", "3,5", "--out", str(sweep_dir)]) == 0
    tsv = (sweep_dir / "sweep.tsv").read_text()
    assert tsv.splitlines()[1].startswith("3\t")
    assert len(tsv.splitlines()) == 3

    # byte-identical artifacts when the same commands run again
    capsys.readouterr()
    before = {p: p.read_bytes() for p in [ckpt, metrics, out_npy, report,
                                          sweep_dir / "sweep.tsv",
                                          sweep_dir / "sweep.json"]}
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--out", str(ckpt)]) == 0
    assert main(["convert", "--ckpt", str(ckpt), "--source", src,
                 "--target", tgt, "--out", str(out_npy)]) == 0
    assert main(["eval", "--ckpt", str(ckpt), "--corpus", str(corpus_dir),
                 "--out", str(report)]) == 0
    assert main(["sweep", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--sizes", "3,5", "--out", str(sweep_dir)]) == 0
    for p, blob in before.items():
        assert p.read_bytes() == blob, f"{p} changed across identical runs"


def test_resume_via_cli_appends_metrics(tmp_path, cfg):
    corpus_dir = tmp_path / "corpus"
    ckpt = tmp_path / "m.ckpt"
    assert main(["synth-corpus", "--config", str(cfg), "--out", str(corpus_dir)]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--out", str(ckpt)]) == 0
    assert load_checkpoint(ckpt).step == 5
    metrics = ckpt.with_name(ckpt.name + ".metrics.log")
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--out", str(ckpt), "--resume", str(ckpt), "--steps", "8"]) == 0
    assert load_checkpoint(ckpt).step == 8
    lines = metrics.read_text().splitlines()
    assert len(lines) == 8
    assert [int(l.split()[0].split("=")[1]) for l in lines] == list(range(1, 9))


def test_eval_pair_mode(tmp_path, capsys):
    a = tmp_path / "a.npy"
    b = tmp_path / "b.npy"
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(20, 16))
    np.save(a, feats)
    np.save(b, feats)
    report = tmp_path / "r.json"
    assert main(["eval", "--reference", str(a), "--converted", str(b),
                 "--out", str(report)]) == 0
    assert json.loads(report.read_text())["mcd"] == 0.0
    assert main(["eval", "--reference", str(a), "--out", str(report)]) == 1
    assert main(["eval", "--out", str(report)]) == 1


def test_eval_holdout_mode(tmp_path, cfg):
    corpus_dir = tmp_path / "corpus"
    ckpt = tmp_path / "m.ckpt"
    report = tmp_path / "r.json"
    assert main(["synth-corpus", "--config", str(cfg), "--out", str(corpus_dir)]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--out", str(ckpt)]) == 0
    assert main(["eval", "--ckpt", str(ckpt), "--corpus", str(corpus_dir),
                 "--holdout", "--out", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert payload["disentanglement"]["n_pairs"] == 200


def _wav_tree(root, n_speakers=3, n_utts=2, seconds=0.3):
    rng = np.random.default_rng(0)
    sr = 16000
    for s in range(n_speakers):
        d = root / f"spk{s}"
        d.mkdir(parents=True)
        for u in range(n_utts):
            noise = np.clip(rng.normal(scale=0.2, size=int(sr * seconds)), -1, 1)
            wavfile.write(str(d / f"utt{u}.wav"), sr, (noise * 32767).astype(np.int16))


def test_prepare_builds_cache_and_splits(tmp_path, monkeypatch, capsys):
    data = tmp_path / "data"
    _wav_tree(data)
    cache_root = tmp_path / "cache_root"
    monkeypatch.setenv("AVQVC_CACHE_ROOT", str(cache_root))
    assert main(["prepare", "--data", str(data)]) == 0
    cache = cache_root / "data"
    assert cache.is_dir()
    splits = json.loads((cache / "splits.json").read_text())
    assert sorted(splits) == ["test", "train", "val"]
    all_assigned = splits["train"] + splits["val"] + splits["test"]
    assert sorted(all_assigned) == ["spk0", "spk1", "spk2"]
    assert (cache / "train_speakers.txt").read_text().splitlines() == splits["train"]
    corpus = load_corpus(cache)
    assert corpus.feature_dim == 80


def test_prepare_then_train_on_wav_features(tmp_path, monkeypatch):
    data = tmp_path / "data"
    _wav_tree(data, n_speakers=2, n_utts=2, seconds=0.4)
    cache = tmp_path / "cache"
    cfg = tmp_path / "t.cfg"
    cfg.write_text(
        "model.latent_dim = 4\nmodel.codebook_size = 4\nmodel.encoder_width = 8\n"
        "model.encoder_depth = 1\nmodel.decoder_width = 8\nmodel.decoder_depth = 1\n"
        "model.kernel_size = 3\ntrain.steps = 2\ntrain.batch_size = 2\n"
        "train.segment_len = 8\ntrain.log_every = 10\n"
    )
    assert main(["prepare", "--data", str(data), "--out", str(cache)]) == 0
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(cfg), "--corpus", str(cache),
                 "--out", str(ckpt)]) == 0
    loaded = load_checkpoint(ckpt)
    assert loaded.feature_stats is not None  # mel corpora are normalized
    assert loaded.frontend_config is not None
    assert loaded.model_config.n_mels == 80
    # conversion to waveform uses the stored frontend
    utts = sorted(cache.glob("*/*.npy"))
    out_wav = tmp_path / "conv.wav"
    assert main(["convert", "--ckpt", str(ckpt), "--source", str(utts[0]),
                 "--target", str(utts[-1]), "--out", str(out_wav)]) == 0
    assert out_wav.is_file() and out_wav.with_suffix(".npy").is_file()
    sr, samples = wavfile.read(str(out_wav))
    assert sr == 16000 and samples.ndim == 1 and len(samples) > 0


def test_convert_refuses_mismatched_frontend(tmp_path, monkeypatch):
    data = tmp_path / "data"
    _wav_tree(data, n_speakers=2, n_utts=2)
    cache = tmp_path / "cache"
    cfg = tmp_path / "t.cfg"
    cfg.write_text(
        "model.latent_dim = 4\nmodel.codebook_size = 4\nmodel.encoder_width = 8\n"
        "model.encoder_depth = 1\nmodel.decoder_width = 8\nmodel.decoder_depth = 1\n"
        "model.kernel_size = 3\ntrain.steps = 1\ntrain.batch_size = 2\n"
        "train.segment_len = 8\n"
    )
    assert main(["prepare", "--data", str(data), "--out", str(cache)]) == 0
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(cfg), "--corpus", str(cache),
                 "--out", str(ckpt)]) == 0
    clash = tmp_path / "clash.cfg"
    clash.write_text("frontend.n_mels = 40\n")
    utts = sorted(cache.glob("*/*.npy"))
    code = main(["convert", "--config", str(clash), "--ckpt", str(ckpt),
                 "--source", str(utts[0]), "--target", str(utts[1]),
                 "--out", str(tmp_path / "x.npy")])
    assert code == 2  # incompatible inputs are a data error


def test_manifests_differ_only_in_timestamps(tmp_path, cfg):
    corpus_dir = tmp_path / "corpus"
    assert main(["synth-corpus", "--config", str(cfg), "--out", str(corpus_dir)]) == 0
    first = _manifest(corpus_dir / "manifest.json")
    assert main(["synth-corpus", "--config", str(cfg), "--out", str(corpus_dir)]) == 0
    second = _manifest(corpus_dir / "manifest.json")
    for k in ("started_at", "finished_at"):
        assert re.match(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}", second[k])
        first.pop(k), second.pop(k)
    assert first == second


def test_seed_flag_overrides_config(tmp_path, cfg):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["synth-corpus", "--config", str(cfg), "--out", str(out_a),
                 "--seed", "7"]) == 0
    assert main(["synth-corpus", "--config", str(cfg), "--out", str(out_b),
                 "--seed", "8"]) == 0
    a = json.loads((out_a / "manifest.json").read_text())
    b = json.loads((out_b / "manifest.json").read_text())
    assert a["seed"] == 7 and b["seed"] == 8
    a_feats = np.load(sorted(out_a.glob("*/*.npy"))[0])
    b_feats = np.load(sorted(out_b.glob("*/*.npy"))[0])
    assert not np.array_equal(a_feats, b_feats)


# ---------------------------------------------------------------------------
# speaker split policy


def test_split_speakers_large_pool_uses_fixed_counts():
    speakers = [f"s{i:03d}" for i in range(109)]
    splits = split_speakers(speakers, seed=0)
    assert (len(splits["train"]), len(splits["val"]), len(splits["test"])) == (90, 10, 9)
    bigger = split_speakers([f"s{i:03d}" for i in range(120)], seed=0)
    assert (len(bigger["train"]), len(bigger["val"]), len(bigger["test"])) == (90, 10, 20)


def test_split_speakers_small_pool_is_proportional():
    splits = split_speakers([f"s{i}" for i in range(10)], seed=0)
    sizes = (len(splits["train"]), len(splits["val"]), len(splits["test"]))
    assert sum(sizes) == 10
    assert sizes[0] >= max(sizes[1], 1)
    tiny = split_speakers(["a", "b"], seed=0)
    assert len(tiny["train"]) >= 1
    assert sum(len(v) for v in tiny.values()) == 2


def test_split_speakers_disjoint_sorted_deterministic():
    speakers = [f"s{i:02d}" for i in range(30)]
    a = split_speakers(speakers, seed=3)
    b = split_speakers(speakers, seed=3)
    assert a == b
    assert split_speakers(speakers, seed=4) != a
    seen = a["train"] + a["val"] + a["test"]
    assert len(seen) == len(set(seen)) == 30
    for part in a.values():
        assert part == sorted(part)
