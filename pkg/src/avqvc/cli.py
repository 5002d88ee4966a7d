"""Operator command line: prepare, synth-corpus, train, convert, eval, sweep.

One executable with subcommands. Behavior is controlled by a key = value
config file (sections spelled as prefixes: ``frontend.fft_size``,
``model.latent_dim``, ``train.steps``, ``weights.recon_weight``,
``corpus.n_speakers``) plus command-line flags; flags win over file
values. Unknown config keys are hard errors so typos cannot silently
fall back to defaults. Every command writes a manifest next to its
outputs recording the resolved configuration, inputs, outputs, seed,
package version, and timestamps.

Exit codes: 0 success; 1 usage or configuration error; 2 data error
(missing/corrupt/mismatched inputs); 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .conversion import convert, save_wav, synthesize_waveform
from .errors import (
    CompatibilityError,
    ConfigError,
    DataError,
    DecodeError,
    NumericError,
    PipelineError,
)
from .evaluation import (
    codebook_sweep,
    evaluate_disentanglement,
    mcd,
    mel_cepstra,
    split_corpus,
)
from .frontend import (
    FeatureCorpus,
    FeatureStats,
    FrontendConfig,
    SyntheticCorpusSpec,
    Utterance,
    build_feature_cache,
    compute_mel,
    generate_synthetic_corpus,
    load_audio,
    load_corpus,
    load_feature_cache,
    save_synthetic_corpus,
)
from .losses import LossWeights
from .model import ModelConfig
from .training import (
    TrainConfig,
    load_checkpoint,
    model_from_checkpoint,
    train,
)

CACHE_ROOT_ENV = "AVQVC_CACHE_ROOT"

# config-file sections: prefix -> (dataclass, keys excluded from files)
_SECTIONS = {
    "frontend": (FrontendConfig, ()),
    "model": (ModelConfig, ()),
    "train": (TrainConfig, ()),
    "weights": (LossWeights, ("triggered",)),
    "corpus": (SyntheticCorpusSpec, ()),
}


def _known_keys() -> list[str]:
    keys = []
    for prefix, (cls, excluded) in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name not in excluded:
                keys.append(f"{prefix}.{f.name}")
    return keys


def _coerce(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes"):
        return True
    if low in ("false", "no"):
        return False
    if low in ("none", "null"):
        return None
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def read_config(path: str | os.PathLike) -> dict[str, str]:
    """Parse a key = value config file; comments start with '#'."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    raw: dict[str, str] = {}
    known = set(_known_keys())
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in known:
            raise ConfigError(f"{p}:{lineno}: unknown config key {key!r}")
        raw[key] = value
    return raw


def _section(raw: dict[str, str], prefix: str, overrides: dict | None = None):
    """Build one config dataclass from its file section plus flag overrides."""
    cls, _ = _SECTIONS[prefix]
    kwargs = {
        key.split(".", 1)[1]: _coerce(value)
        for key, value in raw.items()
        if key.startswith(prefix + ".")
    }
    for k, v in (overrides or {}).items():
        if v is not None:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{prefix}] settings: {exc}") from exc


def _has_section(raw: dict[str, str], prefix: str) -> bool:
    return any(key.startswith(prefix + ".") for key in raw)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(
    primary_output: Path,
    command: str,
    seed: int,
    config: dict,
    inputs: dict,
    outputs: dict,
    started_at: str,
) -> Path:
    if primary_output.is_dir():
        path = primary_output / "manifest.json"
    else:
        path = primary_output.with_name(primary_output.name + ".manifest.json")
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started_at": started_at,
        "finished_at": _now(),
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _cache_root() -> Path:
    return Path(os.environ.get(CACHE_ROOT_ENV, "avqvc_cache"))


def split_speakers(speakers: list[str], seed: int = 0) -> dict[str, list[str]]:
    """Seeded speaker-level partition into train/val/test.

    Corpora with at least 109 speakers get the fixed 90/10/rest split;
    smaller ones are partitioned proportionally (90:10:9, rounded).
    """
    pool = sorted(set(speakers))
    if not pool:
        raise DataError("no speakers to split")
    n = len(pool)
    order = np.random.default_rng(seed).permutation(n)
    if n >= 109:
        n_train, n_val = 90, 10
    else:
        n_train = max(1, min(n, int(round(n * 90 / 109))))
        n_val = min(n - n_train, int(round(n * 10 / 109)))
    shuffled = [pool[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train : n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val :]),
    }


def _load_raw_config(args) -> dict[str, str]:
    return read_config(args.config) if getattr(args, "config", None) else {}


def _seed(args, raw: dict[str, str], key: str = "train.seed") -> int:
    if args.seed is not None:
        return args.seed
    if key in raw:
        v = _coerce(raw[key])
        if isinstance(v, int):
            return v
    return 0


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    started = _now()
    raw = _load_raw_config(args)
    seed = _seed(args, raw)
    frontend = _section(raw, "frontend")
    data_dir = Path(args.data)
    cache_dir = Path(args.out) if args.out else _cache_root() / data_dir.name
    entries = build_feature_cache(data_dir, cache_dir, frontend)
    corpus = load_feature_cache(cache_dir)
    splits = split_speakers(corpus.speakers, seed)
    (cache_dir / "splits.json").write_text(json.dumps(splits, sort_keys=True, indent=2) + "\n")
    for name, members in splits.items():
        (cache_dir / f"{name}_speakers.txt").write_text(
            "".join(m + "\n" for m in members)
        )
    _write_manifest(
        cache_dir, "prepare", seed, {"frontend": frontend.to_dict()},
        {"data": data_dir}, {"cache": cache_dir}, started,
    )
    print(
        f"cached {len(entries)} utterances from {len(corpus.speakers)} speakers "
        f"into {cache_dir} (train/val/test speakers: "
        f"{len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])})"
    )
    return 0


def cmd_synth_corpus(args) -> int:
    started = _now()
    raw = _load_raw_config(args)
    overrides = {
        "n_speakers": args.speakers,
        "utterances_per_speaker": args.utterances,
        "feature_dim": args.feature_dim,
        "frames_per_utterance": args.frames,
        "seed": args.seed,
    }
    spec = _section(raw, "corpus", overrides)
    corpus = generate_synthetic_corpus(spec)
    out = Path(args.out)
    save_synthetic_corpus(corpus, out)
    _write_manifest(
        out, "synth-corpus", spec.seed, {"corpus": spec.to_dict()}, {}, {"corpus": out}, started
    )
    print(
        f"wrote synthetic corpus: {spec.n_speakers} speakers x "
        f"{spec.utterances_per_speaker} utterances -> {out}"
    )
    return 0


def _normalized(corpus: FeatureCorpus, stats: FeatureStats) -> FeatureCorpus:
    return FeatureCorpus(
        items=[
            Utterance(u.speaker_id, u.utterance_id, stats.apply(u.features))
            for u in corpus.items
        ],
        frontend=corpus.frontend,
    )


def cmd_train(args) -> int:
    started = _now()
    raw = _load_raw_config(args)
    corpus = load_corpus(args.corpus)
    stats = None
    if corpus.frontend is not None:
        # real features: z-score per bin using this corpus's statistics
        stats = FeatureStats.from_corpus(corpus)
        corpus = _normalized(corpus, stats)

    resume_ckpt = None
    if args.resume:
        # fields not explicitly overridden are inherited from the checkpoint;
        # attempts to change fixed hyperparameters still fail downstream
        resume_ckpt = load_checkpoint(args.resume)
        kwargs = resume_ckpt.train_config.to_dict()
        kwargs.update(
            {
                k.split(".", 1)[1]: _coerce(v)
                for k, v in raw.items()
                if k.startswith("train.")
            }
        )
        for key, value in (("steps", args.steps), ("mode", args.mode), ("seed", args.seed)):
            if value is not None:
                kwargs[key] = value
        train_config = TrainConfig(**kwargs)
        model_config = None
        weights = None
    else:
        seed = _seed(args, raw)
        model_overrides = {}
        if "model.n_mels" not in raw:
            model_overrides["n_mels"] = corpus.feature_dim
        model_config = _section(raw, "model", model_overrides)
        train_config = _section(
            raw, "train", {"steps": args.steps, "seed": seed, "mode": args.mode}
        )
        weights = _section(raw, "weights")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = train(
        corpus,
        model_config,
        train_config,
        weights,
        resume_from=resume_ckpt,
        checkpoint_path=out,
        feature_stats=stats,
        frontend_config=corpus.frontend,
        log_fn=print,
    )
    metrics_path = out.with_name(out.name + ".metrics.log")
    with open(metrics_path, "a" if args.resume else "w") as fh:
        for line in result.log_lines:
            fh.write(line + "\n")
    _write_manifest(
        out, "train", train_config.seed,
        {
            "model": result.checkpoint.model_config.to_dict(),
            "train": result.checkpoint.train_config.to_dict(),
            "weights": result.checkpoint.weights.to_dict(),
        },
        {"corpus": args.corpus, "resume": args.resume or ""},
        {"checkpoint": out, "metrics": metrics_path},
        started,
    )
    last = result.log_lines[-1] if result.log_lines else f"step={result.checkpoint.step}"
    print(f"checkpoint written to {out} ({last})")
    return 0


def _load_features(path: Path, frontend: FrontendConfig) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"no such feature file: {path}")
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".wav":
        return compute_mel(load_audio(path), frontend).frames
    raise DecodeError(f"cannot read features from {path} (expected .wav or .npy)")


def cmd_convert(args) -> int:
    started = _now()
    raw = _load_raw_config(args)
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    frontend = ckpt.frontend_config
    if _has_section(raw, "frontend"):
        requested = _section(raw, "frontend")
        if frontend is not None and requested != frontend:
            raise CompatibilityError(
                "frontend settings in the config file do not match the "
                "checkpoint's; refusing to extract incompatible features"
            )
        frontend = requested
    frontend = frontend or FrontendConfig()

    source = _load_features(Path(args.source), frontend)
    target = _load_features(Path(args.target), frontend)
    stats = ckpt.feature_stats
    src = stats.apply(source) if stats is not None else source
    tgt = stats.apply(target) if stats is not None else target
    converted = convert(model, src, tgt)
    if stats is not None:
        converted = stats.invert(converted)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = {}
    if out.suffix == ".wav":
        mel_out = out.with_suffix(".npy")
        np.save(mel_out, converted)
        samples = synthesize_waveform(converted, frontend)
        save_wav(out, samples, frontend.sample_rate)
        outputs = {"waveform": out, "mel": mel_out}
    elif out.suffix == ".npy":
        np.save(out, converted)
        outputs = {"mel": out}
    else:
        raise ConfigError(f"--out must end in .wav or .npy, got {out.name}")
    _write_manifest(
        out, "convert", 0,
        {"frontend": frontend.to_dict(), "model": ckpt.model_config.to_dict()},
        {"ckpt": args.ckpt, "source": args.source, "target": args.target},
        outputs, started,
    )
    print(f"converted {args.source} -> voice of {args.target}: " +
          ", ".join(str(v) for v in outputs.values()))
    return 0


def cmd_eval(args) -> int:
    started = _now()
    raw = _load_raw_config(args)
    seed = _seed(args, raw)
    report: dict = {}
    inputs: dict = {}

    ckpt = None
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        inputs["ckpt"] = args.ckpt

    if (args.reference is None) != (args.converted is None):
        raise ConfigError("--reference and --converted must be given together")
    if args.reference:
        frontend = (ckpt.frontend_config if ckpt else None) or _section(raw, "frontend")
        ref = _load_features(Path(args.reference), frontend)
        conv = _load_features(Path(args.converted), frontend)
        report["mcd"] = mcd(mel_cepstra(ref), mel_cepstra(conv))
        inputs["reference"] = args.reference
        inputs["converted"] = args.converted

    if args.corpus:
        if ckpt is None:
            raise ConfigError("--corpus evaluation needs --ckpt")
        corpus = load_corpus(args.corpus)
        stats = ckpt.feature_stats
        model = model_from_checkpoint(ckpt)
        held = split_corpus(corpus, seed=seed)[1] if args.holdout else None
        score = evaluate_disentanglement(model, corpus, held, stats=stats, seed=seed)
        report["disentanglement"] = score.to_dict()
        inputs["corpus"] = args.corpus

    if not report:
        raise ConfigError(
            "nothing to evaluate: pass --reference/--converted and/or --ckpt/--corpus"
        )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def clean(v):
        if isinstance(v, float) and not np.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        return v

    out.write_text(json.dumps(clean(report), sort_keys=True, indent=2) + "\n")
    _write_manifest(out, "eval", seed, {}, inputs, {"report": out}, started)
    for key, value in sorted(report.items()):
        print(f"{key}: {value}")
    return 0


def cmd_sweep(args) -> int:
    started = _now()
    raw = _load_raw_config(args)
    seed = _seed(args, raw)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--sizes must be comma-separated integers: {exc}") from exc
    corpus = load_corpus(args.corpus)
    model_overrides = {}
    if "model.n_mels" not in raw:
        model_overrides["n_mels"] = corpus.feature_dim
    model_config = _section(raw, "model", model_overrides)
    train_config = _section(raw, "train", {"steps": args.steps, "seed": seed})
    weights = _section(raw, "weights")

    report = codebook_sweep(
        corpus, sizes, model_config, train_config, weights, seed=seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tsv_path = out / "sweep.tsv"
    json_path = out / "sweep.json"
    tsv_path.write_text(report.to_tsv())
    json_path.write_text(report.to_json())
    _write_manifest(
        out, "sweep", seed,
        {
            "sizes": sizes,
            "model": model_config.to_dict(),
            "train": train_config.to_dict(),
            "weights": weights.to_dict(),
        },
        {"corpus": args.corpus}, {"tsv": tsv_path, "json": json_path}, started,
    )
    sys.stdout.write(report.to_tsv())
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    # usage errors must exit 1 (not argparse's default 2), via ConfigError
    def error(self, message):
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=None,
                   help="seed controlling all randomness of this command")


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join("  " + k for k in _known_keys())
    epilog = (
        "recognized config file keys:\n"
        f"{keys}\n\n"
        f"environment: {CACHE_ROOT_ENV} sets the default feature-cache root\n"
        "exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure"
    )
    parser = _Parser(
        prog="avqvc",
        description="One-shot voice conversion: training, conversion, evaluation.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def command(name, func, help_text):
        p = sub.add_parser(
            name, help=help_text, epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.set_defaults(func=func)
        _add_common(p)
        return p

    p = command("prepare", cmd_prepare, "extract mel features and split speakers")
    p.add_argument("--data", required=True, help="directory of <speaker>/<utterance>.wav")
    p.add_argument("--out", help="feature cache directory (default: cache root)")

    p = command("synth-corpus", cmd_synth_corpus,
                "generate the synthetic ground-truth corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--speakers", type=int, default=None)
    p.add_argument("--utterances", type=int, default=None,
                   help="utterances per speaker")
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--frames", type=int, default=None, help="frames per utterance")

    p = command("train", cmd_train, "train a conversion model")
    p.add_argument("--corpus", required=True,
                   help="feature cache or synthetic corpus directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=None, help="global step target")
    p.add_argument("--mode", choices=["avqvc", "vqvc"], default=None)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = command("convert", cmd_convert, "one-shot conversion of an utterance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True, help="content utterance (.wav or .npy)")
    p.add_argument("--target", required=True, help="voice utterance (.wav or .npy)")
    p.add_argument("--out", required=True, help="output .wav (plus mel) or .npy")

    p = command("eval", cmd_eval, "objective metrics")
    p.add_argument("--reference", help="reference features (.wav or .npy)")
    p.add_argument("--converted", help="features under test (.wav or .npy)")
    p.add_argument("--ckpt", help="checkpoint for disentanglement scoring")
    p.add_argument("--corpus", help="synthetic corpus directory for disentanglement")
    p.add_argument("--holdout", action="store_true",
                   help="score only a held-out per-speaker utterance split")
    p.add_argument("--out", default="eval_report.json", help="report path")

    p = command("sweep", cmd_sweep, "codebook-size comparison")
    p.add_argument("--corpus", required=True)
    p.add_argument("--sizes", default="128,256,512,1024",
                   help="comma-separated codebook sizes")
    p.add_argument("--steps", type=int, default=None, help="training steps per size")
    p.add_argument("--out", default="sweep_out", help="report directory")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help()
            return 1
        return int(args.func(args) or 0)
    except SystemExit as exc:  # argparse's --help/--version path
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
