"""Command line: ``jfe <gen|train|extract|score|eval|gradcheck> --config PATH``.

Experiments are described by a plain-text file of ``section.key = value``
lines (``#`` starts a comment).  Flags only pick the command, the config, the
output directory and an optional seed override.  Artifacts live under the
output directory::

    corpus/       wav/, manifest.tsv, trials.tsv, enroll.tsv, train.lst, features_<layout>/
    model.ckpt    loss.csv    embeddings.npz    scores.tsv    report.json    det.csv
"""
from __future__ import annotations

import argparse
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, JfeError
from .evaluate import (
    Embeddings,
    compute_eer,
    det_curve,
    extract_all,
    measure_mapc,
    probe_leakage,
    read_scores,
    score_trials,
    trial_eers,
    write_det_csv,
    write_report,
    write_scores,
)
from .gradcheck import format_table, run_suite
from .losses import JfeWeights
from .nets import ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import PreparedCorpus, build_model, compute_features, read_feature_dir, write_feature_dir
from .synthcorpus import CorpusSpec, Manifest, TrialSplit, generate_corpus, read_enrollment, read_trials, split_trials
from .synthcorpus import write_enrollment, write_trials
from .train import TrainConfig, train, write_loss_csv

COMMANDS = ("gen", "train", "extract", "score", "eval", "gradcheck")


# -- configuration -------------------------------------------------------------------


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt(parse):
    return lambda s: None if s.lower() == "none" else parse(s)


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.split(","))


SCHEMA = {
    "corpus": {
        "n_speakers": int, "n_channels": int, "n_utterances": int, "min_duration": float,
        "max_duration": float, "seed": int, "silence_fraction": _floats, "channel_tilt": float,
        "channel_curve": float, "noise_range": _floats, "n_eval": int, "train_channels": _opt(int),
    },
    "model": {
        "arch": str, "n_pools": int, "lstm_cell": int, "lstm_proj": int, "tdnn_widths": _ints,
        "embed_dim": int, "attention_dim": int, "classifier_hidden": _ints, "activation": str,
        "embedding_source": str, "seed": int,
    },
    "train": {
        "method": str, "learning_rate": float, "beta1": float, "beta2": float, "eps": float,
        "batch_size": int, "iterations": int, "segment_frames": _opt(int), "grl_lambda_start": float,
        "grl_lambda_end": float, "seed": int, "weights": _floats, "clip_norm": _opt(float),
        "antiloss_ratio": int, "e2e_speakers": int, "e2e_utterances": int, "normalize_inputs": _bool,
        "checkpoint_interval": int,
    },
    "eval": {"probe_seed": int},
    "paths": {
        "corpus": str, "checkpoint": str, "embeddings": str, "scores": str, "trials": str,
        "enroll": str, "manifest": str, "report": str, "det": str, "loss": str,
    },
}

_CORPUS_EXTRA = ("n_eval", "train_channels")


@dataclass
class RunConfig:
    corpus: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    out: Path = Path("jfe_out")

    # -- typed views --
    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(**{k: v for k, v in self.corpus.items() if k not in _CORPUS_EXTRA})

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def train_config(self) -> TrainConfig:
        kw = dict(self.train)
        if "weights" in kw:
            if len(kw["weights"]) != 5:
                raise ConfigurationError("train.weights needs 5 comma-separated values")
            kw["weights"] = JfeWeights(*kw["weights"])
        return TrainConfig(**kw)

    @property
    def layout(self) -> str:
        return self.model.get("arch", "dvector")

    def path(self, key: str, default: str) -> Path:
        return Path(self.paths[key]) if key in self.paths else self.out / default


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigurationError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            getattr(cfg, section)[name] = SCHEMA[section][name](value)
        except ValueError as exc:
            raise ConfigurationError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return cfg


def load_config(path, out=None, seed: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists() or path.is_dir():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(), str(path))
    base = path.parent
    cfg.paths = {k: str((base / v).resolve()) for k, v in cfg.paths.items()}
    cfg.out = Path(out).resolve() if out is not None else (base / "jfe_out").resolve()
    if seed is not None:
        for section in ("corpus", "model", "train"):
            getattr(cfg, section)["seed"] = seed
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    # build every typed view once so errors surface before any work starts
    cfg.corpus_spec()
    mc = cfg.model_config()
    tc = cfg.train_config()
    if tc.method == "jfe" and mc.n_pools != 2:
        raise ConfigurationError("method 'jfe' needs model.n_pools = 2")


# -- shared loading ------------------------------------------------------------------------


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _corpus_dir(cfg: RunConfig) -> Path:
    return cfg.path("corpus", "corpus")


def _corpus_file(cfg: RunConfig, key: str, name: str, what: str) -> Path:
    return _require(Path(cfg.paths[key]) if key in cfg.paths else _corpus_dir(cfg) / name, what)


def _manifest(cfg: RunConfig) -> Manifest:
    return Manifest.read(_corpus_file(cfg, "manifest", "manifest.tsv", "manifest"))


def _trials(cfg: RunConfig):
    return read_trials(_corpus_file(cfg, "trials", "trials.tsv", "trial list"))


def _enroll(cfg: RunConfig):
    return read_enrollment(_corpus_file(cfg, "enroll", "enroll.tsv", "enrollment list"))


def _features(cfg: RunConfig, manifest: Manifest) -> dict[str, np.ndarray]:
    fdir = _corpus_dir(cfg) / f"features_{cfg.layout}"
    if not fdir.is_dir():
        write_feature_dir(compute_features(manifest, cfg.layout), fdir)
    return read_feature_dir(manifest, fdir)


def _prepared(cfg: RunConfig) -> PreparedCorpus:
    manifest = _manifest(cfg)
    train_list = _require(_corpus_dir(cfg) / "train.lst", "training list")
    split = TrialSplit(train_list.read_text().split(), _enroll(cfg), _trials(cfg))
    return PreparedCorpus(manifest, _features(cfg, manifest), split)


# -- commands --------------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> str:
    spec = cfg.corpus_spec()
    out = _corpus_dir(cfg)
    manifest = generate_corpus(spec, out)
    split = split_trials(manifest, np.random.default_rng(spec.seed), n_eval=cfg.corpus.get("n_eval", 2),
                         train_channels=cfg.corpus.get("train_channels"))
    write_trials(out / "trials.tsv", split.trials)
    write_enrollment(out / "enroll.tsv", split.enroll)
    (out / "train.lst").write_text("".join(u + "\n" for u in split.train))
    write_feature_dir(compute_features(manifest, cfg.layout), out / f"features_{cfg.layout}")
    return f"wrote {len(manifest)} utterances and {len(split.trials)} trials to {out}"


def cmd_train(cfg: RunConfig) -> str:
    prepared = _prepared(cfg)
    tc = cfg.train_config()
    ckpt = cfg.path("checkpoint", "model.ckpt")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    if tc.checkpoint_interval:
        tc.out_dir = str(ckpt.parent / "checkpoints")
    model = build_model(cfg.model_config(), prepared.training_corpus())
    loss_path = cfg.path("loss", "loss.csv")
    result = train(tc.method, model, prepared.training_corpus(), tc, log_path=loss_path)
    write_loss_csv(loss_path, result.log)
    save_checkpoint(ckpt, model)
    return f"trained {tc.method} for {tc.iterations} iterations; checkpoint {ckpt}"


def cmd_extract(cfg: RunConfig) -> str:
    model = load_checkpoint(_require(cfg.path("checkpoint", "model.ckpt"), "checkpoint"))
    if model.config.arch != cfg.layout:
        raise ConfigurationError(f"checkpoint architecture {model.config.arch!r} != model.arch {cfg.layout!r}")
    prepared = _prepared(cfg)
    emb = extract_all(model, {u: prepared.features[u] for u in prepared.eval_ids()})
    path = cfg.path("embeddings", "embeddings.npz")
    emb.save(path)
    return f"wrote {len(emb.ids)} embeddings to {path}"


def cmd_score(cfg: RunConfig) -> str:
    emb = Embeddings.load(_require(cfg.path("embeddings", "embeddings.npz"), "embedding store"))
    scores = score_trials(emb, _enroll(cfg), _trials(cfg))
    path = cfg.path("scores", "scores.tsv")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_scores(path, scores)
    return f"wrote {len(scores)} scores to {path}"


def _finite(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def cmd_eval(cfg: RunConfig) -> str:
    trials = _trials(cfg)
    scores = read_scores(_require(cfg.path("scores", "scores.tsv"), "score file"))
    by_key = {(s.enroll_id, s.test_id): s.score for s in scores}
    pairs = []
    for t in trials:
        if (t.enroll_id, t.test_id) not in by_key:
            raise ConfigurationError(f"score file has no entry for trial {t.enroll_id} {t.test_id}")
        pairs.append((by_key[(t.enroll_id, t.test_id)], t.target))
    report = {k: _finite(v) for k, v in trial_eers(trials, scores).items()}
    report["threshold"] = compute_eer(pairs)[1]
    report["n_trials"] = len(trials)
    report["n_targets"] = sum(t.target for t in trials)
    write_det_csv(cfg.path("det", "det.csv"), det_curve(pairs))
    emb_path = cfg.path("embeddings", "embeddings.npz")
    if emb_path.exists():
        report.update(_leakage(cfg, Embeddings.load(emb_path)))
    path = cfg.path("report", "report.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_report(path, report)
    return f"EER {report['eer_overall']:.4f} over {len(trials)} trials; report {path}"


def _leakage(cfg: RunConfig, emb: Embeddings) -> dict:
    try:
        rows = _manifest(cfg).by_id()
    except FileNotFoundError:
        return {}
    seed = cfg.eval.get("probe_seed", 0)
    spk = np.array([rows[u].speaker for u in emb.ids])
    chan = np.array([rows[u].channel for u in emb.ids])
    out = {"probe_speaker_on_spkr": probe_leakage(emb.speaker, spk, np.random.default_rng(seed)).accuracy,
           "probe_channel_on_spkr": probe_leakage(emb.speaker, chan, np.random.default_rng(seed)).accuracy}
    if emb.nuisance is not None:
        out["probe_speaker_on_nuis"] = probe_leakage(emb.nuisance, spk, np.random.default_rng(seed)).accuracy
        out["probe_channel_on_nuis"] = probe_leakage(emb.nuisance, chan, np.random.default_rng(seed)).accuracy
        out["mapc"] = measure_mapc(emb.speaker, emb.nuisance).value
    return out


def cmd_gradcheck(cfg: RunConfig) -> tuple[str, bool]:
    t0 = time.perf_counter()
    rows = run_suite(cfg.train.get("seed", 0))
    ok = all(r.passed for r in rows)
    n_fail = sum(not r.passed for r in rows)
    tail = f"{len(rows)} checks, {n_fail} failed, {time.perf_counter() - t0:.1f}s"
    return format_table(rows) + "\n" + tail, ok


# -- entry point --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jfe", description="Joint factor embedding experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="key=value experiment file")
    p.add_argument("--out", help="output directory (default: jfe_out next to the config)")
    p.add_argument("--seed", type=int, help="override corpus, model and training seeds")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.out, args.seed)
        cfg.out.mkdir(parents=True, exist_ok=True)
        if args.command == "gradcheck":
            msg, ok = cmd_gradcheck(cfg)
            print(msg)
            return 0 if ok else 1
        msg = {"gen": cmd_gen, "train": cmd_train, "extract": cmd_extract, "score": cmd_score,
               "eval": cmd_eval}[args.command](cfg)
    except (JfeError, FileNotFoundError) as exc:
        print(f"jfe {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 1
    print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
