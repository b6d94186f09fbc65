"""End-to-end helpers shared by the command line and the demos.

They wire the corpus generator, front-end, trainer and evaluator together
without adding any behaviour of their own.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluate import (
    Embeddings,
    attention_contrast,
    extract_all,
    extract_embedding,
    measure_mapc,
    probe_leakage,
    score_trials,
    trial_eers,
)
from .features import extract_features, read_features, read_wav, write_features
from .nets import EmbeddingModel, ModelConfig
from .synthcorpus import (
    CorpusSpec,
    Manifest,
    TrialSplit,
    generate_corpus,
    num_workers,
    split_trials,
    write_enrollment,
    write_trials,
)
from .train import TrainConfig, TrainingCorpus, TrainResult, train


def compute_features(manifest: Manifest, layout: str = "dvector") -> dict[str, np.ndarray]:
    def one(row):
        return row.utt_id, extract_features(read_wav(manifest.resolve(row)), layout).frames

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        return dict(pool.map(one, manifest.rows))


def write_feature_dir(features: dict[str, np.ndarray], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for utt, f in features.items():
        write_features(out_dir / f"{utt}.jfef", f)


def read_feature_dir(manifest: Manifest, feat_dir) -> dict[str, np.ndarray]:
    feat_dir = Path(feat_dir)
    return {r.utt_id: read_features(feat_dir / f"{r.utt_id}.jfef") for r in manifest.rows}


@dataclass
class PreparedCorpus:
    manifest: Manifest
    features: dict[str, np.ndarray]
    split: TrialSplit

    @property
    def speakers(self) -> list[str]:
        return self.manifest.speakers

    @property
    def channels(self) -> list[str]:
        return self.manifest.channels

    def training_corpus(self) -> TrainingCorpus:
        rows = self.manifest.by_id()
        spk = {s: i for i, s in enumerate(self.speakers)}
        chan = {c: i for i, c in enumerate(self.channels)}
        ids = self.split.train
        return TrainingCorpus(
            [self.features[u] for u in ids],
            [spk[rows[u].speaker] for u in ids],
            [chan[rows[u].channel] for u in ids],
            len(spk),
            len(chan),
            list(ids),
        )

    def eval_ids(self) -> list[str]:
        enrolled = {u for ids in self.split.enroll.values() for u in ids}
        return sorted(enrolled | set(self.split.test_ids))


def prepare_corpus(spec: CorpusSpec, out_dir, layout: str = "dvector", n_eval: int = 2,
                   split_seed: int | None = None, train_channels: int | None = None) -> PreparedCorpus:
    """Generate audio, extract features and split into training / enrollment / test."""
    out_dir = Path(out_dir)
    manifest = generate_corpus(spec, out_dir)
    features = compute_features(manifest, layout)
    write_feature_dir(features, out_dir / "features")
    rng = np.random.default_rng(spec.seed if split_seed is None else split_seed)
    split = split_trials(manifest, rng, n_eval=n_eval, train_channels=train_channels)
    write_trials(out_dir / "trials.tsv", split.trials)
    write_enrollment(out_dir / "enroll.tsv", split.enroll)
    (out_dir / "train.lst").write_text("".join(u + "\n" for u in split.train))
    return PreparedCorpus(manifest, features, split)


def build_model(model_cfg: ModelConfig, corpus: TrainingCorpus) -> EmbeddingModel:
    model_cfg.n_speakers = corpus.n_speakers
    model_cfg.n_nuisance = corpus.n_nuisance
    model_cfg.input_dim = corpus.features[0].shape[1]
    return EmbeddingModel(model_cfg)


@dataclass
class SystemReport:
    eers: dict[str, float]
    probes: dict[str, float]
    mapc: float | None
    attention_variance: tuple[float, float] | None
    result: TrainResult
    embeddings: Embeddings


def evaluate_system(model: EmbeddingModel, prepared: PreparedCorpus, result: TrainResult | None = None,
                    probe_seed: int = 0, probe_ids: list[str] | None = None) -> SystemReport:
    """EERs on the trial list plus probe accuracies and MAPC over ``probe_ids``
    (default: the evaluation utterances)."""
    ids = prepared.eval_ids()
    emb = extract_all(model, {u: prepared.features[u] for u in ids})
    eers = trial_eers(prepared.split.trials, score_trials(emb, prepared.split.enroll, prepared.split.trials))
    probe_ids = probe_ids or ids
    pemb = emb if probe_ids == ids else extract_all(model, {u: prepared.features[u] for u in probe_ids})
    rows = prepared.manifest.by_id()
    spk = np.array([rows[u].speaker for u in pemb.ids])
    chan = np.array([rows[u].channel for u in pemb.ids])
    probes = {
        "speaker_on_spkr": probe_leakage(pemb.speaker, spk, np.random.default_rng(probe_seed)).accuracy,
        "channel_on_spkr": probe_leakage(pemb.speaker, chan, np.random.default_rng(probe_seed)).accuracy,
    }
    mapc = None
    att = None
    if pemb.nuisance is not None:
        probes["speaker_on_nuis"] = probe_leakage(pemb.nuisance, spk, np.random.default_rng(probe_seed)).accuracy
        probes["channel_on_nuis"] = probe_leakage(pemb.nuisance, chan, np.random.default_rng(probe_seed)).accuracy
        mapc = measure_mapc(pemb.speaker, pemb.nuisance).value
        vs, vn = [], []
        for u in ids:
            pair = extract_embedding(model, prepared.features[u])
            a, b = attention_contrast(pair.alpha_speaker, pair.alpha_nuisance)
            vs.append(a)
            vn.append(b)
        att = (float(np.mean(vs)), float(np.mean(vn)))
    return SystemReport(eers, probes, mapc, att, result, emb)


def train_system(prepared: PreparedCorpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 log_path=None) -> tuple[EmbeddingModel, TrainResult]:
    corpus = prepared.training_corpus()
    model = build_model(model_cfg, corpus)
    result = train(train_cfg.method, model, corpus, train_cfg, log_path=log_path)
    return model, result
