"""Adam and the training procedures: softmax, gradient reversal, anti-loss, JFE, end-to-end."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, ContractViolation, NumericDomainError, TrainingDiverged
from .losses import (
    COMPONENT_NAMES,
    JfeWeights,
    anti_loss,
    channel_ce,
    e2e_batch_objective,
    e2e_scores,
    jfe_total,
    one_hot,
    speaker_ce,
)
from .nets import EmbeddingModel, classify, grl_node, save_checkpoint
from .tensor import Tensor

logger = logging.getLogger(__name__)

METHODS = ("softmax", "grl", "antiloss", "jfe", "e2e")
LOG_COLUMNS = ("iter",) + COMPONENT_NAMES + ("L_total",)


@dataclass
class TrainConfig:
    method: str = "softmax"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    iterations: int = 12000
    segment_frames: int | None = None
    grl_lambda_start: float = 0.0
    grl_lambda_end: float = 1.0
    seed: int = 0
    weights: JfeWeights = field(default_factory=JfeWeights)
    clip_norm: float | None = 5.0
    antiloss_ratio: int = 1
    e2e_speakers: int = 4
    e2e_utterances: int = 4
    normalize_inputs: bool = True
    checkpoint_interval: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.iterations < 0:
            raise ConfigurationError("learning_rate, batch_size and iterations must be positive")
        if self.segment_frames is not None and self.segment_frames < 1:
            raise ConfigurationError("segment_frames must be positive")
        if self.grl_lambda_start < 0 or self.grl_lambda_end < 0:
            raise ConfigurationError("GRL schedule endpoints must be >= 0")
        if self.antiloss_ratio < 1:
            raise ConfigurationError("antiloss_ratio must be >= 1")

    def grl_lambda(self, iteration: int) -> float:
        if self.iterations <= 1:
            return self.grl_lambda_end
        frac = iteration / (self.iterations - 1)
        return self.grl_lambda_start + frac * (self.grl_lambda_end - self.grl_lambda_start)


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update.  Returns (new_params, state).

    Entries of ``grads`` that are None are left untouched.  A non-finite
    gradient aborts the whole step before anything is modified.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params or np.shape(g) != np.shape(params[name]):
            raise ContractViolation(f"adam: gradient for {name!r} does not match its parameter")
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"adam: non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    out = dict(params)
    for name, g in grads.items():
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = params[name] - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return out, state


def clip_gradients(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if total <= max_norm or total == 0:
        return grads
    scale = max_norm / total
    return {k: (None if g is None else g * scale) for k, g in grads.items()}


# -- data ------------------------------------------------------------------------


@dataclass
class TrainingCorpus:
    """Per-utterance feature matrices with integer speaker and nuisance labels."""

    features: list[np.ndarray]
    speakers: np.ndarray
    nuisance: np.ndarray
    n_speakers: int
    n_nuisance: int
    ids: list[str] | None = None

    def __post_init__(self):
        self.speakers = np.asarray(self.speakers, dtype=np.intp)
        self.nuisance = np.asarray(self.nuisance, dtype=np.intp)
        if not self.features:
            raise ConfigurationError("training corpus is empty")
        if not (len(self.features) == len(self.speakers) == len(self.nuisance)):
            raise ContractViolation("features and labels differ in length")

    def __len__(self) -> int:
        return len(self.features)

    def frame_stats(self) -> tuple[np.ndarray, np.ndarray]:
        allf = np.concatenate(self.features, axis=0)
        return allf.mean(axis=0), allf.std(axis=0)


@dataclass
class Batch:
    x: np.ndarray
    mask: np.ndarray | None
    speakers: np.ndarray
    nuisance: np.ndarray
    index: np.ndarray


def _collate(corpus: TrainingCorpus, idx, segment_frames, rng) -> Batch:
    if segment_frames is not None:
        L = segment_frames
        segs = []
        for i in idx:
            f = corpus.features[i]
            start = int(rng.integers(0, f.shape[0] - L + 1))
            segs.append(f[start : start + L])
        x, mask = np.stack(segs), None
    else:
        lengths = [corpus.features[i].shape[0] for i in idx]
        T = max(lengths)
        D = corpus.features[idx[0]].shape[1]
        x = np.zeros((len(idx), T, D))
        mask = np.zeros((len(idx), T), dtype=bool)
        for row, (i, n) in enumerate(zip(idx, lengths)):
            x[row, :n] = corpus.features[i]
            mask[row, :n] = True
        if mask.all():
            mask = None
    idx = np.asarray(idx)
    return Batch(x, mask, corpus.speakers[idx], corpus.nuisance[idx], idx)


def _eligible(corpus: TrainingCorpus, segment_frames) -> np.ndarray:
    if segment_frames is None:
        return np.arange(len(corpus))
    ok = np.array([f.shape[0] >= segment_frames for f in corpus.features])
    if not ok.all():
        logger.warning("skipping %d utterances shorter than %d frames", int((~ok).sum()), segment_frames)
    if not ok.any():
        raise ConfigurationError(f"no utterance has at least {segment_frames} frames")
    return np.flatnonzero(ok)


def build_classification_batch(corpus: TrainingCorpus, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Uniformly drawn utterances (with replacement), cropped to a random segment if configured."""
    eligible = _eligible(corpus, cfg.segment_frames)
    idx = eligible[rng.integers(0, len(eligible), size=cfg.batch_size)]
    return _collate(corpus, idx, cfg.segment_frames, rng)


def build_e2e_batch(corpus: TrainingCorpus, J: int, K: int, rng: np.random.Generator,
                    segment_frames: int | None = None) -> Batch:
    """J distinct speakers x K distinct utterances each, rows ordered speaker-major."""
    if J < 2 or K < 1:
        raise ConfigurationError(f"e2e batch needs J >= 2 and K >= 1, got J={J} K={K}")
    eligible = set(_eligible(corpus, segment_frames).tolist())
    by_spk: dict[int, list[int]] = {}
    for i, s in enumerate(corpus.speakers):
        if i in eligible:
            by_spk.setdefault(int(s), []).append(i)
    ok = sorted(s for s, utts in by_spk.items() if len(utts) >= K)
    if len(ok) < J:
        raise ConfigurationError(f"need {J} speakers with >= {K} utterances, corpus has {len(ok)}")
    chosen = rng.choice(ok, size=J, replace=False)
    idx = [u for s in chosen for u in rng.choice(by_spk[int(s)], size=K, replace=False)]
    return _collate(corpus, idx, segment_frames, rng)


# -- training ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: EmbeddingModel
    log: list[dict]
    checkpoints: list[str] = field(default_factory=list)


def _nan_row(it: int) -> dict:
    row = {k: float("nan") for k in LOG_COLUMNS}
    row["iter"] = it
    return row


def _forward_jfe(model: EmbeddingModel, batch: Batch, weights: JfeWeights):
    pair = model.embed(batch.x, batch.mask)
    y = one_hot(batch.speakers, model.config.n_speakers)
    r = one_hot(batch.nuisance, model.config.n_nuisance)
    ys, _ = classify(model.spk_head, pair.speaker)
    rn, _ = classify(model.nuis_head, pair.nuisance)
    yn, _ = classify(model.spk_head, pair.nuisance)
    rs, _ = classify(model.nuis_head, pair.speaker)
    return jfe_total(ys, rn, yn, rs, pair.speaker, pair.nuisance, y, r, weights)


def method_loss(method: str, model: EmbeddingModel, batch: Batch, cfg: TrainConfig, lam: float = 0.0):
    """Differentiable loss and a log row (without ``iter``) for single-step methods."""
    y = one_hot(batch.speakers, model.config.n_speakers)
    if method == "jfe":
        return _forward_jfe(model, batch, cfg.weights)
    pair = model.embed(batch.x, batch.mask)
    ys, _ = classify(model.spk_head, pair.speaker)
    l_spk = speaker_ce(ys, y)
    row = {"L_ss_ce": l_spk.item()}
    if method == "softmax":
        loss = l_spk
    elif method == "grl":
        r = one_hot(batch.nuisance, model.config.n_nuisance)
        rs, _ = classify(model.nuis_head, grl_node(pair.speaker, lam))
        l_sub = channel_ce(rs, r)
        loss = l_spk + l_sub
        row["L_cc_ce"] = l_sub.item()
    else:
        raise ConfigurationError(f"method {method!r} has no single-step loss")
    row["L_total"] = loss.item()
    return loss, row


def _grads(params: dict[str, Tensor]) -> dict:
    return {k: p.grad for k, p in params.items()}


def _apply(params: dict[str, Tensor], grads: dict, state: AdamState, cfg: TrainConfig):
    grads = {k: g for k, g in clip_gradients(grads, cfg.clip_norm).items() if g is not None}
    new, state = adam_step({k: params[k].data for k in grads}, grads, state, cfg)
    for k, arr in new.items():
        params[k].data = arr
    return state


def _zero(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def train(method: str, model: EmbeddingModel, corpus: TrainingCorpus, cfg: TrainConfig,
          log_path=None) -> TrainResult:
    """Train ``model`` in place with ``method`` and return it with the per-iteration loss log."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    if method == "jfe" and model.config.n_pools != 2:
        raise ConfigurationError("jfe needs a model with two attention pools")
    if model.config.n_speakers < int(corpus.speakers.max()) + 1 or model.config.n_nuisance < int(corpus.nuisance.max()) + 1:
        raise ConfigurationError("model head sizes are smaller than the corpus label sets")
    if cfg.normalize_inputs:
        model.set_normalization(*corpus.frame_stats())
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    groups = {g: model.param_group(g) for g in ("embedding", "speaker_head", "nuisance_head", "e2e")}
    if method in ("softmax",):
        update = {**groups["embedding"], **groups["speaker_head"]}
    elif method in ("grl", "jfe"):
        update = {**groups["embedding"], **groups["speaker_head"], **groups["nuisance_head"]}
    elif method == "e2e":
        update = {**groups["embedding"], **groups["e2e"]}
    else:
        update = {**groups["embedding"], **groups["speaker_head"]}
    state = AdamState()
    disc_state = AdamState()
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    checkpoints: list[str] = []
    log: list[dict] = []
    last_good = {k: p.data for k, p in params.items()}

    for it in range(cfg.iterations):
        row = _nan_row(it)
        try:
            if method == "antiloss":
                batch = build_classification_batch(corpus, cfg, rng)
                r = one_hot(batch.nuisance, model.config.n_nuisance)
                disc = groups["nuisance_head"]
                for _ in range(cfg.antiloss_ratio):
                    _zero(params)
                    with tn.no_grad():
                        frozen = Tensor(model.embed(batch.x, batch.mask).speaker.data)
                    rs, _ = classify(model.nuis_head, frozen)
                    l_disc = channel_ce(rs, r)
                    l_disc.backward()
                    disc_state = _apply(disc, _grads(disc), disc_state, cfg)
                row["L_cc_ce"] = l_disc.item()
                _zero(params)
                y = one_hot(batch.speakers, model.config.n_speakers)
                pair = model.embed(batch.x, batch.mask)
                ys, _ = classify(model.spk_head, pair.speaker)
                rs, _ = classify(model.nuis_head, pair.speaker)
                l_spk = speaker_ce(ys, y)
                loss = l_spk + anti_loss(rs, r)
                row["L_ss_ce"] = l_spk.item()
                row["L_total"] = loss.item()
            elif method == "e2e":
                batch = build_e2e_batch(corpus, cfg.e2e_speakers, cfg.e2e_utterances, rng, cfg.segment_frames)
                _zero(params)
                pair = model.embed(batch.x, batch.mask)
                F = pair.speaker.shape[-1]
                emb = tn.reshape(pair.speaker, (cfg.e2e_speakers, cfg.e2e_utterances, F))
                loss = -e2e_batch_objective(e2e_scores(emb, model.e2e_log_a, model.e2e_d))
                row["L_total"] = loss.item()
            else:
                batch = build_classification_batch(corpus, cfg, rng)
                _zero(params)
                loss, parts = method_loss(method, model, batch, cfg, cfg.grl_lambda(it))
                row.update(parts)
            if not np.isfinite(loss.item()):
                raise NumericDomainError(f"loss is {loss.item()}")
            loss.backward()
            state = _apply(update, _grads(update), state, cfg)
        except NumericDomainError as exc:
            for k, p in params.items():
                p.data = last_good[k]
            ckpt = None
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                ckpt = str(out_dir / "last_good.jfem")
                save_checkpoint(ckpt, model)
            raise TrainingDiverged(f"training diverged at iteration {it}: {exc}", it, ckpt) from exc
        last_good = {k: p.data for k, p in params.items()}
        log.append(row)
        if out_dir is not None and cfg.checkpoint_interval and (it + 1) % cfg.checkpoint_interval == 0:
            out_dir.mkdir(parents=True, exist_ok=True)
            path = str(out_dir / f"ckpt_{it + 1:06d}.jfem")
            save_checkpoint(path, model)
            checkpoints.append(path)
    if log_path is not None:
        write_loss_csv(log_path, log)
    return TrainResult(model, log, checkpoints)


# -- loss log ------------------------------------------------------------------------


def write_loss_csv(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([int(row["iter"])] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LOG_COLUMNS:
            raise ContractViolation(f"{path}: unexpected loss-log header {header}")
        return [
            {"iter": int(rec[0]), **{k: float(v) for k, v in zip(LOG_COLUMNS[1:], rec[1:])}}
            for rec in reader
        ]
