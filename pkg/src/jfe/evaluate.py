"""Embedding extraction, cosine scoring, EER / DET and disentanglement diagnostics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractViolation, NumericDomainError
from .losses import nmapc, one_hot, speaker_ce
from .nets import EmbeddingModel, EmbeddingPair, classify
from .tensor import Tensor


# -- extraction ----------------------------------------------------------------


@dataclass
class Embeddings:
    """Speaker (and optional nuisance) embeddings keyed by utterance id."""

    ids: list[str]
    speaker: np.ndarray
    nuisance: np.ndarray | None = None

    def index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.ids)}

    def save(self, path) -> None:
        arrays = {"ids": np.asarray(self.ids), "speaker": self.speaker}
        if self.nuisance is not None:
            arrays["nuisance"] = self.nuisance
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "Embeddings":
        with np.load(path, allow_pickle=False) as z:
            nuis = z["nuisance"] if "nuisance" in z.files else None
            return cls([str(u) for u in z["ids"]], z["speaker"].copy(), None if nuis is None else nuis.copy())


def extract_embedding(model: EmbeddingModel, features, source: str | None = None):
    """Forward pass without tape recording.

    Returns an ``EmbeddingPair`` of numpy arrays (nuisance is None for
    single-pool models).  ``source='hidden'`` substitutes the speaker head's
    last hidden activation for the pooled speaker embedding.
    """
    f = features.frames if hasattr(features, "frames") else np.asarray(features)
    if f.ndim != 2:
        raise ContractViolation(f"features must be (T, D), got {f.shape}")
    if f.shape[1] != model.config.input_dim:
        raise ContractViolation(f"feature dim {f.shape[1]} != model input dim {model.config.input_dim}")
    source = source or model.config.embedding_source
    with tn.no_grad():
        pair = model.embed(f[None])
        spk = pair.speaker
        if source == "hidden":
            _, spk = classify(model.spk_head, spk)
        return EmbeddingPair(
            spk.data[0].copy(),
            None if pair.nuisance is None else pair.nuisance.data[0].copy(),
            pair.alpha_speaker.data[0].copy(),
            None if pair.alpha_nuisance is None else pair.alpha_nuisance.data[0].copy(),
        )


def extract_all(model: EmbeddingModel, features: dict[str, np.ndarray], source: str | None = None) -> Embeddings:
    ids = sorted(features)
    pairs = [extract_embedding(model, features[u], source) for u in ids]
    nuis = None if pairs[0].nuisance is None else np.stack([p.nuisance for p in pairs])
    return Embeddings(ids, np.stack([p.speaker for p in pairs]), nuis)


# -- scoring -------------------------------------------------------------------------


def cosine_score(enroll, test) -> float:
    """Cosine between the mean of the enrollment embeddings and the test embedding."""
    e = np.asarray(enroll, dtype=np.float64)
    e = e.mean(axis=0) if e.ndim == 2 else e
    t = np.asarray(test, dtype=np.float64)
    ne, nt = np.linalg.norm(e), np.linalg.norm(t)
    if ne == 0 or nt == 0:
        raise NumericDomainError("cosine_score: zero-norm embedding")
    return float(np.clip(e @ t / (ne * nt), -1.0, 1.0))


@dataclass(frozen=True)
class Score:
    enroll_id: str
    test_id: str
    score: float


def score_trials(emb: Embeddings, enroll: dict[str, list[str]], trials) -> list[Score]:
    idx = emb.index()
    missing = [u for ids in enroll.values() for u in ids if u not in idx] + [
        t.test_id for t in trials if t.test_id not in idx
    ]
    if missing:
        raise ContractViolation(f"embeddings missing for utterances {sorted(set(missing))[:5]}")
    models = {}
    out = []
    for t in trials:
        if t.enroll_id not in enroll:
            raise ContractViolation(f"unknown enrollment id {t.enroll_id!r}")
        if t.enroll_id not in models:
            models[t.enroll_id] = emb.speaker[[idx[u] for u in enroll[t.enroll_id]]]
        out.append(Score(t.enroll_id, t.test_id, cosine_score(models[t.enroll_id], emb.speaker[idx[t.test_id]])))
    return out


def write_scores(path, scores) -> None:
    with open(path, "w") as fh:
        for s in scores:
            fh.write(f"{s.enroll_id}\t{s.test_id}\t{s.score!r}\n")


def read_scores(path) -> list[Score]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ContractViolation(f"{path}:{lineno}: expected enroll_id, test_id, score")
            out.append(Score(parts[0], parts[1], float(parts[2])))
    return out


# -- error rates -------------------------------------------------------------------------


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    far: float
    frr: float


def _split_scores(scores) -> tuple[np.ndarray, np.ndarray]:
    arr = list(scores)
    s = np.array([float(a) for a, _ in arr])
    lab = np.array([bool(b) for _, b in arr])
    if lab.all() or not lab.any():
        raise ContractViolation("need at least one target and one nontarget score")
    return s[lab], s[~lab]


def det_curve(scores) -> list[DetPoint]:
    """Operating points over every distinct score, plus the reject-all point.

    A trial is accepted when its score is >= the threshold.
    """
    tgt, non = _split_scores(scores)
    thresholds = np.unique(np.concatenate([tgt, non]))
    tgt_sorted, non_sorted = np.sort(tgt), np.sort(non)
    frr = np.searchsorted(tgt_sorted, thresholds, side="left") / tgt.size
    far = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / non.size
    pts = [DetPoint(float(t), float(a), float(r)) for t, a, r in zip(thresholds, far, frr)]
    pts.append(DetPoint(float("inf"), 0.0, 1.0))
    return pts


def eer_from_det(points: list[DetPoint]) -> tuple[float, float]:
    """First crossing of FRR over FAR, linearly interpolated between neighbouring points."""
    prev = points[0]
    for p in points:
        if p.frr >= p.far:
            if p.frr == p.far or p is prev:
                return p.far, p.threshold
            d_prev = prev.far - prev.frr
            d_cur = p.far - p.frr
            s = d_prev / (d_prev - d_cur)
            eer = prev.far + s * (p.far - prev.far)
            thr = prev.threshold + s * (p.threshold - prev.threshold) if np.isfinite(p.threshold) else prev.threshold
            return float(eer), float(thr)
        prev = p
    raise AssertionError("DET sweep must end at FRR = 1")


def compute_eer(scores) -> tuple[float, float]:
    """EER and operating threshold from (score, is_target) pairs."""
    return eer_from_det(det_curve(scores))


def write_det_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "far", "frr"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.far), repr(p.frr)])


def read_det_csv(path) -> list[DetPoint]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["threshold", "far", "frr"]:
            raise ContractViolation(f"{path}: bad DET header")
        return [DetPoint(float(a), float(b), float(c)) for a, b, c in reader]


# -- diagnostics -----------------------------------------------------------------------


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    n_train: int
    n_test: int


def _stratified_split(labels: np.ndarray, rng, test_fraction: float = 0.2):
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = max(1, int(round(test_fraction * idx.size)))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.array(sorted(train)), np.array(sorted(test))


def probe_leakage(embeddings, labels, rng: np.random.Generator, steps: int = 300,
                  learning_rate: float = 0.05) -> ProbeResult:
    """Held-out accuracy of a multinomial linear probe (80/20 stratified split).

    Inputs are standardized with training-split statistics and the probe is
    fit by full-batch Adam on cross-entropy.
    """
    from .train import AdamState, TrainConfig, adam_step

    X = np.asarray(embeddings, dtype=np.float64)
    raw = np.asarray(labels)
    classes, y = np.unique(raw, return_inverse=True)
    if classes.size < 2:
        raise ContractViolation("probe needs at least 2 classes")
    counts = np.bincount(y)
    if counts.min() < 2:
        raise ContractViolation(f"class {classes[counts.argmin()]!r} has fewer than 2 samples")
    tr, te = _stratified_split(y, rng)
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Xs = (X - mu) / sd
    K = classes.size
    W = Tensor(np.zeros((X.shape[1], K)), requires_grad=True)
    b = Tensor(np.zeros(K), requires_grad=True)
    Y = one_hot(y[tr], K)
    cfg = TrainConfig(learning_rate=learning_rate)
    state = AdamState()
    Xtr = Tensor(Xs[tr])
    for _ in range(steps):
        W.grad = b.grad = None
        loss = speaker_ce(tn.softmax(Xtr @ W + b), Y)
        loss.backward()
        new, state = adam_step({"W": W.data, "b": b.data}, {"W": W.grad, "b": b.grad}, state, cfg)
        W.data, b.data = new["W"], new["b"]
    pred = np.argmax(Xs[te] @ W.data + b.data, axis=1)
    return ProbeResult(float(np.mean(pred == y[te])), 1.0 / K, tr.size, te.size)


@dataclass
class MapcResult:
    value: float
    degenerate_columns: int


def measure_mapc(batch_spkr, batch_nuis) -> MapcResult:
    """Mean absolute dimension-wise Pearson correlation, evaluation mode."""
    a = np.asarray(batch_spkr, dtype=np.float64)
    b = np.asarray(batch_nuis, dtype=np.float64)
    with tn.no_grad():
        v = -nmapc(Tensor(a), Tensor(b)).item()
    degenerate = int(np.sum((a.std(axis=0) * b.std(axis=0)) < 1e-8)) if a.ndim == 2 else 0
    return MapcResult(v, degenerate)


def attention_contrast(alpha_spkr: np.ndarray, alpha_nuis: np.ndarray) -> tuple[float, float]:
    """Variance across frames of each attention vector."""
    return float(np.var(alpha_spkr)), float(np.var(alpha_nuis))


# -- report ------------------------------------------------------------------------------


def trial_eers(trials, scores) -> dict[str, float]:
    by_key = {(s.enroll_id, s.test_id): s.score for s in scores}
    out = {}
    for name, keep in (("eer_overall", None), ("eer_matched", True), ("eer_mismatched", False)):
        pairs = []
        for t in trials:
            if keep is not None and t.matched != keep:
                continue
            key = (t.enroll_id, t.test_id)
            if key not in by_key:
                raise ContractViolation(f"no score for trial {key}")
            pairs.append((by_key[key], t.target))
        labels = {b for _, b in pairs}
        out[name] = compute_eer(pairs)[0] if labels == {True, False} else float("nan")
    return out


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
