"""Training objectives, all built from tape primitives.

Batched probability inputs have shape (B, C); every loss returns the mean
over the batch rows.  Labels are one-hot arrays of the same shape (a single
row may be passed as a 1-D vector).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractViolation, NumericDomainError
from .tensor import LOG_FLOOR, Tensor

CORR_EPS = 1e-8


def one_hot(ids, n_classes: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
        raise ContractViolation(f"class ids must lie in [0, {n_classes}), got {ids.min()}..{ids.max()}")
    out = np.zeros(ids.shape + (n_classes,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def _check_one_hot(labels, probs: Tensor) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise ContractViolation(f"label shape {y.shape} does not match predictions {probs.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ContractViolation("labels must be one-hot (exactly one 1 per row)")
    return y


def _row_mean(per_row: Tensor) -> Tensor:
    return tn.mean(per_row) if per_row.ndim else per_row


def speaker_ce(probs, labels) -> Tensor:
    """-sum_n y_n log p_n, log floored at 1e-12."""
    p = tn.as_tensor(probs)
    y = _check_one_hot(labels, p)
    return _row_mean(-tn.tsum(y * tn.log_floored(p), axis=-1))


def channel_ce(probs, labels) -> Tensor:
    """Nuisance-class cross-entropy; same form as :func:`speaker_ce`."""
    return speaker_ce(probs, labels)


def anti_loss(probs, labels) -> Tensor:
    """Cross-entropy against the bit-flipped label: -sum_m (1 - r_m) log p_m."""
    p = tn.as_tensor(probs)
    r = _check_one_hot(labels, p)
    return _row_mean(-tn.tsum((1.0 - r) * tn.log_floored(p), axis=-1))


def subtask_entropy(probs) -> Tensor:
    """Shannon entropy with 0 log 0 = 0."""
    p = tn.as_tensor(probs)
    if np.any(p.data < 0):
        raise ContractViolation("entropy needs a probability vector")
    return _row_mean(-tn.tsum(p * tn.log_floored(p), axis=-1))


def _l2_normalize(x: Tensor, what: str) -> Tensor:
    sq = tn.tsum(x * x, axis=-1, keepdims=True)
    if np.any(sq.data <= 0):
        raise NumericDomainError(f"e2e_scores: zero-norm {what}")
    return x / tn.sqrt(sq)


def e2e_scores(embeddings, log_a, d) -> Tensor:
    """Scaled cosine scores S[(j,k), i] = a cos(w_jk, c_i) + d, with a = exp(log_a).

    Rows are ordered j-major (row index j*K + k).  The own-speaker centroid
    leaves w_jk out; with K == 1 it cannot, and the full centroid is used.
    """
    e = tn.as_tensor(embeddings)
    if e.ndim != 3:
        raise ContractViolation(f"e2e embeddings must be (J, K, F), got {e.shape}")
    J, K, F = e.shape
    if J < 2:
        raise ContractViolation(f"e2e needs at least 2 speakers, got J={J}")
    en = _l2_normalize(e, "embedding")
    c = tn.mean(e, axis=1)
    cn = _l2_normalize(c, "centroid")
    cos_all = tn.reshape(en, (J * K, F)) @ tn.transpose(cn)
    own = np.zeros((J * K, J))
    own[np.arange(J * K), np.repeat(np.arange(J), K)] = 1.0
    if K > 1:
        loo = (tn.reshape(c, (J, 1, F)) * float(K) - e) / float(K - 1)
        cos_own = tn.tsum(en * _l2_normalize(loo, "leave-one-out centroid"), axis=-1)
        cos = cos_all * (1.0 - own) + tn.reshape(cos_own, (J * K, 1)) * own
    else:
        cos = cos_all
    return tn.exp(tn.as_tensor(log_a)) * cos + d


def _impostor_lse(S: Tensor, own: np.ndarray) -> Tensor:
    masked = S + np.where(own > 0, -1e9, 0.0)
    m = masked.data.max(axis=-1, keepdims=True)
    return tn.log(tn.tsum(tn.exp(masked - m), axis=-1)) + m.reshape(m.shape[:-1])


def e2e_loss(S, j: int, k: int) -> Tensor:
    """S[jk, j] - log sum_{i != j} exp(S[jk, i]) for one utterance (to be maximized)."""
    S = tn.as_tensor(S)
    rows, J = S.shape
    if J < 2:
        raise ContractViolation("e2e_loss needs at least 2 speakers (empty impostor sum)")
    K = rows // J
    row = tn.reshape(S[j * K + k], (1, J))
    own = np.zeros((1, J))
    own[0, j] = 1.0
    return tn.reshape(row[:, j], ()) - tn.reshape(_impostor_lse(row, own), ())


def e2e_batch_objective(S) -> Tensor:
    """Mean of e2e_loss over every row of S (still to be maximized)."""
    S = tn.as_tensor(S)
    rows, J = S.shape
    if J < 2:
        raise ContractViolation("e2e loss needs at least 2 speakers (empty impostor sum)")
    K = rows // J
    own = np.zeros((rows, J))
    own[np.arange(rows), np.repeat(np.arange(J), K)] = 1.0
    target = tn.tsum(S * own, axis=-1)
    return tn.mean(target - _impostor_lse(S, own))


def nmapc(batch_spkr, batch_nuis, eps: float = CORR_EPS) -> Tensor:
    """Negative mean absolute dimension-wise Pearson correlation over the batch.

    Moments use 1/B normalization.  The product of standard deviations is
    floored at ``eps`` so constant columns give a finite value.
    """
    a, b = tn.as_tensor(batch_spkr), tn.as_tensor(batch_nuis)
    if a.ndim != 2 or a.shape != b.shape:
        raise ContractViolation(f"nmapc needs two equal (B, F) batches, got {a.shape} and {b.shape}")
    if a.shape[0] < 3:
        raise ContractViolation(f"nmapc needs a batch of at least 3, got {a.shape[0]}")
    ac = a - tn.mean(a, axis=0, keepdims=True)
    bc = b - tn.mean(b, axis=0, keepdims=True)
    cov = tn.mean(ac * bc, axis=0)
    var_prod = tn.mean(ac * ac, axis=0) * tn.mean(bc * bc, axis=0)
    denom = tn.sqrt(tn.clamp_min(var_prod, eps * eps))
    return -tn.mean(tn.tabs(cov) / denom)


@dataclass
class JfeWeights:
    ss_ce: float = 1.0
    cc_ce: float = 1.0
    sc_e: float = 1.0
    cs_e: float = 1.0
    nmapc: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


COMPONENT_NAMES = ("L_ss_ce", "L_cc_ce", "L_sc_e", "L_cs_e", "L_nmapc")


def combine_jfe(components: dict, weights: JfeWeights | None = None):
    """L_ss_ce + L_cc_ce - L_sc_e - L_cs_e - L_nmapc, each term weighted."""
    w = weights or JfeWeights()
    return (
        w.ss_ce * components["L_ss_ce"]
        + w.cc_ce * components["L_cc_ce"]
        - w.sc_e * components["L_sc_e"]
        - w.cs_e * components["L_cs_e"]
        - w.nmapc * components["L_nmapc"]
    )


def jfe_total(
    spk_probs_on_spkr,
    nuis_probs_on_nuis,
    spk_probs_on_nuis,
    nuis_probs_on_spkr,
    omega_spkr,
    omega_nuis,
    y,
    r,
    weights: JfeWeights | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Combined joint-factor objective and a float breakdown of its terms.

    The mapping of heads to embeddings:

    * L_ss_ce: speaker CE of the speaker head on omega_spkr
    * L_cc_ce: nuisance CE of the nuisance head on omega_nuis
    * L_sc_e:  entropy of the speaker head on omega_nuis
    * L_cs_e:  entropy of the nuisance head on omega_spkr
    * L_nmapc: nmapc(omega_spkr, omega_nuis)
    """
    comps = {
        "L_ss_ce": speaker_ce(spk_probs_on_spkr, y),
        "L_cc_ce": channel_ce(nuis_probs_on_nuis, r),
        "L_sc_e": subtask_entropy(spk_probs_on_nuis),
        "L_cs_e": subtask_entropy(nuis_probs_on_spkr),
        "L_nmapc": nmapc(omega_spkr, omega_nuis),
    }
    total = combine_jfe(comps, weights)
    breakdown = {k: v.item() for k, v in comps.items()}
    breakdown["L_total"] = total.item()
    return total, breakdown
