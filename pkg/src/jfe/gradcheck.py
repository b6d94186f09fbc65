"""Finite-difference audit of every differentiable piece of the package.

Each case builds a small random problem, compares the tape's gradient with
central differences and reports the worst relative error.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .losses import (
    anti_loss,
    channel_ce,
    e2e_batch_objective,
    e2e_loss,
    e2e_scores,
    jfe_total,
    nmapc,
    one_hot,
    speaker_ce,
    subtask_entropy,
)
from .nets import (
    AttentionHead,
    ClassifierHead,
    LstmProjParams,
    TdnnParams,
    attention_pool,
    classify,
    dual_attention_pool,
    grl_node,
    lstm_forward,
    tdnn_forward,
)
from .tensor import PRIMITIVES, Tensor, _rel_errors, backward, grad_check, grad_check_params

TOLERANCE = 1e-4


@dataclass
class CheckRow:
    group: str
    name: str
    max_rel_error: float
    n_checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _off_kinks(v):
    v = np.where(np.abs(v) < 0.05, 0.3, v)
    return np.where(np.abs(v - 0.1) < 0.05, 0.4, v)


def _weighted(fn, shape_of, rng):
    w = rng.normal(size=shape_of)
    return lambda t: (fn(t) * w).sum()


# -- primitives ----------------------------------------------------------------------

_UNARY = {
    "exp": lambda x: tn.exp(x),
    "log": lambda x: tn.log(tn.tabs(x) + 0.5),
    "log_floored": lambda x: tn.log_floored(tn.tabs(x) + 0.5),
    "tanh": tn.tanh,
    "sigmoid": tn.sigmoid,
    "relu": tn.relu,
    "leaky_relu": lambda x: tn.leaky_relu(x, 0.1),
    "softmax": tn.softmax,
    "sum": lambda x: tn.tsum(x, axis=0),
    "mean": lambda x: tn.mean(x, axis=-1, keepdims=True),
    "neg": tn.neg,
    "abs": tn.tabs,
    "sqrt": lambda x: tn.sqrt(x * x + 0.5),
    "transpose": tn.transpose,
    "reshape": lambda x: tn.reshape(x, (-1,)),
    "getitem": lambda x: x[:, ::2],
    "take": lambda x: tn.take(x, [[0, 0], [1, 0]], axis=0),
    "concat": lambda x: tn.concat([x, x * 2.0], axis=0),
    "clamp_min": lambda x: tn.clamp_min(x, 0.1),
}


def _check_unary(name, rng):
    fn = _UNARY[name]
    x = _off_kinks(rng.uniform(-2, 2, size=(3, 4)))
    return grad_check(_weighted(fn, fn(Tensor(x)).shape, rng), x)


def _check_binary(name, rng):
    op = getattr(tn, name)
    a = rng.uniform(-2, 2, size=(3, 4))
    b = rng.uniform(-2, 2, size=(4, 2) if name == "matmul" else (1, 4))
    if name == "div":
        b = np.sign(b) * (np.abs(b) + 0.5)
    w = rng.normal(size=op(a, b).shape)
    ra = grad_check(lambda t: (op(t, b) * w).sum(), a)
    rb = grad_check(lambda t: (op(a, t) * w).sum(), b)
    return ra if ra.max_rel_error >= rb.max_rel_error else rb


def _check_lstm_kernel(rng):
    B, T, D, H, P = 2, 5, 3, 4, 2
    vals = [rng.normal(size=(B, T, D)), rng.normal(size=(D, 4 * H)) * 0.5, rng.normal(size=(P, 4 * H)) * 0.5,
            rng.normal(size=4 * H) * 0.5, rng.normal(size=(H, P)) * 0.5]
    params = {n: Tensor(v, requires_grad=True) for n, v in zip(["x", "wx", "wh", "b", "wp"], vals)}
    w = rng.normal(size=(B, T, P))
    return grad_check_params(lambda: (tn.lstm_proj(*params.values()) * w).sum(), params)


def _check_reversal(rng, op=tn.grl):
    # the reversal is deliberately not the derivative of its forward pass:
    # the reference is -lam times the finite-difference gradient of the identity
    lam = 0.7
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=x.shape)
    leaf = Tensor(x, requires_grad=True)
    backward((op(leaf, lam) * w).sum())
    numeric = grad_check(lambda t: (t * w).sum(), x)
    assert numeric.passed
    err = _rel_errors(leaf.grad, -lam * w, 1e-6)
    return tn.GradCheckReport(float(err.max()), float(err.mean()), x.size, TOLERANCE)


def _primitive_cases():
    cases = {name: (lambda rng, n=name: _check_unary(n, rng)) for name in _UNARY}
    for name in ("add", "sub", "mul", "div", "matmul"):
        cases[name] = lambda rng, n=name: _check_binary(n, rng)
    cases["lstm_proj"] = _check_lstm_kernel
    cases["grl"] = _check_reversal
    missing = set(PRIMITIVES) - set(cases)
    if missing:
        raise RuntimeError(f"no gradient check for primitives {sorted(missing)}")
    return {k: cases[k] for k in sorted(PRIMITIVES)}


# -- networks --------------------------------------------------------------------------


def _pd(module, prefix=""):
    return dict(module.named_params(prefix))


def _jitter_biases(params, rng):
    # zero biases put rectifier units exactly on their kink
    for name, p in params.items():
        if name.endswith("b"):
            p.data = p.data + rng.uniform(0.2, 0.5, size=p.shape) * rng.choice([-1, 1], size=p.shape)


def _with_input(params: dict, x):
    leaf = Tensor(x, requires_grad=True)
    return {**params, "input": leaf}, leaf


def _check_lstm_net(rng):
    p = LstmProjParams(3, 4, 2, rng)
    _jitter_biases(_pd(p, ""), rng)
    params, x = _with_input(_pd(p, ""), rng.normal(size=(2, 6, 3)))
    w = rng.normal(size=(2, 6, 2))
    return grad_check_params(lambda: (lstm_forward(p, x) * w).sum(), params, rng=rng)


def _check_tdnn_net(rng):
    p = TdnnParams(3, (4, 4, 4, 3, 3), rng)
    _jitter_biases(_pd(p, ""), rng)
    params, x = _with_input(_pd(p, ""), rng.normal(size=(2, 6, 3)))
    w = rng.normal(size=(2, 6, 3))
    return grad_check_params(lambda: (tdnn_forward(p, x) * w).sum(), params, max_per_param=12, rng=rng)


def _check_attention(rng, mask=None):
    head = AttentionHead(3, 4, rng)
    params, h = _with_input(_pd(head, ""), rng.normal(size=(2, 5, 3)))
    w = rng.normal(size=(2, 3))
    return grad_check_params(lambda: (attention_pool(head, h, mask)[0] * w).sum(), params, rng=rng)


def _check_dual_attention(rng):
    a, b = AttentionHead(3, 4, rng), AttentionHead(3, 4, rng)
    params, h = _with_input({**_pd(a, "s."), **_pd(b, "n.")}, rng.normal(size=(2, 5, 3)))
    ws, wn = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

    def f():
        pair = dual_attention_pool(a, b, h)
        return (pair.speaker * ws).sum() + (pair.nuisance * wn).sum()

    return grad_check_params(f, params, rng=rng)


def _check_classifier(rng):
    head = ClassifierHead(4, (5,), 3, rng, activation="leaky_relu")
    _jitter_biases(_pd(head, ""), rng)
    params, x = _with_input(_pd(head, ""), rng.normal(size=(3, 4)))
    y = one_hot([0, 2, 1], 3)
    return grad_check_params(lambda: speaker_ce(classify(head, x)[0], y), params, rng=rng)


def _network_cases():
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    return {
        "lstm_forward": _check_lstm_net,
        "tdnn_forward": _check_tdnn_net,
        "attention_pool": _check_attention,
        "attention_pool_masked": lambda rng: _check_attention(rng, mask),
        "dual_attention_pool": _check_dual_attention,
        "classify": _check_classifier,
        "grl_node": lambda rng: _check_reversal(rng, grl_node),
    }


# -- losses ------------------------------------------------------------------------------


def _loss_cases():
    def ce(rng, fn=speaker_ce):
        # gradient taken through the softmax logits so probabilities stay on the simplex
        y = one_hot(rng.integers(0, 4, size=3), 4)
        return grad_check(lambda t: fn(tn.softmax(t), y), rng.normal(size=(3, 4)))

    def entropy(rng):
        return grad_check(lambda t: subtask_entropy(tn.softmax(t)), rng.normal(size=(3, 5)))

    def e2e(rng):
        e = rng.normal(size=(3, 3, 4))
        r1 = grad_check(lambda t: e2e_loss(e2e_scores(t, 0.3, -1.0), 1, 2), e)
        r2 = grad_check(lambda t: e2e_batch_objective(e2e_scores(t, 0.3, -1.0)), e)
        return r1 if r1.max_rel_error >= r2.max_rel_error else r2

    def mapc(rng):
        b = rng.normal(size=(6, 3))
        return grad_check(lambda t: nmapc(t, b), rng.normal(size=(6, 3)))

    def total(rng):
        B, F, S, C = 4, 3, 3, 2
        pos = {"ws": (0, B * F), "wn": (B * F, 2 * B * F)}
        head_s = ClassifierHead(F, (), S, rng)
        head_n = ClassifierHead(F, (), C, rng)
        y, r = one_hot(rng.integers(0, S, B), S), one_hot(rng.integers(0, C, B), C)

        def f(t):
            ws = tn.reshape(t[pos["ws"][0]:pos["ws"][1]], (B, F))
            wn = tn.reshape(t[pos["wn"][0]:pos["wn"][1]], (B, F))
            out, _ = jfe_total(classify(head_s, ws)[0], classify(head_n, wn)[0], classify(head_s, wn)[0],
                               classify(head_n, ws)[0], ws, wn, y, r)
            return out

        return grad_check(f, rng.normal(size=2 * B * F))

    return {
        "speaker_ce": ce,
        "channel_ce": lambda rng: ce(rng, channel_ce),
        "anti_loss": lambda rng: ce(rng, anti_loss),
        "subtask_entropy": entropy,
        "e2e_loss": e2e,
        "nmapc": mapc,
        "jfe_total": total,
    }


def all_cases() -> list[tuple[str, str, Callable]]:
    out = [("primitive", k, f) for k, f in _primitive_cases().items()]
    out += [("network", k, f) for k, f in _network_cases().items()]
    out += [("loss", k, f) for k, f in _loss_cases().items()]
    return out


def run_suite(seed: int = 0) -> list[CheckRow]:
    rows = []
    for k, (group, name, fn) in enumerate(all_cases()):
        t0 = time.perf_counter()
        rep = fn(np.random.default_rng([seed, k]))
        rows.append(CheckRow(group, name, rep.max_rel_error, rep.n_checked, time.perf_counter() - t0))
    return rows


def format_table(rows: list[CheckRow]) -> str:
    lines = [f"{'group':<10} {'check':<22} {'max_rel_err':>12} {'n':>5}  result"]
    for r in rows:
        lines.append(f"{r.group:<10} {r.name:<22} {r.max_rel_error:>12.3e} {r.n_checked:>5}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
