"""Frame networks, attention pooling, classifier heads and the embedding model.

Conventions: activations are row vectors, so an affine map is ``x @ W + b``
with ``W`` of shape (fan_in, fan_out).  Frame networks take (B, T, D) tensors
and return (B, T, P); a (T, D) input is treated as a batch of one.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, ContractViolation
from .tensor import Tensor

MASK_BIAS = -1e9

TDNN_CONTEXTS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))

CHECKPOINT_MAGIC = b"JFEM"
CHECKPOINT_VERSION = 1


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


def _param(value, name: str) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _as_batch(x) -> tuple[Tensor, bool]:
    """Return a (B, T, D) tensor and whether the input lacked the batch axis."""
    if hasattr(x, "frames") and not isinstance(x, Tensor):
        x = x.frames
    t = tn.as_tensor(x)
    if t.ndim == 2:
        return tn.reshape(t, (1,) + t.shape), True
    if t.ndim != 3:
        raise ContractViolation(f"frame input must be (T, D) or (B, T, D), got {t.shape}")
    return t, False


class Module:
    """Minimal parameter container: subclasses fill ``self._params``."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p


# -- frame networks ----------------------------------------------------------


class LstmProjParams(Module):
    """LSTM with a linear projection of the cell output (gates: i, f, g, o)."""

    def __init__(self, input_dim: int, cell_dim: int, proj_dim: int, rng: np.random.Generator):
        super().__init__()
        H, P = cell_dim, proj_dim
        wx = np.concatenate([glorot(rng, input_dim, H) for _ in range(4)], axis=1)
        wh = np.concatenate([glorot(rng, P, H) for _ in range(4)], axis=1)
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0
        self._params = {
            "wx": _param(wx, "wx"),
            "wh": _param(wh, "wh"),
            "b": _param(b, "b"),
            "wp": _param(glorot(rng, H, P), "wp"),
        }
        self.input_dim, self.cell_dim, self.proj_dim = input_dim, H, P

    @property
    def out_dim(self) -> int:
        return self.proj_dim


def lstm_forward(p: LstmProjParams, x, fused: bool = True) -> Tensor:
    """Frame outputs h_1..h_T of the projected LSTM, zero initial state.

    ``fused=False`` builds the same recursion from elementary primitives; it
    is slower and exists as an independent check of the fused kernel.
    """
    xb, squeeze = _as_batch(x)
    if xb.shape[2] != p.input_dim:
        raise ContractViolation(f"lstm: input dim {xb.shape[2]} != configured {p.input_dim}")
    q = p._params
    if fused:
        out = tn.lstm_proj(xb, q["wx"], q["wh"], q["b"], q["wp"])
    else:
        out = _lstm_unfused(p, xb)
    return tn.reshape(out, out.shape[1:]) if squeeze else out


def _lstm_unfused(p: LstmProjParams, xb: Tensor) -> Tensor:
    q = p._params
    B, T, _ = xb.shape
    H = p.cell_dim
    h = Tensor(np.zeros((B, p.proj_dim)))
    c = Tensor(np.zeros((B, H)))
    xw = xb @ q["wx"] + q["b"]
    outs = []
    for t in range(T):
        z = xw[:, t, :] + h @ q["wh"]
        i = tn.sigmoid(z[:, :H])
        f = tn.sigmoid(z[:, H : 2 * H])
        g = tn.tanh(z[:, 2 * H : 3 * H])
        o = tn.sigmoid(z[:, 3 * H :])
        c = f * c + i * g
        h = (o * tn.tanh(c)) @ q["wp"]
        outs.append(tn.reshape(h, (B, 1, p.proj_dim)))
    return tn.concat(outs, axis=1)


@dataclass
class TdnnLayer:
    offsets: tuple[int, ...]
    w: Tensor
    b: Tensor


class TdnnParams(Module):
    """Stack of spliced affine + rectifier layers, edge-clamped in time."""

    def __init__(
        self,
        input_dim: int,
        widths,
        rng: np.random.Generator,
        contexts=TDNN_CONTEXTS,
    ):
        super().__init__()
        widths = tuple(widths)
        if len(widths) != len(contexts):
            raise ConfigurationError(f"{len(widths)} TDNN widths for {len(contexts)} context sets")
        self.input_dim = input_dim
        self.layers: list[TdnnLayer] = []
        d = input_dim
        for k, (offs, width) in enumerate(zip(contexts, widths)):
            fan_in = d * len(offs)
            layer = TdnnLayer(
                tuple(offs),
                _param(glorot(rng, fan_in, width), f"l{k}.w"),
                _param(np.zeros(width), f"l{k}.b"),
            )
            self.layers.append(layer)
            self._params[f"l{k}.w"] = layer.w
            self._params[f"l{k}.b"] = layer.b
            d = width

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[1]


def splice_indices(T: int, offsets) -> np.ndarray:
    """(T, len(offsets)) frame indices with edge clamping."""
    return np.clip(np.arange(T)[:, None] + np.asarray(offsets)[None, :], 0, T - 1)


def tdnn_forward(p: TdnnParams, x) -> Tensor:
    xb, squeeze = _as_batch(x)
    if xb.shape[2] != p.input_dim:
        raise ContractViolation(f"tdnn: input dim {xb.shape[2]} != configured {p.input_dim}")
    h = xb
    B, T, _ = xb.shape
    for layer in p.layers:
        spliced = tn.take(h, splice_indices(T, layer.offsets), axis=1)
        spliced = tn.reshape(spliced, (B, T, len(layer.offsets) * h.shape[2]))
        h = tn.relu(spliced @ layer.w + layer.b)
    return tn.reshape(h, h.shape[1:]) if squeeze else h


# -- pooling -------------------------------------------------------------------


class AttentionHead(Module):
    """Frame scores e_t = v . tanh(W h_t + b)."""

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self._params = {
            "W": _param(glorot(rng, in_dim, hidden_dim), "W"),
            "b": _param(np.zeros(hidden_dim), "b"),
            "v": _param(glorot(rng, hidden_dim, 1), "v"),
        }
        self.in_dim = in_dim

    def scores(self, h: Tensor) -> Tensor:
        q = self._params
        e = tn.tanh(h @ q["W"] + q["b"]) @ q["v"]
        return tn.reshape(e, e.shape[:-1])


def attention_pool(head: AttentionHead, h, mask=None) -> tuple[Tensor, Tensor]:
    """Softmax-weighted frame average.  Returns (omega, alpha).

    ``mask`` (B, T) marks valid frames for right-padded batches.
    """
    hb, squeeze = _as_batch(h)
    if hb.shape[2] != head.in_dim:
        raise ContractViolation(f"attention: frame dim {hb.shape[2]} != head dim {head.in_dim}")
    e = head.scores(hb)
    if mask is not None:
        e = e + np.where(np.asarray(mask, dtype=bool), 0.0, MASK_BIAS)
    alpha = tn.softmax(e, axis=-1)
    B, T, P = hb.shape
    omega = tn.reshape(tn.reshape(alpha, (B, 1, T)) @ hb, (B, P))
    if squeeze:
        return tn.reshape(omega, (P,)), tn.reshape(alpha, (T,))
    return omega, alpha


@dataclass
class EmbeddingPair:
    speaker: Tensor
    nuisance: Tensor
    alpha_speaker: Tensor | None = None
    alpha_nuisance: Tensor | None = None


def dual_attention_pool(spkr_head: AttentionHead, nuis_head: AttentionHead, h, mask=None) -> EmbeddingPair:
    ws, a_s = attention_pool(spkr_head, h, mask)
    wn, a_n = attention_pool(nuis_head, h, mask)
    return EmbeddingPair(ws, wn, a_s, a_n)


def grl_node(x, lam: float) -> Tensor:
    """Identity forward, gradient times -lam backward."""
    if lam < 0:
        raise ContractViolation(f"GRL scale must be nonnegative, got {lam}")
    return tn.grl(x, lam)


# -- classifier heads --------------------------------------------------------------


_ACTIVATIONS = {"relu": tn.relu, "leaky_relu": tn.leaky_relu}


class ClassifierHead(Module):
    def __init__(self, in_dim: int, hidden, n_classes: int, rng: np.random.Generator, activation: str = "relu"):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.activation = activation
        self.in_dim = in_dim
        self.hidden: list[tuple[Tensor, Tensor]] = []
        d = in_dim
        for k, width in enumerate(hidden):
            w = _param(glorot(rng, d, width), f"h{k}.w")
            b = _param(np.zeros(width), f"h{k}.b")
            self.hidden.append((w, b))
            self._params[f"h{k}.w"] = w
            self._params[f"h{k}.b"] = b
            d = width
        self.out_w = _param(glorot(rng, d, n_classes), "out.w")
        self.out_b = _param(np.zeros(n_classes), "out.b")
        self._params["out.w"] = self.out_w
        self._params["out.b"] = self.out_b
        self.n_classes = n_classes


def classify(head: ClassifierHead, omega) -> tuple[Tensor, Tensor]:
    """Class posteriors and the last hidden activation."""
    x = tn.as_tensor(omega)
    if x.shape[-1] != head.in_dim:
        raise ContractViolation(f"classifier: input dim {x.shape[-1]} != head dim {head.in_dim}")
    single = x.ndim == 1
    if single:
        x = tn.reshape(x, (1, x.shape[0]))
    act = _ACTIVATIONS[head.activation]
    for w, b in head.hidden:
        x = act(x @ w + b)
    hidden = x
    probs = tn.softmax(x @ head.out_w + head.out_b, axis=-1)
    if single:
        return tn.reshape(probs, probs.shape[1:]), tn.reshape(hidden, hidden.shape[1:])
    return probs, hidden


# -- full model ----------------------------------------------------------------------


@dataclass
class ModelConfig:
    arch: str = "dvector"
    input_dim: int = 60
    n_speakers: int = 2
    n_nuisance: int = 2
    n_pools: int = 2
    lstm_cell: int = 512
    lstm_proj: int = 256
    tdnn_widths: tuple = (512, 512, 512, 512, 512)
    embed_dim: int = 512
    attention_dim: int = 64
    classifier_hidden: tuple = (256,)
    activation: str = "relu"
    embedding_source: str = "pooled"
    seed: int = 0

    def __post_init__(self):
        self.tdnn_widths = tuple(self.tdnn_widths)
        self.classifier_hidden = tuple(self.classifier_hidden)
        if self.arch not in ("dvector", "xvector"):
            raise ConfigurationError(f"unknown architecture {self.arch!r}")
        if self.n_pools not in (1, 2):
            raise ConfigurationError(f"n_pools must be 1 or 2, got {self.n_pools}")
        if self.embedding_source not in ("pooled", "hidden"):
            raise ConfigurationError(f"embedding_source must be pooled or hidden, got {self.embedding_source!r}")

    @property
    def embedding_dim(self) -> int:
        return self.lstm_proj if self.arch == "dvector" else self.embed_dim

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


class EmbeddingModel:
    """Frame network + one or two attention pools + speaker and nuisance heads.

    With two pools, both heads are shared by the two embeddings: the speaker
    head scores omega_spkr and omega_nuis alike (and likewise the nuisance
    head).
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        if config.arch == "dvector":
            self.frame_net = LstmProjParams(config.input_dim, config.lstm_cell, config.lstm_proj, rng)
        else:
            self.frame_net = TdnnParams(config.input_dim, config.tdnn_widths, rng)
        h_dim = self.frame_net.out_dim
        self.att_spkr = AttentionHead(h_dim, config.attention_dim, rng)
        self.att_nuis = AttentionHead(h_dim, config.attention_dim, rng) if config.n_pools == 2 else None
        self.post: tuple[Tensor, Tensor] | None = None
        if config.arch == "xvector":
            self.post = (
                _param(glorot(rng, h_dim, config.embed_dim), "post.w"),
                _param(np.zeros(config.embed_dim), "post.b"),
            )
        F = config.embedding_dim
        self.spk_head = ClassifierHead(F, config.classifier_hidden, config.n_speakers, rng, config.activation)
        self.nuis_head = ClassifierHead(F, config.classifier_hidden, config.n_nuisance, rng, config.activation)
        self.e2e_log_a = _param(np.array(np.log(10.0)), "e2e.log_a")
        self.e2e_d = _param(np.array(-5.0), "e2e.d")
        self.norm_mean = np.zeros(config.input_dim)
        self.norm_std = np.ones(config.input_dim)

    # parameters grouped by role; names are stable and used in checkpoints
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.frame_net.named_params("frame."))
        out.update(self.att_spkr.named_params("att_spkr."))
        if self.att_nuis is not None:
            out.update(self.att_nuis.named_params("att_nuis."))
        if self.post is not None:
            out["post.w"], out["post.b"] = self.post
        out.update(self.spk_head.named_params("spk_head."))
        out.update(self.nuis_head.named_params("nuis_head."))
        out["e2e.log_a"] = self.e2e_log_a
        out["e2e.d"] = self.e2e_d
        return out

    def param_group(self, group: str) -> dict[str, Tensor]:
        prefixes = {
            "embedding": ("frame.", "att_spkr.", "att_nuis.", "post."),
            "speaker_head": ("spk_head.",),
            "nuisance_head": ("nuis_head.",),
            "e2e": ("e2e.",),
        }[group]
        return {k: v for k, v in self.params().items() if k.startswith(prefixes)}

    def set_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.norm_mean = np.asarray(mean, dtype=np.float64).copy()
        self.norm_std = np.maximum(np.asarray(std, dtype=np.float64), 1e-8)

    def frames(self, x) -> Tensor:
        xb, _ = _as_batch(x)
        if xb.shape[2] != self.config.input_dim:
            raise ContractViolation(f"feature dim {xb.shape[2]} != model input dim {self.config.input_dim}")
        xn = Tensor((xb.data - self.norm_mean) / self.norm_std) if not xb.requires_grad else (
            (xb - self.norm_mean) / self.norm_std
        )
        if self.config.arch == "dvector":
            return lstm_forward(self.frame_net, xn)
        return tdnn_forward(self.frame_net, xn)

    def _post(self, pooled: Tensor) -> Tensor:
        if self.post is None:
            return pooled
        w, b = self.post
        return tn.relu(pooled @ w + b)

    def embed(self, x, mask=None) -> EmbeddingPair:
        """Pooled embeddings for a (B, T, D) batch.  With one pool, ``nuisance`` is None."""
        h = self.frames(x)
        ws, a_s = attention_pool(self.att_spkr, h, mask)
        if self.att_nuis is None:
            return EmbeddingPair(self._post(ws), None, a_s, None)
        wn, a_n = attention_pool(self.att_nuis, h, mask)
        return EmbeddingPair(self._post(ws), self._post(wn), a_s, a_n)


# -- checkpoint format -----------------------------------------------------------------


def save_checkpoint(path, model: EmbeddingModel) -> None:
    blocks = {name: p.data for name, p in model.params().items()}
    blocks["norm.mean"] = model.norm_mean
    blocks["norm.std"] = model.norm_std
    desc = model.config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            nb = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not a model checkpoint (bad magic)")
    version, dlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    config = ModelConfig.from_json(blob[pos : pos + dlen].decode("utf-8"))
    pos += dlen
    (n_blocks,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    blocks: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        blocks[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    if pos != len(blob):
        raise ContractViolation(f"{path}: {len(blob) - pos} trailing bytes")
    return config, blocks


def load_checkpoint(path) -> EmbeddingModel:
    config, blocks = read_checkpoint(path)
    model = EmbeddingModel(config)
    params = model.params()
    missing = set(params) - set(blocks)
    if missing:
        raise ContractViolation(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    for name, p in params.items():
        if blocks[name].shape != p.shape:
            raise ContractViolation(f"{path}: parameter {name} has shape {blocks[name].shape}, expected {p.shape}")
        p.data = blocks[name]
    model.norm_mean = blocks["norm.mean"]
    model.norm_std = blocks["norm.std"]
    return model
