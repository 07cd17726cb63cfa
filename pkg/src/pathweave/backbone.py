"""Frozen interface: synthetic modality encoders, a miniature query transformer
(self-attention over learned query tokens, cross-attention to encoder features,
FFN), per-modality query banks, and a linear classification head.

Adapter sites are the d_model -> d_model transforms inside each block:
the two attention out-projections and the FFN sublayer. An adapter branch
always reads the site's input embedding, so its down-projection is
d_model x r at every site regardless of the FFN's hidden width.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import ana
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

SITE_KINDS = ("self_attn_out", "cross_attn_out", "ffn_out")

ENCODER_NONLINEARITIES = {
    "tanh": np.tanh,
    "sin": np.sin,
    "softsign": lambda x: x / (1.0 + np.abs(x)),
    "relu": lambda x: np.maximum(x, 0.0),
    "cos": np.cos,
}


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    n_queries: int = 8
    d_enc: int = 16
    n_classes: int = 8
    ffn_mult: int = 2
    adapter_sites: tuple = tuple(SITE_KINDS)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if not self.adapter_sites:
            raise ConfigError("adapter_sites must be non-empty")
        bad = [s for s in self.adapter_sites if s not in SITE_KINDS]
        if bad:
            raise ConfigError(f"unknown adapter sites {bad}; valid kinds: {SITE_KINDS}")

    def site_ids(self) -> list[str]:
        return [f"l{i}.{kind}" for i in range(self.n_layers) for kind in self.adapter_sites]


class Linear:
    """y = x @ w + b with w stored (d_in, d_out); trainable until frozen."""

    def __init__(self, d_in: int, d_out: int, seed: int, *stream, scheme: str = "kaiming"):
        self.w = T.seeded_init((d_in, d_out), scheme, seed, *stream, "w")
        self.w.requires_grad = True
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class _LayerNormParams:
    def __init__(self, d: int):
        self.g = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.g": self.g, f"{prefix}.b": self.b}


def _attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Mask-free multi-head attention: every query may attend to every key."""
    b, nq, d = q.shape
    nk = k.shape[1]
    dh = d // n_heads

    def split(t, n):
        return T.transpose(T.reshape(t, (b, n, n_heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
    scores = T.scale(T.matmul(qh, T.swap_last2(kh)), 1.0 / np.sqrt(dh))
    probs = T.softmax(scores, axis=-1)
    ctx = T.matmul(probs, vh)
    return T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, nq, d))


class QFormerLayer:
    def __init__(self, cfg: BackboneConfig, seed: int, idx: int):
        d, de, h = cfg.d_model, cfg.d_enc, cfg.ffn_mult * cfg.d_model
        s = (seed, f"l{idx}")
        self.self_wq = Linear(d, d, *s, "self.wq")
        self.self_wk = Linear(d, d, *s, "self.wk")
        self.self_wv = Linear(d, d, *s, "self.wv")
        self.self_out = Linear(d, d, *s, "self.out")
        self.ln1 = _LayerNormParams(d)
        self.cross_wq = Linear(d, d, *s, "cross.wq")
        self.cross_wk = Linear(de, d, *s, "cross.wk")
        self.cross_wv = Linear(de, d, *s, "cross.wv")
        self.cross_out = Linear(d, d, *s, "cross.out")
        self.ln2 = _LayerNormParams(d)
        self.fc1 = Linear(d, h, *s, "ffn.fc1")
        self.fc2 = Linear(h, d, *s, "ffn.fc2")
        self.ln3 = _LayerNormParams(d)

    def ffn(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name in ("self_wq", "self_wk", "self_wv", "self_out", "cross_wq",
                     "cross_wk", "cross_wv", "cross_out", "fc1", "fc2"):
            out.update(getattr(self, name).tensors(f"{prefix}.{name}"))
        for name in ("ln1", "ln2", "ln3"):
            out.update(getattr(self, name).tensors(f"{prefix}.{name}"))
        return out


class FrozenCore:
    """Q-Former blocks plus the classification head.

    Mutable only until stage-0 pretraining completes; freeze() then records a
    combined weight hash that later stages re-verify.
    """

    def __init__(self, cfg: BackboneConfig, seed: int):
        self.config = cfg
        self.pretrain_seed = seed
        self.layers = [QFormerLayer(cfg, seed, i) for i in range(cfg.n_layers)]
        self.head = Linear(cfg.d_model, cfg.n_classes, seed, "head")
        self.weight_hash: str | None = None

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.tensors(f"core.l{i}"))
        out.update(self.head.tensors("core.head"))
        return out

    @property
    def frozen(self) -> bool:
        return self.weight_hash is not None

    def compute_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name in sorted(self.named_tensors()):
            h.update(name.encode())
            h.update(self.named_tensors()[name].content_hash().encode())
        return h.hexdigest()

    def freeze(self) -> None:
        for t in self.named_tensors().values():
            t.freeze()
        self.weight_hash = self.compute_hash()

    def verify_hash(self) -> None:
        if self.weight_hash is None:
            raise ContractError("core has not been frozen yet")
        if self.compute_hash() != self.weight_hash:
            raise ContractError("frozen core weights changed since stage 0")


class QueryBank:
    """Per-modality learned query tokens; token 0 doubles as the modality's
    instruction embedding (it enters the blocks like any other query)."""

    def __init__(self, modality: int, cfg: BackboneConfig, seed: int, init_from: "QueryBank | None" = None):
        self.modality = modality
        if init_from is not None:
            self.tokens = Tensor(init_from.tokens.data.copy(), requires_grad=True)
        else:
            self.tokens = T.seeded_init((cfg.n_queries, cfg.d_model), "normal:0.02",
                                        seed, f"query.m{modality}")
            self.tokens.requires_grad = True

    @property
    def frozen(self) -> bool:
        return self.tokens.frozen

    def freeze(self) -> None:
        self.tokens.freeze()

    def content_hash(self) -> str:
        return self.tokens.content_hash()


class ModalityEncoder:
    """Frozen random featurizer mapping raw vectors to a (seq_len, d_enc) grid."""

    def __init__(self, modality: int, d_raw: int, seq_len: int, d_enc: int,
                 seed: int, nonlinearity: str):
        if nonlinearity not in ENCODER_NONLINEARITIES:
            raise ConfigError(f"unknown encoder nonlinearity {nonlinearity!r}")
        self.modality = modality
        self.d_raw = d_raw
        self.seq_len = seq_len
        self.d_enc = d_enc
        self.seed = seed
        self.nonlinearity = nonlinearity
        rng = T.rng_for(seed, "encoder", modality)
        scale = np.float32(1.0 / np.sqrt(d_raw))
        self.weights = rng.standard_normal((d_raw, seq_len * d_enc), dtype=np.float32) * scale
        self.weights.flags.writeable = False

    def encode(self, raw: np.ndarray) -> np.ndarray:
        """Featurize one raw vector (d_raw,) or a batch (B, d_raw)."""
        raw = np.asarray(raw, dtype=np.float32)
        if raw.shape[-1] != self.d_raw:
            raise ShapeError(f"raw width {raw.shape[-1]} != encoder d_raw {self.d_raw}")
        flat = ENCODER_NONLINEARITIES[self.nonlinearity](raw @ self.weights).astype(np.float32)
        if raw.ndim == 1:
            return flat.reshape(self.seq_len, self.d_enc)
        return flat.reshape(raw.shape[0], self.seq_len, self.d_enc)

    def content_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.weights.tobytes())
        return h.hexdigest()


def encode(encoder: ModalityEncoder, raw: np.ndarray) -> np.ndarray:
    return encoder.encode(raw)


def forward(core: FrozenCore, queries: QueryBank, feats, path=None) -> Tensor:
    """Run query tokens through the blocks against encoder features.

    feats is (T, d_enc) or (B, T, d_enc); returns logits (B, n_classes).
    When a path is given, every adapter site routes through
    ana.site_forward; otherwise the plain host transform runs.
    """
    cfg = core.config
    if path is not None:
        expected = set(cfg.site_ids())
        if set(path.sites()) != expected:
            raise ConfigError(
                f"path sites {sorted(path.sites())} do not match core sites {sorted(expected)}")
    f = feats.data if isinstance(feats, Tensor) else np.asarray(feats, dtype=np.float32)
    if f.ndim == 2:
        f = f[None, :, :]
    if f.shape[-1] != cfg.d_enc:
        raise ShapeError(f"feature width {f.shape[-1]} != d_enc {cfg.d_enc}")
    batch = f.shape[0]
    feats_t = Tensor(f)

    x = T.tile_leading(queries.tokens, batch)
    for i, layer in enumerate(core.layers):
        attn = _attention(layer.self_wq(x), layer.self_wk(x), layer.self_wv(x), cfg.n_heads)
        y = _site(layer.self_out, attn, f"l{i}.self_attn_out", cfg, path)
        x = layer.ln1(T.add(x, y))

        attn = _attention(layer.cross_wq(x), layer.cross_wk(feats_t),
                          layer.cross_wv(feats_t), cfg.n_heads)
        y = _site(layer.cross_out, attn, f"l{i}.cross_attn_out", cfg, path)
        x = layer.ln2(T.add(x, y))

        y = _site(layer.ffn, x, f"l{i}.ffn_out", cfg, path)
        x = layer.ln3(T.add(x, y))

    pooled = T.mean(x, axis=1)
    return core.head(pooled)


def _site(host, x: Tensor, site_id: str, cfg: BackboneConfig, path) -> Tensor:
    kind = site_id.split(".", 1)[1]
    if path is None or kind not in cfg.adapter_sites:
        return host(x)
    return ana.site_forward(host, x, path, site_id)


@dataclass
class Model:
    """Everything trainable or frozen that belongs to the interface itself."""

    core: FrozenCore
    query_banks: dict = field(default_factory=dict)
    stack: "ana.AdapterStack | None" = None

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.core.named_tensors())
        for m, bank in sorted(self.query_banks.items()):
            out[f"query.m{m}"] = bank.tokens
        if self.stack is not None:
            out.update(self.stack.named_tensors())
        return out


def pretrain_stage0(model: Model, encoder: ModalityEncoder, datasets, cfg) -> dict:
    """Train the unfrozen core, head, and modality-0 query bank, then freeze.

    Returns a log dict with the loss curve and the recorded eval accuracy.
    Aborts with TrainingDivergedError if the loss goes non-finite.
    """
    from .trainer import sgd_loop  # deferred: trainer imports this module

    if model.core.frozen:
        raise ContractError("core is already frozen")
    q0 = model.query_banks[0]
    params = dict(model.core.named_tensors())
    params["query.m0"] = q0.tokens
    log = sgd_loop(model, encoder, q0, datasets, params, cfg, method="pretrain")
    model.core.freeze()
    q0.freeze()
    return log
