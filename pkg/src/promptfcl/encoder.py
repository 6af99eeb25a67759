"""Small frozen transformer encoder with prefix-tuned attention.

Inputs are flat feature vectors: each one is cut into ``num_tokens`` equal
chunks, each chunk position with its own projection to the embedding width, prepended with a class token and
offset by positional embeddings. Blocks are pre-norm (attention, then a ReLU
feed-forward), both with residual connections. The output is the normalized
class token after the last block.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 6
    embed_dim: int = 64
    num_heads: int = 4
    num_tokens: int = 8
    input_dim: int = 32
    prompted_layers: tuple = (0, 1, 2, 3, 4)
    mlp_ratio: int = 2

    def __post_init__(self):
        object.__setattr__(self, "prompted_layers", tuple(sorted(set(int(i) for i in self.prompted_layers))))
        self.validate()

    def validate(self):
        for name in ("num_layers", "embed_dim", "num_heads", "num_tokens", "input_dim", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"encoder.{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"encoder.embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})")
        if self.input_dim % self.num_tokens:
            raise ValueError(f"encoder.input_dim ({self.input_dim}) must be divisible by num_tokens ({self.num_tokens})")
        bad = [i for i in self.prompted_layers if not 0 <= i < self.num_layers]
        if bad:
            raise ValueError(f"encoder.prompted_layers {bad} outside [0, {self.num_layers})")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def chunk(self) -> int:
        return self.input_dim // self.num_tokens


@dataclass
class FrozenEncoder:
    config: EncoderConfig
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        # frozen: wrap every array as a non-trainable tensor, and make it read-only
        self._t = {}
        for k, v in self.weights.items():
            v.setflags(write=False)
            self._t[k] = Tensor(v)
            self._t[k].data.setflags(write=False)

    def param(self, name: str) -> Tensor:
        return self._t[name]

    def parameters(self) -> list:
        return [self._t[k] for k in sorted(self._t)]

    @property
    def nbytes(self) -> int:
        return sum(v.nbytes for v in self.weights.values())


def build_encoder(config: EncoderConfig, seed) -> FrozenEncoder:
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    D, s = config.embed_dim, 1.0 / np.sqrt(config.embed_dim)
    hidden = D * config.mlp_ratio
    w = {
        "token_proj": rng.normal(0.0, 1.0 / np.sqrt(config.chunk), (config.num_tokens, config.chunk, D)),
        "cls_token": rng.normal(0.0, s, (1, D)),
        "pos_embed": rng.normal(0.0, s, (config.num_tokens + 1, D)),
    }
    for i in range(config.num_layers):
        for name, shape in (("wq", (D, D)), ("wk", (D, D)), ("wv", (D, D)), ("wo", (D, D)),
                            ("w1", (D, hidden)), ("w2", (hidden, D))):
            w[f"layer{i}.{name}"] = rng.normal(0.0, s, shape)
    return FrozenEncoder(config, w)


def save_encoder(enc: FrozenEncoder, path) -> None:
    arrays = dict(enc.weights)
    arrays["__config__"] = np.frombuffer(json.dumps(asdict(enc.config)).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_encoder(path) -> FrozenEncoder:
    with np.load(Path(path)) as z:
        cfg = json.loads(bytes(z["__config__"]).decode())
        weights = {k: z[k].copy() for k in z.files if k != "__config__"}
    cfg["prompted_layers"] = tuple(cfg["prompted_layers"])
    return FrozenEncoder(EncoderConfig(**cfg), weights)


def _embed(x: np.ndarray, enc: FrozenEncoder) -> Tensor:
    cfg = enc.config
    B = x.shape[0]
    # one projection per slice position: (B, T, 1, chunk) @ (T, chunk, D)
    slices = Tensor(x.reshape(B, cfg.num_tokens, 1, cfg.chunk))
    tokens = (slices @ enc.param("token_proj")).reshape(B, cfg.num_tokens, cfg.embed_dim)
    cls = Tensor(np.broadcast_to(enc.param("cls_token").data, (B, 1, cfg.embed_dim)))
    return T.concat([cls, tokens], axis=1) + enc.param("pos_embed")


def _heads(t: Tensor, B: int, cfg: EncoderConfig) -> Tensor:
    L = t.shape[1]
    return t.reshape(B, L, cfg.num_heads, cfg.head_dim).transpose(0, 2, 1, 3)


def _attention(h: Tensor, enc: FrozenEncoder, i: int, prefix, record) -> Tensor:
    cfg = enc.config
    B, L, D = h.shape
    p = lambda name: enc.param(f"layer{i}.{name}")
    hn = T.layer_norm(h)
    q, k, v = hn @ p("wq"), hn @ p("wk"), hn @ p("wv")
    if prefix is not None:
        pk, pv = prefix
        zeros = Tensor(np.zeros((B,) + pk.shape[-2:]))
        k = T.concat([pk + zeros, k], axis=1)
        v = T.concat([pv + zeros, v], axis=1)
    qh, kh, vh = _heads(q, B, cfg), _heads(k, B, cfg), _heads(v, B, cfg)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(cfg.head_dim))
    attn = T.softmax(scores, axis=-1)
    if record is not None:
        record[i] = attn.data
    out = (attn @ vh).transpose(0, 2, 1, 3).reshape(B, L, D)
    return out @ p("wo")


def _check_prefixes(prefixes: dict, cfg: EncoderConfig):
    for layer, (pk, pv) in prefixes.items():
        if layer not in cfg.prompted_layers:
            raise ValueError(f"prefix attached to non-prompted layer {layer}; prompted layers are {cfg.prompted_layers}")
        if pk.shape != pv.shape:
            raise ValueError(f"layer {layer}: key prefix {pk.shape} and value prefix {pv.shape} differ "
                             "(total prompt length must be even)")
        if pk.shape[-1] != cfg.embed_dim:
            raise ValueError(f"layer {layer}: prefix width {pk.shape[-1]} != embed_dim {cfg.embed_dim}")


def forward_with_prompts(x, enc: FrozenEncoder, prefixes: dict | None = None, record: dict | None = None) -> Tensor:
    """Run the encoder with ``prefixes[layer] = (P_K, P_V)`` prepended to that layer's keys/values.

    ``x`` is ``(d_in,)`` or ``(B, d_in)``; prefixes are ``(L, D)`` or ``(B, L, D)``.
    Returns the class-token feature, ``(D,)`` or ``(B, D)`` to match ``x``.
    If ``record`` is a dict, per-layer attention probabilities are stored in it.
    """
    cfg = enc.config
    prefixes = prefixes or {}
    _check_prefixes(prefixes, cfg)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    if xb.ndim != 2 or xb.shape[1] != cfg.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (..., {cfg.input_dim})")
    B = xb.shape[0]
    h = _embed(xb, enc)
    for i in range(cfg.num_layers):
        h = h + _attention(h, enc, i, prefixes.get(i), record)
        f = T.relu(T.layer_norm(h) @ enc.param(f"layer{i}.w1")) @ enc.param(f"layer{i}.w2")
        h = h + f
    out = T.layer_norm(h)[:, 0, :]
    return out[0] if single else out.reshape(B, cfg.embed_dim)


def encode_query(x, enc: FrozenEncoder) -> np.ndarray:
    """Unprompted class-token embedding, used as the attention query.

    Returned as a plain array: nothing downstream may backpropagate into it.
    """
    with T.no_grad():
        return forward_with_prompts(x, enc).data.copy()
