"""Seeded attention-only causal decoder used to produce real attention and hidden states.

There is no MLP and no layer norm: each layer adds its multi-head attention
output to the residual stream. Weights are random (uniform in
``±1/sqrt(model_dim)``) and fully determined by the config seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .cache import EvictionDecision, KVCache, apply_eviction
from .tensor import softmax_rows


class ConfigError(ValueError):
    """Invalid model or policy configuration."""


class InputError(ValueError):
    """Bad token sequence or window for a forward pass."""


class WindowError(InputError):
    """Observation window larger than the available attention rows."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 2
    head_dim: int = 4
    vocab_size: int = 64
    seed: int = 0
    model_dim: int | None = None

    def __post_init__(self):
        if self.model_dim is None:
            object.__setattr__(self, "model_dim", self.num_heads * self.head_dim)
        if min(self.num_layers, self.num_heads, self.head_dim, self.vocab_size) < 1:
            raise ConfigError("layers, heads, head_dim and vocab_size must all be >= 1")
        if self.model_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"model_dim {self.model_dim} != num_heads*head_dim "
                f"({self.num_heads}*{self.head_dim})"
            )


@dataclass(frozen=True, eq=False)
class ToyModel:
    config: ModelConfig
    w_query: np.ndarray  # (L, h, model_dim, d_h)
    w_key: np.ndarray
    w_value: np.ndarray
    w_out: np.ndarray  # (L, h, d_h, model_dim)
    embedding: np.ndarray  # (vocab, model_dim)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for arr in (self.w_query, self.w_key, self.w_value, self.w_out, self.embedding):
            digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return digest.hexdigest()


def build_model(cfg: ModelConfig) -> ToyModel:
    L, h, d, md = cfg.num_layers, cfg.num_heads, cfg.head_dim, cfg.model_dim
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / np.sqrt(md)
    draw = lambda *shape: rng.uniform(-bound, bound, size=shape)  # noqa: E731
    return ToyModel(
        config=cfg,
        w_query=draw(L, h, md, d),
        w_key=draw(L, h, md, d),
        w_value=draw(L, h, md, d),
        w_out=draw(L, h, d, md),
        embedding=draw(cfg.vocab_size, md),
    )


def positional_encoding(positions, dim: int) -> np.ndarray:
    """Sinusoidal encoding, sin on even dims and cos on odd dims."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    i = np.arange(dim)
    freq = 1.0 / np.power(10000.0, (i - i % 2) / dim)
    angles = positions * freq[None, :]
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


@dataclass
class LayerState:
    """What one layer exposes after prefill.

    ``attention`` holds the last-``w`` query rows ``(h, w, n)``;
    ``column_mass`` is the column sum over *all* query rows ``(h, n)``.
    ``keys``/``values``/``output`` are ``None`` for states rebuilt from a trace.
    """

    layer: int
    attention: np.ndarray
    column_mass: np.ndarray | None = None
    keys: np.ndarray | None = None
    values: np.ndarray | None = None
    output: np.ndarray | None = None

    @property
    def num_heads(self) -> int:
        return self.attention.shape[0]

    @property
    def window(self) -> int:
        return self.attention.shape[1]

    @property
    def n(self) -> int:
        return self.attention.shape[2]

    def window_rows(self, window: int) -> np.ndarray:
        """The last ``window`` stored query rows, ``(h, window, n)``."""
        if window > self.n:
            raise WindowError(f"window {window} exceeds sequence length {self.n}")
        if window > self.window:
            raise WindowError(
                f"layer {self.layer} stores {self.window} observation rows, {window} requested"
            )
        return self.attention[:, self.window - window :, :]


@dataclass
class PrefillResult:
    tokens: np.ndarray
    states: list[LayerState]
    logits: np.ndarray
    hidden: np.ndarray  # final-token residual stream after the last layer

    @property
    def n(self) -> int:
        return int(self.tokens.size)


@dataclass
class DecodeOutput:
    logits: np.ndarray
    outputs: np.ndarray  # (L, model_dim) per-layer attention output for the new token
    attention: list[np.ndarray]  # per layer, list over heads of weights over retained positions


def _check_tokens(model: ToyModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).ravel()
    if tokens.size == 0:
        raise InputError("token list is empty")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise InputError("token id outside the vocabulary")
    return tokens


def prefill(model: ToyModel, tokens, window: int) -> PrefillResult:
    """One-shot causal forward pass over the whole prompt."""
    tokens = _check_tokens(model, tokens)
    n = tokens.size
    if not 1 <= window <= n:
        raise InputError(f"window {window} outside [1, {n}]")
    cfg = model.config
    x = model.embedding[tokens] + positional_encoding(np.arange(n), cfg.model_dim)
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    states = []
    for layer in range(cfg.num_layers):
        q = np.einsum("nm,hmd->hnd", x, model.w_query[layer])
        k = np.einsum("nm,hmd->hnd", x, model.w_key[layer])
        v = np.einsum("nm,hmd->hnd", x, model.w_value[layer])
        scores = (q @ k.transpose(0, 2, 1)) * scale
        scores[:, future] = -np.inf
        attn = softmax_rows(scores)
        out = np.einsum("hnd,hdm->nm", attn @ v, model.w_out[layer])
        states.append(
            LayerState(
                layer=layer,
                attention=attn[:, n - window :, :].copy(),
                column_mass=attn.sum(axis=1),
                keys=k,
                values=v,
                output=out[-1].copy(),
            )
        )
        x = x + out
    return PrefillResult(tokens, states, x[-1] @ model.embedding.T, x[-1].copy())


def empty_caches(model: ToyModel) -> list[KVCache]:
    cfg = model.config
    return [KVCache.empty(l, cfg.num_heads, cfg.head_dim) for l in range(cfg.num_layers)]


def caches_from_prefill(result: PrefillResult, upto: int | None = None) -> list[KVCache]:
    """Full caches for positions ``< upto`` (default: the whole prompt)."""
    upto = result.n if upto is None else upto
    return [
        KVCache.from_arrays(s.layer, s.keys[:, :upto], s.values[:, :upto])
        for s in result.states
    ]


def decode_step(model: ToyModel, caches: list[KVCache], token: int, position: int) -> DecodeOutput:
    """Process one token against the caches, appending its key/value to every layer."""
    cfg = model.config
    if len(caches) != cfg.num_layers:
        raise InputError(f"expected {cfg.num_layers} caches, got {len(caches)}")
    token = int(_check_tokens(model, [token])[0])
    x = model.embedding[token] + positional_encoding([position], cfg.model_dim)[0]
    scale = 1.0 / np.sqrt(cfg.head_dim)
    outputs, attention = [], []
    for layer, cache in enumerate(caches):
        q = np.einsum("m,hmd->hd", x, model.w_query[layer])
        k = np.einsum("m,hmd->hd", x, model.w_key[layer])
        v = np.einsum("m,hmd->hd", x, model.w_value[layer])
        cache.append(position, k, v)
        out = np.zeros(cfg.model_dim)
        head_attn = []
        for h in range(cfg.num_heads):
            a = softmax_rows((cache.keys[h] @ q[h]) * scale)
            out += (a @ cache.values[h]) @ model.w_out[layer, h]
            head_attn.append(a)
        outputs.append(out)
        attention.append(head_attn)
        x = x + out
    return DecodeOutput(x @ model.embedding.T, np.array(outputs), attention)


def final_token_forward(
    model: ToyModel,
    result: PrefillResult,
    decisions: list[EvictionDecision] | None = None,
) -> DecodeOutput:
    """Re-run the last prompt token against (optionally evicted) caches of the prefix.

    Upstream eviction changes the residual stream seen by later layers, so the
    per-layer outputs form one coherent partial-cache pass. Decisions may list
    the final position; it is dropped and re-added by the decode step itself.
    """
    last = result.n - 1
    caches = caches_from_prefill(result, upto=last)
    if decisions is not None:
        caches = [apply_eviction(c, d.restricted(last)) for c, d in zip(caches, decisions)]
    return decode_step(model, caches, int(result.tokens[last]), last)
