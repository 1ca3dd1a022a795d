"""Multi-head attention blocks shared by the encoder and decoder.

Blocks are pre-norm: layer normalisation is applied to each sublayer's input
and the sublayer output is added back to the un-normalised residual stream.
Tensors are batched as ``(batch, length, dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gsrformer import tensor as T
from gsrformer.errors import ConfigError
from gsrformer.nn import Dropout, FeedForward, LayerNorm, Linear, Module
from gsrformer.tensor import Tensor


@dataclass(frozen=True)
class MhaBlockConfig:
    model_dim: int
    head_count: int
    ffn_hidden_dim: int
    dropout_rate: float = 0.0
    layer_count: int = 1
    final_norm: bool = True

    def __post_init__(self):
        if self.model_dim <= 0 or self.head_count <= 0 or self.model_dim % self.head_count:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by head_count {self.head_count}",
                              "head_count")
        if self.layer_count < 1:
            raise ConfigError("need at least one layer", "layer_count")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout {self.dropout_rate} outside [0, 1)", "dropout_rate")
        if self.ffn_hidden_dim < 0:
            raise ConfigError("negative ffn width", "ffn_hidden_dim")


@dataclass
class TokenSequence:
    """A batch of token sequences with optional positional embedding and padding mask.

    ``pos`` broadcasts against ``tokens`` (``(L, d)`` or ``(B, L, d)``);
    ``mask`` is ``(B, L)`` with True marking real tokens.
    """

    tokens: Tensor
    pos: Tensor | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ValueError(f"tokens must be (batch, length, dim), got {self.tokens.shape}")
        if self.pos is not None and self.pos.shape[-2:] != self.tokens.shape[-2:]:
            raise ValueError(f"positional embedding {self.pos.shape} does not match tokens {self.tokens.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.tokens.shape[:2]:
                raise ValueError(f"mask {self.mask.shape} does not match tokens {self.tokens.shape[:2]}")

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def with_pos(self) -> Tensor:
        return self.tokens if self.pos is None else self.tokens + self.pos


class MultiHeadAttention(Module):
    def __init__(self, rng, dim: int, heads: int, dropout: float = 0.0):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)
        self.attn_drop = Dropout(dropout)
        self._weights = None

    @property
    def last_weights(self) -> np.ndarray | None:
        """Attention probabilities of the latest call, ``(B, heads, Lq, Lk)``."""
        return self._weights

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_mask=None) -> Tensor:
        b, lq, d = query.shape
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d // self.heads))
        mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
        w = T.softmax(scores, axis=-1, mask=mask)
        self._weights = w.data
        out = T.matmul(self.attn_drop(w), v)
        return self.o(T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, lq, d)))


class SelfAttentionBlock(Module):
    def __init__(self, rng, cfg: MhaBlockConfig):
        self.norm1 = LayerNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(rng, cfg.model_dim, cfg.head_count, cfg.dropout_rate)
        self.drop1 = Dropout(cfg.dropout_rate)
        self.norm2 = LayerNorm(cfg.model_dim)
        self.ffn = FeedForward(rng, cfg.model_dim, cfg.ffn_hidden_dim, cfg.dropout_rate)
        self.drop2 = Dropout(cfg.dropout_rate)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop1(self.attn(h, h, h, mask))
        return x + self.drop2(self.ffn(self.norm2(x)))


class CrossAttentionBlock(Module):
    def __init__(self, rng, cfg: MhaBlockConfig):
        self.norm1 = LayerNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(rng, cfg.model_dim, cfg.head_count, cfg.dropout_rate)
        self.drop1 = Dropout(cfg.dropout_rate)
        self.norm2 = LayerNorm(cfg.model_dim)
        self.ffn = FeedForward(rng, cfg.model_dim, cfg.ffn_hidden_dim, cfg.dropout_rate)
        self.drop2 = Dropout(cfg.dropout_rate)

    def forward(self, x: Tensor, memory: Tensor, memory_mask=None) -> Tensor:
        x = x + self.drop1(self.attn(self.norm1(x), memory, memory, memory_mask))
        return x + self.drop2(self.ffn(self.norm2(x)))


def _check_dim(seq: TokenSequence, cfg: MhaBlockConfig, what: str) -> None:
    if seq.dim != cfg.model_dim:
        raise ConfigError(f"{what} dim {seq.dim} != model_dim {cfg.model_dim}", "model_dim")


class SelfAttentionStack(Module):
    """Stacked self-attention blocks over ``tokens + pos``."""

    def __init__(self, rng, cfg: MhaBlockConfig):
        self.cfg = cfg
        self.layer = [SelfAttentionBlock(rng, cfg) for _ in range(cfg.layer_count)]
        self.norm = LayerNorm(cfg.model_dim) if cfg.final_norm else None

    def forward(self, seq: TokenSequence) -> TokenSequence:
        _check_dim(seq, self.cfg, "sequence")
        if seq.length == 0:
            raise ValueError("self-attention needs at least one token")
        x = seq.with_pos()
        for block in self.layer:
            x = block(x, seq.mask)
        if self.norm is not None:
            x = self.norm(x)
        return TokenSequence(x, mask=seq.mask)


class CrossAttentionStack(Module):
    """Queries attend to a read-only memory; key/value are ``memory + memory.pos``."""

    def __init__(self, rng, cfg: MhaBlockConfig):
        self.cfg = cfg
        self.layer = [CrossAttentionBlock(rng, cfg) for _ in range(cfg.layer_count)]
        self.norm = LayerNorm(cfg.model_dim) if cfg.final_norm else None

    def forward(self, query: TokenSequence, memory: TokenSequence) -> TokenSequence:
        _check_dim(query, self.cfg, "query")
        _check_dim(memory, self.cfg, "memory")
        if memory.length == 0:
            raise ValueError("cross-attention memory is empty")
        mem = memory.with_pos()
        x = query.with_pos()
        for block in self.layer:
            x = block(x, mem, memory.mask)
        if self.norm is not None:
            x = self.norm(x)
        return TokenSequence(x, mask=query.mask)
