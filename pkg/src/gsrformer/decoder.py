"""Message passing between a frame's verb, its roles and its support frames.

Each iteration computes messages with self-attention over
``[h_v, h_1, ..., h_m]`` where the role embeddings take the place of the
positional encoding. Nouns are refined from the aggregated verb messages of
the support frames; the verb is refined from the aggregated noun messages of
its own image. With the noun-first order the query's messages are recomputed
from the refined nouns before the verb step (and vice versa for verb-first),
so the two orders are genuinely different.

Support frames are constants: their messages are recomputed by every layer
but their features are never refined. They are ordered by frame id before
use, which makes every output bitwise independent of the order in which the
support set was listed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from gsrformer import tensor as T
from gsrformer.attention import MultiHeadAttention
from gsrformer.errors import ConfigError
from gsrformer.nn import MLP, Dropout, FeedForward, LayerNorm, Linear, Module
from gsrformer.retrieval import SupportSet
from gsrformer.tensor import Tensor

log = logging.getLogger(__name__)

AGGREGATIONS = ("sum", "max", "mean", "gated")
ORDERS = ("noun-first", "verb-first")


class AggregationError(ValueError):
    pass


@dataclass
class SupportBatch:
    """Support frames of a batch, padded to ``K`` frames of ``M`` roles."""

    verb: np.ndarray  # (B, K, d)
    roles: np.ndarray  # (B, K, M, d)
    role_types: np.ndarray  # (B, K, M), -1 on padding
    role_mask: np.ndarray  # (B, K, M)
    mask: np.ndarray  # (B, K)
    ids: list[list[int]]

    @classmethod
    def pack(cls, supports: list[SupportSet], dim: int) -> "SupportBatch":
        entries = [sorted(s.entries, key=lambda e: e.frame_id) for s in supports]
        b = len(entries)
        k = max((len(e) for e in entries), default=0)
        m = max((len(x.role_types) for e in entries for x in e), default=1)
        verb = np.zeros((b, k, dim))
        roles = np.zeros((b, k, m, dim))
        types = np.full((b, k, m), -1, dtype=np.int64)
        for i, es in enumerate(entries):
            for j, e in enumerate(es):
                verb[i, j] = e.verb_feature
                roles[i, j, :len(e.role_types)] = e.role_features
                types[i, j, :len(e.role_types)] = e.role_types
        return cls(verb, roles, types, types >= 0, types[..., 0] >= 0 if k else np.zeros((b, 0), bool),
                   [[x.frame_id for x in es] for es in entries])


@dataclass
class DecoderState:
    verb: Tensor  # (B, d)
    roles: Tensor  # (B, M, d)
    role_mask: np.ndarray  # (B, M)
    history: list[Tensor]  # verb feature after each iteration


@dataclass
class FramePrediction:
    verb_logits: Tensor  # (B, V)
    noun_logits: Tensor  # (B, M, N + 1)
    boxes: Tensor  # (B, M, 4) cx, cy, w, h in [0, 1]
    presence: Tensor  # (B, M) logit that the role has a box
    role_mask: np.ndarray  # (B, M)


def _masked(x: Tensor, mask: np.ndarray, fill: float = 0.0) -> Tensor:
    m = np.asarray(mask, dtype=bool)[..., None]
    return T.where(np.broadcast_to(m, x.shape), x, fill)


class Aggregator(Module):
    """Permutation-invariant reduction of ``(N, L, d)`` messages over ``L``.

    Sums run in sorted order, so the result does not depend on the order of
    the messages even in the last bit. Masked-out messages are ignored; rows
    without any message aggregate to zero.
    """

    def __init__(self, rng, dim: int, mode: str = "sum"):
        if mode not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {mode!r}; choose from {AGGREGATIONS}", "aggregation")
        self.mode = mode
        if mode == "gated":
            self.gate = Linear(rng, dim, dim)
            self.value = Linear(rng, dim, dim)

    def forward(self, msgs: Tensor, mask=None) -> Tensor:
        n, length, _ = msgs.shape
        mask = np.ones((n, length), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if length == 0:
            return Tensor(np.zeros((n, msgs.shape[2]), dtype=msgs.dtype))
        if self.mode == "max":
            x = T.max_(_masked(msgs, mask, -np.inf), axis=1)
            return T.where(np.broadcast_to(mask.any(axis=1)[:, None], x.shape), x, 0.0)
        if self.mode == "gated":
            msgs = T.sigmoid(self.gate(msgs)) * T.tanh(self.value(msgs))
        total = T.sorted_sum(_masked(msgs, mask), axis=1)
        if self.mode == "mean":
            total = total / np.maximum(mask.sum(axis=1), 1)[:, None].astype(msgs.dtype)
        return total


def aggregate(agg: Aggregator, messages: list) -> Tensor:
    """Aggregate a list of ``d``-vectors into one."""
    if not messages:
        raise AggregationError("cannot aggregate an empty message list")
    x = T.stack([T.as_tensor(m) for m in messages], axis=0)
    return agg(T.reshape(x, (1,) + x.shape))[0]


class RefineLayer(Module):
    """``h' = LN(q + FFN(q))`` with ``q = LN(h + p)``."""

    def __init__(self, rng, dim: int, hidden: int, dropout: float = 0.0):
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, hidden, dropout)
        self.drop = Dropout(dropout)
        self.norm2 = LayerNorm(dim)

    def forward(self, h: Tensor, p: Tensor) -> Tensor:
        q = self.norm1(h + p)
        return self.norm2(q + self.drop(self.ffn(q)))


class MessageLayer(Module):
    """Self-attention over ``[h_v, h_1..h_m]``; role embeddings act as positions.

    Positions enter queries and keys only, so each message is a convex mix of
    value projections of the raw features.
    """

    def __init__(self, rng, dim: int, heads: int, dropout: float = 0.0):
        self.attn = MultiHeadAttention(rng, dim, heads, dropout)

    def forward(self, verb: Tensor, roles: Tensor, role_emb: Tensor, role_mask) -> tuple[Tensor, Tensor]:
        n, m, d = roles.shape
        x = T.concat([T.reshape(verb, (n, 1, d)), roles], axis=1)
        pos = T.concat([Tensor(np.zeros((n, 1, d), dtype=x.dtype)), role_emb], axis=1)
        qk = x + pos
        mask = np.concatenate([np.ones((n, 1), dtype=bool), np.asarray(role_mask, dtype=bool)], axis=1)
        out = self.attn(qk, qk, x, mask)
        return out[:, 0], out[:, 1:]


class DecoderLayer(Module):
    def __init__(self, rng, dim: int, heads: int, hidden: int, aggregation: str, dropout: float = 0.0):
        self.messages = MessageLayer(rng, dim, heads, dropout)
        self.noun_agg = Aggregator(rng, dim, aggregation)
        self.verb_agg = Aggregator(rng, dim, aggregation)
        self.noun_refine = RefineLayer(rng, dim, hidden, dropout)
        self.verb_refine = RefineLayer(rng, dim, hidden, dropout)


@dataclass
class RefinementState:
    verb: Tensor  # (B, d)
    roles: Tensor  # (B, M, d)
    role_emb: Tensor  # (B, M, d)
    role_mask: np.ndarray  # (B, M)
    support: SupportBatch
    support_emb: Tensor  # (B, K, Ms, d)


def support_verb_messages(layer: DecoderLayer, state: RefinementState) -> Tensor:
    """Verb messages of every support frame, ``(B, K, d)``."""
    s = state.support
    b, k, ms, d = s.roles.shape
    if k == 0:
        return Tensor(np.zeros((b, 0, d)))
    p_v, _ = layer.messages(Tensor(s.verb.reshape(b * k, d)), Tensor(s.roles.reshape(b * k, ms, d)),
                            T.reshape(state.support_emb, (b * k, ms, d)), s.role_mask.reshape(b * k, ms))
    return T.reshape(p_v, (b, k, d))


def refine_nouns(layer: DecoderLayer, state: RefinementState, own_verb_msg: Tensor | None = None) -> Tensor:
    """Nouns updated with the aggregated support verb messages.

    Frames with an empty support set use their own verb message instead.
    """
    msgs = support_verb_messages(layer, state)
    p_all = layer.noun_agg(msgs, state.support.mask)
    empty = ~state.support.mask.any(axis=1)
    if empty.any():
        log.info("%d frame(s) without support; using their own verb message", int(empty.sum()))
        if own_verb_msg is None:
            own_verb_msg, _ = layer.messages(state.verb, state.roles, state.role_emb, state.role_mask)
        p_all = T.where(np.broadcast_to(empty[:, None], p_all.shape), own_verb_msg, p_all)
    b, m, d = state.roles.shape
    return layer.noun_refine(state.roles, T.reshape(p_all, (b, 1, d)))


def refine_verb(layer: DecoderLayer, state: RefinementState) -> Tensor:
    """Verb updated with the aggregated noun messages of its own image only."""
    _, p_roles = layer.messages(state.verb, state.roles, state.role_emb, state.role_mask)
    return layer.verb_refine(state.verb, layer.verb_agg(p_roles, state.role_mask))


def _replace(state: RefinementState, **kw) -> RefinementState:
    return RefinementState(**{**state.__dict__, **kw})


class Decoder(Module):
    def __init__(self, rng, *, dim: int, heads: int, hidden: int, iterations: int, aggregation: str = "sum",
                 order: str = "noun-first", alternate: bool = True, dropout: float = 0.0):
        if order not in ORDERS:
            raise ConfigError(f"unknown refinement order {order!r}; choose from {ORDERS}", "order")
        if iterations < 0:
            raise ConfigError("iterations must be >= 0", "iterations")
        self.order = order
        self.alternate = alternate
        self.dim = dim
        self.layer = [DecoderLayer(rng, dim, heads, hidden, aggregation, dropout) for _ in range(iterations)]

    @property
    def iterations(self) -> int:
        return len(self.layer)

    def step(self, layer: DecoderLayer, state: RefinementState) -> RefinementState:
        if not self.alternate:
            # verb from support verbs, nouns from the image's own nouns
            _, p_roles = layer.messages(state.verb, state.roles, state.role_emb, state.role_mask)
            b, m, d = state.roles.shape
            p_nouns = layer.noun_agg(p_roles, state.role_mask)
            p_verbs = layer.verb_agg(support_verb_messages(layer, state), state.support.mask)
            roles = layer.noun_refine(state.roles, T.reshape(p_nouns, (b, 1, d)))
            return _replace(state, verb=layer.verb_refine(state.verb, p_verbs), roles=roles)
        if self.order == "noun-first":
            state = _replace(state, roles=refine_nouns(layer, state))
            return _replace(state, verb=refine_verb(layer, state))
        state = _replace(state, verb=refine_verb(layer, state))
        return _replace(state, roles=refine_nouns(layer, state))

    def forward(self, verb: Tensor, roles: Tensor, role_mask, role_emb: Tensor, support: SupportBatch,
                support_emb: Tensor) -> DecoderState:
        state = RefinementState(verb, roles, role_emb, np.asarray(role_mask, dtype=bool), support, support_emb)
        history = []
        for layer in self.layer:
            state = self.step(layer, state)
            history.append(state.verb)
        return DecoderState(state.verb, state.roles, state.role_mask, history)


class PredictionHeads(Module):
    """Verb classifier, noun classifier, box regressor and box-presence logit."""

    def __init__(self, rng, *, dim: int, verb_count: int, noun_count: int, hidden: int | None = None,
                 box_hidden: int | None = None, dropout: float = 0.0):
        hidden = hidden or dim
        box_hidden = box_hidden or dim
        self.verb = MLP(rng, [dim, hidden, verb_count], dropout)
        self.noun = MLP(rng, [dim, hidden, noun_count], dropout)
        self.box = MLP(rng, [dim, box_hidden, box_hidden, 4], dropout)
        self.presence = Linear(rng, dim, 1)

    def forward(self, verb: Tensor, roles: Tensor, role_mask) -> FramePrediction:
        b, m, _ = roles.shape
        return FramePrediction(self.verb(verb), self.noun(roles), T.sigmoid(self.box(roles)),
                               T.reshape(self.presence(roles), (b, m)), np.asarray(role_mask, dtype=bool))
