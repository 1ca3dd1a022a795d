"""Image encoder: verb token self-attention, pseudo-verb choice, role queries.

The verb stage runs self-attention over ``[verb token, image tokens] + pos``
and classifies the verb token into a pseudo verb. The role stage queries the
image memory with ``[verb feature, role embeddings of the pseudo verb]`` and
returns one feature per query.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gsrformer import tensor as T
from gsrformer.attention import CrossAttentionStack, MhaBlockConfig, SelfAttentionStack, TokenSequence
from gsrformer.dataset import Lexicon
from gsrformer.nn import Embedding, Linear, Module, Parameter
from gsrformer.tensor import Tensor


class InputError(ValueError):
    pass


@dataclass
class FeatureMap:
    values: Tensor  # (B, c, h, w)

    def __post_init__(self):
        if self.values.ndim != 4 or min(self.values.shape[1:]) < 1:
            raise InputError(f"feature map must be (B, c, h, w) with positive extents, got {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]


class PatchExtractor(Module):
    """Non-overlapping ``stride x stride`` patches, flattened and linearly projected."""

    def __init__(self, rng, in_channels: int, stride: int, out_channels: int):
        self.stride = stride
        self.in_channels = in_channels
        self.proj = Linear(rng, stride * stride * in_channels, out_channels)

    def forward(self, images) -> FeatureMap:
        x = np.asarray(images, dtype=self.proj.weight.dtype)
        if x.ndim == 3:
            x = x[None]
        b, hh, ww, c = x.shape
        s = self.stride
        if hh % s or ww % s:
            raise InputError(f"image {hh}x{ww} not divisible by patch stride {s}")
        if c != self.in_channels:
            raise InputError(f"image has {c} channels, extractor expects {self.in_channels}")
        h, w = hh // s, ww // s
        patches = x.reshape(b, h, s, w, s, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h * w, s * s * c)
        y = self.proj(Tensor(patches))
        return FeatureMap(T.transpose(T.reshape(y, (b, h, w, -1)), (0, 3, 1, 2)))


_FMAP_MAGIC = b"GSRFMAP\0"


def save_feature_map(path, values: np.ndarray) -> None:
    """Write a ``(c, h, w)`` map: magic, u32 c/h/w, little-endian float64 values."""
    values = np.asarray(values, dtype="<f8")
    if values.ndim != 3:
        raise InputError("feature map file holds a single (c, h, w) array")
    Path(path).write_bytes(_FMAP_MAGIC + struct.pack("<3I", *values.shape) + values.tobytes())


def load_feature_map(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != _FMAP_MAGIC or len(buf) < 20:
        raise InputError(f"{path}: not a feature map file")
    c, h, w = struct.unpack_from("<3I", buf, 8)
    if len(buf) != 20 + 8 * c * h * w:
        raise InputError(f"{path}: size does not match header {c}x{h}x{w}")
    return np.frombuffer(buf, dtype="<f8", offset=20).reshape(c, h, w).astype(np.float64)


class Tokenizer(Module):
    """1x1 projection to the model width plus learned row/column positions."""

    def __init__(self, rng, channels: int, dim: int, max_grid: int):
        self.proj = Linear(rng, channels, dim)
        self.row_pos = Parameter(rng.normal(0.0, 0.5, size=(max_grid, dim)))
        self.col_pos = Parameter(rng.normal(0.0, 0.5, size=(max_grid, dim)))

    def positions(self, h: int, w: int) -> Tensor:
        if h > self.row_pos.shape[0] or w > self.col_pos.shape[0]:
            raise InputError(f"grid {h}x{w} exceeds positional table {self.row_pos.shape[0]}")
        rows = T.reshape(self.row_pos[:h], (h, 1, -1))
        cols = T.reshape(self.col_pos[:w], (1, w, -1))
        return T.reshape(rows + cols, (h * w, -1))

    def forward(self, fm: FeatureMap) -> TokenSequence:
        b, c, h, w = fm.values.shape
        flat = T.transpose(T.reshape(fm.values, (b, c, h * w)), (0, 2, 1))
        return TokenSequence(self.proj(flat), pos=self.positions(h, w))


@dataclass
class EncodedFrame:
    """Encoder output for one image: verb feature and per-role features."""

    pseudo_verb: int
    verb_feature: np.ndarray  # (d,)
    role_features: np.ndarray  # (m, d)
    role_types: tuple[int, ...]
    verb_logits: np.ndarray | None = None
    frame_id: int | None = None

    def __post_init__(self):
        if self.role_features.shape[0] != len(self.role_types):
            raise ValueError("one feature per role type required")


@dataclass
class EncodedBatch:
    verbs: np.ndarray  # (B,) verb each frame's roles were fetched for
    verb_feature: Tensor  # (B, d)
    role_features: Tensor  # (B, M, d)
    role_types: np.ndarray  # (B, M), -1 on padding
    role_mask: np.ndarray  # (B, M)
    verb_logits: Tensor | None = None

    def __len__(self) -> int:
        return len(self.verbs)

    def frame(self, i: int, frame_id: int | None = None) -> EncodedFrame:
        m = int(self.role_mask[i].sum())
        return EncodedFrame(
            int(self.verbs[i]),
            self.verb_feature.data[i].copy(),
            self.role_features.data[i, :m].copy(),
            tuple(int(r) for r in self.role_types[i, :m]),
            None if self.verb_logits is None else self.verb_logits.data[i].copy(),
            frame_id,
        )


def role_layout(lexicon: Lexicon, verbs) -> tuple[np.ndarray, np.ndarray]:
    """Padded role-type ids ``(B, M)`` (-1 = pad) and mask for each verb's ordered roles."""
    orders = [lexicon.roles_of(v) for v in verbs]
    m = max((len(o) for o in orders), default=0)
    ids = np.full((len(orders), m), -1, dtype=np.int64)
    for i, o in enumerate(orders):
        ids[i, :len(o)] = o
    return ids, ids >= 0


class Encoder(Module):
    def __init__(self, rng, *, image_channels: int, stride: int, feature_channels: int, max_grid: int,
                 verb_cfg: MhaBlockConfig, role_cfg: MhaBlockConfig, verb_count: int, role_count: int,
                 embed_dim: int | None = None):
        d = verb_cfg.model_dim
        if role_cfg.model_dim != d:
            raise ValueError("verb and role stacks must share the model width")
        self.extractor = PatchExtractor(rng, image_channels, stride, feature_channels)
        self.tokenizer = Tokenizer(rng, feature_channels, d, max_grid)
        self.verb_token = Parameter(rng.normal(0.0, 1.0, size=d))
        self.verb_pos = Parameter(rng.normal(0.0, 0.5, size=(1, d)))
        self.verb = SelfAttentionStack(rng, verb_cfg)
        self.verb_classifier = Linear(rng, d, verb_count)
        embed_dim = embed_dim or d
        self.role_embed = Embedding(rng, role_count, embed_dim)
        self.embed_proj = Linear(rng, embed_dim, d) if embed_dim != d else None
        self.roles = CrossAttentionStack(rng, role_cfg)

    @property
    def dim(self) -> int:
        return self.verb_token.shape[0]

    def tokenize(self, images) -> TokenSequence:
        return self.tokenizer(self.extractor(images))

    def encode_verb(self, tokens: TokenSequence) -> tuple[Tensor, TokenSequence]:
        """Returns the verb feature ``(B, d)`` and image features with their positions."""
        b, _, d = tokens.tokens.shape
        if tokens.length == 0:
            raise InputError("no image tokens")
        verb_tok = T.reshape(self.verb_token, (1, 1, d)) + Tensor(np.zeros((b, 1, d), dtype=self.verb_token.dtype))
        x = T.concat([verb_tok, tokens.tokens], axis=1)
        pos = T.concat([self.verb_pos, tokens.pos], axis=0)
        out = self.verb(TokenSequence(x, pos=pos)).tokens
        return out[:, 0], TokenSequence(out[:, 1:], pos=tokens.pos)

    def classify_pseudo_verb(self, verb_feature: Tensor) -> tuple[np.ndarray, Tensor]:
        logits = self.verb_classifier(verb_feature)
        # np.argmax keeps the lowest index among ties
        return np.argmax(logits.data, axis=-1), logits

    def role_queries(self, role_types: np.ndarray) -> Tensor:
        emb = self.role_embed(np.where(role_types >= 0, role_types, 0))
        return emb if self.embed_proj is None else self.embed_proj(emb)

    def encode_roles(self, image: TokenSequence, verb_feature: Tensor, verbs, lexicon: Lexicon,
                     verb_logits: Tensor | None = None) -> EncodedBatch:
        verbs = np.asarray(verbs, dtype=np.int64).reshape(-1)
        role_types, role_mask = role_layout(lexicon, verbs)
        b = len(verbs)
        q = T.concat([T.reshape(verb_feature, (b, 1, -1)), self.role_queries(role_types)], axis=1)
        mask = np.concatenate([np.ones((b, 1), dtype=bool), role_mask], axis=1)
        out = self.roles(TokenSequence(q, mask=mask), image).tokens
        return EncodedBatch(verbs, out[:, 0], out[:, 1:], role_types, role_mask, verb_logits)
