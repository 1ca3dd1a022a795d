"""Support-frame retrieval over encoded training frames.

Similarity between two frames is the mean cosine over the role types they
share. Frames sharing no role type fall back to the cosine of their verb
features, and the fallback is reported with every score. Search is an
exhaustive scan; ordering is by descending score, then ascending frame id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gsrformer import kernels
from gsrformer.encoder import EncodedFrame


class IndexError_(LookupError):
    """Invalid index contents or file."""


class RetrievalError(LookupError):
    pass


@dataclass(frozen=True)
class IndexEntry:
    frame_id: int
    verb: int
    role_types: tuple[int, ...]
    role_features: np.ndarray  # (m, d)
    verb_feature: np.ndarray  # (d,)


@dataclass(frozen=True)
class SupportSet:
    entries: tuple[IndexEntry, ...]
    scores: tuple[float, ...]
    fallback: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [e.frame_id for e in self.entries]


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / n


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


@dataclass
class FeatureIndex:
    dim: int
    entries: list[IndexEntry] = field(default_factory=list)
    _ids: dict = field(default_factory=dict, repr=False)
    _packed: tuple | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def add(self, frame_id: int, verb: int, role_types, role_features, verb_feature) -> None:
        frame_id = int(frame_id)
        if frame_id in self._ids:
            raise IndexError_(f"duplicate frame id {frame_id}")
        role_types = tuple(int(r) for r in role_types)
        rf = np.array(role_features, dtype=np.float64).reshape(len(role_types), self.dim)
        vf = np.array(verb_feature, dtype=np.float64).reshape(self.dim)
        if not role_types:
            raise IndexError_(f"frame {frame_id}: no role features")
        if len(set(role_types)) != len(role_types):
            raise IndexError_(f"frame {frame_id}: repeated role type")
        if not (np.all(np.isfinite(rf)) and np.all(np.isfinite(vf))):
            raise IndexError_(f"frame {frame_id}: non-finite feature")
        norms = np.linalg.norm(rf, axis=1)
        if np.any(norms == 0):
            bad = role_types[int(np.argmin(norms))]
            raise IndexError_(f"frame {frame_id}: role type {bad} has a zero-norm feature; cosine undefined")
        if np.linalg.norm(vf) == 0:
            raise IndexError_(f"frame {frame_id}: zero-norm verb feature; cosine undefined")
        self._ids[frame_id] = len(self.entries)
        self.entries.append(IndexEntry(frame_id, int(verb), role_types, rf, vf))
        self._packed = None

    def add_frame(self, frame: EncodedFrame, frame_id: int | None = None) -> None:
        fid = frame.frame_id if frame_id is None else frame_id
        self.add(fid, frame.pseudo_verb, frame.role_types, frame.role_features, frame.verb_feature)

    def packed(self):
        """Flat arrays for the similarity kernel; rebuilt after inserts."""
        if self._packed is None:
            counts = [len(e.role_types) for e in self.entries]
            offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
            types = np.array([r for e in self.entries for r in e.role_types], dtype=np.int64)
            feats = _unit(np.concatenate([e.role_features for e in self.entries]))
            verbs = _unit(np.stack([e.verb_feature for e in self.entries]))
            ids = np.array([e.frame_id for e in self.entries], dtype=np.int64)
            vids = np.array([e.verb for e in self.entries], dtype=np.int64)
            self._packed = (offsets, types, feats, verbs, ids, vids)
        return self._packed

    # persistence: magic, u32 version, u32 dim, u64 count, then per entry
    # i64 id, i32 verb, u32 m, i32[m] role types, f64[d] verb feature,
    # f64[m*d] role features; all little-endian
    MAGIC = b"GSRINDEX"
    VERSION = 1

    def to_bytes(self) -> bytes:
        out = [self.MAGIC, struct.pack("<IIQ", self.VERSION, self.dim, len(self.entries))]
        for e in self.entries:
            m = len(e.role_types)
            out.append(struct.pack(f"<qiI{m}i", e.frame_id, e.verb, m, *e.role_types))
            out.append(e.verb_feature.astype("<f8").tobytes())
            out.append(e.role_features.astype("<f8").tobytes())
        return b"".join(out)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FeatureIndex":
        if buf[:8] != cls.MAGIC:
            raise IndexError_("not a feature index file")
        try:
            version, dim, count = struct.unpack_from("<IIQ", buf, 8)
            if version != cls.VERSION:
                raise IndexError_(f"unsupported index version {version}")
            index = cls(dim)
            pos = 24
            for _ in range(count):
                fid, verb, m = struct.unpack_from("<qiI", buf, pos)
                pos += 16
                types = struct.unpack_from(f"<{m}i", buf, pos)
                pos += 4 * m
                vf = np.frombuffer(buf, "<f8", dim, pos).astype(np.float64)
                pos += 8 * dim
                rf = np.frombuffer(buf, "<f8", m * dim, pos).astype(np.float64).reshape(m, dim)
                pos += 8 * m * dim
                index.add(fid, verb, types, rf, vf)
        except (struct.error, ValueError) as exc:
            if isinstance(exc, IndexError_):
                raise
            raise IndexError_(f"truncated or corrupt index ({exc})") from exc
        if pos != len(buf):
            raise IndexError_(f"{len(buf) - pos} trailing bytes in index")
        return index

    @classmethod
    def load(cls, path) -> "FeatureIndex":
        return cls.from_bytes(Path(path).read_bytes())


def build_index(frames, ids=None) -> FeatureIndex:
    """Index encoded frames; ids default to each frame's ``frame_id``."""
    frames = list(frames)
    if not frames:
        raise IndexError_("cannot build an index from zero frames")
    index = FeatureIndex(frames[0].verb_feature.shape[0])
    for k, f in enumerate(frames):
        index.add_frame(f, None if ids is None else ids[k])
    return index


def frame_similarity(a: EncodedFrame, b: IndexEntry) -> tuple[float, bool]:
    """Mean cosine over shared role types, or verb cosine if none are shared (flag True).

    Evaluated by the same kernel as :func:`scan`, so a pairwise score equals
    the corresponding entry of a full scan bit for bit.
    """
    scores, fb = kernels.role_similarity_scan(
        _unit(np.asarray(a.role_features, dtype=np.float64)), np.asarray(a.role_types, dtype=np.int64),
        _unit(np.asarray(a.verb_feature, dtype=np.float64)), np.array([0, len(b.role_types)], dtype=np.int64),
        np.asarray(b.role_types, dtype=np.int64), _unit(b.role_features), _unit(b.verb_feature[None]))
    return float(scores[0]), bool(fb[0])


def scan(query: EncodedFrame, index: FeatureIndex) -> tuple[np.ndarray, np.ndarray]:
    """Similarity of ``query`` to every entry, and the verb-fallback flags."""
    offsets, types, feats, verbs, _, _ = index.packed()
    qf = _unit(np.asarray(query.role_features, dtype=np.float64))
    qv = _unit(np.asarray(query.verb_feature, dtype=np.float64))
    scores, fb = kernels.role_similarity_scan(qf, np.asarray(query.role_types, dtype=np.int64), qv,
                                              offsets, types, feats, verbs)
    return scores, fb.astype(bool)


def topk_support(query: EncodedFrame, index: FeatureIndex, k: int, exclude_id: int | None = None,
                 strict: bool = False) -> SupportSet:
    """The ``k`` most similar entries, best first; ties go to the lower frame id.

    ``exclude_id`` drops one entry (the query's own frame during training);
    ``strict`` keeps only entries whose verb equals the query's pseudo verb.
    """
    if k < 1:
        raise RetrievalError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise RetrievalError("empty index")
    scores, fb = scan(query, index)
    _, _, _, _, ids, vids = index.packed()
    keep = np.ones(len(index), dtype=bool)
    if exclude_id is not None:
        keep &= ids != exclude_id
    if strict:
        keep &= vids == query.pseudo_verb
    cand = np.flatnonzero(keep)
    order = cand[np.lexsort((ids[cand], -scores[cand]))][:k]
    return SupportSet(tuple(index.entries[i] for i in order), tuple(float(scores[i]) for i in order),
                      tuple(bool(fb[i]) for i in order))
