"""Training losses: smoothed cross-entropy, box regression and presence terms.

Per-slot losses are computed on the padded ``(B, M)`` layout and then only
the real slots are gathered before any summation, so padding can neither
change a loss value nor leak a gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from gsrformer import tensor as T
from gsrformer.dataset import ANNOTATORS, Frame, Lexicon
from gsrformer.decoder import FramePrediction
from gsrformer.tensor import Tensor


class LabelError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


def smoothed_ce(logits, target, smoothing: float = 0.0) -> Tensor:
    """Cross-entropy of ``(..., C)`` logits against the smoothed one-hot of ``target``.

    The target distribution is ``(1 - eps) * onehot + eps / C``. Returns one
    loss per row.
    """
    logits = T.as_tensor(logits)
    if not 0.0 <= smoothing < 1.0:
        raise LabelError(f"smoothing {smoothing} outside [0, 1)")
    c = logits.shape[-1]
    target = np.asarray(target, dtype=np.int64)
    if target.shape != logits.shape[:-1]:
        raise LabelError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise LabelError(f"target ids must lie in [0, {c}), got range [{target.min()}, {target.max()}]")
    dist = np.full(logits.shape, smoothing / c, dtype=logits.dtype)
    np.put_along_axis(dist, target[..., None], 1.0 - smoothing + smoothing / c, axis=-1)
    return -T.sum_(T.log_softmax(logits) * dist, axis=-1)


def cxcywh_to_xyxy(b):
    """Centre/size boxes to corners; works on arrays and tensors."""
    if isinstance(b, Tensor):
        cx, cy, w, h = (b[..., i] for i in range(4))
        return T.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2,
                     b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]], axis=-1)


def _safe_ratio(num: Tensor, den: Tensor) -> Tensor:
    ok = den.data > 0
    return T.where(ok, num / T.where(ok, den, 1.0), 0.0)


def box_iou_parts(pred, gt) -> tuple[Tensor, Tensor, Tensor]:
    """``(iou, hull, union)`` of corner boxes; IoU is 0 when the union is empty."""
    p, g = T.as_tensor(pred), T.as_tensor(gt)
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    iw = T.relu(T.minimum(p[..., 2], g[..., 2]) - T.maximum(p[..., 0], g[..., 0]))
    ih = T.relu(T.minimum(p[..., 3], g[..., 3]) - T.maximum(p[..., 1], g[..., 1]))
    inter = iw * ih
    union = area_p + area_g - inter
    hull = ((T.maximum(p[..., 2], g[..., 2]) - T.minimum(p[..., 0], g[..., 0]))
            * (T.maximum(p[..., 3], g[..., 3]) - T.minimum(p[..., 1], g[..., 1])))
    return _safe_ratio(inter, union), hull, union


def giou_loss(pred, gt) -> Tensor:
    """``1 - GIoU`` for corner boxes ``(..., 4)``; lies in ``[0, 2]``."""
    iou, hull, union = box_iou_parts(pred, gt)
    return 1.0 - (iou - _safe_ratio(hull - union, hull))


@dataclass
class LossWeights:
    verb_encoder: float = 1.0
    verb_decoder: float = 1.0
    noun_ce: float = 1.0
    box_l1: float = 5.0
    box_giou: float = 2.0
    presence_bce: float = 1.0


@dataclass
class LossBreakdown:
    verb_encoder: Tensor
    verb_decoder: Tensor
    noun_ce: Tensor
    box_l1: Tensor
    box_giou: Tensor
    presence_bce: Tensor
    total: Tensor

    PARTS = ("verb_encoder", "verb_decoder", "noun_ce", "box_l1", "box_giou", "presence_bce")

    def values(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).data) for f in fields(self)}


@dataclass
class Targets:
    """Ground truth of a batch in the padded ``(B, M)`` role layout."""

    verbs: np.ndarray  # (B,)
    role_types: np.ndarray  # (B, M), -1 on padding
    nouns: np.ndarray  # (B, M, 3)
    boxes: np.ndarray  # (B, M, 4) cx, cy, w, h
    has_box: np.ndarray  # (B, M)

    @property
    def role_mask(self) -> np.ndarray:
        return self.role_types >= 0

    @classmethod
    def from_frames(cls, frames: list[Frame], width: int | None = None) -> "Targets":
        m = max((len(f.roles) for f in frames), default=0)
        m = max(m, width or 0)
        b = len(frames)
        types = np.full((b, m), -1, dtype=np.int64)
        nouns = np.zeros((b, m, ANNOTATORS), dtype=np.int64)
        boxes = np.zeros((b, m, 4))
        has = np.zeros((b, m), dtype=bool)
        for i, f in enumerate(frames):
            for j, r in enumerate(f.roles):
                types[i, j] = r.role_type
                nouns[i, j] = r.nouns
                if r.box is not None:
                    boxes[i, j] = xyxy_to_cxcywh(r.box.as_array())
                    has[i, j] = True
        return cls(np.array([f.verb for f in frames], dtype=np.int64), types, nouns, boxes, has)


def check_alignment(pred_role_types: np.ndarray, targets: Targets) -> None:
    pred_role_types = np.asarray(pred_role_types)
    m = targets.role_types.shape[1]
    if pred_role_types.shape[1] < m or np.any(pred_role_types[:, m:] >= 0):
        raise AlignmentError("prediction and ground truth have different role counts")
    if not np.array_equal(pred_role_types[:, :m], targets.role_types):
        bad = np.argwhere(pred_role_types[:, :m] != targets.role_types)[0]
        raise AlignmentError(f"frame {bad[0]} slot {bad[1]}: predicted role type {pred_role_types[tuple(bad)]}"
                             f" vs ground truth {targets.role_types[tuple(bad)]}")


def noun_role_parts(pred: FramePrediction, targets: Targets, noun_smoothing: float) -> dict[str, Tensor]:
    """Per-real-slot loss vectors, gathered in (frame, slot) order."""
    bi, si = np.nonzero(targets.role_mask)
    logits = pred.noun_logits[bi, si]  # (S, N+1)
    ce = None
    for a in range(ANNOTATORS):
        term = smoothed_ce(logits, targets.nouns[bi, si, a], noun_smoothing)
        ce = term if ce is None else ce + term
    has = targets.has_box[bi, si]
    boxes = pred.boxes[bi, si]
    gt = targets.boxes[bi, si]
    l1 = T.where(has, T.sum_(T.abs_(boxes - gt), axis=-1), 0.0)
    giou = T.where(has, giou_loss(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt)), 0.0)
    z = pred.presence[bi, si]
    bce = T.softplus(z) - z * has.astype(z.dtype)
    return {"noun_ce": ce, "box_l1": l1, "box_giou": giou, "presence_bce": bce}


def _total(x: Tensor | None) -> Tensor:
    return Tensor(0.0) if x is None or x.shape[0] == 0 else T.sum_(x)


def batch_loss(pred: FramePrediction | None, targets: Targets, *, weights: LossWeights | None = None,
               verb_smoothing: float = 0.0, noun_smoothing: float = 0.0, encoder_logits=None,
               aux_verb_logits=(), pred_role_types=None) -> LossBreakdown:
    """Weighted losses summed over the frames of a batch.

    ``encoder_logits`` adds the pseudo-verb term, ``aux_verb_logits`` adds a
    decoder verb term per extra iteration. Role terms need ``pred``.
    """
    w = weights or LossWeights()
    zero = Tensor(0.0)
    parts = dict.fromkeys(LossBreakdown.PARTS, zero)
    if pred_role_types is not None:
        check_alignment(pred_role_types, targets)
    if encoder_logits is not None:
        parts["verb_encoder"] = _total(smoothed_ce(encoder_logits, targets.verbs, verb_smoothing))
    if pred is not None:
        dec = _total(smoothed_ce(pred.verb_logits, targets.verbs, verb_smoothing))
        for logits in aux_verb_logits:
            dec = dec + _total(smoothed_ce(logits, targets.verbs, verb_smoothing))
        parts["verb_decoder"] = dec
        if targets.role_mask.any():
            for name, vec in noun_role_parts(pred, targets, noun_smoothing).items():
                parts[name] = _total(vec)
    weighted = {k: v * getattr(w, k) for k, v in parts.items()}
    total = zero
    for k in LossBreakdown.PARTS:
        total = total + weighted[k]
    return LossBreakdown(**weighted, total=total)


def lexicon_targets(frames: list[Frame], lexicon: Lexicon) -> Targets:
    """Targets after checking each frame's role order against the lexicon."""
    for f in frames:
        if f.role_types != lexicon.roles_of(f.verb):
            raise AlignmentError(f"{f.image}: roles {f.role_types} differ from lexicon order of verb {f.verb}")
    return Targets.from_frames(frames)
