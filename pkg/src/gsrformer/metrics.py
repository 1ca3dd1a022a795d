"""Verb, value and grounded-value metrics under three verb-selection settings.

Each image is scored from a :class:`PredictionRecord`, which holds the top-5
verbs with scores and role predictions keyed by verb: one set for the top-1
verb and one for the ground-truth verb when that differs. Every setting picks
the role set of the verb it scores:

* ``top1``: the top-1 verb; role bits are false unless it is correct;
* ``top5``: the ground-truth verb, gated on it being in the top five;
* ``gt``: the ground-truth verb, ungated.

``value`` and ``grnd`` average the per-image share of correct roles, so an
image with many roles weighs as much as an image with one. The rest of the
metrics are shares of images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gsrformer.dataset import Frame, Lexicon

SETTINGS = ("top1", "top5", "gt")
METRICS = ("verb", "value", "val-all", "grnd", "grnd-all")
SETTING_TITLES = {"top1": "Top-1-Verb", "top5": "Top-5-Verb", "gt": "Ground-Truth-Verb"}
IOU_THRESHOLD = 0.5


class ScoringError(ValueError):
    pass


class MonotonicityError(AssertionError):
    pass


def iou(a, b) -> float:
    """Intersection over union of two corner boxes; 0 when the union is empty."""
    a = a.as_array() if hasattr(a, "as_array") else np.asarray(a, dtype=np.float64)
    b = b.as_array() if hasattr(b, "as_array") else np.asarray(b, dtype=np.float64)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


@dataclass(frozen=True)
class RolePrediction:
    role_type: int
    noun: int
    box: tuple[float, float, float, float] | None  # corners in [0, 1]; None predicts no box
    presence: float  # probability that the role has a box


@dataclass
class PredictionRecord:
    image: str
    top5: list[tuple[int, float]]
    roles: dict[int, list[RolePrediction]]

    @property
    def top1(self) -> int:
        return self.top5[0][0]

    def to_json(self) -> dict:
        return {
            "image": self.image,
            "top5": [[int(v), float(s)] for v, s in self.top5],
            "roles": {str(v): [{"role": r.role_type, "noun": r.noun,
                                "box": None if r.box is None else [float(x) for x in r.box],
                                "presence": float(r.presence)} for r in rs]
                      for v, rs in sorted(self.roles.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PredictionRecord":
        roles = {int(v): [RolePrediction(int(r["role"]), int(r["noun"]),
                                         None if r["box"] is None else tuple(float(x) for x in r["box"]),
                                         float(r["presence"])) for r in rs]
                 for v, rs in doc["roles"].items()}
        return cls(doc["image"], [(int(v), float(s)) for v, s in doc["top5"]], roles)


def write_dump(path, records: list[PredictionRecord]) -> None:
    """One JSON object per line, in record order."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def read_dump(path) -> list[PredictionRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PredictionRecord.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class FrameScore:
    verb: bool
    roles: int
    value_hits: int
    grnd_hits: int

    @property
    def value_all(self) -> bool:
        return self.verb and self.value_hits == self.roles

    @property
    def grnd_all(self) -> bool:
        return self.verb and self.grnd_hits == self.roles


def noun_correct(noun: int, annotators, rule: str = "any") -> bool:
    if rule == "any":
        return noun in annotators
    if rule == "majority":
        return sum(a == noun for a in annotators) >= 2
    raise ValueError(f"unknown noun rule {rule!r}")


def role_bits(pred: RolePrediction, gt_role, rule: str = "any") -> tuple[bool, bool]:
    """(noun correct, grounded correct) for one aligned role."""
    noun_ok = noun_correct(pred.noun, gt_role.nouns, rule)
    has_box = pred.presence > 0.5 and pred.box is not None
    if gt_role.box is None:
        grounded = not has_box
    else:
        grounded = has_box and iou(pred.box, gt_role.box) > IOU_THRESHOLD
    return noun_ok, noun_ok and grounded


def score_frame(rec: PredictionRecord, gt: Frame, setting: str, rule: str = "any") -> FrameScore:
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    verbs = [v for v, _ in rec.top5]
    if setting == "top1":
        verb_ok, scoring_verb = verbs[0] == gt.verb, verbs[0]
    elif setting == "top5":
        verb_ok, scoring_verb = gt.verb in verbs[:5], gt.verb
    else:
        verb_ok, scoring_verb = True, gt.verb
    n = len(gt.roles)
    if not verb_ok:
        return FrameScore(False, n, 0, 0)
    preds = rec.roles.get(scoring_verb)
    if preds is None:
        raise ScoringError(f"{rec.image}: no role predictions for verb {scoring_verb}")
    if tuple(p.role_type for p in preds) != gt.role_types:
        raise ScoringError(f"{rec.image}: predicted roles {[p.role_type for p in preds]} do not align with "
                           f"ground truth {list(gt.role_types)}")
    value = grnd = 0
    for p, g in zip(preds, gt.roles):
        a, b = role_bits(p, g, rule)
        value += a
        grnd += b
    return FrameScore(True, n, value, grnd)


@dataclass
class MetricReport:
    frames: int
    scores: dict[str, dict[str, float]]  # setting -> metric -> percent
    counts: dict[str, dict[str, float]]  # setting -> metric -> numerator
    metadata: dict = field(default_factory=dict)

    def check(self) -> None:
        """Raise if any ordering that holds by construction is violated."""
        s = self.scores
        pairs = [(("top5", "verb"), ("top1", "verb")), (("gt", "value"), ("top1", "value"))]
        for k in SETTINGS:
            pairs += [((k, "value"), (k, "val-all")), ((k, "value"), (k, "grnd")),
                      ((k, "grnd"), (k, "grnd-all")), ((k, "val-all"), (k, "grnd-all"))]
        for hi, lo in pairs:
            if s[hi[0]][hi[1]] < s[lo[0]][lo[1]]:
                raise MonotonicityError(f"{hi[0]}.{hi[1]}={s[hi[0]][hi[1]]} < {lo[0]}.{lo[1]}={s[lo[0]][lo[1]]}")

    def to_json(self) -> dict:
        return {"frames": self.frames, "scores": self.scores, "counts": self.counts, "metadata": self.metadata}

    @classmethod
    def from_json(cls, doc: dict) -> "MetricReport":
        return cls(doc["frames"], doc["scores"], doc["counts"], doc.get("metadata", {}))

    def to_text(self) -> str:
        self.check()
        head = f"{'setting':<18}" + "".join(f"{m:>10}" for m in METRICS)
        lines = [head, "-" * len(head)]
        for k in SETTINGS:
            cells = [(f"{self.scores[k][m]:10.2f}" if not (k == "gt" and m == "verb") else f"{'-':>10}")
                     for m in METRICS]
            lines.append(f"{SETTING_TITLES[k]:<18}" + "".join(cells))
        lines.append(f"frames: {self.frames}")
        return "\n".join(lines) + "\n"

    def write(self, text_path=None, json_path=None) -> None:
        self.check()
        if text_path is not None:
            Path(text_path).write_text(self.to_text(), encoding="utf-8")
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")


def aggregate_report(per_setting: dict[str, list[FrameScore]], metadata: dict | None = None) -> MetricReport:
    """Percentages from frame scores; frames are summed in the order given."""
    n = len(per_setting["top1"])
    if n == 0:
        raise ValueError("cannot report on zero frames")
    scores, counts = {}, {}
    for k in SETTINGS:
        fs = per_setting[k]
        c = {
            "verb": float(sum(f.verb for f in fs)),
            "value": float(sum(f.value_hits / f.roles for f in fs)),
            "val-all": float(sum(f.value_all for f in fs)),
            "grnd": float(sum(f.grnd_hits / f.roles for f in fs)),
            "grnd-all": float(sum(f.grnd_all for f in fs)),
        }
        counts[k] = c
        scores[k] = {m: 100.0 * c[m] / n for m in METRICS}
    report = MetricReport(n, scores, counts, dict(metadata or {}))
    report.check()
    return report


def default_metadata(rule: str = "any") -> dict:
    return {
        "noun_rule": f"{rule}-of-3 annotators",
        "iou_threshold": f"> {IOU_THRESHOLD}",
        "top5_roles": "scored from the decode conditioned on the ground-truth verb",
        "value_averaging": "mean over images of the per-image share of correct roles",
        "annotator_frames": "annotators share one verb per image; each image is scored once",
    }


def evaluate(records: list[PredictionRecord], frames: list[Frame], rule: str = "any") -> MetricReport:
    """Score records against frames matched by image name.

    Frames are visited in sorted image order, so shuffling either list leaves
    the report unchanged.
    """
    by_image = {r.image: r for r in records}
    missing = [f.image for f in frames if f.image not in by_image]
    if missing:
        raise ScoringError(f"no prediction for {len(missing)} image(s), e.g. {missing[0]}")
    ordered = sorted(frames, key=lambda f: f.image)
    per = {k: [score_frame(by_image[f.image], f, k, rule) for f in ordered] for k in SETTINGS}
    return aggregate_report(per, default_metadata(rule))


def oracle_records(frames: list[Frame], lexicon: Lexicon) -> list[PredictionRecord]:
    """Records that reproduce the ground truth exactly."""
    out = []
    for f in frames:
        others = [v for v in range(lexicon.verb_count) if v != f.verb][:4]
        top5 = [(f.verb, 1.0)] + [(v, 0.0) for v in others]
        roles = [RolePrediction(r.role_type, r.nouns[0], None if r.box is None else tuple(r.box.as_array()),
                                1.0 if r.box is not None else 0.0) for r in f.roles]
        out.append(PredictionRecord(f.image, top5, {f.verb: roles}))
    return out
