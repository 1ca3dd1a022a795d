"""Situation frames, lexicon, annotation I/O and augmentation.

File formats (JSON, UTF-8) follow the public SWiG layout:

lexicon::

    {"verbs": {"<verb>": {"order": ["<role>", ...]}, ...},
     "nouns": {"<noun id>": {...}, ...}}

annotations::

    {"<image file>": {"verb": "<verb>", "width": W, "height": H,
                      "bb": {"<role>": [x1, y1, x2, y2], ...},
                      "frames": [{"<role>": "<noun id>", ...}, x3]}}

Boxes are pixel coordinates; ``[-1, -1, -1, -1]`` marks a role without a
box. The empty noun ``""`` is the null noun and always gets id 0. Verb,
role and noun ids are assigned in sorted-name order. Pixel boxes are kept
verbatim so that saving and reloading is exact; normalised boxes are
derived at load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from gsrformer.errors import LexiconError, ValidationError

NULL_NOUN = 0
MAX_ARITY = 6
ANNOTATORS = 3
NO_BOX = [-1, -1, -1, -1]


@dataclass(frozen=True)
class BBox:
    """Normalised corner box, all coordinates in [0, 1]."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            raise ValidationError(f"box {vals} outside [0, 1]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValidationError(f"box {vals} has negative extent")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class RoleAnnotation:
    role_type: int
    nouns: tuple[int, int, int]
    box: BBox | None = None
    box_px: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if len(self.nouns) != ANNOTATORS:
            raise ValidationError(f"role needs exactly {ANNOTATORS} annotator nouns, got {len(self.nouns)}")


@dataclass(frozen=True)
class Frame:
    image: str
    verb: int
    roles: tuple[RoleAnnotation, ...]
    width: int
    height: int

    @property
    def role_types(self) -> tuple[int, ...]:
        return tuple(r.role_type for r in self.roles)


@dataclass
class Lexicon:
    verbs: list[str]
    role_types: list[str]
    nouns: list[str]
    frames: list[tuple[int, ...]]
    _verb_ids: dict = field(default_factory=dict, repr=False)
    _role_ids: dict = field(default_factory=dict, repr=False)
    _noun_ids: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.nouns or self.nouns[NULL_NOUN] != "":
            raise ValidationError("noun 0 must be the null noun ''")
        if len(self.frames) != len(self.verbs):
            raise ValidationError("one role order per verb required")
        for v, order in enumerate(self.frames):
            if not 1 <= len(order) <= MAX_ARITY:
                raise ValidationError(f"verb {self.verbs[v]!r}: arity {len(order)} outside [1, {MAX_ARITY}]")
            if len(set(order)) != len(order):
                raise ValidationError(f"verb {self.verbs[v]!r}: repeated role type")
        self._verb_ids = {name: i for i, name in enumerate(self.verbs)}
        self._role_ids = {name: i for i, name in enumerate(self.role_types)}
        self._noun_ids = {name: i for i, name in enumerate(self.nouns)}

    @property
    def verb_count(self) -> int:
        return len(self.verbs)

    @property
    def role_count(self) -> int:
        return len(self.role_types)

    @property
    def noun_count(self) -> int:
        """Number of real nouns, excluding the null noun."""
        return len(self.nouns) - 1

    @property
    def max_arity(self) -> int:
        return max(len(f) for f in self.frames)

    @property
    def mean_arity(self) -> float:
        return sum(len(f) for f in self.frames) / len(self.frames)

    def roles_of(self, verb: int) -> tuple[int, ...]:
        if not 0 <= int(verb) < len(self.frames):
            raise LexiconError(f"unknown verb id {verb}")
        return self.frames[int(verb)]

    def arity(self, verb: int) -> int:
        return len(self.roles_of(verb))

    def verb_id(self, name: str) -> int:
        try:
            return self._verb_ids[name]
        except KeyError:
            raise LexiconError(f"unknown verb {name!r}") from None

    def role_id(self, name: str) -> int:
        try:
            return self._role_ids[name]
        except KeyError:
            raise LexiconError(f"unknown role {name!r}") from None

    def noun_id(self, name: str) -> int:
        try:
            return self._noun_ids[name]
        except KeyError:
            raise LexiconError(f"unknown noun {name!r}") from None

    @classmethod
    def from_json(cls, doc) -> "Lexicon":
        if not isinstance(doc, dict) or not isinstance(doc.get("verbs"), dict) or not isinstance(doc.get("nouns"), dict):
            raise ValidationError("lexicon: expected object with 'verbs' and 'nouns' objects")
        verbs = sorted(doc["verbs"])
        orders = []
        for v in verbs:
            entry = doc["verbs"][v]
            order = entry.get("order") if isinstance(entry, dict) else None
            if not isinstance(order, list) or not all(isinstance(r, str) for r in order):
                raise ValidationError(f"lexicon.verbs[{v!r}].order: expected list of role names")
            orders.append(order)
        roles = sorted({r for order in orders for r in order})
        role_ids = {r: i for i, r in enumerate(roles)}
        nouns = [""] + sorted(n for n in doc["nouns"] if n != "")
        try:
            return cls(verbs, roles, nouns, [tuple(role_ids[r] for r in order) for order in orders])
        except ValidationError as exc:
            raise ValidationError(f"lexicon: {exc}") from None

    def to_json(self) -> dict:
        return {
            "verbs": {v: {"order": [self.role_types[r] for r in self.frames[i]]} for i, v in enumerate(self.verbs)},
            "nouns": {n: {} for n in self.nouns[1:]},
        }


@dataclass(frozen=True)
class DatasetStats:
    verb_count: int
    role_type_count: int
    noun_count: int
    mean_arity: float
    frame_count: int
    role_count: int
    box_count: int

    @property
    def box_coverage(self) -> float:
        return self.box_count / self.role_count if self.role_count else 0.0

    def report(self) -> str:
        rows = [
            ("verbs", self.verb_count),
            ("role_types", self.role_type_count),
            ("nouns", self.noun_count),
            ("mean_arity", f"{self.mean_arity:.4f}"),
            ("frames", self.frame_count),
            ("roles", self.role_count),
            ("boxes", self.box_count),
            ("box_coverage", f"{100 * self.box_coverage:.2f}%"),
        ]
        return "".join(f"{k}: {v}\n" for k, v in rows)


@dataclass
class Dataset:
    lexicon: Lexicon
    frames: list[Frame]
    image_dir: Path | None = None
    images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    def load_image(self, frame: Frame) -> np.ndarray:
        img = self.images.get(frame.image)
        if img is None:
            if self.image_dir is None:
                raise FileNotFoundError(f"no image source for {frame.image!r}")
            img = load_raster(Path(self.image_dir) / frame.image)
            self.images[frame.image] = img
        return img

    def statistics(self) -> DatasetStats:
        roles = sum(len(f.roles) for f in self.frames)
        boxes = sum(r.box is not None for f in self.frames for r in f.roles)
        return DatasetStats(self.lexicon.verb_count, self.lexicon.role_count, self.lexicon.noun_count,
                            self.lexicon.mean_arity, len(self.frames), roles, boxes)


def load_raster(path) -> np.ndarray:
    """Read an ``.npy`` raster as ``(H, W, C)`` float64."""
    arr = np.load(path, allow_pickle=False)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValidationError(f"{path}: expected (H, W[, C]) raster, got shape {arr.shape}")
    return arr.astype(np.float64)


# parsing -------------------------------------------------------------------------

def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{path}: not UTF-8 ({exc.reason})") from None


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return (_is_int(x) or isinstance(x, float)) and np.isfinite(x)


def parse_frame(image: str, rec, lexicon: Lexicon) -> Frame:
    where = f"$[{image!r}]"
    if not isinstance(rec, dict):
        raise ValidationError(f"{where}: expected object")
    verb_name = rec.get("verb")
    if not isinstance(verb_name, str):
        raise ValidationError(f"{where}.verb: expected string")
    try:
        verb = lexicon.verb_id(verb_name)
    except LexiconError as exc:
        raise ValidationError(f"{where}.verb: {exc}") from None
    w, h = rec.get("width"), rec.get("height")
    if not (_is_int(w) and _is_int(h) and w > 0 and h > 0):
        raise ValidationError(f"{where}: width/height must be positive integers")
    order = [lexicon.role_types[r] for r in lexicon.roles_of(verb)]
    frames, bb = rec.get("frames"), rec.get("bb")
    if not isinstance(frames, list) or len(frames) != ANNOTATORS:
        raise ValidationError(f"{where}.frames: expected {ANNOTATORS} annotator frames")
    if not isinstance(bb, dict) or set(bb) != set(order):
        raise ValidationError(f"{where}.bb: keys must be exactly the roles of {verb_name!r}: {order}")
    nouns = {r: [] for r in order}
    for k, fr in enumerate(frames):
        if not isinstance(fr, dict) or set(fr) != set(order):
            raise ValidationError(f"{where}.frames[{k}]: roles must be exactly {order}")
        for r in order:
            if not isinstance(fr[r], str):
                raise ValidationError(f"{where}.frames[{k}][{r!r}]: expected noun id string")
            try:
                nouns[r].append(lexicon.noun_id(fr[r]))
            except LexiconError as exc:
                raise ValidationError(f"{where}.frames[{k}][{r!r}]: {exc}") from None
    roles = []
    for r in order:
        box = bb[r]
        if not isinstance(box, list) or len(box) != 4 or not all(_is_num(c) for c in box):
            raise ValidationError(f"{where}.bb[{r!r}]: expected 4 numbers")
        if list(box) == NO_BOX:
            norm, px = None, None
        else:
            x1, y1, x2, y2 = box
            if not (0 <= x1 <= x2 <= w and 0 <= y1 <= y2 <= h):
                raise ValidationError(f"{where}.bb[{r!r}]: {box} not a box inside {w}x{h}")
            px = tuple(box)
            norm = BBox(x1 / w, y1 / h, x2 / w, y2 / h)
        roles.append(RoleAnnotation(lexicon.role_id(r), tuple(nouns[r]), norm, px))
    return Frame(image, verb, tuple(roles), w, h)


def frame_to_json(frame: Frame, lexicon: Lexicon) -> dict:
    order = [lexicon.role_types[r.role_type] for r in frame.roles]
    return {
        "verb": lexicon.verbs[frame.verb],
        "width": frame.width,
        "height": frame.height,
        "bb": {name: list(r.box_px) if r.box_px is not None else list(NO_BOX) for name, r in zip(order, frame.roles)},
        "frames": [{name: lexicon.nouns[r.nouns[k]] for name, r in zip(order, frame.roles)} for k in range(ANNOTATORS)],
    }


def load_lexicon(path) -> Lexicon:
    return Lexicon.from_json(_read_json(path))


def load_dataset(annotation_file, lexicon_file, image_dir=None, lexicon: Lexicon | None = None) -> Dataset:
    """Load and validate annotations. Any problem raises ValidationError naming its JSON path."""
    lexicon = lexicon or load_lexicon(lexicon_file)
    doc = _read_json(annotation_file)
    if not isinstance(doc, dict):
        raise ValidationError(f"{annotation_file}: expected object keyed by image")
    frames = [parse_frame(img, rec, lexicon) for img, rec in doc.items()]
    return Dataset(lexicon, frames, Path(image_dir) if image_dir is not None else None)


def save_dataset(ds: Dataset, annotation_file, lexicon_file=None) -> None:
    doc = {f.image: frame_to_json(f, ds.lexicon) for f in ds.frames}
    Path(annotation_file).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    if lexicon_file is not None:
        Path(lexicon_file).write_text(json.dumps(ds.lexicon.to_json(), indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")


# augmentation ----------------------------------------------------------------------

def _with_boxes(frame: Frame, boxes_px, width: int, height: int) -> Frame:
    roles = []
    for r, px in zip(frame.roles, boxes_px):
        if px is None:
            roles.append(r)
        else:
            roles.append(replace(r, box_px=px, box=BBox(px[0] / width, px[1] / height, px[2] / width, px[3] / height)))
    return replace(frame, roles=tuple(roles), width=width, height=height)


def augment_flip(frame: Frame, image: np.ndarray) -> tuple[Frame, np.ndarray]:
    """Mirror horizontally; box x-extents map to ``W - x`` with endpoints swapped."""
    w = frame.width
    boxes = [None if r.box_px is None else (w - r.box_px[2], r.box_px[1], w - r.box_px[0], r.box_px[3])
             for r in frame.roles]
    return _with_boxes(frame, boxes, frame.width, frame.height), np.ascontiguousarray(image[:, ::-1])


def augment_scale(frame: Frame, image: np.ndarray, scale: float) -> tuple[Frame, np.ndarray]:
    """Aspect-preserving bilinear resize by ``scale``; normalised boxes are unchanged up to rounding."""
    if scale == 1.0:
        return frame, image
    h, w = image.shape[:2]
    nh, nw = int(round(h * scale)), int(round(w * scale))
    out = ndimage.zoom(image, (nh / h, nw / w, 1), order=1, grid_mode=True, mode="nearest")
    boxes = [None if r.box_px is None else tuple(min(c * nw / w, nw) if i % 2 == 0 else min(c * nh / h, nh)
                                                 for i, c in enumerate(r.box_px)) for r in frame.roles]
    return _with_boxes(frame, boxes, nw, nh), out


def mean_arity_fraction(arities) -> Fraction:
    arities = list(arities)
    return Fraction(sum(arities), len(arities))
