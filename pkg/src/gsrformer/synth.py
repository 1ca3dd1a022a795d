"""Procedural mini-datasets with recoverable verbs, nouns and boxes.

Layout of a generated image (``image_size`` square, ``stride`` cells):

* the top row of cells is a strip holding the verb's motif;
* every other cell may hold one role object. An object covers 1x1, 1x2 or
  2x1 cells; each covered cell shows the noun's texture plus the role
  type's colour, and the object's box is the union of its cells.

A fixed share ``empty_rate`` of each verb's role slots is left empty: the
noun is null and the role has no box. The empty slots are drawn per verb
with an exact count, so the dataset statistics follow from the spec alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from gsrformer.dataset import (ANNOTATORS, BBox, Dataset, DatasetStats, Frame, Lexicon, RoleAnnotation,
                               save_dataset)
from gsrformer.errors import ValidationError

ROLE_NAMES = ["agent", "item", "tool", "place", "target", "source", "destination", "victim", "coagent"]
_SHAPES = [(1, 1), (1, 2), (2, 1)]


@dataclass
class SynthSpec:
    verbs: int = 8
    arities: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    images_per_verb: int = 16
    noise: float = 0.0
    seed: int = 0
    image_size: int = 32
    stride: int = 8
    channels: int = 4
    role_pool: int = 6
    nouns_per_role: int = 3
    empty_rate: float = 0.25

    def __post_init__(self):
        if any(not 1 <= a <= 6 for a in self.arities):
            raise ValidationError(f"arities {self.arities} must lie in [1, 6]")
        if max(self.arities) > self.role_pool:
            raise ValidationError("role_pool smaller than the largest arity")
        if self.image_size % self.stride:
            raise ValidationError("image_size must be a multiple of stride")
        cells = (self.image_size // self.stride - 1) * (self.image_size // self.stride)
        if cells < max(self.arities):
            raise ValidationError("not enough object cells for the largest arity")

    def arity(self, verb: int) -> int:
        return self.arities[verb % len(self.arities)]

    def role_order(self, verb: int) -> list[int]:
        return [(verb + i) % self.role_pool for i in range(self.arity(verb))]

    def empty_count(self, verb: int, images: int | None = None) -> int:
        """Empty role slots of ``verb``: ``empty_rate`` of its slots, rounded half up."""
        slots = (self.images_per_verb if images is None else images) * self.arity(verb)
        return int(Fraction(slots) * Fraction(self.empty_rate).limit_denominator(10**6) + Fraction(1, 2))

    def expected_stats(self) -> DatasetStats:
        """Statistics implied by the spec alone."""
        used = {r for v in range(self.verbs) for r in self.role_order(v)}
        roles = sum(self.images_per_verb * self.arity(v) for v in range(self.verbs))
        empty = sum(self.empty_count(v) for v in range(self.verbs))
        mean_arity = sum(self.arity(v) for v in range(self.verbs)) / self.verbs
        return DatasetStats(self.verbs, len(used), len(used) * self.nouns_per_role, mean_arity,
                            self.verbs * self.images_per_verb, roles, roles - empty)


def _role_name(r: int) -> str:
    return ROLE_NAMES[r] if r < len(ROLE_NAMES) else f"role{r}"


def build_lexicon(spec: SynthSpec) -> Lexicon:
    used = sorted({r for v in range(spec.verbs) for r in spec.role_order(v)})
    doc = {
        "verbs": {f"verb{v:02d}": {"order": [_role_name(r) for r in spec.role_order(v)]} for v in range(spec.verbs)},
        "nouns": {f"{_role_name(r)}_n{k}": {} for r in used for k in range(spec.nouns_per_role)},
    }
    return Lexicon.from_json(doc)


class Templates:
    """Fixed random appearance templates shared by all images of a spec."""

    def __init__(self, spec: SynthSpec):
        rng = np.random.default_rng([spec.seed, 7919])
        s, c = spec.stride, spec.channels
        self.motifs = rng.choice([-1.0, 1.0], size=(spec.verbs, s, spec.image_size, c))
        self.role_colors = rng.normal(0.0, 1.0, size=(spec.role_pool, c))
        self.noun_textures = rng.normal(0.0, 0.7, size=(spec.role_pool, spec.nouns_per_role, s, s, c))


def _render(spec: SynthSpec, tpl: Templates, verb: int, index: int, empty: set, lex: Lexicon):
    rng = np.random.default_rng([spec.seed, verb, index])
    s, g = spec.stride, spec.image_size // spec.stride
    img = np.zeros((spec.image_size, spec.image_size, spec.channels))
    img[:s] = tpl.motifs[verb]
    free = np.ones((g, g), dtype=bool)
    free[0] = False
    roles = []
    wanted = spec.role_order(verb)
    for i, r in enumerate(wanted):
        role_id = lex.role_id(_role_name(r))
        # keep one cell for every object still to be placed
        later = sum((index, j) not in empty for j in range(i + 1, len(wanted)))
        if (index, i) in empty:
            roles.append(RoleAnnotation(role_id, (0,) * ANNOTATORS))
            continue
        k = int(rng.integers(spec.nouns_per_role))
        noun = lex.noun_id(f"{_role_name(r)}_n{k}")
        shape = _SHAPES[int(rng.integers(len(_SHAPES)))]
        cells = [(y, x) for y in range(1, g) for x in range(g)]
        order = rng.permutation(len(cells))
        spot = None
        for hh, ww in (shape, (1, 1)):
            for j in order:
                y, x = cells[j]
                fits = y + hh <= g and x + ww <= g and free[y:y + hh, x:x + ww].all()
                if fits and free.sum() - hh * ww >= later:
                    spot = (y, x, hh, ww)
                    break
            if spot:
                break
        y, x, hh, ww = spot
        free[y:y + hh, x:x + ww] = False
        for cy in range(y, y + hh):
            for cx in range(x, x + ww):
                img[cy * s:(cy + 1) * s, cx * s:(cx + 1) * s] = tpl.noun_textures[r, k] + tpl.role_colors[r]
        px = (float(x * s), float(y * s), float((x + ww) * s), float((y + hh) * s))
        n = spec.image_size
        roles.append(RoleAnnotation(role_id, (noun,) * ANNOTATORS, BBox(px[0] / n, px[1] / n, px[2] / n, px[3] / n), px))
    if spec.noise:
        img = img + spec.noise * rng.normal(size=img.shape)
    return img, roles


def synth_generate(spec: SynthSpec, split: str = "train", images_per_verb: int | None = None) -> Dataset:
    """Generate an in-memory dataset; deterministic in (spec, split).

    Splits draw disjoint image indices, so a held-out split shows new
    placements and noun choices of the same verbs.
    """
    lex = build_lexicon(spec)
    tpl = Templates(spec)
    count = spec.images_per_verb if images_per_verb is None else images_per_verb
    offset = {"train": 0}.get(split, 100_000 * (1 + sum(map(ord, split))))
    frames, images = [], {}
    for v in range(spec.verbs):
        verb_id = lex.verb_id(f"verb{v:02d}")
        a = spec.arity(v)
        slots = [(j, i) for j in range(count) for i in range(a)]
        pick = np.random.default_rng([spec.seed, v, offset, 1]).permutation(len(slots))[:spec.empty_count(v, count)]
        empty = {slots[p] for p in pick}
        for j in range(count):
            img, roles = _render(spec, tpl, v, offset + j, {(offset + jj, ii) for jj, ii in empty if jj == j}, lex)
            name = f"{split}_{v:02d}_{j:04d}.npy"
            images[name] = img
            frames.append(Frame(name, verb_id, tuple(roles), spec.image_size, spec.image_size))
    return Dataset(lex, frames, images=images)


def write_synth(spec: SynthSpec, out_dir, splits: dict[str, int] | None = None) -> Path:
    """Write lexicon.json, <split>.json and images/ under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    splits = splits or {"train": spec.images_per_verb}
    lex_written = False
    for split, count in splits.items():
        ds = synth_generate(spec, split, count)
        save_dataset(ds, out / f"{split}.json", None if lex_written else out / "lexicon.json")
        lex_written = True
        for name, img in ds.images.items():
            np.save(out / "images" / name, img)
    (out / "synth_spec.json").write_text(json.dumps(asdict(spec), indent=1, sort_keys=True) + "\n")
    return out
