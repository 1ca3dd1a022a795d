import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsrformer.dataset import BBox, Frame, RoleAnnotation
from gsrformer.metrics import (METRICS, SETTINGS, MetricReport, MonotonicityError, PredictionRecord, RolePrediction,
                               ScoringError, evaluate, iou, oracle_records, read_dump, role_bits, score_frame,
                               write_dump)
from gsrformer.synth import SynthSpec, synth_generate

VERBS = 10


def role(t, nouns, box=None):
    return RoleAnnotation(t, tuple(nouns), None if box is None else BBox(*box))


def pred(t, noun, box=None, presence=None):
    p = presence if presence is not None else (0.9 if box is not None else 0.1)
    return RolePrediction(t, noun, box, p)


def record(image, top, roles):
    top5 = [(v, 1.0 / (i + 1)) for i, v in enumerate(top)]
    return PredictionRecord(image, top5, roles)


# single roles -------------------------------------------------------------------

def test_iou_examples():
    assert iou([0, 0, 0.5, 1], [0.25, 0, 0.75, 1]) == pytest.approx(1 / 3)
    assert iou([0, 0, 0.2, 0.2], [0.5, 0.5, 1, 1]) == 0.0
    assert iou([0.3, 0.3, 0.3, 0.3], [0.3, 0.3, 0.3, 0.3]) == 0.0
    assert iou(BBox(0.1, 0.1, 0.4, 0.9), [0.1, 0.1, 0.4, 0.9]) == 1.0


def test_grounding_needs_iou_strictly_above_half():
    gt = role(0, (1, 2, 3), (0, 0, 1, 1))
    assert role_bits(pred(0, 1, (0, 0, 0.5, 1)), gt) == (True, False)
    assert role_bits(pred(0, 1, (0, 0, 0.5001, 1)), gt) == (True, True)
    assert role_bits(pred(0, 4, (0, 0, 1, 1)), gt) == (False, False)


def test_boxless_roles():
    gt = role(0, (5, 5, 6))
    assert role_bits(pred(0, 6), gt) == (True, True)
    assert role_bits(pred(0, 6, (0, 0, 1, 1)), gt) == (True, False)
    # a box below the presence threshold counts as no box
    assert role_bits(pred(0, 6, (0, 0, 1, 1), presence=0.4), gt) == (True, True)
    boxed = role(0, (5, 5, 6), (0, 0, 1, 1))
    assert role_bits(pred(0, 5, (0, 0, 1, 1), presence=0.3), boxed) == (True, False)


def test_noun_rules():
    gt = role(0, (1, 1, 2))
    assert role_bits(pred(0, 2), gt) == (True, True)
    assert role_bits(pred(0, 2), gt, "majority") == (False, False)
    assert role_bits(pred(0, 1), gt, "majority") == (True, True)


# frames ------------------------------------------------------------------------

GT = Frame("img", 3, (role(0, (1, 2, 3), (0.1, 0.1, 0.5, 0.5)), role(1, (4, 4, 4))), 100, 80)
GOOD = [pred(0, 2, (0.1, 0.1, 0.5, 0.5)), pred(1, 4)]
HALF = [pred(0, 2, (0.6, 0.6, 0.9, 0.9)), pred(1, 7)]


def test_two_role_hand_example():
    rec = record("img", [3, 0, 1, 2, 4], {3: HALF})
    s = score_frame(rec, GT, "top1")
    assert (s.verb, s.value_hits, s.grnd_hits, s.value_all, s.grnd_all) == (True, 1, 0, False, False)
    rec = record("img", [3, 0, 1, 2, 4], {3: GOOD})
    s = score_frame(rec, GT, "top1")
    assert (s.value_hits, s.grnd_hits, s.value_all, s.grnd_all) == (2, 2, True, True)


def test_verb_gating():
    wrong_top1 = record("img", [0, 1, 2, 4, 3], {0: [pred(0, 9), pred(1, 9)], 3: GOOD})
    s = score_frame(wrong_top1, GT, "top1")
    assert (s.verb, s.value_hits, s.grnd_hits) == (False, 0, 0)
    assert score_frame(wrong_top1, GT, "top5").grnd_hits == 2
    assert score_frame(wrong_top1, GT, "gt").grnd_hits == 2
    outside = record("img", [0, 1, 2, 4, 5], {0: [pred(0, 9), pred(1, 9)], 3: GOOD})
    s = score_frame(outside, GT, "top5")
    assert (s.verb, s.value_hits, s.grnd_hits) == (False, 0, 0)
    assert score_frame(outside, GT, "gt").value_hits == 2


def test_scoring_errors():
    with pytest.raises(ScoringError):
        score_frame(record("img", [3, 0, 1, 2, 4], {0: GOOD}), GT, "top1")
    with pytest.raises(ScoringError):
        score_frame(record("img", [3, 0, 1, 2, 4], {3: GOOD[::-1]}), GT, "gt")
    with pytest.raises(ScoringError):
        evaluate([], [GT])


def test_fifty_fifty_example():
    other = Frame("b", 1, (role(2, (0, 0, 0)),), 10, 10)
    recs = [record("img", [3, 0, 1, 2, 4], {3: GOOD}),
            record("b", [0, 1, 2, 3, 4], {0: [pred(2, 0)], 1: [pred(2, 0)]})]
    rep = evaluate(recs, [GT, other])
    assert rep.scores["top1"] == {m: 50.0 for m in METRICS}
    assert rep.scores["top5"] == {m: 100.0 for m in METRICS}
    assert rep.scores["gt"]["value"] == 100.0


def test_value_averages_per_image():
    one = Frame("a", 0, (role(0, (1, 1, 1)),), 10, 10)
    four = Frame("b", 0, tuple(role(t, (1, 1, 1)) for t in range(4)), 10, 10)
    recs = [record("a", [0, 1, 2, 3, 4], {0: [pred(0, 1)]}),
            record("b", [0, 1, 2, 3, 4], {0: [pred(0, 1), pred(1, 9), pred(2, 9), pred(3, 9)]})]
    # (1 + 1/4) / 2 per image, not 2 of 5 roles pooled
    assert evaluate(recs, [one, four]).scores["top1"]["value"] == 62.5


# randomised comparisons -------------------------------------------------------------

def random_case(r, image):
    verb = int(r.integers(VERBS))
    roles = []
    for t in r.choice(8, size=int(r.integers(1, 7)), replace=False):
        box = None
        if r.random() < 0.7:
            x, y = r.uniform(0, 0.6, 2)
            box = (x, y, x + r.uniform(0.05, 0.4), y + r.uniform(0.05, 0.4))
        roles.append(role(int(t), r.integers(0, 5, 3), box))
    gt = Frame(image, verb, tuple(roles), 50, 50)
    top = list(r.permutation(VERBS)[:5]) if r.random() < 0.5 else [verb, *r.choice(
        [v for v in range(VERBS) if v != verb], 4, replace=False)]
    if r.random() < 0.3 and verb in top:
        top.remove(verb)
        top.insert(int(r.integers(1, 5)), verb)

    def guess():
        out = []
        for g in roles:
            box = None
            if r.random() < 0.7:
                base = np.array(g.box.as_array()) if g.box is not None and r.random() < 0.7 else r.uniform(0, .5, 4)
                jit = np.clip(base + r.normal(0, 0.05, 4), 0, 1)
                box = (min(jit[0], jit[2]), min(jit[1], jit[3]), max(jit[0], jit[2]), max(jit[1], jit[3]))
            out.append(RolePrediction(g.role_type, int(r.integers(0, 5)), box, float(r.random())))
        return out
    roles_by_verb = {int(top[0]): guess(), verb: guess()}
    return gt, PredictionRecord(image, [(int(v), 0.0) for v in top], roles_by_verb)


def straight_line(recs, frames):
    """Literal reading of the metric definitions, one image at a time."""
    by = {r.image: r for r in recs}
    out = {k: dict.fromkeys(METRICS, 0.0) for k in SETTINGS}
    for f in frames:
        r = by[f.image]
        verbs = [v for v, _ in r.top5]
        for k in SETTINGS:
            ok = {"top1": verbs[0] == f.verb, "top5": f.verb in verbs, "gt": True}[k]
            if not ok:
                continue
            roles = r.roles[verbs[0] if k == "top1" else f.verb]
            nouns, grounds = [], []
            for p, g in zip(roles, f.roles):
                n = p.noun in g.nouns
                drawn = p.box is not None and p.presence > 0.5
                if g.box is None:
                    gr = not drawn
                elif not drawn:
                    gr = False
                else:
                    a, b = p.box, g.box.as_array()
                    w = max(0, min(a[2], b[2]) - max(a[0], b[0]))
                    h = max(0, min(a[3], b[3]) - max(a[1], b[1]))
                    u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - w * h
                    gr = u > 0 and w * h / u > 0.5
                nouns.append(n)
                grounds.append(n and gr)
            out[k]["verb"] += 1
            out[k]["value"] += sum(nouns) / len(nouns)
            out[k]["val-all"] += all(nouns)
            out[k]["grnd"] += sum(grounds) / len(grounds)
            out[k]["grnd-all"] += all(grounds)
    return {k: {m: 100 * v / len(frames) for m, v in d.items()} for k, d in out.items()}


def test_random_sets_match_straight_line_scorer():
    r = np.random.default_rng(7)
    for trial in range(500):
        cases = [random_case(r, f"t{trial}_{i}") for i in range(int(r.integers(1, 6)))]
        frames, recs = zip(*cases)
        got = evaluate(list(recs), list(frames)).scores
        want = straight_line(recs, frames)
        for k in SETTINGS:
            for m in METRICS:
                assert got[k][m] == pytest.approx(want[k][m], abs=1e-9), (trial, k, m)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_orderings_hold_on_random_sets(seed, n):
    r = np.random.default_rng(seed)
    frames, recs = zip(*[random_case(r, f"i{i}") for i in range(n)])
    rep = evaluate(list(recs), list(frames))
    s = rep.scores
    assert s["top5"]["verb"] >= s["top1"]["verb"]
    assert s["gt"]["value"] >= s["top5"]["value"] >= s["top1"]["value"]
    for k in SETTINGS:
        assert s[k]["value"] >= s[k]["grnd"] >= s[k]["grnd-all"]
        assert s[k]["value"] >= s[k]["val-all"] >= s[k]["grnd-all"]
        assert s[k]["verb"] >= s[k]["val-all"]
    assert s["gt"]["verb"] == 100.0


def test_check_rejects_broken_orderings():
    scores = {k: dict.fromkeys(METRICS, 50.0) for k in SETTINGS}
    scores["top1"]["grnd"] = 60.0
    with pytest.raises(MonotonicityError):
        MetricReport(1, scores, scores).check()


def test_shuffling_leaves_report_bytes_unchanged(tmp_path):
    r = np.random.default_rng(3)
    frames, recs = map(list, zip(*[random_case(r, f"i{i:02d}") for i in range(40)]))
    a = evaluate(recs, frames)
    perm = r.permutation(40)
    b = evaluate([recs[i] for i in perm], [frames[i] for i in r.permutation(40)][::-1])
    a.write(tmp_path / "a.txt", tmp_path / "a.json")
    b.write(tmp_path / "b.txt", tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


# synthetic corpus and dumps ------------------------------------------------------------

SPEC = SynthSpec(verbs=5, arities=[1, 2, 3], images_per_verb=4)


def test_oracle_records_score_full_marks():
    ds = synth_generate(SPEC)
    rep = evaluate(oracle_records(ds.frames, ds.lexicon), ds.frames)
    for k in SETTINGS:
        for m in METRICS:
            if not (k == "gt" and m == "verb"):
                assert rep.scores[k][m] == 100.0
    assert MetricReport.from_json(json.loads(json.dumps(rep.to_json()))).to_text() == rep.to_text()


def test_dump_round_trip_and_rescoring(tmp_path):
    r = np.random.default_rng(11)
    frames, recs = map(list, zip(*[random_case(r, f"i{i}") for i in range(25)]))
    write_dump(tmp_path / "p.jsonl", recs)
    back = read_dump(tmp_path / "p.jsonl")
    assert back == recs
    write_dump(tmp_path / "q.jsonl", back)
    assert (tmp_path / "p.jsonl").read_bytes() == (tmp_path / "q.jsonl").read_bytes()
    evaluate(recs, frames).write(tmp_path / "a.txt", tmp_path / "a.json")
    evaluate(back, frames).write(tmp_path / "b.txt", tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    line = json.loads((tmp_path / "p.jsonl").read_text().splitlines()[0])
    assert set(line) == {"image", "top5", "roles"}
    assert set(next(iter(line["roles"].values()))[0]) == {"role", "noun", "box", "presence"}
