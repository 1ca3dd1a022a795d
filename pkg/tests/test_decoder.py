import logging

import numpy as np
import pytest

from gsrformer import decoder as D
from gsrformer import tensor as T
from gsrformer.config import ModelConfig
from gsrformer.decoder import (AggregationError, Aggregator, Decoder, DecoderLayer, PredictionHeads,
                               RefinementState, SupportBatch, aggregate, refine_nouns, refine_verb)
from gsrformer.errors import ConfigError
from gsrformer.model import GSRFormer
from gsrformer.objectives import Targets, batch_loss
from gsrformer.retrieval import IndexEntry, SupportSet, build_index
from gsrformer.synth import SynthSpec, build_lexicon, synth_generate
from gsrformer.tensor import Tensor, grad_check

DIM = 8


def support_set(r, k, types_pool=6, dim=DIM, first_id=0):
    entries = []
    for j in range(k):
        m = int(r.integers(1, 4))
        types = tuple(int(t) for t in r.choice(types_pool, size=m, replace=False))
        entries.append(IndexEntry(first_id + j, 0, types, r.normal(size=(m, dim)), r.normal(size=dim)))
    return SupportSet(tuple(entries), tuple(range(k)), (False,) * k)


def shuffled(s: SupportSet, r) -> SupportSet:
    p = r.permutation(len(s))
    return SupportSet(tuple(s.entries[i] for i in p), tuple(s.scores[i] for i in p), tuple(s.fallback[i] for i in p))


def state(r, supports, m=3, emb_table=None, dim=DIM):
    b = len(supports)
    packed = SupportBatch.pack(supports, dim)
    table = r.normal(size=(8, dim)) if emb_table is None else emb_table
    types = np.tile(np.arange(m), (b, 1))
    return RefinementState(Tensor(r.normal(size=(b, dim))), Tensor(r.normal(size=(b, m, dim))),
                           Tensor(table[types]), np.ones((b, m), bool), packed,
                           Tensor(table[np.where(packed.role_types >= 0, packed.role_types, 0)]))


def ln(x):
    return T.layer_norm(x, np.ones(x.shape[-1]), np.zeros(x.shape[-1])).data


# aggregation ----------------------------------------------------------------------

@pytest.mark.parametrize("mode", D.AGGREGATIONS)
def test_aggregators_ignore_message_order(mode, rng):
    agg = Aggregator(rng, DIM, mode)
    msgs = rng.normal(size=(2, 5, DIM))
    perm = rng.permutation(5)
    a = agg(Tensor(msgs)).data
    b = agg(Tensor(msgs[:, perm])).data
    assert a.tobytes() == b.tobytes()


def test_aggregator_examples(rng):
    x = rng.normal(size=DIM)
    assert np.array_equal(aggregate(Aggregator(rng, DIM, "sum"), [x]).data, x)
    assert np.array_equal(aggregate(Aggregator(rng, DIM, "max"), [x, x]).data, x)
    assert np.allclose(aggregate(Aggregator(rng, DIM, "mean"), [x, 3 * x]).data, 2 * x)
    gated = Aggregator(rng, DIM, "gated")
    x2 = Tensor(x[None])
    expected = (T.sigmoid(gated.gate(x2)).data * np.tanh(gated.value(x2).data))[0]
    assert np.array_equal(aggregate(gated, [x]).data, expected)
    with pytest.raises(AggregationError):
        aggregate(gated, [])
    with pytest.raises(ConfigError):
        Aggregator(rng, DIM, "median")


@pytest.mark.parametrize("mode", D.AGGREGATIONS)
def test_masked_messages_are_ignored(mode, rng):
    agg = Aggregator(rng, DIM, mode)
    msgs = rng.normal(size=(2, 4, DIM))
    mask = np.array([[True, True, False, False], [False] * 4])
    noisy = msgs.copy()
    noisy[:, 2:] = 1e6
    noisy[1] = -1e6
    a, b = agg(Tensor(msgs), mask).data, agg(Tensor(noisy), mask).data
    assert np.array_equal(a, b)
    assert not b[1].any()


# refinement steps ---------------------------------------------------------------------

def silence(layer: DecoderLayer):
    """Zero message outputs and zero FFN branches."""
    for lin in (layer.messages.attn.o, layer.noun_refine.ffn.fc2, layer.verb_refine.ffn.fc2):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0


def test_zero_messages_and_ffn_give_double_layer_norm(rng):
    layer = DecoderLayer(rng, DIM, 2, 16, "sum")
    silence(layer)
    st = state(rng, [support_set(rng, 3), support_set(rng, 2)])
    assert np.allclose(refine_nouns(layer, st).data, ln(ln(st.roles.data)), rtol=0, atol=1e-12)
    assert np.allclose(refine_verb(layer, st).data, ln(ln(st.verb.data)), rtol=0, atol=1e-12)


def test_equal_support_messages_add_up(rng):
    layer = DecoderLayer(rng, DIM, 2, 16, "sum")
    one = support_set(rng, 1).entries[0]
    k = 4
    copies = SupportSet(tuple(IndexEntry(i, 0, one.role_types, one.role_features, one.verb_feature)
                              for i in range(k)), (1.0,) * k, (False,) * k)
    st = state(rng, [copies])
    mu = D.support_verb_messages(layer, st).data[0, 0]
    expected = layer.noun_refine(st.roles, Tensor(np.broadcast_to(k * mu, (1, 1, DIM)))).data
    assert np.allclose(refine_nouns(layer, st).data, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("mode", D.AGGREGATIONS)
def test_support_order_never_changes_nouns(mode, rng):
    layer = DecoderLayer(rng, DIM, 2, 16, mode)
    sups = [support_set(rng, 5), support_set(rng, 3, first_id=10)]
    table = rng.normal(size=(8, DIM))
    r1, r2 = np.random.default_rng(0), np.random.default_rng(0)
    a = refine_nouns(layer, state(r1, sups, emb_table=table)).data
    b = refine_nouns(layer, state(r2, [shuffled(s, rng) for s in sups], emb_table=table)).data
    assert a.tobytes() == b.tobytes()


def test_single_role_verb_update_uses_that_message(rng):
    for mode in ("sum", "gated"):
        layer = DecoderLayer(rng, DIM, 2, 16, mode)
        st = state(rng, [support_set(rng, 2)], m=1)
        _, p_roles = layer.messages(st.verb, st.roles, st.role_emb, st.role_mask)
        p = p_roles.data[:, 0]
        if mode == "gated":
            agg = layer.verb_agg
            p = T.sigmoid(agg.gate(Tensor(p))).data * np.tanh(agg.value(Tensor(p)).data)  # (B, d) rows
        expected = layer.verb_refine(st.verb, Tensor(p)).data
        assert np.allclose(refine_verb(layer, st).data, expected, rtol=0, atol=1e-12)


def test_support_nouns_never_reach_the_verb_update(rng):
    layer = DecoderLayer(rng, DIM, 2, 16, "sum")
    sup = support_set(rng, 3)
    poked = SupportSet(tuple(IndexEntry(e.frame_id, e.verb, e.role_types, e.role_features + 5.0, e.verb_feature)
                             for e in sup.entries), sup.scores, sup.fallback)
    table = rng.normal(size=(8, DIM))
    a = refine_verb(layer, state(np.random.default_rng(1), [sup], emb_table=table)).data
    b = refine_verb(layer, state(np.random.default_rng(1), [poked], emb_table=table)).data
    assert a.tobytes() == b.tobytes()


def test_support_nouns_act_only_through_support_verb_messages(rng, monkeypatch):
    dec = Decoder(rng, dim=DIM, heads=2, hidden=16, iterations=2)
    sup = support_set(rng, 3)
    poked = SupportSet(tuple(IndexEntry(e.frame_id, e.verb, e.role_types, -e.role_features, e.verb_feature)
                             for e in sup.entries), sup.scores, sup.fallback)
    table = rng.normal(size=(8, DIM))
    fixed = Tensor(rng.normal(size=(1, 3, DIM)))
    monkeypatch.setattr(D, "support_verb_messages", lambda layer, st: fixed)
    outs = []
    for s in (sup, poked):
        st = state(np.random.default_rng(2), [s], emb_table=table)
        final = dec(st.verb, st.roles, st.role_mask, st.role_emb, st.support, st.support_emb)
        outs.append((final.verb.data.tobytes(), final.roles.data.tobytes()))
    assert outs[0] == outs[1]


def test_empty_support_uses_own_verb_message(rng, caplog):
    layer = DecoderLayer(rng, DIM, 2, 16, "sum")
    st = state(rng, [SupportSet((), (), ())])
    own, _ = layer.messages(st.verb, st.roles, st.role_emb, st.role_mask)
    expected = layer.noun_refine(st.roles, T.reshape(own, (1, 1, DIM))).data
    with caplog.at_level(logging.INFO, logger="gsrformer.decoder"):
        out = refine_nouns(layer, st).data
    assert np.array_equal(out, expected)
    assert "without support" in caplog.text


# full decoder ----------------------------------------------------------------------

def test_one_iteration_is_nouns_then_verb(rng):
    dec = Decoder(rng, dim=DIM, heads=2, hidden=16, iterations=1)
    st = state(rng, [support_set(rng, 2)])
    out = dec(st.verb, st.roles, st.role_mask, st.role_emb, st.support, st.support_emb)
    roles = refine_nouns(dec.layer[0], st)
    verb = refine_verb(dec.layer[0], D._replace(st, roles=roles))
    assert out.roles.data.tobytes() == roles.data.tobytes()
    assert out.verb.data.tobytes() == verb.data.tobytes()


def test_shapes_constant_and_orders_differ(rng):
    dec = Decoder(rng, dim=DIM, heads=2, hidden=16, iterations=3)
    st = state(rng, [support_set(rng, 2), support_set(rng, 4)])
    a = dec(st.verb, st.roles, st.role_mask, st.role_emb, st.support, st.support_emb)
    assert [h.shape for h in a.history] == [(2, DIM)] * 3 and a.roles.shape == st.roles.shape
    dec.order = "verb-first"
    b = dec(st.verb, st.roles, st.role_mask, st.role_emb, st.support, st.support_emb)
    assert not np.allclose(a.verb.data, b.verb.data)


def test_bad_decoder_settings(rng):
    with pytest.raises(ConfigError):
        Decoder(rng, dim=DIM, heads=2, hidden=16, iterations=1, order="sideways")
    with pytest.raises(ConfigError):
        Decoder(rng, dim=DIM, heads=2, hidden=16, iterations=-1)


def test_heads_ranges_and_purity(rng):
    heads = PredictionHeads(rng, dim=DIM, verb_count=5, noun_count=7)
    roles = Tensor(rng.normal(size=(2, 3, DIM)) * 50)
    verb = Tensor(rng.normal(size=(2, DIM)))
    a = heads(verb, roles, np.ones((2, 3), bool))
    assert a.noun_logits.shape == (2, 3, 7) and a.verb_logits.shape == (2, 5)
    assert np.all((a.boxes.data >= 0) & (a.boxes.data <= 1))
    b = heads(verb, roles, np.ones((2, 3), bool))
    assert a.boxes.data.tobytes() == b.boxes.data.tobytes()


# whole model ---------------------------------------------------------------------

SPEC = SynthSpec(verbs=3, arities=[2, 1, 2], images_per_verb=3, image_size=32, stride=8)


def toy_model(rng_seed=0, **kw):
    lex = build_lexicon(SPEC)
    cfg = ModelConfig(dim=DIM, heads=2, verb_layers=1, role_layers=1, ffn_verb=8, ffn_role=8, ffn_decoder=8,
                      head_hidden=8, box_hidden=8, feature_channels=4, max_grid=4, stride=8, **kw)
    return GSRFormer(cfg, lex, SPEC.channels, seed=rng_seed)


def toy_index(model, ds):
    images = np.stack([ds.load_image(f) for f in ds.frames])
    enc = model.encode(images)
    batch = model.encode_roles(enc, [f.verb for f in ds.frames])
    return build_index([batch.frame(i, i) for i in range(len(ds.frames))])


@pytest.mark.parametrize("mode", D.AGGREGATIONS)
def test_predictions_ignore_support_order(mode, rng):
    model = toy_model(aggregation=mode, iterations=2, support_k=4)
    ds = synth_generate(SPEC)
    index = toy_index(model, ds)
    enc = model.encode(np.stack([ds.load_image(f) for f in ds.frames[:3]]))
    batch = model.encode_roles(enc, enc.pseudo_verbs)
    sups = model.retrieve(batch, index)
    a, _ = model.decode(batch, sups)
    b, _ = model.decode(batch, [shuffled(s, rng) for s in sups])
    for x, y in zip((a.verb_logits, a.noun_logits, a.boxes, a.presence), (b.verb_logits, b.noun_logits, b.boxes,
                                                                           b.presence)):
        assert x.data.tobytes() == y.data.tobytes()


def test_zero_iterations_bypass_the_decoder():
    model = toy_model(iterations=0)
    ds = synth_generate(SPEC)
    enc = model.encode(np.stack([ds.load_image(f) for f in ds.frames[:2]]))
    batch = model.encode_roles(enc, enc.pseudo_verbs)
    assert model.retrieve(batch, None) == [SupportSet((), (), ())] * 2
    pred, st = model.decode(batch, model.retrieve(batch, None))
    assert st is None
    direct = model.heads(batch.verb_feature, batch.role_features, batch.role_mask)
    assert pred.verb_logits.data.tobytes() == direct.verb_logits.data.tobytes()


def _swap_param(owner, name, f):
    original = getattr(owner, name)

    def wrapped(t):
        setattr(owner, name, t)
        try:
            return f()
        finally:
            setattr(owner, name, original)
    return wrapped, original.data


def test_end_to_end_gradient_two_roles_two_supports_two_iterations():
    model = toy_model(aggregation="gated", iterations=2, support_k=2)
    ds = synth_generate(SPEC)
    index = toy_index(model, ds)
    frame = next(f for f in ds.frames if len(f.roles) == 2)
    enc = model.encode(ds.load_image(frame)[None])
    targets = Targets.from_frames([frame])

    def loss():
        batch = model.encode_roles(enc, targets.verbs)
        sups = model.retrieve(batch, index)
        assert len(sups[0]) == 2
        pred, _ = model.decode(batch, sups)
        return batch_loss(pred, targets, verb_smoothing=0.3, noun_smoothing=0.2, encoder_logits=enc.verb_logits,
                          pred_role_types=batch.role_types).total

    layer = model.decoder.layer[0]
    probes = [
        (model.encoder.role_embed, "table"),
        (layer.messages.attn.q, "weight"),
        (layer.noun_agg.gate, "weight"),
        (model.decoder.layer[1].verb_refine.ffn.fc1, "weight"),
        (model.heads.box.fc[1], "weight"),
        (model.heads.presence, "weight"),
    ]
    for owner, name in probes:
        f, x0 = _swap_param(owner, name, loss)
        coords = np.random.default_rng(0).choice(x0.size, size=min(12, x0.size), replace=False)
        assert grad_check(f, x0, coords=coords) < 1e-4, (type(owner).__name__, name)
