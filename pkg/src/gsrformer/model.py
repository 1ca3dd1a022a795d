"""The full model: encoder, support retrieval, refinement decoder and heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gsrformer.attention import MhaBlockConfig, TokenSequence
from gsrformer.config import ModelConfig
from gsrformer.dataset import Lexicon
from gsrformer.decoder import Decoder, DecoderState, FramePrediction, PredictionHeads, SupportBatch
from gsrformer.encoder import EncodedBatch, EncodedFrame, Encoder
from gsrformer.metrics import PredictionRecord, RolePrediction
from gsrformer.nn import Module
from gsrformer.objectives import cxcywh_to_xyxy
from gsrformer.retrieval import FeatureIndex, SupportSet, topk_support
from gsrformer.tensor import Tensor


@dataclass
class Encoded:
    """Output of the verb stage for a batch of images."""

    verb_feature: Tensor  # (B, d)
    image: TokenSequence
    pseudo_verbs: np.ndarray  # (B,)
    verb_logits: Tensor  # (B, V)


@dataclass
class Decoded:
    batch: EncodedBatch
    supports: list[SupportSet]
    state: DecoderState | None
    pred: FramePrediction


class GSRFormer(Module):
    def __init__(self, cfg: ModelConfig, lexicon: Lexicon, image_channels: int, seed: int = 0):
        rng = np.random.default_rng([seed, 1])
        self.cfg = cfg
        self._lexicon = lexicon
        verb_cfg = MhaBlockConfig(cfg.dim, cfg.heads, cfg.ffn_verb, cfg.dropout_verb, cfg.verb_layers)
        role_cfg = MhaBlockConfig(cfg.dim, cfg.heads, cfg.ffn_role, cfg.dropout_role, cfg.role_layers)
        self.encoder = Encoder(rng, image_channels=image_channels, stride=cfg.stride,
                               feature_channels=cfg.feature_channels, max_grid=cfg.max_grid, verb_cfg=verb_cfg,
                               role_cfg=role_cfg, verb_count=lexicon.verb_count, role_count=lexicon.role_count,
                               embed_dim=cfg.embed_dim or None)
        self.decoder = Decoder(rng, dim=cfg.dim, heads=cfg.heads, hidden=cfg.ffn_decoder,
                               iterations=cfg.iterations, aggregation=cfg.aggregation, order=cfg.order,
                               alternate=cfg.alternate, dropout=cfg.dropout_decoder)
        self.heads = PredictionHeads(rng, dim=cfg.dim, verb_count=lexicon.verb_count,
                                     noun_count=lexicon.noun_count + 1, hidden=cfg.head_hidden,
                                     box_hidden=cfg.box_hidden, dropout=cfg.dropout_heads)

    @property
    def lexicon(self) -> Lexicon:
        return self._lexicon

    def verb_stage_modules(self) -> list[Module]:
        """Modules trained only in the encoder phase."""
        e = self.encoder
        return [e.extractor, e.tokenizer, e.verb, e.verb_classifier]

    def verb_stage_parameters(self):
        e = self.encoder
        return [e.verb_token, e.verb_pos] + [p for m in self.verb_stage_modules() for p in m.parameters()]

    # stages ------------------------------------------------------------------

    def encode(self, images, detach: bool = False) -> Encoded:
        tokens = self.encoder.tokenize(images)
        ev, img = self.encoder.encode_verb(tokens)
        if detach:
            ev = ev.detach()
            img = TokenSequence(img.tokens.detach(), pos=img.pos.detach(), mask=img.mask)
        pseudo, logits = self.encoder.classify_pseudo_verb(ev)
        return Encoded(ev, img, pseudo, logits)

    def encode_roles(self, enc: Encoded, verbs) -> EncodedBatch:
        return self.encoder.encode_roles(enc.image, enc.verb_feature, verbs, self.lexicon, enc.verb_logits)

    def retrieve(self, batch: EncodedBatch, index: FeatureIndex | None, exclude_ids=None) -> list[SupportSet]:
        if index is None or self.cfg.iterations == 0:
            return [SupportSet((), (), ()) for _ in range(len(batch))]
        out = []
        for i in range(len(batch)):
            ex = None if exclude_ids is None else exclude_ids[i]
            out.append(topk_support(batch.frame(i), index, self.cfg.support_k, exclude_id=ex,
                                    strict=self.cfg.strict_support))
        return out

    def decode(self, batch: EncodedBatch, supports: list[SupportSet]) -> tuple[FramePrediction, DecoderState | None]:
        if self.decoder.iterations == 0:
            return self.heads(batch.verb_feature, batch.role_features, batch.role_mask), None
        packed = SupportBatch.pack(supports, self.cfg.dim)
        emb = self.encoder.role_queries(batch.role_types)
        sup_emb = self.encoder.role_queries(packed.role_types)
        state = self.decoder(batch.verb_feature, batch.role_features, batch.role_mask, emb, packed, sup_emb)
        return self.heads(state.verb, state.roles, state.role_mask), state

    def aux_verb_logits(self, state: DecoderState | None) -> list[Tensor]:
        if state is None:
            return []
        return [self.heads.verb(h) for h in state.history[:-1]]

    def decode_conditioned(self, enc: Encoded, verbs, index: FeatureIndex | None, exclude_ids=None) -> Decoded:
        batch = self.encode_roles(enc, verbs)
        supports = self.retrieve(batch, index, exclude_ids)
        pred, state = self.decode(batch, supports)
        return Decoded(batch, supports, state, pred)

    # inference -----------------------------------------------------------------

    def records(self, images, names, index: FeatureIndex | None, gt_verbs=None,
                redecode: bool | None = None) -> list[PredictionRecord]:
        """Prediction records for a batch of same-sized images.

        Roles are produced for the top-1 verb and, when ``gt_verbs`` is
        given, for each ground-truth verb as well. Every role set comes from a
        decode conditioned on its own verb, one decode per distinct verb.
        With ``redecode`` off, the role set of the pseudo verb is reported
        instead of re-decoding for a different top-1 verb.
        """
        redecode = self.cfg.redecode if redecode is None else redecode
        with self.evaluating():
            enc = self.encode(images)
            first = self.decode_conditioned(enc, enc.pseudo_verbs, index)
            logits = first.pred.verb_logits.data
            probs = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            order = np.argsort(-logits, axis=1, kind="stable")[:, :5]
            top1 = order[:, 0]
            roles = [dict() for _ in names]
            self._collect(first, enc.pseudo_verbs, roles)
            wanted = [top1 if redecode else None, None if gt_verbs is None else np.asarray(gt_verbs)]
            for verbs in wanted:
                if verbs is None:
                    continue
                todo = np.array([v not in roles[i] for i, v in enumerate(verbs)])
                if todo.any():
                    sel = np.flatnonzero(todo)
                    sub = Encoded(enc.verb_feature[sel], TokenSequence(enc.image.tokens[sel], pos=enc.image.pos),
                                  enc.pseudo_verbs[sel], enc.verb_logits[sel])
                    dec = self.decode_conditioned(sub, verbs[sel], index)
                    part = [dict() for _ in sel]
                    self._collect(dec, verbs[sel], part)
                    for j, i in enumerate(sel):
                        roles[i].update(part[j])
            keep = [{int(top1[i] if redecode else enc.pseudo_verbs[i])} for i in range(len(names))]
            if gt_verbs is not None:
                for i, v in enumerate(gt_verbs):
                    keep[i].add(int(v))
            return [PredictionRecord(str(names[i]), [(int(v), float(probs[i, v])) for v in order[i]],
                                     {v: r for v, r in roles[i].items() if v in keep[i]})
                    for i in range(len(names))]

    def _collect(self, dec: Decoded, verbs, out: list[dict]) -> None:
        pred = dec.pred
        nouns = np.argmax(pred.noun_logits.data, axis=-1)
        boxes = np.clip(cxcywh_to_xyxy(pred.boxes.data), 0.0, 1.0)
        presence = 1.0 / (1.0 + np.exp(-pred.presence.data))
        for i, v in enumerate(verbs):
            rs = []
            for j in range(int(dec.batch.role_mask[i].sum())):
                p = float(presence[i, j])
                rs.append(RolePrediction(int(dec.batch.role_types[i, j]), int(nouns[i, j]),
                                         tuple(float(x) for x in boxes[i, j]) if p > 0.5 else None, p))
            out[i][int(v)] = rs


def encoded_frames(batch: EncodedBatch, ids) -> list[EncodedFrame]:
    return [batch.frame(i, int(ids[i])) for i in range(len(batch))]

