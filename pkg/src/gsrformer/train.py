"""Two-phase training, index building and evaluation drivers.

Phase one fits the verb stage (patch extractor, tokenizer, verb stack and
verb classifier) on the pseudo-verb loss. Phase two freezes those modules,
detaches their outputs, and fits the role stack, decoder and heads on the
decoder verb loss plus the role losses. Roles are fetched with the
ground-truth verb during phase two, and the support index is rebuilt from the
training set at the start of every phase-two epoch.

All randomness derives from the run seed: batch order and augmentation from
``default_rng([seed, phase, epoch])``, dropout from counter-based streams.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gsrformer import tensor as T
from gsrformer.config import RunConfig
from gsrformer.dataset import Dataset, Frame, augment_flip, augment_scale, load_dataset, load_lexicon
from gsrformer.metrics import MetricReport, PredictionRecord, evaluate
from gsrformer.model import GSRFormer, encoded_frames
from gsrformer.nn import DropoutContext, Parameter, bind_dropout, load_checkpoint, save_checkpoint
from gsrformer.objectives import Targets, batch_loss
from gsrformer.retrieval import FeatureIndex, IndexError_, build_index
from gsrformer.synth import SynthSpec, synth_generate

log = logging.getLogger(__name__)

PHASES = {"encoder": 0, "decoder": 1}


class RunError(RuntimeError):
    pass


# optimisation -------------------------------------------------------------------

def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def clip_scale(grads: list[np.ndarray], max_norm: float) -> float:
    if max_norm <= 0:
        return 1.0
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    return min(1.0, max_norm / (norm + 1e-12))


class SGD:
    """Momentum gradient descent with global-norm clipping."""

    def __init__(self, params: list[Parameter], momentum: float = 0.9, clip_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        scale = clip_scale(grads, self.clip_norm)
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += scale * g
            p.data -= lr * v


class Adam:
    def __init__(self, params: list[Parameter], betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        scale = clip_scale(grads, self.clip_norm)
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            g = g * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: RunConfig, params):
    t = cfg.train
    if t.optimizer == "adam":
        return Adam(params, clip_norm=t.clip_norm)
    return SGD(params, momentum=t.momentum, clip_norm=t.clip_norm)


# data ---------------------------------------------------------------------------

def synth_spec(cfg: RunConfig) -> SynthSpec:
    s = cfg.data.synth
    return SynthSpec(verbs=s.verbs, arities=list(s.arities), images_per_verb=s.images_per_verb, noise=s.noise,
                     seed=s.seed, stride=cfg.model.stride)


def load_split(cfg: RunConfig, split: str) -> Dataset:
    """``split`` is ``train`` or ``eval``."""
    if cfg.data.synth is not None:
        spec = synth_spec(cfg)
        count = spec.images_per_verb if split == "train" else cfg.data.synth.eval_images_per_verb
        return synth_generate(spec, split, count)
    path = cfg.data.train if split == "train" else cfg.data.eval
    if not path:
        raise RunError(f"no data.{split} annotation file configured")
    lex = load_lexicon(cfg.resolve(cfg.data.lexicon))
    image_dir = cfg.resolve(cfg.data.image_dir) if cfg.data.image_dir else None
    return load_dataset(cfg.resolve(path), None, image_dir=image_dir, lexicon=lex)


def batches(n: int, size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def load_images(ds: Dataset, frames: list[Frame]) -> np.ndarray:
    imgs = [ds.load_image(f) for f in frames]
    shapes = {im.shape for im in imgs}
    if len(shapes) > 1:
        raise RunError(f"images in a batch must share one size, got {sorted(shapes)}; use batch_size 1")
    return np.stack(imgs)


def augmented_batch(ds: Dataset, idx, cfg: RunConfig, rng: np.random.Generator):
    frames = [ds.frames[i] for i in idx]
    imgs = [ds.load_image(f) for f in frames]
    scale = float(rng.choice(cfg.train.scales)) if len(cfg.train.scales) > 1 else cfg.train.scales[0]
    flips = rng.random(len(frames)) < cfg.train.flip_prob
    out_f, out_i = [], []
    for f, im, flip in zip(frames, imgs, flips):
        if flip:
            f, im = augment_flip(f, im)
        if scale != 1.0:
            f, im = augment_scale(f, im, scale)
        out_f.append(f)
        out_i.append(im)
    shapes = {im.shape for im in out_i}
    if len(shapes) > 1:
        raise RunError(f"images in a batch must share one size, got {sorted(shapes)}; use batch_size 1")
    return out_f, np.stack(out_i)


# training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: GSRFormer
    log_lines: list[str] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def format_log(phase: str, epoch: int, step: int, lr: float, seed: int, parts: dict[str, float]) -> str:
    fields_ = [f"phase={phase}", f"epoch={epoch}", f"step={step}", f"lr={lr:.6e}", f"seed={seed}"]
    fields_ += [f"{k}={v:.10e}" for k, v in parts.items()]
    return " ".join(fields_)


def build_model(cfg: RunConfig, ds: Dataset) -> GSRFormer:
    channels = ds.load_image(ds.frames[0]).shape[-1]
    model = GSRFormer(cfg.model, ds.lexicon, channels, seed=cfg.seed)
    return model


def encode_training_index(model: GSRFormer, ds: Dataset, batch_size: int) -> FeatureIndex:
    """Index every training frame, roles fetched with its ground-truth verb; ids are frame positions."""
    if not ds.frames:
        raise IndexError_("cannot build an index from zero frames")
    frames = []
    with model.evaluating():
        for idx in batches(len(ds.frames), batch_size, None):
            fs = [ds.frames[i] for i in idx]
            enc = model.encode(load_images(ds, fs))
            frames += encoded_frames(model.encode_roles(enc, [f.verb for f in fs]), idx)
    return build_index(frames)


def _epoch_loss(parts: list[dict], n: int) -> dict[str, float]:
    keys = parts[0].keys()
    return {k: sum(p[k] for p in parts) / n for k in keys}


class Trainer:
    def __init__(self, cfg: RunConfig, train_set: Dataset, out_dir: Path | None = None):
        self.cfg = cfg
        self.ds = train_set
        self.out_dir = out_dir
        self.model = build_model(cfg, train_set)
        self.dropout = DropoutContext(cfg.seed)
        bind_dropout(self.model, self.dropout)
        self.log_lines: list[str] = []
        self.checkpoints: list[Path] = []
        self.step = 0
        self._log_fh = None

    def _emit(self, line: str) -> None:
        self.log_lines.append(line)
        if self._log_fh is not None:
            self._log_fh.write(line + "\n")
            self._log_fh.flush()
        log.debug(line)

    def _checkpoint(self, name: str, phase: str, epoch: int) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / name
        save_checkpoint(path, self.model.state_dict(), checkpoint_meta(self.cfg, phase, epoch))
        self.checkpoints.append(path)

    def _run_phase(self, phase: str, epochs: int, params, lr0: float, step_fn) -> None:
        if epochs == 0:
            return
        cfg = self.cfg
        opt = make_optimizer(cfg, params)
        n = len(self.ds.frames)
        steps_per_epoch = math.ceil(n / cfg.train.batch_size)
        total = epochs * steps_per_epoch
        k = 0
        for epoch in range(epochs):
            rng = np.random.default_rng([cfg.seed, PHASES[phase], epoch])
            epoch_ctx = self.begin_epoch(phase)
            parts = []
            for idx in batches(n, cfg.train.batch_size, rng):
                lr = cosine_lr(lr0, k, total)
                self.dropout.set_step(self.step)
                frames, images = augmented_batch(self.ds, idx, cfg, rng)
                self.model.zero_grad()
                with T.GradTape() as tape:
                    loss = step_fn(frames, images, idx, epoch_ctx)
                    scaled = loss.total * (1.0 / len(idx))
                    tape.backward(scaled)
                opt.step(lr)
                vals = {name: v / len(idx) for name, v in loss.values().items()}
                parts.append(vals)
                self._emit(format_log(phase, epoch, self.step, lr, cfg.seed, vals))
                self.step += 1
                k += 1
            mean = _epoch_loss(parts, len(parts))
            self._emit(f"phase={phase} epoch={epoch} summary total={mean['total']:.10e}")
            every = cfg.train.checkpoint_every
            if every and (epoch + 1) % every == 0 and epoch + 1 < epochs:
                self._checkpoint(f"ckpt_{phase}_{epoch + 1:04d}.bin", phase, epoch + 1)

    def begin_epoch(self, phase: str):
        if phase == "decoder" and self.model.cfg.iterations > 0:
            return encode_training_index(self.model, self.ds, self.cfg.train.batch_size)
        return None

    def _encoder_step(self, frames, images, idx, _):
        c = self.cfg
        enc = self.model.encode(images)
        targets = Targets(np.array([f.verb for f in frames]), np.zeros((len(frames), 0), np.int64),
                          np.zeros((len(frames), 0, 3), np.int64), np.zeros((len(frames), 0, 4)),
                          np.zeros((len(frames), 0), bool))
        return batch_loss(None, targets, weights=c.loss.weights, verb_smoothing=c.loss.verb_smoothing,
                          encoder_logits=enc.verb_logits)

    def _decoder_step(self, frames, images, idx, index):
        c = self.cfg
        enc = self.model.encode(images, detach=True)
        targets = Targets.from_frames(frames)
        dec = self.model.decode_conditioned(enc, targets.verbs, index, exclude_ids=[int(i) for i in idx])
        aux = self.model.aux_verb_logits(dec.state) if c.loss.aux_verb_loss else ()
        return batch_loss(dec.pred, targets, weights=c.loss.weights, verb_smoothing=c.loss.verb_smoothing,
                          noun_smoothing=c.loss.noun_smoothing, aux_verb_logits=aux,
                          pred_role_types=dec.batch.role_types)

    def train_encoder(self) -> None:
        self.model.train()
        self._run_phase("encoder", self.cfg.train.encoder_epochs, self.model.verb_stage_parameters(),
                        self.cfg.train.lr_encoder, self._encoder_step)
        self._checkpoint("encoder.bin", "encoder", self.cfg.train.encoder_epochs)

    def train_decoder(self) -> None:
        model = self.model
        model.train()
        frozen = {id(p) for p in model.verb_stage_parameters()}
        for p in model.verb_stage_parameters():
            p.requires_grad = False
        for m in model.verb_stage_modules():
            m.eval()
        params = [p for p in model.parameters() if id(p) not in frozen]
        try:
            self._run_phase("decoder", self.cfg.train.decoder_epochs, params, self.cfg.train.lr_decoder,
                            self._decoder_step)
        finally:
            for p in model.verb_stage_parameters():
                p.requires_grad = True
        self._checkpoint("checkpoint.bin", "decoder", self.cfg.train.decoder_epochs)

    def verb_stage_state(self) -> dict[str, np.ndarray]:
        own = {id(p) for p in self.model.verb_stage_parameters()}
        return {k: p.data.copy() for k, p in self.model.named_parameters() if id(p) in own}

    def adopt_verb_stage(self, state: dict[str, np.ndarray]) -> None:
        """Take over a verb stage trained elsewhere (same seed and model widths)."""
        params = dict(self.model.named_parameters())
        own = {id(p) for p in self.model.verb_stage_parameters()}
        if {k for k, p in params.items() if id(p) in own} != set(state):
            raise RunError("verb-stage state does not match this model")
        for k, v in state.items():
            params[k].data = v.copy()

    def run(self, verb_stage: dict[str, np.ndarray] | None = None) -> TrainResult:
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "train.log", "w", encoding="utf-8")
        try:
            if verb_stage is None:
                self.train_encoder()
            else:
                self.adopt_verb_stage(verb_stage)
            self.train_decoder()
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        return TrainResult(self.model, self.log_lines, self.checkpoints)


def checkpoint_meta(cfg: RunConfig, phase: str, epoch: int) -> dict:
    return {"config": cfg.to_dict(), "phase": phase, "epoch": epoch}


def load_model(cfg: RunConfig, checkpoint, ds: Dataset) -> GSRFormer:
    params, _ = load_checkpoint(checkpoint)
    model = build_model(cfg, ds)
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise RunError(f"{checkpoint} does not fit the configured model ({exc})") from None
    model.eval()
    return model


# evaluation -----------------------------------------------------------------------

def predict_dataset(model: GSRFormer, ds: Dataset, index: FeatureIndex | None, batch_size: int,
                    with_gt: bool = True) -> list[PredictionRecord]:
    records = []
    for idx in batches(len(ds.frames), batch_size, None):
        fs = [ds.frames[i] for i in idx]
        records += model.records(load_images(ds, fs), [f.image for f in fs], index,
                                 gt_verbs=[f.verb for f in fs] if with_gt else None)
    return records


def evaluate_model(model: GSRFormer, ds: Dataset, index: FeatureIndex | None, batch_size: int = 32,
                   rule: str = "any") -> tuple[MetricReport, list[PredictionRecord]]:
    records = predict_dataset(model, ds, index, batch_size)
    return evaluate(records, ds.frames, rule), records


def train_loss_trace(result: TrainResult) -> list[float]:
    return [float(line.split("total=")[1]) for line in result.log_lines if "summary" in line]
