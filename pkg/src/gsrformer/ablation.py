"""Ablation runs: decoder variants trained on top of one shared verb stage.

The verb stage depends only on the seed and the encoder settings, so it is
trained once per seed and handed to every variant; only the role stack,
decoder and heads are trained per variant. Each comparison names a metric
and the variant expected to score at least as high.
"""

from __future__ import annotations

from dataclasses import dataclass

from gsrformer.config import load_config
from gsrformer.metrics import MetricReport
from gsrformer.train import Trainer, encode_training_index, evaluate_model, load_split

BASE = "base"
VARIANTS: dict[str, tuple[str, ...]] = {
    BASE: (),
    "iterations-5": ("model.iterations=5",),
    "iterations-1": ("model.iterations=1",),
    "non-alternate": ("model.alternate=false",),
    "verb-first": ("model.order=verb-first",),
    "support-1": ("model.support_k=1",),
}


@dataclass(frozen=True)
class Comparison:
    name: str
    better: str
    worse: str
    setting: str
    metric: str

    def holds(self, reports: dict[str, MetricReport]) -> bool:
        return self.score(reports, self.better) >= self.score(reports, self.worse)

    def score(self, reports: dict[str, MetricReport], variant: str) -> float:
        return reports[variant].scores[self.setting][self.metric]


COMPARISONS = (
    Comparison("T=5 vs T=1", "iterations-5", "iterations-1", "top1", "verb"),
    Comparison("alternate vs non-alternate", BASE, "non-alternate", "top1", "value"),
    Comparison("noun-first vs verb-first", BASE, "verb-first", "gt", "value"),
    Comparison("K=5 vs K=1", BASE, "support-1", "top1", "verb"),
)


def run_seed(config_path, seed: int, overrides=(), variants=None) -> dict[str, MetricReport]:
    """Held-out reports of every variant for one seed."""
    variants = variants or VARIANTS
    base = load_config(config_path, [*overrides, f"seed={seed}"], env={})
    train_set, eval_set = load_split(base, "train"), load_split(base, "eval")
    first = Trainer(base, train_set)
    first.train_encoder()
    verb_stage = first.verb_stage_state()
    reports = {}
    for name, extra in variants.items():
        cfg = load_config(config_path, [*overrides, *extra, f"seed={seed}"], env={})
        trainer = Trainer(cfg, train_set)
        model = trainer.run(verb_stage=verb_stage).model
        index = encode_training_index(model, train_set, cfg.train.batch_size) if cfg.model.iterations else None
        reports[name], _ = evaluate_model(model, eval_set, index, cfg.train.batch_size)
    return reports
