"""``gsrformer`` command line: train, index, eval, predict and synth.

Every command takes ``--config PATH`` and any number of ``--set key=value``
overrides; ``GSR_SEED`` overrides the seed. Exit codes are 0 on success, 1
when a config or input fails validation and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from gsrformer.config import RunConfig, load_config
from gsrformer.dataset import Dataset, Frame, load_raster
from gsrformer.errors import ConfigError, LexiconError, ValidationError
from gsrformer.metrics import PredictionRecord, ScoringError, evaluate, read_dump, write_dump
from gsrformer.nn import CheckpointError
from gsrformer.objectives import AlignmentError, LabelError
from gsrformer.retrieval import FeatureIndex, IndexError_, RetrievalError
from gsrformer.synth import write_synth
from gsrformer.train import (RunError, Trainer, encode_training_index, evaluate_model, load_model, load_split,
                             synth_spec)

log = logging.getLogger("gsrformer")

EMPTY = "∅"
VALIDATION_ERRORS = (ConfigError, ValidationError, LexiconError, LabelError, AlignmentError)
RUNTIME_ERRORS = (RunError, CheckpointError, IndexError_, RetrievalError, ScoringError, OSError)


def _out_dir(cfg: RunConfig) -> Path:
    return cfg.resolve(cfg.paths.out_dir)


def _artifact(cfg: RunConfig, given: str | None, default: str, what: str) -> Path:
    path = Path(given) if given else _out_dir(cfg) / default
    if not path.is_file():
        raise RunError(f"{what} not found: {path}")
    return path


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds = load_split(cfg, "train")
    if not ds.frames:
        raise RunError("training split has zero frames")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
    result = Trainer(cfg, ds, out).run()
    final = [line for line in result.log_lines if "summary" in line][-1:]
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'train.log'}")
    if final:
        print(final[0])
    return 0


def cmd_index(cfg: RunConfig, args) -> int:
    ckpt = _artifact(cfg, args.checkpoint, "checkpoint.bin", "checkpoint")
    ds = load_split(cfg, "train")
    model = load_model(cfg, ckpt, ds)
    index = encode_training_index(model, ds, cfg.train.batch_size)
    path = Path(args.out) if args.out else _out_dir(cfg) / "index.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    index.save(path)
    print(f"wrote {path} ({len(index)} entries)")
    return 0


def _load_index(cfg: RunConfig, given: str | None) -> FeatureIndex | None:
    if cfg.model.iterations == 0 and not given:
        return None
    return FeatureIndex.load(_artifact(cfg, given, "index.bin", "index"))


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = load_split(cfg, args.split)
    if not ds.frames:
        raise RunError(f"{args.split} split has zero frames")
    out = Path(args.out) if args.out else _out_dir(cfg) / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    if args.from_dump:
        report = evaluate(read_dump(args.from_dump), ds.frames, args.noun_rule)
    else:
        model = load_model(cfg, _artifact(cfg, args.checkpoint, "checkpoint.bin", "checkpoint"), ds)
        index = _load_index(cfg, args.index)
        report, records = evaluate_model(model, ds, index, cfg.train.batch_size, args.noun_rule)
        write_dump(out / "predictions.jsonl", records)
    report.write(out / "report.txt", out / "report.json")
    print(report.to_text(), end="")
    print(f"wrote {out / 'report.txt'}, {out / 'report.json'}"
          + ("" if args.from_dump else f" and {out / 'predictions.jsonl'}"))
    return 0


def _predict_inputs(cfg: RunConfig, names: list[str], split: str) -> tuple[Dataset, list[Frame]]:
    ds = load_split(cfg, split)
    by_name = {f.image: f for f in ds.frames}
    frames = []
    for name in names:
        if name in by_name:
            frames.append(by_name[name])
            continue
        path = Path(name)
        if not path.is_file():
            raise RunError(f"{name!r} is neither an image of the {split} split nor a raster file")
        img = load_raster(path)
        frame = Frame(str(path), 0, (), img.shape[1], img.shape[0])
        ds.images[frame.image] = img
        frames.append(frame)
    return ds, frames


def format_prediction(rec: PredictionRecord, ds: Dataset, frame: Frame) -> str:
    lex = ds.lexicon
    lines = [f"image: {rec.image}", "top-5 verbs:"]
    lines += [f"  {i + 1}. {lex.verbs[v]:<20} {s:.4f}" for i, (v, s) in enumerate(rec.top5)]
    verb = rec.top1
    lines.append(f"roles of {lex.verbs[verb]}:")
    lines.append(f"  {'role':<14} {'noun':<20} {'box (x1, y1, x2, y2 px)':<28} presence")
    for r in rec.roles[verb]:
        noun = lex.nouns[r.noun] or EMPTY
        if r.box is None:
            box = EMPTY
        else:
            x1, y1, x2, y2 = r.box
            box = (f"{x1 * frame.width:.1f}, {y1 * frame.height:.1f}, "
                   f"{x2 * frame.width:.1f}, {y2 * frame.height:.1f}")
        lines.append(f"  {lex.role_types[r.role_type]:<14} {noun:<20} {box:<28} {r.presence:.3f}")
    return "\n".join(lines) + "\n"


def cmd_predict(cfg: RunConfig, args) -> int:
    ds, frames = _predict_inputs(cfg, args.image, args.split)
    model = load_model(cfg, _artifact(cfg, args.checkpoint, "checkpoint.bin", "checkpoint"), ds)
    index = _load_index(cfg, args.index)
    for frame in frames:
        img = ds.load_image(frame)[None]
        rec = model.records(img, [frame.image], index)[0]
        print(format_prediction(rec, ds, frame))
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    if cfg.data.synth is None:
        raise ConfigError("no synthetic data configured", "data.synth")
    spec = synth_spec(cfg)
    out = write_synth(spec, args.out, {"train": spec.images_per_verb, "eval": cfg.data.synth.eval_images_per_verb})
    stats = load_split(cfg, "train").statistics()
    print(stats.report(), end="")
    print(f"wrote {out}")
    return 0


COMMANDS = {"train": cmd_train, "index": cmd_index, "eval": cmd_eval, "predict": cmd_predict, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (default: desk preset)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. model.iterations=1")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gsrformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="run both training phases")

    p = sub.add_parser("index", parents=[common], help="encode the training split into a support index")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="index file (default: <out_dir>/index.bin)")

    p = sub.add_parser("eval", parents=[common], help="score a split and dump predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--index")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--out", help="report directory (default: <out_dir>/eval_<split>)")
    p.add_argument("--from-dump", help="rescore an existing predictions.jsonl instead of running the model")
    p.add_argument("--noun-rule", choices=("any", "majority"), default="any")

    p = sub.add_parser("predict", parents=[common], help="print the frame predicted for images")
    p.add_argument("image", nargs="+", help="image name from --split, or a path to an .npy raster")
    p.add_argument("--checkpoint")
    p.add_argument("--index")
    p.add_argument("--split", choices=("train", "eval"), default="eval")

    p = sub.add_parser("synth", parents=[common], help="write the configured synthetic dataset to disk")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
