import json

import numpy as np
import pytest

from gsrformer.cli import EMPTY, format_prediction, main
from gsrformer.config import load_config
from gsrformer.dataset import Frame, RoleAnnotation
from gsrformer.metrics import PredictionRecord, RolePrediction
from gsrformer.synth import SynthSpec, synth_generate

from conftest import TINY


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny run with checkpoint and index already written."""
    root = tmp_path_factory.mktemp("cli")
    cfg = load_config(None, [*TINY, f"paths.out_dir={root / 'run'}"], env={})
    path = root / "tiny.yaml"
    path.write_text(cfg.to_yaml())
    assert main(["train", "--config", str(path)]) == 0
    assert main(["index", "--config", str(path)]) == 0
    return path, root / "run"


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


def test_train_and_index_outputs(trained):
    _, out = trained
    for name in ("config.yaml", "train.log", "encoder.bin", "checkpoint.bin", "index.bin"):
        assert (out / name).is_file()
    lines = (out / "train.log").read_text().splitlines()
    assert lines[0].startswith("phase=encoder epoch=0 step=0") and "seed=0" in lines[0]
    assert lines[-1].startswith("phase=decoder epoch=1 summary total=")


def test_eval_writes_reports_and_rescoring_is_identical(trained, capsys, tmp_path):
    cfg, out = trained
    code, text, _ = run(capsys, "eval", "--config", cfg)
    assert code == 0 and "Top-1-Verb" in text and "frames: 6" in text
    ev = out / "eval_eval"
    report = json.loads((ev / "report.json").read_text())
    assert report["frames"] == 6 and report["metadata"]["noun_rule"] == "any-of-3 annotators"
    assert len((ev / "predictions.jsonl").read_text().splitlines()) == 6
    code, _, _ = run(capsys, "eval", "--config", cfg, "--from-dump", ev / "predictions.jsonl", "--out", tmp_path)
    assert code == 0
    for name in ("report.txt", "report.json"):
        assert (tmp_path / name).read_bytes() == (ev / name).read_bytes()
    assert not (tmp_path / "predictions.jsonl").exists()


def test_eval_replays_byte_for_byte(trained, capsys, tmp_path):
    cfg, out = trained
    run(capsys, "eval", "--config", cfg, "--split", "train", "--out", tmp_path / "a")
    run(capsys, "eval", "--config", cfg, "--split", "train", "--out", tmp_path / "b")
    for name in ("report.txt", "report.json", "predictions.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_predict_is_deterministic(trained, capsys, tmp_path):
    cfg, _ = trained
    code, first, _ = run(capsys, "predict", "--config", cfg, "eval_00_0000.npy", "eval_01_0001.npy")
    assert code == 0 and first.count("top-5 verbs:") == 2
    assert run(capsys, "predict", "--config", cfg, "eval_00_0000.npy", "eval_01_0001.npy")[1] == first
    raster = tmp_path / "own.npy"
    np.save(raster, synth_generate(SynthSpec(verbs=3, arities=[1, 2], images_per_verb=1)).images["train_00_0000.npy"])
    code, text, _ = run(capsys, "predict", "--config", cfg, raster)
    assert code == 0 and f"image: {raster}" in text


def test_prediction_rendering():
    ds = synth_generate(SynthSpec(verbs=3, arities=[2], images_per_verb=1))
    frame = Frame("x", 0, (RoleAnnotation(0, (0, 0, 0), None),), 200, 100)
    lex = ds.lexicon
    roles = lex.roles_of(0)
    rec = PredictionRecord("x", [(0, 0.7), (2, 0.2), (1, 0.1)],
                           {0: [RolePrediction(roles[0], 0, None, 0.1),
                                RolePrediction(roles[1], 1, (0.1, 0.2, 0.5, 1.0), 0.9)]})
    text = format_prediction(rec, ds, frame)
    rows = text.splitlines()
    assert rows[2].strip().startswith("1. verb00") and "0.7000" in rows[2]
    assert rows[-2].split()[1:3] == [EMPTY, EMPTY]
    assert "20.0, 20.0, 100.0, 100.0" in rows[-1] and lex.nouns[1] in rows[-1]


def test_validation_errors_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--set", "model.heads=3")
    assert code == 1 and err.startswith("error: model.heads")
    (tmp_path / "bad.yaml").write_text("model: {dim: [}\n")
    assert run(capsys, "eval", "--config", tmp_path / "bad.yaml")[0] == 1
    (tmp_path / "ann.json").write_text("{}")
    (tmp_path / "lex.json").write_text('{"verbs": {"v": {"order": []}}, "nouns": {}}')
    code, _, err = run(capsys, "train", "--set", "data.synth=null", "--set", f"data.lexicon={tmp_path / 'lex.json'}",
                       "--set", f"data.train={tmp_path / 'ann.json'}")
    assert code == 1 and "arity" in err
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_run_errors_exit_2(trained, capsys, tmp_path):
    cfg, out = trained
    code, _, err = run(capsys, "eval", "--config", cfg, "--checkpoint", tmp_path / "none.bin")
    assert code == 2 and "checkpoint not found" in err
    code, _, err = run(capsys, "eval", "--config", cfg, "--index", tmp_path / "none.bin")
    assert code == 2 and "index not found" in err
    (tmp_path / "junk.bin").write_bytes(b"garbage!" * 4)
    assert run(capsys, "eval", "--config", cfg, "--checkpoint", tmp_path / "junk.bin")[0] == 2
    assert run(capsys, "eval", "--config", cfg, "--index", tmp_path / "junk.bin")[0] == 2
    code, _, err = run(capsys, "eval", "--config", cfg, "--set", "model.dim=32")
    assert code == 2 and "does not fit" in err
    code, _, err = run(capsys, "predict", "--config", cfg, "no_such_image")
    assert code == 2 and "neither" in err


def test_missing_index_is_an_error_unless_decoding_is_off(trained, capsys, tmp_path):
    cfg, out = trained
    code, _, err = run(capsys, "eval", "--config", cfg, "--set", f"paths.out_dir={tmp_path}",
                       "--checkpoint", out / "checkpoint.bin")
    assert code == 2 and "index not found" in err
    flat = load_config(None, [*TINY, "model.iterations=0", f"paths.out_dir={tmp_path / 'flat'}"], env={})
    (tmp_path / "flat.yaml").write_text(flat.to_yaml())
    assert run(capsys, "train", "--config", tmp_path / "flat.yaml")[0] == 0
    code, text, _ = run(capsys, "eval", "--config", tmp_path / "flat.yaml")
    assert code == 0 and "frames: 6" in text


def test_zero_frames(capsys, tmp_path):
    code, _, err = run(capsys, "train", *sum((["--set", o] for o in TINY), []), "--set", "data.synth.images_per_verb=0",
                       "--set", f"paths.out_dir={tmp_path}")
    assert code == 2 and "zero frames" in err


def test_synth_command(capsys, tmp_path):
    code, text, _ = run(capsys, "synth", *sum((["--set", o] for o in TINY), []), "--out", tmp_path / "s")
    assert code == 0 and "verbs: 3\n" in text and "frames: 12\n" in text
    assert {p.name for p in (tmp_path / "s").iterdir()} >= {"lexicon.json", "train.json", "eval.json", "images"}
    assert len(list((tmp_path / "s" / "images").iterdir())) == 18
    code, _, err = run(capsys, "synth", "--set", "data.synth=null", "--set", "data.lexicon=a", "--set", "data.train=b",
                       "--out", tmp_path / "t")
    assert code == 1 and "data.synth" in err
