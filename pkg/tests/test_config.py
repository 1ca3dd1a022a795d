from pathlib import Path

import pytest
import yaml

from gsrformer.config import from_dict, load_config, preset
from gsrformer.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_desk_defaults():
    cfg = load_config(env={})
    assert cfg.preset == "desk" and cfg.train.optimizer == "adam"
    assert cfg.model.dropout_decoder == 0.0 and cfg.data.synth.verbs == 8


def test_paper_preset_values():
    m = preset("paper").model
    assert (m.dim, m.heads, m.verb_layers, m.role_layers, m.iterations, m.support_k) == (512, 8, 6, 6, 5, 5)
    assert (m.ffn_verb, m.ffn_role, m.ffn_decoder) == (2048, 1024, 1024)
    assert m.aggregation == "gated" and m.embed_dim == 256
    assert (m.dropout_verb, m.dropout_role, m.dropout_decoder, m.dropout_heads) == (0.15, 0.3, 0.3, 0.2)
    t = preset("paper").train
    assert t.optimizer == "sgd" and t.scales == [0.5, 0.75, 1.0] and t.flip_prob == 0.5
    lo = preset("paper").loss
    assert (lo.verb_smoothing, lo.noun_smoothing) == (0.3, 0.2)


def test_yaml_round_trip(tmp_path):
    cfg = load_config(None, ["model.iterations=1", "train.scales=[0.5, 1]", "data.synth=null",
                             "data.lexicon=l.json", "data.train=t.json"], env={})
    (tmp_path / "c.yaml").write_text(cfg.to_yaml())
    back = load_config(tmp_path / "c.yaml", env={})
    assert back.to_dict() == cfg.to_dict()
    assert back.train.scales == [0.5, 1.0] and back.data.synth is None


@pytest.mark.parametrize("name", ["desk.yaml", "paper.yaml", "ablation.yaml"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name, env={})
    assert cfg.resolve(cfg.paths.out_dir).is_absolute()


def test_relative_paths_follow_the_config_file(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "c.yaml").write_text("paths: {out_dir: out}\n")
    cfg = load_config(tmp_path / "sub" / "c.yaml", env={})
    assert cfg.resolve(cfg.paths.out_dir) == tmp_path / "sub" / "out"


@pytest.mark.parametrize("override,path", [
    ("model.heads=3", "model.heads"),
    ("model.iterations=-1", "model.iterations"),
    ("model.aggregation=median", "model.aggregation"),
    ("model.order=sideways", "model.order"),
    ("model.dim=abc", "model.dim"),
    ("model.alternate=1", "model.alternate"),
    ("model.nope=1", "model.nope"),
    ("loss.verb_smoothing=1.0", "loss.verb_smoothing"),
    ("loss.weights.box_l1=-1", "loss.weights.box_l1"),
    ("train.scales=[1.5]", "train.scales"),
    ("train.optimizer=rmsprop", "train.optimizer"),
    ("model.dropout_heads=1", "model.dropout_heads"),
    ("preset=paper", "preset"),
    ("noequals", "noequals"),
])
def test_bad_overrides_name_the_field(override, path):
    with pytest.raises(ConfigError) as info:
        load_config(None, [override], env={})
    assert info.value.path == path and str(info.value).startswith(path)


def test_bad_files(tmp_path):
    (tmp_path / "a.yaml").write_text("model: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "a.yaml", env={})
    (tmp_path / "b.yaml").write_text("preset: huge\n")
    with pytest.raises(ConfigError, match="preset"):
        load_config(tmp_path / "b.yaml", env={})
    (tmp_path / "c.yaml").write_text("model: 3\n")
    with pytest.raises(ConfigError, match="model"):
        load_config(tmp_path / "c.yaml", env={})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml", env={})
    with pytest.raises(ConfigError, match="data"):
        from_dict({"data": {"synth": None}}).validate()


def test_seed_precedence(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"seed": 3}))
    assert load_config(tmp_path / "c.yaml", env={}).seed == 3
    assert load_config(tmp_path / "c.yaml", ["seed=4"], env={}).seed == 4
    assert load_config(tmp_path / "c.yaml", ["seed=4"], env={"GSR_SEED": "9"}).seed == 9
    assert load_config(tmp_path / "c.yaml", env={"GSR_SEED": ""}).seed == 3
    with pytest.raises(ConfigError, match="GSR_SEED"):
        load_config(None, env={"GSR_SEED": "x"})


def test_later_overrides_win():
    cfg = load_config(None, ["model.iterations=1", "model.iterations=4"], env={})
    assert cfg.model.iterations == 4
