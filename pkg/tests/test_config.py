import pytest

from multianim.config import Config, dump_config, load_config
from multianim.errors import DataIOError, FormatError, InvalidArgumentError

from conftest import CONFIGS


def test_defaults_match_shipped_default_file():
    assert load_config(CONFIGS / "default.toml") == Config()


def test_default_budget():
    c = Config()
    assert (c.train.pretrain_steps, c.train.finetune_steps, c.train.batch_size) == (3000, 2000, 8)
    assert (c.data.height, c.data.width, c.data.frames, c.data.train_episodes) == (64, 64, 16, 500)
    assert c.train.p_ani == 0.7
    assert (c.train.lr_pretrain, c.train.lr_finetune) == (1e-3, 3e-4)


@pytest.mark.parametrize("name", ["default.toml", "desk.toml", "tiny.toml"])
def test_dump_load_round_trip(tmp_path, name):
    cfg = load_config(CONFIGS / name)
    path = tmp_path / "c.toml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_partial_file_overrides_only_named_keys(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train]\nseed = 5\n[model]\ndepth = 3\n")
    cfg = load_config(path)
    assert cfg.train.seed == 5 and cfg.model.depth == 3
    assert cfg.replace(train={"seed": 0}, model={"depth": Config().model.depth}) == Config()


def test_unknown_section_and_key(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[optim]\nlr = 1\n")
    with pytest.raises(FormatError, match="optim"):
        load_config(path)
    path.write_text("[train]\nlearning_rate = 1\n")
    with pytest.raises(FormatError, match="learning_rate"):
        load_config(path)


def test_malformed_and_missing_files(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train\nseed = ")
    with pytest.raises(FormatError):
        load_config(path)
    with pytest.raises(DataIOError):
        load_config(tmp_path / "missing.toml")


def test_replace_validates():
    with pytest.raises(InvalidArgumentError):
        Config().replace(train={"batch_size": 0})
    assert Config().replace(train={"seed": 3}).train.seed == 3
    assert Config().train.seed == 0
