import pytest

from denoising_ger.config import ConfigError, canonical_key, load_config, parse_override
from denoising_ger.trainer import TrainConfig


def write(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return p


def test_defaults_without_file():
    assert load_config() == TrainConfig()


def test_aliases():
    assert canonical_key("lambda") == "lam"
    assert canonical_key("fusion.mode") == "fusion_mode"
    assert canonical_key("Train.LR") == "lr"
    assert canonical_key("trainer.epochs") == "epochs"


def test_file_values_and_comments(tmp_path):
    cfg = load_config(write(tmp_path, "# desk run\nalpha = 0.3\n; old\nlambda = 0.25\nrl_on = off\n"
                                      "fusion.k = 0.6  # compensation\n"))
    assert (cfg.alpha, cfg.lam, cfg.rl_on, cfg.k) == (0.3, 0.25, False, 0.6)


def test_overrides_win_over_file(tmp_path):
    cfg = load_config(write(tmp_path, "epochs = 3\n"), ["epochs=7", "train.lr=1e-3"])
    assert cfg.epochs == 7 and cfg.lr == 1e-3


@pytest.mark.parametrize("raw,value", [("true", True), ("Yes", True), ("1", True), ("off", False), ("0", False)])
def test_boolean_spellings(raw, value):
    assert load_config(overrides=[f"naae_on={raw}"]).naae_on is value


@pytest.mark.parametrize("override", ["gamma=1", "naae_on=maybe", "epochs=two", "alpha=-1", "beam"])
def test_bad_values_are_config_errors(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/run.cfg")


def test_override_keeps_equals_in_value():
    assert parse_override("fusion_mode=a=b") == ("fusion_mode", "a=b")
