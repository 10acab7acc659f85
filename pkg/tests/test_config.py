"""Flat run configuration: parsing, overrides and the resolved dump."""

import pytest

from msdistill.config import RunConfig, dump_config, load_config, parse_config
from msdistill.errors import ValidationError


def test_defaults_round_trip_through_dump():
    text = dump_config(RunConfig())
    assert dump_config(parse_config(text)) == text
    assert "loss.gamma = 1.0" in text and "aug.scale_global = 0.4, 1.0" in text
    assert "loss.cr_prefactor = none" in text


def test_every_section_is_dumped():
    keys = {line.split(" = ")[0] for line in dump_config(RunConfig()).splitlines()}
    assert {k.split(".")[0] for k in keys} == {"train", "aug", "loss", "encoder", "heads", "teacher", "data"}
    assert "train.aug" not in keys
    assert "encoder.heads" in keys


def test_attention_heads_key():
    cfg = load_config(None, ["encoder.heads=8"])
    assert cfg.train.encoder.heads == 8 and cfg.train.heads.hidden_dim == 256


def test_file_then_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\ntrain.epochs = 3\nloss.gamma = 0.5  # trailing\naug.scale_local = 0.1, 0.3\n")
    cfg = load_config(p, ["loss.gamma=0", "train.ema_schedule=true", "loss.cr_prefactor=2.5"])
    assert cfg.train.epochs == 3
    assert cfg.train.loss.gamma == 0.0
    assert cfg.train.aug.scale_local == (0.1, 0.3)
    assert cfg.train.ema_schedule is True
    assert cfg.train.loss.cr_prefactor == 2.5


@pytest.mark.parametrize("bad", [
    "train.nope = 1",
    "nosection.epochs = 1",
    "epochs = 1",
    "train.epochs = many",
    "aug.scale_local = 0.1",
    "train.ema_schedule = maybe",
    "just words",
    "train.aug = 1",
])
def test_rejects_bad_lines(bad):
    with pytest.raises(ValidationError):
        parse_config(bad)


def test_missing_file_and_bad_override(tmp_path):
    with pytest.raises(ValidationError):
        load_config(tmp_path / "absent.cfg")
    with pytest.raises(ValidationError):
        load_config(None, ["loss.gamma"])
