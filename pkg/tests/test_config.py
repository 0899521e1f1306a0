import pytest

from dpnet.config import Config, defaults_table, parse_config
from dpnet.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# nothing here\n\n")
    cfg = parse_config(p)
    assert cfg == Config()
    assert cfg.trainer.lr == 0.002


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("trainer.epochs = 5  # short\nmodel.anchor_sizes = 8, 16, 32\n")
    cfg = parse_config(p, ["trainer.epochs=7"])
    assert cfg.trainer.epochs == 7
    assert cfg.model.anchor_sizes == (8.0, 16.0, 32.0)


def test_range_error_names_key(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("loss.gamma = -1\n")
    with pytest.raises(ConfigError, match=r"c.cfg:1.*loss.gamma"):
        parse_config(p)


@pytest.mark.parametrize("text,match", [("nokey\n", ":1: malformed"), ("a.b = 1\n", "unknown key"),
                                         ("x = 1\ntrainer.epochs = many\n", ":1: unknown"),
                                         ("trainer.epochs = many\n", "cannot parse")])
def test_parse_errors(tmp_path, text, match):
    p = tmp_path / "c.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        parse_config(p)


def test_digest_is_stable_and_sensitive(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("trainer.seed = 3\n")
    assert parse_config(p).digest() == parse_config(p).digest()
    assert parse_config(p).digest() != Config().digest()
    assert len(Config().digest()) == 32


def test_every_key_has_documented_default():
    rows = defaults_table()
    assert len(rows) == len(Config().flat())
    assert all(doc for _, _, doc in rows)


def test_cross_field_checks():
    with pytest.raises(ConfigError):
        parse_config(None, ["loss.neg_iou=0.6"])
