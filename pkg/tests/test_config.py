"""Config file parsing: dotted keys, comments, errors with line numbers."""

import pytest

from dpec.configfile import (
    RunConfig,
    config_hash,
    parse_config,
    serialize_config,
)
from dpec.errors import ConfigError
from dpec.network import EnhanceMode


class TestParse:
    def test_basic(self):
        cfg = parse_config(
            "train.stage = 2\n"
            "train.epochs = 5\n"
            "loss.w_tv = 0.25\n"
            "model.use_mff = false\n"
            "train.mode = retinex\n"
        )
        assert cfg.train.stage == 2
        assert cfg.train.epochs == 5
        assert cfg.train.weights.tv == 0.25
        assert not cfg.bee.use_mff
        assert cfg.train.mode is EnhanceMode.DPEC_RETINEX

    def test_comments_and_blank_lines(self):
        cfg = parse_config(
            "# full-line comment\n"
            "\n"
            "train.seed = 9  # trailing comment\n"
        )
        assert cfg.train.seed == 9

    def test_defaults(self):
        cfg = parse_config("")
        assert cfg.train.epochs == 600
        assert cfg.train.beta1 == 0.9 and cfg.train.beta2 == 0.999
        assert cfg.bee.channels == 96
        assert cfg.bee.enc_depths == (2, 3) and cfg.bee.dec_depths == (3, 2)
        assert cfg.train.weights.ssim == 2.0
        assert cfg.train.weights.perceptual == 1.2
        assert cfg.train.weights.his == 1.0
        assert cfg.train.weights.tv == 0.01
        assert cfg.train.weights.smooth == 0.8

    def test_unknown_key_line_number(self):
        with pytest.raises(ConfigError, match="line 3"):
            parse_config("train.seed = 1\n\nnot.a.key = 2\n")

    def test_bad_value_line_number(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("train.epochs = soon\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("train.seed = 1\ntrain.seed = 2\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("train.seed 1\n")

    def test_depth_lists(self):
        cfg = parse_config("model.enc_depths = 1,1\nmodel.dec_depths = 1, 1\n")
        assert cfg.bee.enc_depths == (1, 1)
        assert cfg.bee.dec_depths == (1, 1)

    def test_validation_runs(self):
        with pytest.raises(ConfigError):
            parse_config("train.stage = 3\n")
        with pytest.raises(ConfigError):
            parse_config("model.variant = full\nmodel.channels = 64\n")


class TestRoundTrip:
    def test_default_round_trip(self):
        cfg = RunConfig()
        assert parse_config(serialize_config(cfg)) == cfg

    def test_modified_round_trip(self):
        text = (
            "train.stage = 2\n"
            "train.lr_start = 0.004\n"
            "train.seed = 123\n"
            "model.channels = 16\n"
            "model.enc_depths = 1,1\n"
            "model.dec_depths = 1,1\n"
            "ss2d.shared_directions = false\n"
            "loss.negate_inner = true\n"
            "loss.w_his = 0.05\n"
        )
        cfg = parse_config(text)
        again = parse_config(serialize_config(cfg))
        assert again == cfg

    def test_explicit_none_lr_round_trips(self):
        cfg = parse_config("")
        assert cfg.train.lr_start is None
        again = parse_config(serialize_config(cfg))
        assert again.train.lr_start is None

    def test_hash_tracks_content(self):
        a = parse_config("")
        b = parse_config("train.seed = 1\n")
        assert config_hash(a) != config_hash(b)
        assert config_hash(a) == config_hash(parse_config(""))
