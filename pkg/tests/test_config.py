"""Config parsing, precedence, and hashing tests."""

import pytest

from g2sf.config import RunConfig, apply_setting, build_config, config_hash
from g2sf.errors import ConfigError


class TestParsing:
    def test_defaults_validate(self):
        cfg = build_config()
        assert cfg.loss.alpha == 10.0 and cfg.loss.beta == 60.0
        assert cfg.loss.gamma == 8.0 and cfg.loss.mu == 20.0
        assert cfg.loss.k == 5 and cfg.loss.eta0 == 1.2
        assert cfg.bank.fraction == 0.10
        assert cfg.train.lr == 1.5e-4 and cfg.train.weight_decay == 1.5e-4
        assert cfg.train.sigma_lr == 5e-3 and cfg.train.batch_size == 8192
        assert cfg.train.epochs == 80 and cfg.train.dropout == 0.5
        assert cfg.lspn.dim_pc == 1152 and cfg.lspn.dim_rgb == 768

    def test_file_and_overrides_precedence(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("train.epochs = 12  # from file\nseed = 3\n")
        cfg = build_config(path, overrides=["train.epochs=9"])
        assert cfg.train.epochs == 9  # flag beats file
        assert cfg.seed == 3

    def test_tuple_and_none_values(self):
        cfg = RunConfig()
        apply_setting(cfg, "gen.grid", "24, 20")
        assert cfg.gen.grid == (24, 20)
        apply_setting(cfg, "bank.projection_dim", "8")
        assert cfg.bank.projection_dim == 8
        apply_setting(cfg, "bank.projection_dim", "none")
        assert cfg.bank.projection_dim is None
        apply_setting(cfg, "gen.anomaly_modes", "pc_only, joint")
        assert cfg.gen.anomaly_modes == ("pc_only", "joint")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            apply_setting(RunConfig(), "train.warp_speed", "9")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            apply_setting(RunConfig(), "train.epochs", "eleven")

    def test_k_propagates(self):
        cfg = build_config(overrides=["loss.k=3"])
        assert cfg.synth.k == 3 and cfg.eval.k == 3


class TestHash:
    def test_stable_and_sensitive(self):
        a = build_config()
        b = build_config()
        assert config_hash(a) == config_hash(b)
        c = build_config(overrides=["train.epochs=81"])
        assert config_hash(c) != config_hash(a)
