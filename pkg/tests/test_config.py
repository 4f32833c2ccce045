import pytest

from rtlab.config import SCHEMA, apply_overrides, parse_config
from rtlab.errors import ConfigError


class TestParse:
    def test_empty_text_gives_defaults(self):
        cfg = parse_config("")
        for key, (_, default) in SCHEMA.items():
            assert cfg[key] == default

    def test_typed_values(self):
        cfg = parse_config(
            "seed = 7\n"
            "distill.lr = 0.01\n"
            "model.use_weight_norm = false\n"
            "model.encoder_widths = 32, 16\n"
            "landscape.extent = -1.0,1.0,-1.0,1.0\n"
            "probe.kind = both\n"
        )
        assert cfg["seed"] == 7
        assert cfg["distill.lr"] == 0.01
        assert cfg["model.use_weight_norm"] is False
        assert cfg["model.encoder_widths"] == (32, 16)
        assert cfg["landscape.extent"] == (-1.0, 1.0, -1.0, 1.0)
        assert cfg["probe.kind"] == "both"

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# a comment\n\nseed = 3\n")
        assert cfg["seed"] == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config("distill.momentum = 0.9\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("seed = 1\nseed = 2\n")

    def test_bad_int(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_config("seed = banana\n")

    def test_bad_choice(self):
        with pytest.raises(ConfigError, match="not one of"):
            parse_config("model.norm_kind = group\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match="true/false"):
            parse_config("model.use_feature_norm = yes\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config("just some words\n")

    def test_empty_tuple(self):
        cfg = parse_config("distill.checkpoint_epochs =\n")
        assert cfg["distill.checkpoint_epochs"] == ()


class TestResolvedText:
    def test_round_trip_fixpoint(self):
        cfg = parse_config("seed = 9\ndistill.alpha = 0.5\nmodel.embed_dim = 12\n")
        text = cfg.resolved_text()
        again = parse_config(text)
        assert again.resolved_text() == text
        assert {k: v for k, v in again.values.items() if k != "out"} == {
            k: v for k, v in cfg.values.items() if k != "out"
        }

    def test_out_not_echoed(self):
        cfg = parse_config("out = /tmp/somewhere\n")
        assert not any(line.startswith("out ") for line in cfg.resolved_text().splitlines())
        assert cfg["out"] == "/tmp/somewhere"


class TestOverrides:
    def test_apply(self):
        cfg = parse_config("seed = 1\n")
        cfg = apply_overrides(cfg, ["seed=5", "distill.epochs=3"])
        assert cfg["seed"] == 5 and cfg["distill.epochs"] == 3

    def test_unknown_override(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            apply_overrides(parse_config(""), ["no.such.key=1"])

    def test_malformed_override(self):
        with pytest.raises(ConfigError, match="key=value"):
            apply_overrides(parse_config(""), ["seed"])


class TestBuilders:
    def test_model_spec(self):
        cfg = parse_config(
            "model.encoder_kind = small_cnn\nmodel.encoder_widths = 8,16\n"
            "model.input_shape = 1,8,8\nmodel.norm_kind = layer\n"
        )
        spec = cfg.model_spec()
        assert spec.encoder_kind == "small_cnn"
        assert spec.encoder_widths == (8, 16)
        assert spec.norm_kind == "layer"

    def test_distill_config_seed_and_alpha_override(self):
        cfg = parse_config("seed = 4\ndistill.alpha = 1.0\n")
        d = cfg.distill_config()
        assert d.seed == 4 and d.alpha == 1.0
        d2 = cfg.distill_config(seed=11, alpha=0.0)
        assert d2.seed == 11 and d2.alpha == 0.0

    def test_supervised_config_num_classes_falls_back_to_dataset_k(self):
        cfg = parse_config("dataset.k = 5\n")
        assert cfg.supervised_config().num_classes == 5
        cfg = parse_config("dataset.k = 5\nsupervised.num_classes = 3\n")
        assert cfg.supervised_config().num_classes == 3
