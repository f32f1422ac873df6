import pytest
import yaml

from mvmark.config import example_config, load_config, parse_config
from mvmark.errors import ConfigError
from mvmark.trigger import LabelStrategy, SelectionStrategy


def minimal_raw(**overrides):
    raw = {
        "model": {"architecture": "mlp", "num_classes": 5, "feature_dim": 8,
                  "input_shape": [10], "widths": [16]},
    }
    raw.update(overrides)
    return raw


class TestParseConfig:
    def test_example_config_parses(self):
        cfg = parse_config(example_config())
        assert cfg.trigger.selection is SelectionStrategy.MARGIN_TOP
        assert cfg.trigger.labeling is LabelStrategy.RUNNER_UP
        assert len(cfg.attacks) >= 4

    def test_defaults_applied(self):
        cfg = parse_config(minimal_raw())
        assert cfg.dataset.kind == "blobs"
        assert cfg.source_fraction == 0.5
        assert cfg.significance == 0.01

    def test_seed_propagates_to_training_blocks(self):
        cfg = parse_config(minimal_raw(seed=9))
        assert cfg.selector_train.seed == 9
        assert cfg.watermark.base.seed == 9
        assert cfg.benign_train.seed == 9

    @pytest.mark.parametrize("mutate", [
        lambda r: r.update(bogus_key=1),
        lambda r: r["model"].update(layers=3),
        lambda r: r.update(dataset={"flavour": "spicy"}),
        lambda r: r.update(trigger={"quantity": 5}),
        lambda r: r.update(watermark={"strength": 2}),
        lambda r: r.update(attacks=[{"kind": "extract_soft", "power": 9}]),
        lambda r: r.update(selector_train={"learning_rate": 0.1}),
    ], ids=["top", "model", "dataset", "trigger", "watermark", "attack", "train"])
    def test_unknown_keys_rejected_everywhere(self, mutate):
        raw = minimal_raw()
        mutate(raw)
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config(raw)

    def test_unknown_dataset_kind_rejected(self):
        with pytest.raises(ConfigError, match="dataset.kind"):
            parse_config(minimal_raw(dataset={"kind": "imagenet"}))

    def test_unknown_attack_kind_rejected(self):
        with pytest.raises(ConfigError, match="unknown kind"):
            parse_config(minimal_raw(attacks=[{"kind": "quantize"}]))

    def test_duplicate_attack_names_rejected(self):
        attacks = [{"kind": "extract_soft"}, {"kind": "extract_soft"}]
        with pytest.raises(ConfigError, match="unique"):
            parse_config(minimal_raw(attacks=attacks))

    def test_attack_surrogate_model_defaults_to_source_model(self):
        cfg = parse_config(minimal_raw(attacks=[{"kind": "extract_soft"}]))
        assert cfg.attacks[0].config.surrogate_spec == cfg.model

    def test_attack_surrogate_model_override(self):
        attacks = [{"kind": "extract_soft",
                    "surrogate_model": {"architecture": "mlp", "num_classes": 5,
                                        "feature_dim": 4, "input_shape": [10],
                                        "widths": [8]}}]
        cfg = parse_config(minimal_raw(attacks=attacks))
        assert cfg.attacks[0].config.surrogate_spec.feature_dim == 4

    def test_bad_fractions_rejected(self):
        with pytest.raises(ConfigError):
            parse_config(minimal_raw(source_fraction=0.0))
        with pytest.raises(ConfigError):
            parse_config(minimal_raw(test_fraction=1.0))
        with pytest.raises(ConfigError):
            parse_config(minimal_raw(significance=0.0))


class TestLoadConfig:
    def test_yaml_roundtrip(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump(example_config(seed=3)))
        cfg = load_config(path)
        assert cfg.seed == 3

    def test_missing_file_raises_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.yaml")

    def test_non_mapping_rejected(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(path)

    def test_broken_yaml_rejected(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("a: [unclosed\n")
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(path)
