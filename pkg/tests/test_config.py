import pytest

from mscl.config import (
    DataSection,
    ModelSection,
    RunConfig,
    TrainingSection,
    config_from_dict,
    parse_config,
    serialize_config,
    write_config,
)
from mscl.errors import ConfigError


SAMPLE = """
seed = 7

[model]
topics = 4
embed_dim = 64
feature_dim = 32
layers = 2
heads = 2

[segmenter]
grid_size = 6
conf_threshold = 0.5

[training]
lam = 0.8
theta = 2.0
lr = 0.0003
epochs = 5

[data]
manifest = "corpus/manifest.jsonl"
out_dir = "runs/sample"
"""


class TestParse:
    def test_values_and_defaults(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text(SAMPLE)
        config = parse_config(path)
        assert config.seed == 7
        assert config.model.topics == 4
        assert config.model.states == 4  # default
        assert config.segmenter.grid_size == 6
        assert config.segmenter.nms_iou_threshold == 0.7  # default
        assert config.training.lr == 3e-4
        assert config.training.weight_decay == 0.02  # default
        assert config.data.manifest == "corpus/manifest.jsonl"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            config_from_dict({"training": {"learningrate": 1.0}})

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown configuration key"):
            config_from_dict({"optimizer": {}})

    def test_invalid_lambda_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"training": {"lam": 1.5}})

    def test_invalid_tau_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"training": {"tau": 0.0}})

    def test_segmenter_ranges_validated(self):
        with pytest.raises(ConfigError, match="conf_threshold"):
            config_from_dict({"segmenter": {"conf_threshold": 1.5}})
        with pytest.raises(ConfigError, match="stability_offset"):
            config_from_dict({"segmenter": {"stability_offset": 0.0}})

    def test_proposals_dir_backend_requires_directory(self):
        with pytest.raises(ConfigError, match="proposals_dir"):
            config_from_dict({"data": {"backend": "proposals-dir"}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="no configuration file"):
            parse_config(tmp_path / "absent.toml")


class TestRoundTrip:
    def test_parse_serialize_parse_identity(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text(SAMPLE)
        first = parse_config(path)
        write_config(first, tmp_path / "echo.toml")
        second = parse_config(tmp_path / "echo.toml")
        assert first == second

    def test_default_config_round_trips(self, tmp_path):
        config = RunConfig()
        write_config(config, tmp_path / "default.toml")
        assert parse_config(tmp_path / "default.toml") == config

    def test_paper_defaults(self):
        config = RunConfig()
        assert config.training.lam == 0.8
        assert config.training.theta == 2.0
        assert config.training.lr == 3e-4
        assert config.training.weight_decay == 0.02
        assert config.model.embed_dim == 256

    def test_replace_training(self):
        config = RunConfig()
        ablated = config.replace_training(no_cl=True, single_view=True)
        assert ablated.training.no_cl and ablated.training.single_view
        assert ablated.model == config.model

    def test_vocab_sentinel(self):
        section = ModelSection()
        with pytest.raises(ConfigError):
            section.to_model_config()
        assert section.to_model_config(57).vocab_size == 57
