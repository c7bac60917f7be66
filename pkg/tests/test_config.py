import json

import pytest

from gagstream.config import RunConfig, load_run_config, read_config_file
from gagstream.errors import ConfigError


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.reservoir_capacity_divisor == 100 and cfg.window_divisor == 2
        assert cfg.ks == [5, 10, 20] and cfg.variant == "full"

    @pytest.mark.parametrize(
        "field,value",
        [
            ("embed_dim", 0),
            ("window_divisor", 0),
            ("reservoir_capacity_divisor", 0),
            ("variant", "both"),
            ("distance_kind", "cosine"),
            ("train_frac", 1.0),
            ("learning_rate", 0.0),
        ],
    )
    def test_guards(self, field, value):
        with pytest.raises(ConfigError) as err:
            RunConfig(**{field: value})
        assert err.value.field == field
        assert field in str(err.value)


class TestConfigFile:
    def test_flat_file_and_override(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# experiment\nembed_dim = 16\nks = 5,20\npop-online = yes\nvariant = static  # ablation\n")
        assert read_config_file(p) == {"embed_dim": 16, "ks": [5, 20], "pop_online": True, "variant": "static"}
        cfg = load_run_config(str(p), embed_dim="32", variant=None)
        assert cfg.embed_dim == 32 and cfg.variant == "static"

    def test_manifest(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"version": "x", "config": RunConfig(embed_dim=12).to_dict()}))
        assert load_run_config(str(p)) == RunConfig(embed_dim=12)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("embedding = 3\n")
        with pytest.raises(ConfigError) as err:
            read_config_file(p)
        assert err.value.field == "embedding"

    def test_unparseable(self):
        with pytest.raises(ConfigError) as err:
            load_run_config(None, batch_size="many")
        assert err.value.field == "batch_size"
