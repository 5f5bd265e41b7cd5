import json

import pytest

from errors import ConfigurationError
from run_config import DEFAULT_CONFIG, PRESETS, RunConfig, parse_config, parse_override, save_config


class TestDefaults:
    def test_benchmark_preset_parameters(self):
        config = parse_config(preset="heat_benchmark")
        assert config == parse_config()
        assert config.length == 10.0
        assert config.horizon == 1.0
        assert config.dt == 0.01
        assert config.n_elems == 400
        assert config.n_noise_modes == 50
        assert config.obs_dim == 5
        assert config.learning_rate == 0.001
        assert config.n_sgd == 1000
        assert config.n_steps == 100
        assert config.branch_every == 5
        assert (config.hxp_mode, config.z2_estimator) == ("transposed", "pathwise")

    def test_uncontrolled_preset(self):
        config = parse_config(preset="uncontrolled")
        assert config.n_sgd == 0
        assert config.learning_rate == 0.0

    def test_every_preset_resolves(self):
        for name in PRESETS:
            assert isinstance(parse_config(preset=name), RunConfig)

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError) as info:
            parse_config(preset="wave_benchmark")
        assert info.value.key == "preset"


class TestTimeGrid:
    def test_dividing_step_accepted(self):
        assert parse_config(source={"dt": 0.02, "branch_interval": 0.04}).n_steps == 50

    def test_non_dividing_step_rejected(self):
        with pytest.raises(ConfigurationError) as info:
            parse_config(source={"dt": 0.03})
        assert info.value.key == "dt"

    def test_branch_interval_must_be_multiple_of_step(self):
        with pytest.raises(ConfigurationError) as info:
            parse_config(source={"branch_interval": 0.015})
        assert info.value.key == "branch_interval"


class TestValidation:
    @pytest.mark.parametrize("values,key", [
        ({"n_particles": 0}, "n_particles"),
        ({"dt": -0.01}, "dt"),
        ({"learning_rate": -1.0}, "learning_rate"),
        ({"n_sgd": 2.5}, "n_sgd"),
        ({"horizon": "long"}, "horizon"),
        ({"filtering": "maybe"}, "filtering"),
        ({"hxp_mode": "sideways"}, "hxp_mode"),
        ({"z2_estimator": "oracle"}, "z2_estimator"),
        ({"rollout_mode": "replay"}, "rollout_mode"),
        ({"n_noise_modes": 400}, "n_noise_modes"),
        ({"control_lower": 1.0, "control_upper": -1.0}, "control_lower"),
        ({"n_elemz": 10}, "n_elemz"),
    ])
    def test_invalid_values_name_the_key(self, values, key):
        with pytest.raises(ConfigurationError) as info:
            parse_config(source=values)
        assert info.value.key == key
        assert key in str(info.value)

    def test_integers_accepted_for_floats(self):
        config = parse_config(source={"length": 5, "control_upper": 1})
        assert isinstance(config.length, float)
        assert config.control_upper == 1.0


class TestOverrides:
    def test_json_values(self):
        assert parse_override("dt=0.02") == {"dt": 0.02}
        assert parse_override("filtering=false") == {"filtering": False}
        assert parse_override("hxp_mode=pointwise") == {"hxp_mode": "pointwise"}

    def test_malformed_override(self):
        with pytest.raises(ConfigurationError):
            parse_override("dt")

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"n_sgd": 7, "seed": 3}))
        config = parse_config(preset="uncontrolled", path=str(path), overrides=["n_sgd=9"], seed=11,
                              output_dir=str(tmp_path))
        assert config.n_sgd == 9
        assert config.learning_rate == 0.0
        assert config.seed == 11
        assert config.output_dir == str(tmp_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError) as info:
            parse_config(path=str(tmp_path / "absent.json"))
        assert info.value.key == "config"

    def test_non_object_file(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigurationError):
            parse_config(path=str(path))


class TestRoundTrip:
    def test_saved_config_reproduces_itself(self, tmp_path):
        config = parse_config(preset="linear_gaussian_test", overrides=["dt=0.02", "branch_interval=0.1",
                                                                         "control_lower=-2"], seed=5)
        path = tmp_path / "config.json"
        save_config(config, str(path))
        assert parse_config(path=str(path)) == config

    def test_every_key_is_echoed(self, tmp_path):
        path = tmp_path / "config.json"
        save_config(parse_config(), str(path))
        assert set(json.loads(path.read_text())) == set(DEFAULT_CONFIG)
