import pytest

from madet import config as cf
from madet.errors import ConfigError


class TestRunConfig:
    def test_defaults_present(self):
        cfg = cf.RunConfig()
        assert cfg["optimizer.epsilon0"] == 0.01
        assert cfg["detect.max_area"] == 21
        assert cfg["network.input_side"] == 129

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            cf.RunConfig({"optimizer.learning_rate": "0.1"})
        cfg = cf.RunConfig()
        with pytest.raises(ConfigError):
            cfg["nope"]

    def test_values_validated(self):
        with pytest.raises(ConfigError):
            cf.RunConfig({"optimizer.epsilon0": "0"})
        with pytest.raises(ConfigError):
            cf.RunConfig({"optimizer.momentum_ramp": "diagonal"})
        with pytest.raises(ConfigError):
            cf.RunConfig({"network.input_side": "128"})  # must be odd
        with pytest.raises(ConfigError):
            cf.RunConfig({"detect.prob_threshold": "1.0"})

    def test_file_parsing_with_comments(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# a comment\nseed = 9\noptimizer.m_f = 0.95  # inline\n\n")
        cfg = cf.load_config(p)
        assert cfg["seed"] == 9
        assert cfg["optimizer.m_f"] == 0.95

    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("seed = 9\n")
        cfg = cf.load_config(p, {"seed": "17"})
        assert cfg["seed"] == 17

    def test_malformed_line_rejected(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("this is not a setting\n")
        with pytest.raises(ConfigError):
            cf.load_config(p)

    def test_dump_round_trips(self, tmp_path):
        cfg = cf.RunConfig({"seed": "5", "sampling.rings": "0:4:1,4:20:2",
                            "network.conv_maps": "8,8"})
        p = tmp_path / "dump.cfg"
        p.write_text(cfg.dump())
        cfg2 = cf.load_config(p)
        assert cfg2["seed"] == 5
        assert cfg2["sampling.rings"] == ((0.0, 4.0, 1), (4.0, 20.0, 2))
        assert cfg2["network.conv_maps"] == (8, 8)

    def test_ring_syntax_validated(self):
        with pytest.raises(ConfigError):
            cf.RunConfig({"sampling.rings": "0:4"})
        with pytest.raises(ConfigError):
            cf.RunConfig({"sampling.rings": "1:4:1"})


class TestBuilders:
    def test_network_from_defaults_is_reference_stack(self):
        cfg = cf.RunConfig()
        spec = cf.network_from_config(cfg)
        assert spec.shapes()[0] == (3, 129, 129)
        assert spec.shapes()[-2] == (290,)

    def test_stage_list_lengths_checked(self):
        cfg = cf.RunConfig({"network.conv_maps": "8,8",
                            "network.conv_filters": "5,5,5"})
        with pytest.raises(ConfigError):
            cf.network_from_config(cfg)

    def test_drop_profile_length_checked(self):
        cfg = cf.RunConfig({"network.conv_maps": "8,8",
                            "network.conv_filters": "5,5",
                            "network.conv_strides": "2,1",
                            "network.pool_extents": "3,3",
                            "network.pool_strides": "2,2"})
        with pytest.raises(ConfigError):
            cf.network_from_config(cfg)

    def test_auto_rings_scale_with_window(self):
        cfg = cf.RunConfig({"network.input_side": "129"})
        grid = cf.grid_from_config(cfg)
        assert grid.rings == ((0.0, 16.0, 1), (16.0, 40.0, 2), (40.0, 64.5, 4))

    def test_detect_config_wiring(self):
        cfg = cf.RunConfig({"detect.kappa": "0.7", "threads": "2"})
        d = cf.detect_from_config(cfg)
        assert d.prefilter.kappa == 0.7
        assert d.threads == 2
        assert d.post.max_area == 21

    def test_optimizer_wiring(self):
        cfg = cf.RunConfig({"optimizer.T": "55"})
        oc = cf.optimizer_from_config(cfg)
        assert oc.ramp_steps == 55
