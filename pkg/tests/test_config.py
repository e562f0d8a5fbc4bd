import pytest

from mccf.config import (ConfigError, RunConfig, check_axis, dump_config, load_config)


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.model.dim, cfg.model.n_components) == (64, 2)
        assert (cfg.train.learning_rate, cfg.train.batch_size, cfg.train.dropout_rate) == (0.001, 128, 0.5)
        assert cfg.model.init_std == 0.1 and cfg.train.l0_lambda == 1e-4
        assert not cfg.data.has_source

    def test_root_seed_feeds_sections(self):
        cfg = RunConfig.from_dict({"seed": 7, "synth": {"seed": 2}})
        assert cfg.train.seed == 7 and cfg.synth.seed == 2
        again = cfg.with_seed(9)
        assert (again.seed, again.train.seed, again.synth.seed) == (9, 9, 9)

    def test_round_trip(self, tmp_path):
        cfg = RunConfig.from_dict({"seed": 4, "model": {"n_components": 3, "hidden_dims": [16, 8]},
                                   "data": {"synthetic": True}})
        dump_config(cfg, tmp_path / "c.yaml")
        assert load_config(tmp_path / "c.yaml") == cfg

    @pytest.mark.parametrize("doc", [
        {"modle": {}},
        {"model": {"n_components": 0}},
        {"train": {"learning_rate": -1}},
        {"data": {"synthetic": True, "ratings": "x.tsv"}},
        {"data": {"train_frac": 1.5}},
        {"model": "big"},
    ])
    def test_rejects(self, doc):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(doc)

    def test_file_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "missing.yaml")
        (tmp_path / "bad.yaml").write_text("model: [1, 2\n")
        with pytest.raises(ConfigError, match="invalid YAML"):
            load_config(tmp_path / "bad.yaml")
        (tmp_path / "list.yaml").write_text("- 1\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(tmp_path / "list.yaml")
        (tmp_path / "empty.yaml").write_text("")
        assert load_config(tmp_path / "empty.yaml") == RunConfig()


class TestAxis:
    def test_grids(self):
        assert check_axis("components", ["3", "1", "3"]) == [1, 3]
        assert check_axis("dim", [8, 128]) == [8, 128]
        assert check_axis("dim", [10], strict=False) == [10]

    @pytest.mark.parametrize("axis,values", [("components", [5]), ("dim", [0]), ("depth", [1]),
                                             ("dim", [])])
    def test_rejects(self, axis, values):
        with pytest.raises(ConfigError):
            check_axis(axis, values)
