import pytest

from rsm.config import PipelineConfig, from_dict, load_config, override
from rsm.datagen import default_paper_config
from rsm.errors import ConfigError


def test_defaults_need_no_file():
    cfg = load_config()
    assert cfg.seed == 0
    assert cfg.datagen == default_paper_config(0)
    assert cfg.train.seed == 0 and cfg.train.lam == 0.01
    assert (cfg.significance.alpha, cfg.significance.step) == (0.05, 1)
    assert cfg.cluster.k_max == 10 and cfg.rank.method == "pca" and cfg.rank.k == 10


def test_toml_sections(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('seed = 3\n[train]\nlambda = 0.5\nhidden_sizes = [8, 4]\n'
                 '[rank]\nmethod = "kpca"\nbandwidth = 2.0\n[datagen]\nn_samples = 100\n')
    cfg = load_config(p)
    assert cfg.train.lam == 0.5 and cfg.train.hidden_sizes == (8, 4)
    assert cfg.train.seed == 3
    assert cfg.rank.method == "kpca" and cfg.rank.bandwidth == 2.0
    assert cfg.datagen.n_samples == 100 and cfg.datagen.seed == 3
    assert cfg.datagen.alpha == default_paper_config(3).alpha


def test_seed_override():
    cfg = from_dict({"seed": 3, "cluster": {"seed": 11}}, seed_override=9)
    assert cfg.seed == 9 and cfg.train.seed == 9
    assert cfg.seed_for("cluster") == 11 and cfg.seed_for("rank") == 9


def test_subset_change_redraws_coefficients():
    cfg = from_dict({"datagen": {"subset_sq": [1, 2], "subset_lin": [3]}})
    assert len(cfg.datagen.alpha) == 2 and len(cfg.datagen.beta) == 1


@pytest.mark.parametrize("data", [
    {"unknown": {}},
    {"rank": {"nope": 1}},
    {"rank": {"method": "tsne"}},
    {"rank": {"window": "wide"}},
    {"cluster": {"k_max": 2}},
    {"significance": {"alpha": 1.5}},
    {"significance": {"top_fraction": 0.0}},
    {"split": {"train_fraction": 1.0}},
    {"train": {"lambda": -1.0}},
    {"datagen": {"mnar_rate": 0.9}},
    {"seed": "x"},
    {"rank": 3},
])
def test_invalid(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    p = tmp_path / "bad.toml"
    p.write_text("seed = = 1")
    with pytest.raises(ConfigError):
        load_config(p)


def test_override_validates():
    cfg = PipelineConfig()
    assert override(cfg, rank={"k": 3}).rank.k == 3
    with pytest.raises(ConfigError):
        override(cfg, rank={"k": 0})


def test_to_dict_is_plain():
    d = PipelineConfig().to_dict()
    assert d["rank"]["method"] == "pca" and d["datagen"]["n_samples"] == 20000
