import numpy as np
import pytest

from rsm import cohort, datagen, survnet

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_draw():
    cfg = datagen.SyntheticConfig(
        n_samples=800,
        alpha=(0.4, -0.3, 0.3, 0.2),
        beta=(0.5, -0.4, 0.3, 0.2, -0.3, 0.4),
        seed=3,
    )
    return datagen.simulate(cfg)


@pytest.fixture(scope="session")
def small_split(small_draw):
    tr, te = cohort.split(small_draw.cohort, (0.8, 0.2), seed=1)
    z = cohort.standardize_and_impute(tr)
    return tr, te, z


@pytest.fixture(scope="session")
def small_model(small_split):
    _, _, z = small_split
    cfg = survnet.TrainConfig(time_bins=16, hidden_sizes=(16, 16), epochs=8, batch_size=64,
                              seed=0, learning_rate=3e-3)
    return survnet.train(z, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_TOML = """
seed = 7

[datagen]
n_samples = 600

[train]
time_bins = 12
hidden_sizes = [16]
epochs = 4
batch_size = 64
learning_rate = 0.003

[cluster]
k_max = 4

[rank]
k = 5
"""


@pytest.fixture(scope="session")
def small_config_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "rsm.toml"
    p.write_text(SMALL_TOML)
    return p


@pytest.fixture(scope="session")
def small_run(tmp_path_factory, small_config_path):
    """A finished small train path; copy it before modifying anything inside."""
    from rsm import config, pipeline

    out = tmp_path_factory.mktemp("run")
    cfg = config.override(config.load_config(small_config_path), paths={"out_dir": str(out)})
    pipeline.run_train_path(cfg)
    return cfg, out
