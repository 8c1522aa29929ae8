"""Session-wide fixtures for the end-to-end suite.

The expensive artifacts (datasets, the trained desk-scale model, its
cross-entropy twin, the reinforcement runs) are built once per session
and shared by every test that needs them.  Unit-test files never touch
these fixtures, so plain module runs stay fast.
"""

import pytest

from laser.data import VocabLayout, generate_dataset
from laser.model import ModelConfig, as_arrays, load_checkpoint
from laser.rl import RLConfig, rl_train
from laser.training import TrainConfig, train

# The desk recipe: the smallest setup that reliably learns the scan
# task end to end on one CPU core.
DESK_MODEL = dict(d_model=32, n_layers=2, n_heads=4, max_seq=64, seed=0)
DESK_TRAIN = dict(lr=1.5e-3, max_steps=2000, batch_size=32, seed=0,
                  eval_every=250, eval_subset=200)
RL_ITERATIONS = 200
RL_GROUP = 4


@pytest.fixture(scope="session")
def layout():
    return VocabLayout()


@pytest.fixture(scope="session")
def big_dataset(layout):
    return generate_dataset(7, 10_000, layout)


@pytest.fixture(scope="session")
def train_dataset(layout):
    return generate_dataset(0, 5_000, layout)


@pytest.fixture(scope="session")
def desk_mcfg(layout):
    return ModelConfig(vocab_size=layout.vocab_floor, **DESK_MODEL)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, layout, train_dataset, desk_mcfg):
    out = tmp_path_factory.mktemp("desk-dwal")
    cfg = TrainConfig(**DESK_TRAIN)
    result = train(cfg, desk_mcfg, train_dataset, layout, out)
    return result, cfg


@pytest.fixture(scope="session")
def ce_baseline_run(tmp_path_factory, layout, train_dataset, desk_mcfg):
    out = tmp_path_factory.mktemp("desk-ce")
    cfg = TrainConfig(objective="ce", **DESK_TRAIN)
    result = train(cfg, desk_mcfg, train_dataset, layout, out)
    return result, cfg


@pytest.fixture(scope="session")
def trained_arrays(trained_run):
    result, _ = trained_run
    mcfg, params = load_checkpoint(result.best_path)
    return as_arrays(params), mcfg


def _rl_from(best_path, layout, dataset, out, **overrides):
    mcfg, params = load_checkpoint(best_path)
    cfg = RLConfig(iterations=RL_ITERATIONS, group_size=RL_GROUP, seed=0,
                   **overrides)
    return rl_train(params, mcfg, layout, dataset, cfg, out), cfg, mcfg


@pytest.fixture(scope="session")
def rl_main_run(tmp_path_factory, layout, train_dataset, trained_run):
    result, _ = trained_run
    out = tmp_path_factory.mktemp("rl-main")
    return _rl_from(result.best_path, layout, train_dataset, out)


@pytest.fixture(scope="session")
def rl_control_run(tmp_path_factory, layout, train_dataset, trained_run):
    result, _ = trained_run
    out = tmp_path_factory.mktemp("rl-control")
    return _rl_from(result.best_path, layout, train_dataset, out,
                    beta_base=0.0)
