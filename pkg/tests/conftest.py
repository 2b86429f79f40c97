import numpy as np
import pytest

from distill3d import config as C
from distill3d.toy import write_toy_fixtures

# tiny scene: every phase runs in well under a second per iteration
SMALL_PHASE = {"iterations": 4, "resolution": 16, "n_samples": 8, "checkpoint_every": 2}


def small_overrides(**extra):
    over = dict(
        field={"resolution": 8, "bbox": 0.6},
        tets={"resolution": 6, "threshold": 10.0},
        phases={str(k): dict(SMALL_PHASE) for k in (1, 2, 3)},
        augment={"n": 1},
        metrics={"resolution": 16, "distractors": 3},
    )
    over.update(extra)
    return over


@pytest.fixture
def small_config_path(tmp_path):
    return write_toy_fixtures(tmp_path, resolution=16, **small_overrides())


@pytest.fixture
def small_run(small_config_path):
    """(config, engine, phases, state) for the tiny toy scene."""
    cfg = C.load(small_config_path)
    return cfg, C.build_engine(cfg), C.build_phases(cfg), C.build_state(cfg)


def tensors_bytes(*ts):
    return [t.detach().numpy().tobytes() for t in ts]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
