import numpy as np
import pytest

from prsim.config import config_from_dict
from prsim.pipeline import build_frame, transmit, true_state

DESK = {
    "tx": {"qam_order": 16, "payload_symbols": 4096},
    "channel": {"jones_angles_rad": [0.5, 0.3, -0.2]},
}


def desk_config(**overrides):
    d = {k: dict(v) for k, v in DESK.items()}
    for path, v in overrides.items():
        sec, _, key = path.partition("__")
        if key:
            d.setdefault(sec, {})[key] = v
        else:
            d[sec] = v
    return config_from_dict(d)


@pytest.fixture(scope="session")
def desk():
    """Noiseless desk link: (config, frame, captures, true channel state)."""
    cfg = desk_config()
    frame = build_frame(cfg, 0)
    return cfg, frame, transmit(frame, cfg, ("data", 0)), true_state(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
