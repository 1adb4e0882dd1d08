from pathlib import Path
from unittest import TestCase

import numpy as np

from breakguard import Breakguard, RunConfig

CONFIGS = Path(__file__).parent.parent / "configs"
# disabled for now
# set_options(loglevel=20)

# what precision we want to guarantee for exact identities
DELTA = 1e-10
# minimum over step sizes of the relative central difference error
GRADIENT_DELTA = 1e-5
HESSIAN_DELTA = 1e-4
SYMMETRY_DELTA = 1e-8

# small enough for dense checks, large enough to resolve the beam
COARSE = {
    "mesh": {"nx": 5, "ny": 4},
    "eig": {"n_eig": 10, "n_oversample": 5, "seed": 0},
    "sampling": {"n_fields": 2, "n_samples": 50, "n_chance_samples": 20},
    "continuation": {"k_max": 2, "eps_in": 1e-3},
    "incg": {"max_iter": 5, "cg_max_iter": 10},
    "verify": {"n_directions": 2}
}


def coarse_config(**overrides):
    return RunConfig.from_dict(COARSE).replace(overrides)


def relative_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class BGTestCase(TestCase):
    """
    Builds one coarse :class:`~breakguard.Breakguard` per test class.
    """
    config = COARSE

    @classmethod
    def setUpClass(cls):
        cls.bg = Breakguard(RunConfig.from_dict(cls.config))
        cls.model = cls.bg.model
        cls.field = cls.bg.field
        cls.rng = np.random.default_rng(0)

    def directions(self, k, seed=0):
        rng = np.random.default_rng(seed)
        eta = rng.standard_normal((k, self.model.n_param))
        return eta / np.linalg.norm(eta, axis=1)[:, None]
