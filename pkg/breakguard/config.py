import copy
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from breakguard.exceptions import ConfigError
from breakguard.forward_model import ChanceConfig, MaterialParams
from breakguard.mesh import Geometry
from breakguard.optimizer import (ContinuationConfig, CostConfig,
    IncgOptions)
from breakguard.random_field import MaternConfig, params_from_stats
from breakguard.risk_estimators import EigOptions
from breakguard.utils import config_hash, file_hash
from breakguard.version import __version__

OUTPUT_ENV = "BREAKGUARD_OUTPUT"
DEFAULT_OUTPUT = "runs"

DEFAULTS = {
    "geometry": {
        "width": 1.0,
        "height": 1.0,
        "beam_x0": 0.4,
        "beam_x1": 0.6,
        "beam_height": 0.5
    },
    "mesh": {
        "nx": 20,
        "ny": 20
    },
    "material": {
        "kappa_s": 0.477,
        "kappa_f": 0.085,
        "kappa_b": 5.0,
        "h": 81059.0,
        "h_air": 10.0,
        "theta_amb": 263.15,
        "theta_amb_interior": 293.15,
        "theta_0": 293.15,
        "D": 0.25e-8,
        "lam": 6.77e9,
        "mu": 3.38e9,
        "lam_b": 17.3e9,
        "mu_b": 11.5e9,
        "alpha_T": 1e-5,
        "u_bar": [0.0, 0.0],
        "traction": [0.0, 0.0],
        "plane_strain": True,
        "compliance_form": "pairing"
    },
    "chance": {
        "T_cr": 22.5e6,
        "p": 8.0,
        "alpha_c": 0.05,
        "orientation": "exceedance"
    },
    "matern": {
        "sigma": 0.25,
        "correlation_length": 0.25,
        "theta_x": 1.0,
        "theta_y": 1.0,
        "angle": 0.0,
        "mean": 0.0,
        "robin_form": "coefficient"
    },
    "cost": {
        "beta_V": 0.1,
        "beta_R": 1e-5,
        "regularizer": "tikhonov"
    },
    "continuation": {
        "omega_0": None,
        "gamma_0": 10.0,
        "sigma_omega": 2.0,
        "sigma_gamma": 2.0,
        "k_max": 10,
        "eps_out": 1e-3,
        "eps_in": 1e-6
    },
    "incg": {
        "max_iter": 200,
        "abs_tol": 1e-12,
        "c_armijo": 1e-4,
        "max_backtracking": 30,
        "cg_coarse_tolerance": 0.5,
        "cg_max_iter": 100,
        "fd_eps": 1e-6,
        "bounds": [0.0, 1.0]
    },
    "eig": {
        "n_eig": 25,
        "n_oversample": 10,
        "seed": 0
    },
    "eig_f": None,
    "forward": {
        "porosity": 0.7,
        "design": None
    },
    "sampling": {
        "n_fields": 4,
        "n_samples": 1000,
        "n_chance_samples": 100,
        "n_variance_samples": 1000,
        "seed": 0,
        "estimator": "quad",
        "qoi": "Q"
    },
    "verify": {
        "n_directions": 5,
        "seed": 1,
        "gradient_tol": 1e-5,
        "hessian_tol": 1e-4,
        "symmetry_tol": 1e-8,
        "eigen_tol": 1e-8,
        "moment_tol": 1e-10,
        "design_tol": 1e-4,
        "design_points": 3
    },
    "output": {
        "directory": None
    }
}

# sections whose value may be null instead of a table
OPTIONAL_SECTIONS = {"eig_f"}


def _merge(defaults, overrides, path):
    """
    ``defaults`` updated with ``overrides``, rejecting keys that
    ``defaults`` does not have.
    """
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        key_path = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(key_path, "unknown key")
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(key_path, "expected a table")
            merged[key] = _merge(default, value, key_path)
        elif default is None and key in OPTIONAL_SECTIONS and value is not None:
            if not isinstance(value, dict):
                raise ConfigError(key_path, "expected a table or null")
            merged[key] = _merge(DEFAULTS["eig"], value, key_path)
        else:
            merged[key] = value
    return merged


def _build(key_path, cls, **kwargs):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(key_path, str(e)) from e


class RunConfig:
    """
    A validated run configuration. Unknown keys are rejected with their
    dotted path; missing keys take their defaults.

    Examples
    --------
    >>> config = RunConfig.from_dict({"mesh": {"nx": 8, "ny": 8}})
    >>> config.mesh
    {'nx': 8, 'ny': 8}
    """
    def __init__(self, data):
        self.data = data
        d = data
        self.geometry = _build("geometry", Geometry, **d["geometry"])
        self.mesh = d["mesh"]
        for key in ["nx", "ny"]:
            value = self.mesh[key]
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"mesh.{key}", f"expected a positive "
                    f"integer, got {value!r}")
        self.material = _build("material", MaterialParams, **d["material"])
        self.chance = _build("chance", ChanceConfig, **d["chance"])

        matern = dict(d["matern"])
        try:
            gamma, delta = params_from_stats(matern.pop("sigma"),
                matern.pop("correlation_length"))
        except ValueError as e:
            raise ConfigError("matern", str(e)) from e
        self.matern = _build("matern", MaternConfig, gamma=gamma, delta=delta,
            **matern)

        self.cost = _build("cost", CostConfig, chance=self.chance,
            **d["cost"])
        continuation = d["continuation"]
        self.continuation = _build("continuation", ContinuationConfig,
            **continuation)
        incg = dict(d["incg"])
        if incg["bounds"] is not None:
            incg["bounds"] = tuple(incg["bounds"])
        self.incg = _build("incg", IncgOptions, **incg)
        self.eig = _build("eig", EigOptions, **d["eig"])
        self.eig_f = self.eig if d["eig_f"] is None else \
            _build("eig_f", EigOptions, **d["eig_f"])
        self.forward = d["forward"]
        porosity = self.forward["porosity"]
        if not isinstance(porosity, (int, float)) or not 0 < porosity < 1:
            raise ConfigError("forward.porosity", f"expected a value in "
                f"(0, 1), got {porosity!r}")
        self.sampling = d["sampling"]
        for key in ["n_fields", "n_samples", "n_chance_samples",
            "n_variance_samples"]:
            value = self.sampling[key]
            if not isinstance(value, int) or value < 0:
                raise ConfigError(f"sampling.{key}", f"expected a nonnegative "
                    f"integer, got {value!r}")
        if self.sampling["estimator"] not in ("quad", "mc", "cv"):
            raise ConfigError("sampling.estimator", "expected one of quad, "
                f"mc, cv, got {self.sampling['estimator']!r}")
        if self.sampling["qoi"] not in ("Q", "f"):
            raise ConfigError("sampling.qoi", "expected Q or f, got "
                f"{self.sampling['qoi']!r}")
        self.verify = d["verify"]
        self.output = d["output"]

    @classmethod
    def from_dict(cls, overrides=None):
        overrides = overrides or {}
        if not isinstance(overrides, dict):
            raise ConfigError("<root>", "expected a table")
        return cls(_merge(DEFAULTS, overrides, ""))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError("<file>", f"{path} does not exist")
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"{path} is not valid json: {e}") \
                from e
        return cls.from_dict(data)

    def to_dict(self):
        """
        The fully resolved configuration, defaults included.
        """
        return copy.deepcopy(self.data)

    @property
    def hash(self):
        return config_hash(self.data)

    def replace(self, overrides):
        """
        A new config with ``overrides`` applied on top of this one.
        """
        return RunConfig(_merge(self.data, overrides, ""))

    def output_root(self, override=None):
        return Path(override or self.output["directory"] or
            os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))

    def run_directory(self, command, override=None):
        return self.output_root(override) / f"{command}-{self.hash[:12]}"


@dataclass
class RunManifest:
    """
    The index of a run directory: config hash, code version, timestamps,
    solve totals and every emitted file with its SHA-256.
    """
    command: str
    config_hash: str
    version: str = __version__
    started: str = field(default_factory=lambda:
        datetime.now(timezone.utc).isoformat())
    finished: str = None
    pde_solves: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def add_file(self, path, root):
        path = Path(path)
        self.files.append({
            "path": str(path.relative_to(root)),
            "sha256": file_hash(path)
        })

    def write(self, directory):
        self.finished = datetime.now(timezone.utc).isoformat()
        path = Path(directory) / "manifest.json"
        with open(path, "w") as f:
            json.dump(self.__dict__, f, indent=2, sort_keys=True)
        return path
