import json
import os
from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase
from unittest.mock import patch

from breakguard import ConfigError, RunConfig, RunManifest
from breakguard.config import DEFAULT_OUTPUT, OUTPUT_ENV

from tests.utils import CONFIGS


class TestRunConfig(TestCase):

    def test_defaults(self):
        config = RunConfig.from_dict()
        self.assertEqual(config.mesh, {"nx": 20, "ny": 20})
        self.assertIs(config.eig_f, config.eig)
        self.assertEqual(config.incg.bounds, (0.0, 1.0))
        self.assertEqual(config.cost.chance, config.chance)
        self.assertAlmostEqual(config.matern.sigma, 0.25)
        self.assertAlmostEqual(config.matern.correlation_length, 0.25)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as cm:
            RunConfig.from_dict({"matern": {"sigma": 0.3, "nu": 2}})
        self.assertEqual(cm.exception.key_path, "matern.nu")
        with self.assertRaises(ConfigError) as cm:
            RunConfig.from_dict({"solver": {}})
        self.assertEqual(cm.exception.key_path, "solver")

    def test_invalid_values(self):
        cases = [
            ({"mesh": {"nx": 0}}, "mesh.nx"),
            ({"mesh": {"nx": 2.5}}, "mesh.nx"),
            ({"forward": {"porosity": 1.0}}, "forward.porosity"),
            ({"sampling": {"n_samples": -1}}, "sampling.n_samples"),
            ({"sampling": {"estimator": "sobol"}}, "sampling.estimator"),
            ({"matern": {"sigma": -0.1}}, "matern"),
            ({"chance": {"p": 1.0}}, "chance"),
            ({"cost": {"regularizer": "l1"}}, "cost"),
            ({"incg": {"bounds": [1, 0]}}, "incg"),
            ({"geometry": {"beam_x1": 2.0}}, "geometry"),
            ({"mesh": 5}, "mesh")
        ]
        for overrides, key_path in cases:
            with self.subTest(overrides=overrides):
                with self.assertRaises(ConfigError) as cm:
                    RunConfig.from_dict(overrides)
                self.assertEqual(cm.exception.key_path, key_path)

    def test_config_error_is_value_error(self):
        self.assertRaises(ValueError,
            lambda: RunConfig.from_dict({"mesh": {"ny": -3}}))

    def test_eig_f(self):
        config = RunConfig.from_dict({"eig_f": {"n_eig": 4}})
        self.assertEqual(config.eig_f.n_eig, 4)
        # unset keys fall back to the eig defaults
        self.assertEqual(config.eig_f.n_oversample, 10)
        self.assertEqual(config.eig.n_eig, 25)
        with self.assertRaises(ConfigError) as cm:
            RunConfig.from_dict({"eig_f": {"rank": 4}})
        self.assertEqual(cm.exception.key_path, "eig_f.rank")

    def test_hash(self):
        a = RunConfig.from_dict({"mesh": {"nx": 8, "ny": 6},
            "chance": {"p": 6.0}})
        b = RunConfig.from_dict({"chance": {"p": 6.0},
            "mesh": {"ny": 6, "nx": 8}})
        self.assertEqual(a.hash, b.hash)
        self.assertNotEqual(a.hash, RunConfig.from_dict().hash)
        # explicit defaults hash like omitted ones
        self.assertEqual(RunConfig.from_dict({"mesh": {"nx": 20}}).hash,
            RunConfig.from_dict().hash)

    def test_replace(self):
        config = RunConfig.from_dict({"mesh": {"nx": 8}})
        replaced = config.replace({"mesh": {"ny": 5}})
        self.assertEqual(replaced.mesh, {"nx": 8, "ny": 5})
        self.assertEqual(config.mesh, {"nx": 8, "ny": 20})
        self.assertRaises(ConfigError,
            lambda: config.replace({"mesh": {"nz": 5}}))

    def test_to_dict_round_trip(self):
        config = RunConfig.from_dict({"sampling": {"seed": 7}})
        data = config.to_dict()
        data["sampling"]["seed"] = 8
        self.assertEqual(config.sampling["seed"], 7)
        self.assertEqual(RunConfig.from_dict(config.to_dict()).hash,
            config.hash)

    def test_load(self):
        config = RunConfig.load(CONFIGS / "coarse.json")
        self.assertEqual(config.mesh, {"nx": 5, "ny": 4})
        with TemporaryDirectory() as tmp:
            missing = Path(tmp) / "missing.json"
            self.assertRaises(ConfigError, lambda: RunConfig.load(missing))
            bad = Path(tmp) / "bad.json"
            bad.write_text("{\"mesh\": ")
            with self.assertRaises(ConfigError) as cm:
                RunConfig.load(bad)
            self.assertEqual(cm.exception.key_path, "<file>")
            listing = Path(tmp) / "list.json"
            listing.write_text("[1, 2]")
            self.assertRaises(ConfigError, lambda: RunConfig.load(listing))

    def test_shipped_configs(self):
        for path in sorted(CONFIGS.glob("*.json")):
            with self.subTest(config=path.name):
                RunConfig.load(path)


class TestOutput(TestCase):

    def test_precedence(self):
        config = RunConfig.from_dict()
        configured = RunConfig.from_dict({"output": {"directory": "a"}})
        with patch.dict(os.environ, {OUTPUT_ENV: "b"}):
            self.assertEqual(config.output_root(), Path("b"))
            self.assertEqual(configured.output_root(), Path("a"))
            self.assertEqual(configured.output_root("c"), Path("c"))
        with patch.dict(os.environ, clear=True):
            self.assertEqual(config.output_root(), Path(DEFAULT_OUTPUT))

    def test_run_directory(self):
        config = RunConfig.from_dict()
        path = config.run_directory("optimize", "out")
        self.assertEqual(path, Path("out") / f"optimize-{config.hash[:12]}")


class TestRunManifest(TestCase):

    def test_write(self):
        with TemporaryDirectory() as tmp:
            root = Path(tmp)
            data = root / "data.txt"
            data.write_text("abc")
            manifest = RunManifest("solve-forward", "0" * 64)
            manifest.add_file(data, root)
            path = manifest.write(root)
            with open(path) as f:
                written = json.load(f)
        self.assertEqual(written["command"], "solve-forward")
        self.assertEqual(written["files"], [{"path": "data.txt", "sha256":
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"}])
        self.assertIsNotNone(written["finished"])
