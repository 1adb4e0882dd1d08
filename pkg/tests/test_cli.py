import csv
import json
from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase
from unittest.mock import patch

import numpy as np

from breakguard import plain_rect_mesh
from breakguard.cli import (EXIT_CONFIG, EXIT_OK, EXIT_VERIFICATION,
    QOI_LOG, build_parser, main)
from breakguard.export import (JsonlWriter, append_csv, read_jsonl,
    read_vtk_fields, write_csv, write_vtk)
from breakguard.exceptions import ShapeError
import breakguard.breakguard

from tests.utils import COARSE


class CLITestCase(TestCase):
    """
    Runs commands against a coarse config in a fresh output directory.
    """
    def setUp(self):
        self._tmp = TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.config = self.root / "coarse.json"
        self.config.write_text(json.dumps(COARSE))

    def tearDown(self):
        self._tmp.cleanup()

    def run_cli(self, *args, config=None):
        config = config or self.config
        return main(["--config", str(config), "--output",
            str(self.root / "runs"), *args])

    def run_directory(self):
        runs = [p for p in (self.root / "runs").iterdir() if p.is_dir()]
        self.assertEqual(len(runs), 1)
        return runs[0]

    def manifest(self, directory):
        with open(directory / "manifest.json") as f:
            return json.load(f)

    def read_csv(self, path):
        with open(path, newline="") as f:
            return list(csv.DictReader(f))


class TestCommands(CLITestCase):

    def test_sample_field_without_samples(self):
        self.assertEqual(self.run_cli("sample-field", "--samples", "0"),
            EXIT_OK)
        directory = self.run_directory()
        self.assertTrue(directory.name.startswith("sample-field-"))
        self.assertEqual(sorted(p.name for p in directory.iterdir()),
            ["config.json", "manifest.json"])
        manifest = self.manifest(directory)
        self.assertEqual([f["path"] for f in manifest["files"]],
            ["config.json"])
        with open(directory / "config.json") as f:
            self.assertEqual(json.load(f)["sampling"]["n_fields"], 0)

    def test_sample_field(self):
        self.assertEqual(self.run_cli("sample-field", "--samples", "2",
            "--seed", "3"), EXIT_OK)
        directory = self.run_directory()
        names = {p.name for p in directory.iterdir()}
        self.assertTrue({"sample_000.vtk", "sample_001.vtk",
            "marginal_variance.csv"} <= names)
        fields = read_vtk_fields(directory / "sample_000.vtk")
        np.testing.assert_allclose(fields["phi_f"],
            1 / (1 + np.exp(-(0.847 + fields["m"]))), atol=1e-3)
        manifest = self.manifest(directory)
        self.assertTrue(0.0 <= manifest["extra"]["boundary_fraction"] <= 1.0)
        self.assertIn("x", manifest["extra"]["correlation_length"])

    def test_sample_field_reproducible(self):
        self.run_cli("sample-field", "--samples", "1", "--seed", "5")
        first = (self.run_directory() / "sample_000.vtk").read_bytes()
        main(["--config", str(self.config), "--output", str(self.root /
            "again"), "sample-field", "--samples", "1", "--seed", "5"])
        again = next((self.root / "again").iterdir()) / "sample_000.vtk"
        self.assertEqual(again.read_bytes(), first)

    def test_solve_forward(self):
        self.assertEqual(self.run_cli("solve-forward", "--porosity", "0.6"),
            EXIT_OK)
        directory = self.run_directory()
        with open(directory / "summary.json") as f:
            summary = json.load(f)
        self.assertAlmostEqual(summary["Q"], summary["Q_quadrature"],
            delta=1e-8 * abs(summary["Q"]))
        fields = read_vtk_fields(directory / "state.vtk")
        self.assertEqual(fields["displacement"].shape[1], 3)
        self.assertAlmostEqual(float(np.max(fields["von_mises"])),
            summary["max_von_mises"])

        manifest = self.manifest(directory)
        self.assertEqual(manifest["pde_solves"]["total"], 1)
        paths = {f["path"] for f in manifest["files"]}
        self.assertEqual(paths, {"config.json", "state.vtk", "summary.json"})

        qoi_log = self.root / "runs" / QOI_LOG
        rows = self.read_csv(qoi_log)
        self.assertEqual(len(rows), 1)
        self.assertEqual(rows[0]["run_id"], directory.name)
        self.assertAlmostEqual(float(rows[0]["Q"]), summary["Q"],
            delta=1e-12 * abs(summary["Q"]))
        self.assertAlmostEqual(float(rows[0]["T_pn"]), summary["T_pn"],
            delta=1e-12 * summary["T_pn"])

        # a second run appends without repeating the header
        self.run_cli("solve-forward", "--porosity", "0.5")
        rows = self.read_csv(qoi_log)
        self.assertEqual(len(rows), 2)
        self.assertEqual(list(rows[1]), ["run_id", "Q", "T_pn", "f"])
        self.assertNotEqual(rows[1]["run_id"], rows[0]["run_id"])

    def test_estimate_moments(self):
        self.assertEqual(self.run_cli("estimate-moments", "--estimator",
            "quad", "--qoi", "Q"), EXIT_OK)
        directory = self.run_directory()
        with open(directory / "moments.json") as f:
            moments = json.load(f)
        self.assertEqual(moments["qoi"], "Q")
        self.assertEqual(moments["n_pde_solves"],
            moments["analytic_pde_solves"])
        self.assertGreaterEqual(moments["variance"], 0.0)
        self.assertTrue((directory / "eigenvalues.csv").exists())

    def test_verify_gradient(self):
        self.assertEqual(self.run_cli("verify-gradient", "--suites",
            "gradient"), EXIT_OK)
        directory = self.run_directory()
        with open(directory / "report.json") as f:
            report = json.load(f)
        self.assertTrue(report["passed"])
        suite = report["suites"]["gradient"]

        rows = self.read_csv(directory / "fd_errors.csv")
        self.assertEqual(list(rows[0]), ["suite", "qoi", "direction", "eps",
            "rel_error"])
        # two quantities of interest, two directions, thirteen step sizes
        self.assertEqual(len(rows), 2 * 2 * 13)
        best = {}
        for row in rows:
            key = (row["qoi"], int(row["direction"]))
            best[key] = min(best.get(key, np.inf), float(row["rel_error"]))
        for name in ("Q", "f"):
            for i, error in enumerate(suite["by_qoi"][name]):
                self.assertAlmostEqual(best[(name, i)], error,
                    delta=1e-12 * max(error, 1e-300))

    def test_optimize(self):
        self.assertEqual(self.run_cli("optimize"), EXIT_OK)
        directory = self.run_directory()
        names = {p.name for p in directory.iterdir()}
        self.assertTrue({"iterations.jsonl", "continuation.csv", "design.vtk",
            "state.vtk", "eigenvalues_Q.csv", "eigenvalues_f.csv",
            "result.json"} <= names)

        design = read_vtk_fields(directory / "design.vtk")
        self.assertTrue(np.all((design["d"] >= 0) & (design["d"] <= 1)))
        state = read_vtk_fields(directory / "state.vtk")
        for name in ("theta_s", "theta_f", "displacement", "von_mises"):
            self.assertIn(name, state)
        for name in ("Q", "f"):
            spectrum = self.read_csv(directory / f"eigenvalues_{name}.csv")
            self.assertGreater(len(spectrum), 0)
            self.assertEqual(list(spectrum[0]), ["index", "eigenvalue",
                "partial_trace"])

        with open(directory / "result.json") as f:
            result = json.load(f)
        self.assertTrue(1 <= result["steps"] <= 2)
        self.assertTrue(0.0 <= result["chance"] <= 1.0)
        paths = {f["path"] for f in self.manifest(directory)["files"]}
        self.assertIn("eigenvalues_f.csv", paths)
        self.assertIn("iterations.jsonl", paths)

    def test_same_config_same_directory(self):
        self.run_cli("sample-field", "--samples", "0")
        self.run_cli("sample-field", "--samples", "0")
        self.run_directory()


class TestExitCodes(CLITestCase):

    def test_unknown_key(self):
        bad = self.root / "bad.json"
        bad.write_text(json.dumps({"mesh": {"nz": 3}}))
        self.assertEqual(self.run_cli("solve-forward", config=bad),
            EXIT_CONFIG)
        self.assertFalse((self.root / "runs").exists())

    def test_missing_config(self):
        self.assertEqual(self.run_cli("solve-forward",
            config=self.root / "missing.json"), EXIT_CONFIG)

    def test_failed_verification(self):
        grad_m = breakguard.breakguard.grad_m

        def wrong(lin, qoi):
            return 1.5 * grad_m(lin, qoi)

        with patch("breakguard.breakguard.grad_m", wrong):
            code = self.run_cli("verify-gradient", "--suites", "gradient")
        self.assertEqual(code, EXIT_VERIFICATION)
        directory = self.run_directory()
        with open(directory / "report.json") as f:
            report = json.load(f)
        self.assertFalse(report["passed"])
        self.assertFalse(report["suites"]["gradient"]["passed"])
        self.assertFalse(self.manifest(directory)["extra"]["passed"])
        # the sweeps are tabulated even when the suite fails
        self.assertTrue((directory / "fd_errors.csv").exists())

    def test_parser(self):
        args = build_parser().parse_args(["--loglevel", "trace",
            "estimate-moments", "--sizes", "10", "20"])
        self.assertEqual(args.loglevel, 5)
        self.assertEqual(args.sizes, [10, 20])
        self.assertRaises(SystemExit, lambda: build_parser().parse_args(
            ["verify-gradient", "--suites", "everything"]))


class TestExport(TestCase):

    def setUp(self):
        self._tmp = TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.mesh = plain_rect_mesh(3, 2)

    def tearDown(self):
        self._tmp.cleanup()

    def test_vtk(self):
        n, c = self.mesh.n_vertices, self.mesh.n_cells
        scalar = np.linspace(0, 1, n)
        vector = np.column_stack([scalar, -scalar])
        path = write_vtk(self.root / "mesh.vtk", self.mesh,
            {"s": scalar, "v": vector}, {"area": np.arange(c, dtype=float)})
        fields = read_vtk_fields(path)
        np.testing.assert_array_equal(fields["s"], scalar)
        np.testing.assert_array_equal(fields["v"][:, :2], vector)
        np.testing.assert_array_equal(fields["v"][:, 2], np.zeros(n))
        np.testing.assert_array_equal(fields["area"], np.arange(c))

        # deterministic bytes
        again = write_vtk(self.root / "again.vtk", self.mesh,
            {"s": scalar, "v": vector}, {"area": np.arange(c, dtype=float)})
        self.assertEqual(path.read_bytes(), again.read_bytes())

    def test_vtk_shape(self):
        self.assertRaises(ShapeError, lambda: write_vtk(self.root / "a.vtk",
            self.mesh, {"s": np.zeros(3)}))
        self.assertRaises(ShapeError, lambda: write_vtk(self.root / "b.vtk",
            self.mesh, {"s": np.zeros((self.mesh.n_vertices, 4))}))

    def test_csv(self):
        path = write_csv(self.root / "rows.csv", [
            {"k": 1, "value": np.float64(0.5)}, {"k": 2, "value": 0.25}])
        self.assertEqual(path.read_text(), "k,value\n1,0.5\n2,0.25\n")

    def test_append_csv(self):
        path = self.root / "log.csv"
        append_csv(path, {"a": 1, "b": 2.5}, ["a", "b"])
        append_csv(path, {"a": 2, "b": np.float64(0.5)}, ["a", "b"])
        self.assertEqual(path.read_text(), "a,b\n1,2.5\n2,0.5\n")

    def test_jsonl(self):
        path = self.root / "log.jsonl"
        with JsonlWriter(path) as writer:
            writer.write({"iter": 0, "cost": np.float64(1.5)})
            writer.write({"iter": 1, "d": np.array([0.5, 0.25])})
        self.assertEqual(read_jsonl(path), [{"iter": 0, "cost": 1.5},
            {"iter": 1, "d": [0.5, 0.25]}])
