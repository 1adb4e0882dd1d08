import argparse
import logging
import sys

import numpy as np

from breakguard.breakguard import VERIFICATION_SUITES, Breakguard, set_options
from breakguard.config import RunConfig, RunManifest
from breakguard.exceptions import (BreakguardException, ConfigError,
    SolverError, VerificationError)
from breakguard.export import (JsonlWriter, append_csv, write_csv,
    write_json, write_vtk)
from breakguard.optimizer import analytic_solve_count
from breakguard.random_field import (boundary_region_fraction,
    correlation_length_estimate, empirical_variance)
from breakguard.risk_estimators import (moment_convergence, reported_n_eig,
    taylor_solve_count)
from breakguard.utils import seed_streams, sigmoid

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFICATION = 4

# scalar quantities of interest of every solve-forward run, in the output root
QOI_LOG = "qoi_log.csv"
QOI_LOG_COLUMNS = ["run_id", "Q", "T_pn", "f"]


class Run:
    """
    One command invocation: the resolved config, its run directory and the
    manifest of everything written there.
    """
    def __init__(self, command, config, args):
        self.command = command
        self.config = config
        self.args = args
        self.directory = config.run_directory(command, args.output)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, config.hash)
        self.bg = Breakguard(config, workers=args.threads)
        self.file("config.json", write_json, config.to_dict())
        log.info("writing %s run to %s", command, self.directory)

    def path(self, name):
        return self.directory / name

    def file(self, name, writer, *args, **kwargs):
        path = writer(self.path(name), *args, **kwargs)
        self.manifest.add_file(path, self.directory)
        return path

    def finish(self, **extra):
        counter = self.bg.counter
        self.manifest.pde_solves = {
            "total": counter.total,
            "by_kind": counter.snapshot(),
            "covariance_applies": counter.covariance_applies,
            "factorizations": counter.factorizations
        }
        self.manifest.extra.update(extra)
        return self.manifest.write(self.directory)


def cmd_sample_field(run):
    """
    Samples of the uncertain parameter and their porosity maps, plus the
    exact marginal variance checked against an independent sample set.
    """
    bg = run.bg
    field = bg.field
    sampling = run.config.sampling
    n = sampling["n_fields"]
    gallery, diagnostics = seed_streams(sampling["seed"], 2)
    samples = bg.sample_fields(n, gallery)
    d = bg.design()
    for i, m in enumerate(samples):
        run.file(f"sample_{i:03d}.vtk", write_vtk, bg.model.param_mesh,
            {"m": m, "phi_f": sigmoid(d + m)})
    if n == 0:
        return {}

    variance = field.marginal_variance()
    summary = {
        "nominal_variance": field.config.sigma**2,
        "boundary_fraction": boundary_region_fraction(field, variance)
    }
    columns = {"variance": variance}
    n_check = sampling["n_variance_samples"]
    if n_check >= 2:
        empirical, stderr = empirical_variance(field, n_check, diagnostics)
        columns.update(empirical_variance=empirical, stderr=stderr)
        within = np.abs(empirical - variance) <= 3 * stderr
        summary["within_3_stderr"] = float(np.mean(within))

        # correlation decay from the middle of the insulator above the beam
        g = run.config.geometry
        top = g.beam_height if g.has_beam else 0.0
        origin = (g.width / 2, (top + g.height) / 2)
        reach = min(g.width, g.height - top) / 2
        distances = np.linspace(reach / 12, reach, 12)
        m = field.samples(diagnostics, n_check)
        summary["correlation_length"] = {axis: correlation_length_estimate(
            field, m, origin, i, distances) for i, axis in enumerate("xy")}

    vertices = bg.model.param_mesh.vertices
    rows = [{"x": x, "y": y, **{k: v[i] for k, v in columns.items()}}
        for i, (x, y) in enumerate(vertices)]
    run.file("marginal_variance.csv", write_csv, rows)
    return summary


def cmd_solve_forward(run):
    """
    The state at the configured design and the mean parameter.
    """
    bg = run.bg
    model = bg.model
    state = bg.solve_forward()
    fields = state.nodal_fields()
    von_mises = model.von_mises(state)
    run.file("state.vtk", write_vtk, model.mesh, fields,
        {"von_mises": von_mises})
    chance = run.config.chance
    T_pn = model.p_norm(state, chance.p)
    summary = {
        "Q": model.thermal_compliance(state),
        "Q_quadrature": model.thermal_compliance(state, "quadrature"),
        "T_pn": T_pn,
        "constraint": chance.constraint(T_pn),
        "max_von_mises": float(np.max(von_mises)),
        "theta_s_range": [float(fields["theta_s"].min()),
            float(fields["theta_s"].max())]
    }
    run.file("summary.json", write_json, summary)
    append_csv(run.directory.parent / QOI_LOG, {"run_id": run.directory.name,
        "Q": summary["Q"], "T_pn": T_pn, "f": summary["constraint"]},
        QOI_LOG_COLUMNS)
    return summary


def _spectrum(model):
    return [{"index": i + 1, "eigenvalue": lam, "partial_trace": t}
        for i, (lam, t) in enumerate(zip(model.eigenvalues,
        model.trace_history))]


def cmd_estimate_moments(run):
    """
    Moments of the configured quantity of interest by the configured
    estimator, with the eigenvalue spectrum and an optional Monte Carlo
    convergence table.
    """
    bg = run.bg
    sampling = run.config.sampling
    name = sampling["qoi"]
    estimator = sampling["estimator"]
    estimate = bg.moments(estimator, name)
    result = estimate.to_dict()
    result["qoi"] = name
    result["risk"] = estimate.risk(run.config.cost.beta_V)

    model = estimate.extra["model"]
    if model is not None:
        result["n_eig"] = model.n_eig
        result["reported_n_eig"] = reported_n_eig(model)
        result["orth_residual"] = model.orth_residual
        run.file("eigenvalues.csv", write_csv, _spectrum(model))
    if estimator == "quad":
        result["analytic_pde_solves"] = taylor_solve_count(
            bg.eig_options(name), bg.n_param)

    sizes = run.args.sizes
    if sizes:
        rows, slope = moment_convergence(bg.evaluator(name), bg.field, sizes,
            sampling["seed"], workers=bg.workers)
        run.file("moment_convergence.csv", write_csv, [
            {"M": M, "mean": mean, "error": error}
            for M, mean, error in rows])
        result["convergence_slope"] = slope
    run.file("moments.json", write_json, result)
    return {"n_pde_solves": estimate.n_pde_solves}


def cmd_verify(run):
    """
    Runs the verification suites and tabulates every finite difference
    sweep. Raises :class:`VerificationError` if any fails, after writing the
    report.
    """
    report = run.bg.verify(run.args.suites)
    run.file("report.json", write_json, report)
    rows = [{"suite": name, **row} for name, suite in report["suites"].items()
        for row in suite.get("sweeps", [])]
    if rows:
        run.file("fd_errors.csv", write_csv, rows)
    if not report["passed"]:
        run.finish(passed=False)
        raise VerificationError(report)
    return {"passed": True}


def cmd_optimize(run):
    """
    The continuation optimizer from the configured design, with a JSONL
    iteration log, the chance per continuation step, and the final design,
    its state and the eigenvalue spectra at the mean parameter.
    """
    bg = run.bg
    problem = bg.problem()
    log_path = run.path("iterations.jsonl")

    with JsonlWriter(log_path) as writer:
        def callback(entry):
            # problem.last is the evaluation at the accepted iterate
            writer.write({**entry, "chance": problem.last.chance})
        result = bg.optimize(callback=callback, problem=problem)
    run.manifest.add_file(log_path, run.directory)

    run.file("continuation.csv", write_csv, [s.to_dict() for s in
        result.steps])
    d = result.d
    run.file("design.vtk", write_vtk, bg.model.param_mesh,
        {"d": d, "phi_f": sigmoid(d + bg.field.mean)})
    state = bg.solve_forward(d)
    run.file("state.vtk", write_vtk, bg.model.mesh, state.nodal_fields(),
        {"von_mises": bg.model.von_mises(state)})
    _, tm_Q, tm_f = problem.taylor_models(d)
    run.file("eigenvalues_Q.csv", write_csv, _spectrum(tm_Q))
    run.file("eigenvalues_f.csv", write_csv, _spectrum(tm_f))
    final = result.steps[-1]
    counts = analytic_solve_count(run.config.eig, run.config.eig_f,
        bg.n_param)
    summary = {
        "steps": len(result.steps),
        "chance": final.chance,
        "cost": final.cost,
        "inner_iterations": [r.iterations for r in result.inner],
        "termination": [r.reason for r in result.inner],
        "solves_per_evaluation": counts
    }
    run.file("result.json", write_json, summary)

    if run.args.plot:
        try:
            figure = bg.convergence_graph({"Q": tm_Q.eigenvalues,
                "f": tm_f.eigenvalues}, result.steps)
        except ImportError as e:
            log.warning("skipping plot: %s", e)
        else:
            path = run.path("convergence.png")
            figure.savefig(path)
            run.manifest.add_file(path, run.directory)
    return summary


COMMANDS = {
    "sample-field": cmd_sample_field,
    "solve-forward": cmd_solve_forward,
    "estimate-moments": cmd_estimate_moments,
    "verify-gradient": cmd_verify,
    "optimize": cmd_optimize
}


def _loglevel(value):
    if value.isdigit():
        return int(value)
    level = logging.getLevelName(value.upper())
    if not isinstance(level, int):
        raise argparse.ArgumentTypeError(f"unknown log level {value}")
    return level


def build_parser():
    parser = argparse.ArgumentParser(prog="breakguard",
        description="Optimal design of thermal breaks under uncertainty.")
    parser.add_argument("--config", help="JSON run configuration. Defaults "
        "are used for anything it leaves out.")
    parser.add_argument("--threads", type=int, default=1, help="Worker "
        "threads for sample evaluation.")
    parser.add_argument("--loglevel", type=_loglevel, default=None,
        help="Log level name or number (TRACE is 5).")
    parser.add_argument("--output", help="Output root. Overrides the config "
        "and the BREAKGUARD_OUTPUT environment variable.")
    parser.add_argument("--plot", action="store_true", help="Also render "
        "convergence plots (needs matplotlib).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-field", help="Samples of the uncertain "
        "parameter.")
    p.add_argument("--samples", type=int, help="Number of samples.")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("solve-forward", help="The state at one design.")
    p.add_argument("--porosity", type=float, help="Uniform fluid fraction.")

    p = sub.add_parser("estimate-moments", help="Moments of a quantity of "
        "interest.")
    p.add_argument("--estimator", choices=["quad", "mc", "cv"])
    p.add_argument("--qoi", choices=["Q", "f"])
    p.add_argument("--samples", type=int, help="Monte Carlo sample size.")
    p.add_argument("--neig", type=int, help="Number of eigenpairs.")
    p.add_argument("--seed", type=int)
    p.add_argument("--sizes", type=int, nargs="+", help="Also tabulate the "
        "Monte Carlo mean error over these sample sizes.")

    p = sub.add_parser("verify-gradient", help="Derivative, eigensolver and "
        "moment checks.")
    p.add_argument("--suites", nargs="+", choices=VERIFICATION_SUITES)

    sub.add_parser("optimize", help="The continuation optimizer.")
    return parser


def _overrides(args):
    """
    Command line settings as config overrides, so the echoed config
    reproduces the run.
    """
    sampling = {}
    command = args.command
    if getattr(args, "samples", None) is not None:
        key = "n_fields" if command == "sample-field" else "n_samples"
        sampling[key] = args.samples
    if getattr(args, "seed", None) is not None:
        sampling["seed"] = args.seed
    if getattr(args, "estimator", None) is not None:
        sampling["estimator"] = args.estimator
    if getattr(args, "qoi", None) is not None:
        sampling["qoi"] = args.qoi
    overrides = {"sampling": sampling} if sampling else {}
    if getattr(args, "neig", None) is not None:
        overrides["eig"] = {"n_eig": args.neig}
    if getattr(args, "porosity", None) is not None:
        overrides["forward"] = {"porosity": args.porosity}
    return overrides


def run_command(args):
    config = RunConfig.load(args.config) if args.config else \
        RunConfig.from_dict()
    config = config.replace(_overrides(args))
    run = Run(args.command, config, args)
    try:
        extra = COMMANDS[args.command](run)
    except BreakguardException as e:
        if not isinstance(e, VerificationError):
            run.finish(error=str(e))
        raise
    run.finish(**(extra or {}))
    return run


def main(argv=None):
    args = build_parser().parse_args(argv)
    set_options(loglevel=args.loglevel)
    try:
        run_command(args)
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except SolverError as e:
        log.error("solver error: %s", e)
        return EXIT_SOLVER
    except VerificationError as e:
        log.error("%s", e)
        return EXIT_VERIFICATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
