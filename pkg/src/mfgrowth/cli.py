"""Command-line front end.

Four commands: `solve` runs the fixed-point training loop and persists its
artifacts, `report` turns a finished run into figure-ready CSV files,
`check` evaluates the closed-form well-posedness conditions from a config,
and `selftest` runs a quick built-in property suite.

Thread control must happen before numpy spins up its pools, so this module
keeps its imports to the standard library and pulls in the numeric stack
only inside `main` after the environment is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

EXIT_OK = 0
EXIT_CONDITION_FALSE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

REPORT_TIMES = (5.0, 10.0, 15.0, 20.0, 30.0, 45.0)
HISTOGRAM_BINS = 30


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    seed: int
    out_dir: str
    model: object
    solver: object
    contraction: object
    monotonicity: object

    def as_dict(self):
        """Plain-types view used for round-trip comparison and hashing."""
        out = {"run": {"seed": self.seed}}
        if self.out_dir is not None:
            out["run"]["out_dir"] = self.out_dir
        out["model"] = _section_dict(self.model, _MODEL_KEYS)
        out["solver"] = _section_dict(self.solver, _SOLVER_KEYS)
        analysis = {}
        if self.contraction is not None:
            analysis["contraction"] = _section_dict(self.contraction,
                                                    _CONTRACTION_KEYS)
        if self.monotonicity is not None:
            analysis["monotonicity"] = _section_dict(self.monotonicity,
                                                     _MONOTONICITY_KEYS)
        if analysis:
            out["analysis"] = analysis
        return out


_MODEL_KEYS = ("n", "d", "T", "rho", "theta", "delta", "sigma", "gamma",
               "utility_exponent", "prod_exponent", "prod_const_coeffs",
               "prod_logistic_slope", "prod_logistic_shift",
               "production_floor", "phi_matrix", "ext_coupling",
               "ext_decay", "k0", "p0", "sigma0", "entropy_sign")
_SOLVER_KEYS = ("max_outer_iterations", "policy_steps", "regression_steps",
                "scenarios", "paths_per_scenario", "n_steps", "stop_tol",
                "learning_rate", "fictitious", "literal_field",
                "hidden_layers", "validation_interval")
_CONTRACTION_KEYS = ("drift_in_emission", "drift_in_pollution",
                     "emission_map", "pollution_vol", "capital_vol",
                     "terminal_slope_in_capital",
                     "terminal_slope_in_pollution",
                     "adjoint_drift_in_capital",
                     "adjoint_drift_in_pollution",
                     "adjoint_drift_in_costate", "control_in_capital",
                     "control_in_pollution", "control_in_costate",
                     "depreciation", "discount", "horizon")
_MONOTONICITY_KEYS = ("control_convexity", "alpha_weight", "beta_weight",
                      "epsilon_split", "drift_in_emission",
                      "drift_in_pollution", "depreciation", "discount",
                      "capital_vol", "pollution_vol",
                      "cross_control_pollution", "cross_capital_pollution",
                      "entropic_weight", "horizon", "consumption_ref",
                      "prod_slope_bound", "terminal_slope_bound",
                      "target_bound", "utility_exponent")


def _plain(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    return value


def _section_dict(obj, keys):
    return {k: _plain(getattr(obj, k)) for k in keys
            if getattr(obj, k) is not None}


def _check_keys(section, data, allowed):
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")


def default_config_path():
    return os.path.join(os.path.dirname(__file__), "data", "default.toml")


def parse_config(path, seed_override=None, out_override=None):
    """Read and validate a TOML run configuration."""
    from .analysis import LipschitzConstants, MonotonicityInputs
    from .fixedpoint import SolverConfig
    from .model import ModelParams

    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}")
    _check_keys("top level", raw, ("run", "model", "solver", "analysis"))
    run = dict(raw.get("run", {}))
    _check_keys("run", run, ("seed", "out_dir"))
    model_sec = dict(raw.get("model", {}))
    _check_keys("model", model_sec, _MODEL_KEYS)
    solver_sec = dict(raw.get("solver", {}))
    _check_keys("solver", solver_sec, _SOLVER_KEYS)
    analysis_sec = dict(raw.get("analysis", {}))
    _check_keys("analysis", analysis_sec, ("contraction", "monotonicity"))

    seed = int(run.get("seed", 0)) if seed_override is None \
        else int(seed_override)
    out_dir = run.get("out_dir") if out_override is None else out_override
    try:
        model = ModelParams(**model_sec)
        solver = SolverConfig(seed=seed, **{
            k: (tuple(v) if k == "hidden_layers" else v)
            for k, v in solver_sec.items()})
        contraction = None
        if "contraction" in analysis_sec:
            sec = dict(analysis_sec["contraction"])
            _check_keys("analysis.contraction", sec, _CONTRACTION_KEYS)
            contraction = LipschitzConstants(**sec)
        monotonicity = None
        if "monotonicity" in analysis_sec:
            sec = dict(analysis_sec["monotonicity"])
            _check_keys("analysis.monotonicity", sec, _MONOTONICITY_KEYS)
            monotonicity = MonotonicityInputs(**sec)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config {path}: {exc}")
    return RunConfig(seed=seed, out_dir=out_dir, model=model,
                     solver=solver, contraction=contraction,
                     monotonicity=monotonicity)


def _toml_scalar(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r}")


def serialize_config(config, include_out_dir=True):
    """Render a RunConfig back to TOML text (stable ordering)."""
    data = config.as_dict()
    if not include_out_dir:
        data["run"].pop("out_dir", None)
    lines = []

    def emit(section, table):
        lines.append(f"[{section}]")
        for key, value in table.items():
            lines.append(f"{key} = {_toml_scalar(value)}")
        lines.append("")

    emit("run", data["run"])
    emit("model", data["model"])
    emit("solver", data["solver"])
    for name in ("contraction", "monotonicity"):
        if name in data.get("analysis", {}):
            emit(f"analysis.{name}", data["analysis"][name])
    return "\n".join(lines)


def config_hash(config):
    """Identifies the computation, so the output location is excluded."""
    return hashlib.sha256(
        serialize_config(config, include_out_dir=False)
        .encode()).hexdigest()[:12]


def _manifest_comment(config):
    return f"seed={config.seed} config_sha256={config_hash(config)}"


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mfgrowth",
        description="train, audit, and report on the mean-field growth "
                    "solver")
    parser.add_argument("--threads", type=int, default=None,
                        help="numeric thread cap (default: all cores)")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded bit-stable mode")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="run the fixed-point training "
                                         "loop")
    solve.add_argument("--config", default=None, help="TOML config path "
                       "(default: the packaged benchmark config)")
    solve.add_argument("--out", default=None, help="output directory "
                       "(overrides [run].out_dir)")
    solve.add_argument("--seed", type=int, default=None,
                       help="override [run].seed")

    report = sub.add_parser("report", help="emit figure-ready CSVs from a "
                                           "finished run")
    report.add_argument("run_dir", help="directory written by solve")
    report.add_argument("--seed", type=int, default=None,
                        help="evaluation batch seed (default: run seed)")

    check = sub.add_parser("check", help="evaluate the well-posedness "
                                         "conditions")
    check.add_argument("--config", default=None)
    check.add_argument("--out", default=None,
                       help="also write constants/slacks CSVs here")

    selftest = sub.add_parser("selftest", help="run the built-in property "
                                               "suite")
    selftest.add_argument("--inject-failure", default=None,
                          help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = 1 if args.deterministic else args.threads
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
    if args.command == "solve":
        return cmd_solve(args)
    if args.command == "report":
        return cmd_report(args)
    if args.command == "check":
        return cmd_check(args)
    return cmd_selftest(args)


def _load_config(args):
    path = args.config if args.config is not None else default_config_path()
    seed = getattr(args, "seed", None)
    out = getattr(args, "out", None)
    return parse_config(path, seed_override=seed, out_override=out)


def cmd_solve(args):
    from . import __version__, fixedpoint
    from .sim import SimulationError
    import numpy

    try:
        config = _load_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if config.out_dir is None:
        print("error: no output directory (set [run].out_dir or --out)",
              file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(config.out_dir, exist_ok=True)
    comment = _manifest_comment(config)
    with open(os.path.join(config.out_dir, "manifest.toml"), "w") as fh:
        fh.write("[meta]\n"
                 f'package_version = "{__version__}"\n'
                 f'numpy_version = "{numpy.__version__}"\n'
                 f'python_version = "{sys.version.split()[0]}"\n'
                 f'config_sha256 = "{config_hash(config)}"\n\n')
        fh.write(serialize_config(config))
    try:
        solution = fixedpoint.solve(config.model, config.solver,
                                    out_dir=config.out_dir,
                                    csv_comment=comment,
                                    record_timing=not args.deterministic)
    except (fixedpoint.TrainingAbort, SimulationError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    last = solution.trace[-1]
    status = "converged" if solution.converged else "iteration cap reached"
    print(f"{status} after {len(solution.trace)} iterations; "
          f"final stopping metric {last.stop_metric:.6g}, "
          f"validation objective {last.validation_objective:.6g}")
    return EXIT_OK


def _load_run(run_dir):
    """Rebuild (config, policy, field) from a solve directory."""
    from . import autodiff as ad
    from .fixedpoint import AveragedField, PolicyNetwork, RegressionNet
    import numpy as np

    manifest = os.path.join(run_dir, "manifest.toml")
    if not os.path.isfile(manifest):
        raise ConfigError(f"missing manifest: {manifest}")
    config = _parse_manifest(manifest)
    if config.solver.literal_field:
        raise ConfigError("tabulated-field runs cannot be re-evaluated "
                          "from weights; rerun with literal_field = false")
    policy_path = os.path.join(run_dir, "policy_final.txt")
    if not os.path.isfile(policy_path):
        raise ConfigError(f"missing final policy weights: {policy_path}")
    policy = PolicyNetwork(config.model, config.solver.hidden_layers,
                           np.random.default_rng(0))
    policy.net = ad.load_weights(policy_path)
    members = [None]
    stem = os.path.join(run_dir, "checkpoints")
    index = 1
    while os.path.isfile(os.path.join(stem, f"field_{index:03d}.txt")):
        reg = RegressionNet(config.model, config.solver.hidden_layers,
                            np.random.default_rng(0))
        reg.net = ad.load_weights(os.path.join(stem,
                                               f"field_{index:03d}.txt"))
        members.append(reg)
        index += 1
    if len(members) == 1:
        raise ConfigError(f"no field checkpoints under {stem}")
    if not config.solver.fictitious:
        members = [members[-1]]
    return config, policy, AveragedField(members)


def _parse_manifest(manifest_path):
    """The manifest doubles as a config file: its [meta] block is the only
    extra section, so strip that and reuse the parser."""
    import tempfile

    with open(manifest_path) as fh:
        lines = fh.read().splitlines()
    kept, skipping = [], False
    for line in lines:
        if line.strip().startswith("["):
            skipping = line.strip() == "[meta]"
        if not skipping:
            kept.append(line)
    with tempfile.NamedTemporaryFile("w", suffix=".toml",
                                     delete=False) as tmp:
        tmp.write("\n".join(kept))
    try:
        return parse_config(tmp.name)
    finally:
        os.unlink(tmp.name)


def cmd_report(args):
    import numpy as np

    from . import model as mdl
    from .sim import TimeGrid, empirical_quantiles, sample_noise, simulate

    try:
        config, policy, field = _load_run(args.run_dir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    params, solver = config.model, config.solver
    seed = config.seed if args.seed is None else args.seed
    grid = TimeGrid(params.T, solver.n_steps)
    noise = sample_noise(grid, solver.scenarios,
                         solver.paths_per_scenario, (seed, 7), params)
    paths = simulate(policy, field, noise, params, grid)
    comment = _manifest_comment(config)

    levels = empirical_quantiles(paths.p.sum(axis=-1), [0.05, 0.95])
    mean_p = paths.p.sum(axis=-1).mean(axis=0)
    with open(os.path.join(args.run_dir, "pollution_quantiles.csv"),
              "w") as fh:
        fh.write(f"# {comment}\n")
        fh.write("t,q05,mean,q95\n")
        for i, t in enumerate(grid.times):
            fh.write(f"{t},{levels[0, i]},{mean_p[i]},{levels[1, i]}\n")

    with open(os.path.join(args.run_dir, "scenario_pair.csv"), "w") as fh:
        fh.write(f"# {comment}\n")
        fh.write("scenario,step,t,p,b1,mean_production,mean_consumption\n")
        for s in range(min(2, solver.scenarios)):
            for i, t in enumerate(grid.times):
                p_row = paths.p[s, i]
                level = float(p_row.sum())
                b1 = float(mdl.sector_productivities(p_row, params)[0])
                k_rows = paths.k[s, :, i, :]
                F = mdl.production(k_rows,
                                   np.broadcast_to(p_row, (k_rows.shape[0],
                                                           params.d)),
                                   params)
                if i < grid.n_steps:
                    consumed = F - paths.a[s, :, i, :].sum(axis=-1)
                    c_col = f"{consumed.mean()}"
                else:
                    c_col = ""
                fh.write(f"{s},{i},{t},{level},{b1},{F.mean()},{c_col}\n")

    for t_mark in REPORT_TIMES:
        if t_mark > params.T + 1e-9:
            continue
        i = int(round(t_mark / grid.dt))
        i_ctrl = min(i, grid.n_steps - 1)
        out = os.path.join(args.run_dir,
                           f"distributions_t{int(t_mark)}.csv")
        with open(out, "w") as fh:
            fh.write(f"# {comment}\n")
            fh.write("variable,bin_low,bin_high,count\n")
            samples = {}
            for j in range(params.n):
                samples[f"k{j + 1}"] = paths.k[:, :, i, j].ravel()
                # controls live on step intervals; at the horizon the
                # last interval's investment is reported
                samples[f"a{j + 1}"] = paths.a[:, :, i_ctrl, j].ravel()
            for name, vals in samples.items():
                counts, edges = np.histogram(vals, bins=HISTOGRAM_BINS)
                for b in range(HISTOGRAM_BINS):
                    fh.write(f"{name},{edges[b]},{edges[b + 1]},"
                             f"{counts[b]}\n")
    print(f"report written to {args.run_dir}")
    return EXIT_OK


def cmd_check(args):
    from .analysis import (check_lambda_bound, check_monotonicity_example,
                           contraction_constants, format_report,
                           write_rows_csv)

    try:
        config = _load_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if config.contraction is None and config.monotonicity is None:
        print("error: config has no [analysis.contraction] or "
              "[analysis.monotonicity] section", file=sys.stderr)
        return EXIT_CONFIG
    verdicts = []
    contraction = monotonicity = lam = None
    if config.contraction is not None:
        contraction = contraction_constants(config.contraction)
        verdicts.append(contraction.verdict)
    if config.monotonicity is not None:
        monotonicity = check_monotonicity_example(config.monotonicity)
        lam = check_lambda_bound(config.monotonicity)
        verdicts.append(monotonicity.verdict)
        verdicts.append(lam.verdict)
    print(format_report(contraction, monotonicity, lam), end="")
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        comment = _manifest_comment(config)
        if contraction is not None:
            write_rows_csv(contraction.rows(),
                           os.path.join(args.out, "constants.csv"),
                           comment=comment)
        if monotonicity is not None:
            write_rows_csv(monotonicity.rows() + lam.rows(),
                           os.path.join(args.out, "slacks.csv"),
                           comment=comment)
    return EXIT_OK if all(verdicts) else EXIT_CONDITION_FALSE


def _selftest_gradient():
    import numpy as np

    from . import autodiff as ad

    rng = np.random.default_rng(0)
    net = ad.Mlp.initialize([3, 8, 2], rng)
    x = rng.normal(size=(5, 3))
    tape = ad.Tape()
    out = ad.forward(net, x, tape)
    loss = ad.vmean(out * out)
    tape.backward(loss)
    leaves = net.parameter_vars(tape)
    flat = np.concatenate([p.ravel() for p in net.parameters()])
    grads = np.concatenate([v.grad.ravel() for v in leaves])
    h = 1e-6
    for idx in rng.choice(flat.size, size=6, replace=False):
        bump = np.zeros_like(flat)
        bump[idx] = h

        def value_at(vec):
            shapes = [p.shape for p in net.parameters()]
            parts, at = [], 0
            for shape in shapes:
                size = int(np.prod(shape))
                parts.append(vec[at:at + size].reshape(shape))
                at += size
            probe = net.clone()
            probe.set_parameters(parts)
            o = ad.forward(probe, x)
            return float(np.mean(o * o))

        fd = (value_at(flat + bump) - value_at(flat - bump)) / (2 * h)
        if abs(fd - grads[idx]) > 1e-5 * max(1.0, abs(fd)):
            return f"gradient mismatch at weight {idx}"
    return None


def _selftest_root_finder():
    import numpy as np

    from . import model as mdl

    params = mdl.ModelParams.default()
    rng = np.random.default_rng(1)
    k = rng.uniform(0.05, 3.0, size=(200, 2))
    p = rng.uniform(0.0, 5.0, size=(200, 1))
    y = rng.uniform(0.0, 5.0, size=(200, 2))
    xi = mdl.solve_xi(k, p, y, params)
    F = mdl.production(k, p, params)
    if not (np.all(xi > 0) and np.all(xi < F)):
        return "investment root left its bracket"
    a = mdl.feedback_control(k, p, y, params)
    resid = y - mdl.utility_prime(F - xi, params)[..., None] \
        - params.theta * (np.log(a) + 1.0)
    if np.max(np.abs(resid)) > 1e-7:
        return "first-order condition residual too large"
    return None


def _selftest_adam():
    import numpy as np

    from . import autodiff as ad

    params = [np.zeros(3)]
    grads = [np.ones(3)]
    state = ad.AdamState.for_params(params, lr=1e-3)
    new, _ = ad.adam_step(params, grads, state)
    expect = -1e-3 * (1.0 / (1.0 + 1e-8))
    if np.max(np.abs(new[0] - expect)) > 1e-15:
        return "first step deviates from the closed form"
    return None


def _selftest_quantiles():
    import numpy as np

    from .sim import empirical_quantiles

    data = np.arange(101.0).reshape(-1, 1)
    q = empirical_quantiles(data, [0.05, 0.5, 0.95])
    if not (q[0, 0] == 5.0 and q[1, 0] == 50.0 and q[2, 0] == 95.0):
        return "quantiles of a linear ramp are off"
    if not np.all(np.diff(q[:, 0]) >= 0):
        return "quantiles not monotone in the level"
    return None


SELFTESTS = (
    ("autodiff-gradient", _selftest_gradient),
    ("investment-root-finder", _selftest_root_finder),
    ("adam-step", _selftest_adam),
    ("quantile-properties", _selftest_quantiles),
)


def cmd_selftest(args):
    import time

    failures = []
    for name, check in SELFTESTS:
        started = time.perf_counter()
        problem = check()
        if args.inject_failure == name:
            problem = "injected failure"
        elapsed = time.perf_counter() - started
        status = "ok" if problem is None else f"FAIL ({problem})"
        print(f"{name}: {status} [{elapsed:.2f}s]")
        if problem is not None:
            failures.append(name)
    if failures:
        print("failed: " + ", ".join(failures), file=sys.stderr)
        return EXIT_CONDITION_FALSE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
