"""Outer fixed-point loop: train the policy against a frozen aggregate
emission field, re-estimate the field from the induced paths, average the
estimates fictitious-play style, and stop once the pollution paths the field
generates settle down.

The aggregate field after j rounds is the running average of all regression
fits so far, seeded with the zero function.  By default every past network
is evaluated at the query point handed in by the simulator, which keeps the
field a genuine function of (t, p); a config flag switches to a tabulated
variant that freezes each round's own scenario paths instead and averages
the values recorded along them (cheap, but only defined on a matching
scenario batch; useful for small-scale comparisons).
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import model
from .sim import (TimeGrid, estimate_objective, sample_noise, simulate,
                  simulate_externality_paths)

CONSUMPTION_MARGIN = 1e-3


class TrainingAbort(RuntimeError):
    """Non-finite loss during gradient training; carries the batch seed."""

    def __init__(self, kind, batch_seed, step):
        self.kind = kind
        self.batch_seed = batch_seed
        self.step = step
        super().__init__(f"{kind} training hit a non-finite loss at step "
                         f"{step}; offending batch seed {batch_seed}")


@dataclass
class SolverConfig:
    """Knobs of the outer loop.

    `stop_tol` left as None resolves to 1e-4 * d * n_steps, which scales
    the path-distance threshold with the number of summands in the metric.
    Gradient-step counts may be zero (a no-op pass); everything else must
    be at least one.
    """

    max_outer_iterations: int = 50
    policy_steps: int = 500
    regression_steps: int = 500
    scenarios: int = 64
    paths_per_scenario: int = 16
    n_steps: int = 90
    stop_tol: float = None
    learning_rate: float = 1e-3
    fictitious: bool = True
    literal_field: bool = False
    hidden_layers: tuple = (20, 20, 20)
    validation_interval: int = 25
    seed: int = 0

    def __post_init__(self):
        for name in ("max_outer_iterations", "scenarios",
                     "paths_per_scenario", "n_steps", "validation_interval"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
            setattr(self, name, int(getattr(self, name)))
        for name in ("policy_steps", "regression_steps"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be nonnegative")
            setattr(self, name, int(getattr(self, name)))
        if self.stop_tol is not None and not (self.stop_tol > 0):
            raise ValueError("stop_tol must be positive when given")
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        if self.literal_field and not self.fictitious:
            raise ValueError("the tabulated field variant is defined only "
                             "with fictitious averaging on")
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be at least 1")

    def resolved_stop_tol(self, params):
        if self.stop_tol is not None:
            return float(self.stop_tol)
        return 1e-4 * params.d * self.n_steps


class PolicyNetwork:
    """Feedback investment rule a(t, p, k) with feasibility built in.

    The network emits n+1 logits; their softmax splits a fixed fraction
    (1 - margin) of current production between the n investments and a
    consumption remainder, so c > margin * F(k, p) > 0 pointwise whatever
    the weights are.  Inputs are (t/T, p, k).
    """

    def __init__(self, params, hidden_layers, rng):
        self.params = params
        dims = [1 + params.d + params.n, *hidden_layers, params.n + 1]
        self.net = ad.Mlp.initialize(dims, rng)

    def __call__(self, t, p, k, tape=None):
        rows = ad.value(k).shape[0]
        tcol = np.full((rows, 1), float(t) / self.params.T)
        x = ad.concat_cols([tcol, p, k])
        shares = ad.softmax(ad.forward(self.net, x, tape))
        budget = model.production(k, p, self.params) \
            * (1.0 - CONSUMPTION_MARGIN)
        return ad.col_slice(shares, 0, self.params.n) \
            * ad.reshape(budget, (rows, 1))


class RegressionNet:
    """Estimate of the scenario-conditional mean emission, as a function
    of (t/T, p)."""

    def __init__(self, params, hidden_layers, rng):
        self.params = params
        dims = [1 + params.d, *hidden_layers, params.d]
        self.net = ad.Mlp.initialize(dims, rng)

    def features(self, t, p):
        p = np.asarray(p, dtype=float)
        tcol = np.full(p.shape[:-1] + (1,), float(t) / self.params.T)
        return np.concatenate([tcol, p], axis=-1)

    def __call__(self, t, p):
        return ad.forward(self.net, self.features(t, p))

    def clone(self):
        out = RegressionNet.__new__(RegressionNet)
        out.params = self.params
        out.net = self.net.clone()
        return out


class AveragedField:
    """Uniform average of the history networks at the queried point;
    None entries stand for the zero function."""

    def __init__(self, nets):
        if not nets:
            raise ValueError("empty history")
        self.nets = list(nets)

    def __call__(self, t, p):
        p = np.asarray(p, dtype=float)
        total = np.zeros_like(p)
        for net in self.nets:
            if net is not None:
                total = total + net(t, p)
        return total / len(self.nets)


class TabulatedField:
    """Average of per-round predictions frozen along each round's own
    scenario paths; a function of (t, scenario) rather than (t, p)."""

    def __init__(self, times, table_sum, count):
        self.times = times
        self.table = table_sum / count

    def __call__(self, t, p):
        p = np.asarray(p, dtype=float)
        idx = int(round(float(t) / self.times[-1] * (len(self.times) - 1)))
        row = self.table[:, idx, :]
        if row.shape != p.shape:
            raise ValueError("tabulated field queried on a batch of "
                             f"{p.shape[0]} scenarios, built for "
                             f"{row.shape[0]}")
        return row


@dataclass
class IterationState:
    """Mutable loop state: the warm-started networks, the field history,
    and the frozen validation batch behind the stopping metric."""

    policy: PolicyNetwork
    policy_adam: ad.AdamState
    regression: RegressionNet
    regression_adam: ad.AdamState
    history: list
    validation_noise: object
    params: object
    grid: TimeGrid
    config: SolverConfig
    j: int = 0
    literal_sum: np.ndarray = None

    @classmethod
    def initialize(cls, params, config):
        grid = TimeGrid(params.T, config.n_steps)
        policy = PolicyNetwork(
            params, config.hidden_layers,
            np.random.default_rng(np.random.SeedSequence(
                (config.seed, 4))))
        regression = RegressionNet(
            params, config.hidden_layers,
            np.random.default_rng(np.random.SeedSequence(
                (config.seed, 5))))
        validation = sample_noise(grid, config.scenarios,
                                  config.paths_per_scenario,
                                  (config.seed, 0), params)
        state = cls(policy=policy,
                    policy_adam=ad.AdamState.for_params(
                        policy.net.parameters(), lr=config.learning_rate),
                    regression=regression,
                    regression_adam=ad.AdamState.for_params(
                        regression.net.parameters(),
                        lr=config.learning_rate),
                    history=[None],
                    validation_noise=validation,
                    params=params, grid=grid, config=config)
        if config.literal_field:
            state.literal_sum = np.zeros(
                (config.scenarios, config.n_steps + 1, params.d))
        return state


def validation_objective(state, r_field):
    """Objective of the current policy on the frozen validation batch."""
    paths = simulate(state.policy, r_field, state.validation_noise,
                     state.params, state.grid)
    return estimate_objective(paths, None, state.params, state.grid)


def train_policy(r_field, state, config):
    """Ascend the simulated objective for the configured number of steps.

    Every step draws a fresh noise batch; the parameters kept at the end
    are the ones with the best objective seen on the frozen validation
    batch (checked at the start, every `validation_interval` steps, and
    after the last step), so a late divergence cannot erase progress.
    """
    net = state.policy.net
    best_obj = validation_objective(state, r_field)
    best_params = [p.copy() for p in net.parameters()]
    for step in range(config.policy_steps):
        batch_seed = (config.seed, 1, state.j, step)
        noise = sample_noise(state.grid, config.scenarios,
                             config.paths_per_scenario, batch_seed,
                             state.params)
        tape = ad.Tape()
        paths = simulate(state.policy, r_field, noise, state.params,
                         state.grid, tape=tape)
        try:
            total = estimate_objective(paths, state.policy, state.params,
                                       state.grid)
        except ValueError:
            # a saturated policy head can emit exact-zero investment,
            # which the objective rejects as infeasible
            raise TrainingAbort("policy", batch_seed, step)
        if not np.isfinite(ad.value(total)):
            raise TrainingAbort("policy", batch_seed, step)
        tape.backward(total)
        leaves = net.parameter_vars(tape)
        grads = [-leaf.grad for leaf in leaves]  # ascent
        new_params, _ = ad.adam_step(net.parameters(), grads,
                                     state.policy_adam)
        net.set_parameters(new_params)
        last = step == config.policy_steps - 1
        if last or (step + 1) % config.validation_interval == 0:
            obj = validation_objective(state, r_field)
            if obj > best_obj:
                best_obj = obj
                best_params = [p.copy() for p in net.parameters()]
    net.set_parameters(best_params)
    return net.parameters()


def regression_data(paths, params, grid):
    """Features (t/T, p) and within-scenario mean emission labels over the
    interior and terminal grid times (the initial time carries no
    information: p there is the known starting point)."""
    S, M, _, _ = paths.k.shape
    feats, labels = [], []
    for i in range(1, grid.n_steps + 1):
        emit = model.phi(paths.k[:, :, i, :], params)
        labels.append(emit.mean(axis=1))
        tcol = np.full((S, 1), grid.times[i] / grid.horizon)
        feats.append(np.concatenate([tcol, paths.p[:, i, :]], axis=-1))
    return np.concatenate(feats, axis=0), np.concatenate(labels, axis=0)


def train_regression(paths, params, config, state=None):
    """Fit the conditional-mean-emission network to a simulated batch.

    Full-batch Adam on the mean squared error; returns the parameters with
    the best loss seen, evaluated every `validation_interval` steps.  With
    a `state`, training warm-starts from (and writes back to) the state's
    regression network; otherwise a fresh network is initialized from the
    config seed.

    The returned fit never does worse than the best constant predictor: if
    the gradient steps end above that benchmark (short budgets, bad init),
    the output layer is collapsed onto the label mean, which meets the
    benchmark exactly.
    """
    if state is not None:
        reg, adam = state.regression, state.regression_adam
        grid = state.grid
    else:
        grid = paths.grid
        reg = RegressionNet(params, config.hidden_layers,
                            np.random.default_rng(np.random.SeedSequence(
                                (config.seed, 5))))
        adam = ad.AdamState.for_params(reg.net.parameters(),
                                       lr=config.learning_rate)
    X, Y = regression_data(paths, params, grid)

    def mse_of(net):
        pred = ad.forward(net, X)
        return float(np.mean((pred - Y) ** 2))

    best = mse_of(reg.net)
    best_params = [p.copy() for p in reg.net.parameters()]
    for step in range(config.regression_steps):
        tape = ad.Tape()
        pred = ad.forward(reg.net, X, tape)
        diff = pred - Y
        loss = ad.vmean(diff * diff)
        if not np.isfinite(ad.value(loss)):
            raise TrainingAbort("regression", paths.seed, step)
        tape.backward(loss)
        leaves = reg.net.parameter_vars(tape)
        grads = [leaf.grad for leaf in leaves]
        new_params, _ = ad.adam_step(reg.net.parameters(), grads, adam)
        reg.net.set_parameters(new_params)
        last = step == config.regression_steps - 1
        if last or (step + 1) % config.validation_interval == 0:
            cur = mse_of(reg.net)
            if cur < best:
                best = cur
                best_params = [p.copy() for p in reg.net.parameters()]
    const_mse = float(np.mean((Y - Y.mean(axis=0)) ** 2))
    if best > const_mse:
        best_params = [p.copy() for p in best_params]
        best_params[-2] = np.zeros_like(best_params[-2])
        best_params[-1] = Y.mean(axis=0)
    reg.net.set_parameters(best_params)
    return reg


def fictitious_update(state):
    """Aggregate field after the current round: running average of the
    history (zero function included), or the newest fit alone when
    averaging is disabled."""
    if not state.history:
        raise ValueError("empty field history")
    if state.config.literal_field:
        return TabulatedField(state.grid.times, state.literal_sum,
                              len(state.history))
    if not state.config.fictitious:
        return AveragedField([state.history[-1]])
    return AveragedField(state.history)


def check_stop(p_new, p_old, tol):
    """Distance between two pollution path bundles on the same noise:
    sum over the grid times after zero of the scenario-mean squared
    difference (summed over components).  Stops when strictly below tol."""
    p_new = np.asarray(p_new, dtype=float)
    p_old = np.asarray(p_old, dtype=float)
    if p_new.shape != p_old.shape:
        raise ValueError(f"path shapes differ: {p_new.shape} vs "
                         f"{p_old.shape}")
    sq = ((p_new - p_old) ** 2)[:, 1:, :]
    metric = float(sq.sum(axis=-1).mean(axis=0).sum())
    return metric < tol, metric


@dataclass
class IterationRecord:
    j: int
    stop_metric: float
    validation_objective: float
    wall_time: float


@dataclass
class Solution:
    policy: PolicyNetwork
    r_field: object
    trace: list
    converged: bool
    diagnostics: dict = dc_field(default_factory=dict)


def _write_trace(out_dir, trace, comment):
    path = os.path.join(out_dir, "iterations.csv")
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["j", "stop_metric", "validation_objective",
                         "wall_time"])
        for row in trace:
            writer.writerow([row.j, row.stop_metric,
                             row.validation_objective, row.wall_time])


def solve(params, config, out_dir=None, csv_comment=None,
          record_timing=True):
    """Run the full loop and return the trained policy plus the field.

    Each outer round trains the policy against the current field, simulates
    a fresh batch under the trained policy, fits the emission regression to
    it, folds the fit into the field, and measures how far the validation
    pollution paths moved.  Hitting the iteration cap without passing the
    stopping test is reported in the diagnostics, not raised.

    `record_timing=False` writes zeros to the trace's wall-time column so
    reruns of the same seed produce byte-identical trace files.
    """
    state = IterationState.initialize(params, config)
    tol = config.resolved_stop_tol(params)
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    r_field = fictitious_update(state)
    p_prev = simulate_externality_paths(r_field, state.validation_noise,
                                        params, state.grid)
    trace = []
    converged = False
    for j in range(1, config.max_outer_iterations + 1):
        started = time.perf_counter()
        train_policy(r_field, state, config)
        batch = sample_noise(state.grid, config.scenarios,
                             config.paths_per_scenario,
                             (config.seed, 2, j), params)
        paths = simulate(state.policy, r_field, batch, params, state.grid)
        fitted = train_regression(paths, params, config, state=state)
        state.history.append(fitted.clone())
        if config.literal_field:
            state.literal_sum += _tabulate(fitted, paths.p, state.grid)
        state.j = j
        r_field = fictitious_update(state)
        p_new = simulate_externality_paths(r_field, state.validation_noise,
                                           params, state.grid)
        stop, metric = check_stop(p_new, p_prev, tol)
        record = IterationRecord(
            j=j, stop_metric=metric,
            validation_objective=validation_objective(state, r_field),
            wall_time=(time.perf_counter() - started) if record_timing
            else 0.0)
        trace.append(record)
        if out_dir is not None:
            stem = os.path.join(out_dir, "checkpoints")
            ad.save_weights(state.policy.net,
                            os.path.join(stem, f"policy_{j:03d}.txt"))
            ad.save_weights(fitted.net,
                            os.path.join(stem, f"field_{j:03d}.txt"))
            _write_trace(out_dir, trace, csv_comment)
        p_prev = p_new
        if stop:
            converged = True
            break
    if out_dir is not None:
        ad.save_weights(state.policy.net,
                        os.path.join(out_dir, "policy_final.txt"))
        _write_trace(out_dir, trace, csv_comment)
    return Solution(policy=state.policy, r_field=r_field, trace=trace,
                    converged=converged,
                    diagnostics={"iterations": len(trace),
                                 "stop_tol": tol,
                                 "seed": config.seed,
                                 "final_metric": trace[-1].stop_metric})


def _tabulate(reg, p_paths, grid):
    """Predictions of one regression net along a batch of scenario paths,
    one row per (scenario, grid time)."""
    S = p_paths.shape[0]
    out = np.empty((S, grid.n_steps + 1, p_paths.shape[-1]))
    for i in range(grid.n_steps + 1):
        out[:, i, :] = reg(grid.times[i], p_paths[:, i, :])
    return out
