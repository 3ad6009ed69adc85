"""Batched Euler simulation of the coupled capital/pollution system.

Noise is organized as common-noise scenarios times idiosyncratic paths per
scenario: the pollution component is driven only by the scenario-level
Brownian increments (it is identical for every inner path of a scenario),
while each capital path gets its own increments.  The capital recursion can
be recorded on an autodiff tape, in which case the Monte Carlo objective is
differentiable in the policy parameters through the whole rollout
(pathwise/reparameterized gradient).  The pollution recursion is never taped:
it is driven by the frozen aggregate field, not by the policy under training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model

FLOOR_K = 1e-8
FLOOR_P = 0.0


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid over [0, horizon] with n_steps Euler steps."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("need at least one step")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def times(self):
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclass
class NoiseBatch:
    """Gaussian increments with variance dt.

    common: (scenarios, steps, d), shared by all paths of a scenario.
    idiosyncratic: (scenarios, paths_per_scenario, steps, n).
    """

    common: np.ndarray
    idiosyncratic: np.ndarray
    seed: tuple

    @property
    def scenarios(self):
        return self.common.shape[0]

    @property
    def paths_per_scenario(self):
        return self.idiosyncratic.shape[1]


def _seed_entropy(seed):
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def sample_noise(grid, scenarios, paths_per_scenario, seed, params):
    """Draw one reproducible noise batch.

    Each scenario owns two counter-based substreams (common and
    idiosyncratic), so the draws do not depend on evaluation order.
    """
    if scenarios < 1 or paths_per_scenario < 1:
        raise ValueError("need at least one scenario and one path")
    entropy = _seed_entropy(seed)
    scale = np.sqrt(grid.dt)
    N = grid.n_steps
    common = np.empty((scenarios, N, params.d))
    idio = np.empty((scenarios, paths_per_scenario, N, params.n))
    for s in range(scenarios):
        g0 = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy + (0, s))))
        common[s] = g0.normal(0.0, scale, size=(N, params.d))
        g1 = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy + (1, s))))
        idio[s] = g1.normal(0.0, scale,
                            size=(paths_per_scenario, N, params.n))
    return NoiseBatch(common=common, idiosyncratic=idio, seed=entropy)


class SimulationError(RuntimeError):
    """A state became non-finite; carries the offending location."""

    def __init__(self, scenario, path, step):
        self.scenario = scenario
        self.path = path
        self.step = step
        super().__init__(f"non-finite state at scenario={scenario}, "
                         f"path={path}, step={step}")


@dataclass
class PathBatch:
    """Simulated trajectories.

    k: (scenarios, paths, steps+1, n); p: (scenarios, steps+1, d) -- the
    pollution path is scenario-level by construction; a: (scenarios, paths,
    steps, n).  When the batch came from a recorded rollout, `k_vars` and
    `a_vars` hold the per-step taped states (entry 0 of `k_vars` is the
    constant initial condition).
    """

    k: np.ndarray
    p: np.ndarray
    a: np.ndarray
    grid: TimeGrid
    k_vars: list = None
    a_vars: list = None
    seed: tuple = None

    @property
    def scenarios(self):
        return self.k.shape[0]

    @property
    def paths_per_scenario(self):
        return self.k.shape[1]

    def p_full(self):
        """Pollution broadcast to the capital index structure."""
        S, M = self.k.shape[0], self.k.shape[1]
        return np.broadcast_to(self.p[:, None, :, :],
                               (S, M) + self.p.shape[1:])


def _check_finite(kv, pv, M, step):
    bad_k = ~np.isfinite(kv)
    if bad_k.any():
        flat = int(np.argwhere(bad_k)[0][0])
        raise SimulationError(flat // M, flat % M, step)
    bad_p = ~np.isfinite(pv)
    if bad_p.any():
        raise SimulationError(int(np.argwhere(bad_p)[0][0]), 0, step)


def simulate_externality_paths(r_field, noise, params, grid):
    """Scenario-level pollution paths only; (scenarios, steps+1, d).

    This is the cheap half of `simulate`: pollution does not feed back on
    the capital paths, so iterating it alone is enough to compare two
    aggregate fields on the same noise.
    """
    common = noise.common
    S = common.shape[0]
    dt = grid.dt
    p = np.broadcast_to(params.p0, (S, params.d)).astype(float).copy()
    out = np.empty((S, grid.n_steps + 1, params.d))
    out[:, 0] = p
    for i in range(grid.n_steps):
        e = np.asarray(r_field(grid.times[i], p), dtype=float)
        if e.shape != p.shape:
            raise ValueError(f"aggregate field returned {e.shape}, "
                             f"expected {p.shape}")
        drift = model.externality_drift(e, p, params)
        p = p + drift * dt + params.gamma * p * common[:, i, :]
        p = np.maximum(p, FLOOR_P)
        out[:, i + 1] = p
    return out


def simulate(policy, r_field, noise, params, grid, tape=None):
    """Euler rollout of capital and pollution under `policy` and `r_field`.

    policy: callable (t, p_rows, k_rows, tape) -> investment rows, where the
    rows are flattened over (scenario, path).  r_field: callable (t, p) ->
    aggregate emission estimate, scenario-level.  With a tape, the capital
    recursion is recorded so downstream functionals are differentiable in
    the policy parameters; the floors enter the tape as clamps with zero
    gradient where active.
    """
    common, idio = noise.common, noise.idiosyncratic
    S, N = common.shape[0], common.shape[1]
    M = idio.shape[1]
    if N != grid.n_steps:
        raise ValueError("noise and grid disagree on the step count")
    dt = grid.dt
    n, d = params.n, params.d

    p = np.broadcast_to(params.p0, (S, d)).astype(float).copy()
    k = np.broadcast_to(params.k0, (S * M, n)).astype(float).copy()
    p_steps = [p.copy()]
    k_steps = [k]
    a_steps = []
    for i in range(N):
        t = float(grid.times[i])
        e = np.asarray(r_field(t, p), dtype=float)
        if e.shape != p.shape:
            raise ValueError(f"aggregate field returned {e.shape}, "
                             f"expected {p.shape}")
        p_rows = np.repeat(p, M, axis=0)
        a = policy(t, p_rows, k, tape)
        dW = idio[:, :, i, :].reshape(S * M, n)
        k = k + (a - params.delta * k) * dt + params.sigma * k * dW
        k = ad.maximum_floor(k, FLOOR_K)
        p = p + model.externality_drift(e, p, params) * dt \
            + params.gamma * p * common[:, i, :]
        p = np.maximum(p, FLOOR_P)
        _check_finite(ad.value(k), p, M, i + 1)
        k_steps.append(k)
        a_steps.append(a)
        p_steps.append(p.copy())

    def as_block(steps, count):
        stacked = np.stack([ad.value(x) for x in steps], axis=0)
        return stacked.transpose(1, 0, 2).reshape(S, M, count, n)

    return PathBatch(k=as_block(k_steps, N + 1), p=np.stack(p_steps, axis=1),
                     a=as_block(a_steps, N),
                     grid=grid,
                     k_vars=k_steps if tape is not None else None,
                     a_vars=a_steps if tape is not None else None,
                     seed=noise.seed)


def estimate_objective(paths, policy, params, grid):
    """Discounted Monte Carlo objective of a simulated batch.

    Sum over steps of the mean discounted flow reward (felicity of
    consumption plus the signed entropic term) plus the mean discounted
    terminal reward.  `policy` is accepted for call-site symmetry but not
    read: the batch already carries the realized controls.  Returns a taped
    scalar when the batch was recorded, else a float.
    """
    del policy
    S, M = paths.k.shape[0], paths.k.shape[1]
    if S * M == 0:
        raise ValueError("empty path batch")
    N = grid.n_steps
    if paths.k.shape[2] != N + 1:
        raise ValueError("paths and grid disagree on the step count")
    dt = grid.dt
    taped = paths.k_vars is not None
    sign_theta = params.entropy_sign * params.theta

    def k_at(i):
        if taped:
            return paths.k_vars[i]
        return paths.k[:, :, i, :].reshape(S * M, params.n)

    def a_at(i):
        if taped:
            return paths.a_vars[i]
        return paths.a[:, :, i, :].reshape(S * M, params.n)

    running = 0.0
    for i in range(N):
        p_rows = np.repeat(paths.p[:, i, :], M, axis=0)
        k_i, a_i = k_at(i), a_at(i)
        F = model.production(k_i, p_rows, params)
        total_a = ad.vsum(a_i, axis=-1)
        c = F - total_a
        c_val = ad.value(c)
        if np.any(c_val <= 0) or np.any(ad.value(a_i) <= 0):
            raise ValueError(f"infeasible controls in the batch at step {i}")
        reward = model.utility(c, params) \
            + sign_theta * model.entropic_cost(a_i)
        running = running + ad.vmean(reward) * float(
            np.exp(-params.rho * grid.times[i]))
    p_T = np.repeat(paths.p[:, N, :], M, axis=0)
    g = model.terminal_reward(k_at(N), p_T, params)
    total = running * dt + ad.vmean(g) * float(
        np.exp(-params.rho * grid.horizon))
    return total if taped else float(total)


def empirical_quantiles(p_paths, levels):
    """Per-time empirical quantiles across scenarios (axis 0), linearly
    interpolated between order statistics."""
    p_paths = np.asarray(p_paths, dtype=float)
    if p_paths.size == 0:
        raise ValueError("empty path array")
    levels = np.atleast_1d(np.asarray(levels, dtype=float))
    if np.any(levels <= 0) or np.any(levels >= 1):
        raise ValueError("quantile levels must lie in (0, 1)")
    return np.quantile(p_paths, levels, axis=0, method="linear")


def export_paths(paths, path, comment=None):
    """Write a batch to CSV with one row per (scenario, path, step).

    Control columns are empty on the final row of each path: controls live
    on the step intervals, not at the terminal time.
    """
    S, M = paths.scenarios, paths.paths_per_scenario
    N = paths.grid.n_steps
    n = paths.k.shape[-1]
    d = paths.p.shape[-1]
    times = paths.grid.times
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["scenario", "path", "step", "t"]
                        + [f"k{j + 1}" for j in range(n)]
                        + [f"p{j + 1}" for j in range(d)]
                        + [f"a{j + 1}" for j in range(n)])
        for s in range(S):
            for m in range(M):
                for i in range(N + 1):
                    a_cols = (list(paths.a[s, m, i]) if i < N
                              else [""] * n)
                    writer.writerow([s, m, i, times[i]]
                                    + list(paths.k[s, m, i])
                                    + list(paths.p[s, i]) + a_cols)
