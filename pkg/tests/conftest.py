import time
from types import SimpleNamespace

import pytest

from mfgrowth.fixedpoint import SolverConfig, solve
from mfgrowth.model import ModelParams
from mfgrowth.sim import TimeGrid, sample_noise, simulate


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full benchmark-scale training run shared by the acceptance
    tests: default two-sector calibration, 45-year horizon, 90 steps,
    64 common-noise scenarios with 16 paths each, plus a fresh evaluation
    batch simulated under the trained policy."""
    params = ModelParams.default()
    config = SolverConfig(max_outer_iterations=8, policy_steps=300,
                          regression_steps=400, scenarios=64,
                          paths_per_scenario=16, n_steps=90,
                          hidden_layers=(20, 20, 20),
                          validation_interval=50, seed=0)
    out_dir = str(tmp_path_factory.mktemp("desk"))
    started = time.perf_counter()
    solution = solve(params, config, out_dir=out_dir)
    elapsed = time.perf_counter() - started
    grid = TimeGrid(params.T, config.n_steps)
    noise = sample_noise(grid, config.scenarios,
                         config.paths_per_scenario, (config.seed, 7),
                         params)
    paths = simulate(solution.policy, solution.r_field, noise, params,
                     grid)
    return SimpleNamespace(params=params, config=config,
                           solution=solution, grid=grid, paths=paths,
                           out_dir=out_dir, train_seconds=elapsed)
