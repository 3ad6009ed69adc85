import csv

import numpy as np
import pytest

from mfgrowth import autodiff as ad
from mfgrowth import model, sim
from mfgrowth.model import ModelParams
from mfgrowth.sim import (NoiseBatch, SimulationError, TimeGrid,
                          empirical_quantiles, estimate_objective,
                          export_paths, sample_noise, simulate,
                          simulate_externality_paths)


def zero_field(t, p):
    return np.zeros_like(p)


def depreciation_policy(params):
    """a = delta * k: freezes the capital drift."""

    def policy(t, p, k, tape=None):
        return params.delta * ad.value(k)

    return policy


def constant_policy(level):
    def policy(t, p, k, tape=None):
        return np.full_like(ad.value(k), level)

    return policy


def softmax_policy(net, params):
    """Network head used by the trained solver: simplex split of output
    logits, investment = inner shares times a fixed fraction of output."""
    margin = 1.0 - 1e-3

    def policy(t, p, k, tape=None):
        rows = ad.value(k).shape[0]
        tcol = np.full((rows, 1), t / params.T)
        x = ad.concat_cols([tcol, p, k])
        z = ad.forward(net, x, tape)
        s = ad.softmax(z)
        scale = model.production(k, p, params) * margin
        return ad.col_slice(s, 0, params.n) * ad.reshape(
            scale, (rows, 1))

    return policy


@pytest.fixture
def params():
    return ModelParams.default()


@pytest.fixture
def small_params():
    return ModelParams(n=1, d=1, T=1.0)


@pytest.fixture
def grid():
    return TimeGrid(1.0, 4)


class TestTimeGrid:
    def test_dt_and_times(self):
        g = TimeGrid(2.0, 8)
        assert g.dt == 0.25
        np.testing.assert_allclose(g.times, np.arange(9) * 0.25)
        assert g.times[-1] == 2.0

    @pytest.mark.parametrize("bad", [dict(horizon=0.0, n_steps=4),
                                     dict(horizon=-1.0, n_steps=4),
                                     dict(horizon=1.0, n_steps=0),
                                     dict(horizon=1.0, n_steps=-3)])
    def test_rejects_degenerate(self, bad):
        with pytest.raises(ValueError):
            TimeGrid(**bad)


class TestSampleNoise:
    def test_shapes_and_seed_echo(self, params, grid):
        batch = sample_noise(grid, 3, 5, 11, params)
        assert batch.common.shape == (3, 4, params.d)
        assert batch.idiosyncratic.shape == (3, 5, 4, params.n)
        assert batch.scenarios == 3
        assert batch.paths_per_scenario == 5
        assert batch.seed == (11,)

    def test_deterministic_and_seed_sensitive(self, params, grid):
        a = sample_noise(grid, 2, 3, 7, params)
        b = sample_noise(grid, 2, 3, 7, params)
        c = sample_noise(grid, 2, 3, 8, params)
        np.testing.assert_array_equal(a.common, b.common)
        np.testing.assert_array_equal(a.idiosyncratic, b.idiosyncratic)
        assert not np.array_equal(a.common, c.common)

    def test_tuple_seed_matches_plain_int(self, params, grid):
        a = sample_noise(grid, 2, 2, 7, params)
        b = sample_noise(grid, 2, 2, (7,), params)
        np.testing.assert_array_equal(a.common, b.common)
        np.testing.assert_array_equal(a.idiosyncratic, b.idiosyncratic)

    def test_scenarios_are_stable_under_batch_growth(self, params, grid):
        # each scenario owns its own substream, so enlarging the batch
        # must not reshuffle the scenarios already drawn
        small = sample_noise(grid, 2, 3, 19, params)
        big = sample_noise(grid, 5, 3, 19, params)
        np.testing.assert_array_equal(big.common[:2], small.common)
        np.testing.assert_array_equal(big.idiosyncratic[:2],
                                      small.idiosyncratic)

    def test_path_prefix_stable_under_path_growth(self, params, grid):
        small = sample_noise(grid, 2, 3, 19, params)
        big = sample_noise(grid, 2, 8, 19, params)
        np.testing.assert_array_equal(big.idiosyncratic[:, :3], small.idiosyncratic)

    def test_moments(self, params):
        g = TimeGrid(1.0, 4)
        batch = sample_noise(g, 2, 250, 3, params)
        draws = batch.idiosyncratic.ravel()
        count = draws.size
        assert abs(draws.mean()) < 4.0 * np.sqrt(g.dt / count)
        assert abs(draws.var() - g.dt) < 4.0 * g.dt * np.sqrt(2.0 / count)

    def test_rejects_empty(self, params, grid):
        with pytest.raises(ValueError):
            sample_noise(grid, 0, 4, 1, params)
        with pytest.raises(ValueError):
            sample_noise(grid, 4, 0, 1, params)


class TestSimulate:
    def test_shapes(self, params, grid):
        noise = sample_noise(grid, 3, 2, 0, params)
        paths = simulate(depreciation_policy(params), zero_field, noise,
                         params, grid)
        assert paths.k.shape == (3, 2, 5, params.n)
        assert paths.p.shape == (3, 5, params.d)
        assert paths.a.shape == (3, 2, 4, params.n)
        assert paths.k_vars is None
        full = paths.p_full()
        assert full.shape == (3, 2, 5, params.d)
        np.testing.assert_array_equal(full[:, 0], full[:, 1])

    def test_depreciation_policy_freezes_capital(self, grid):
        params = ModelParams(sigma=0.0)
        noise = sample_noise(grid, 2, 3, 5, params)
        paths = simulate(depreciation_policy(params), zero_field, noise,
                         params, grid)
        for i in range(grid.n_steps + 1):
            np.testing.assert_allclose(paths.k[:, :, i, :], 0.2,
                                       rtol=0, atol=1e-15)

    def test_zero_investment_closed_form(self):
        grid = TimeGrid(1.0, 10)
        params = ModelParams(n=1, d=1, sigma=0.0)
        noise = sample_noise(grid, 1, 1, 0, params)
        paths = simulate(constant_policy(0.0), zero_field, noise, params,
                         grid)
        decay = 1.0 - params.delta[0] * grid.dt
        expect = 0.2 * decay ** np.arange(11)
        np.testing.assert_allclose(paths.k[0, 0, :, 0], expect, rtol=1e-12)

    def test_pollution_matches_externality_only_run(self, params, grid):
        noise = sample_noise(grid, 4, 3, 9, params)

        def field(t, p):
            return 0.3 + 0.0 * p

        paths = simulate(depreciation_policy(params), field, noise, params,
                         grid)
        p_only = simulate_externality_paths(field, noise, params, grid)
        np.testing.assert_array_equal(paths.p, p_only)

    def test_pollution_ignores_idiosyncratic_noise(self, params, grid):
        base = sample_noise(grid, 2, 3, 1, params)
        shuffled = NoiseBatch(common=base.common,
                              idiosyncratic=-base.idiosyncratic,
                              seed=base.seed)
        a = simulate(depreciation_policy(params), zero_field, base, params,
                     grid)
        b = simulate(depreciation_policy(params), zero_field, shuffled,
                     params, grid)
        np.testing.assert_array_equal(a.p, b.p)
        assert not np.array_equal(a.k, b.k)

    def test_positivity_floors(self):
        grid = TimeGrid(1.0, 8)
        # depreciation strong enough to push Euler capital negative,
        # decay strong enough to push Euler pollution negative
        params = ModelParams(n=1, d=1, delta=9.0, sigma=0.0, gamma=0.0,
                             ext_coupling=0.0, ext_decay=9.0)
        noise = sample_noise(grid, 1, 1, 0, params)
        paths = simulate(constant_policy(1e-9), zero_field, noise, params,
                         grid)
        assert paths.k.min() >= sim.FLOOR_K
        assert paths.p.min() >= 0.0
        assert paths.p[0, -1, 0] == 0.0

    def test_nan_policy_reports_location(self, params, grid):
        noise = sample_noise(grid, 2, 3, 4, params)

        def bad_policy(t, p, k, tape=None):
            a = params.delta * ad.value(k)
            if t >= 0.5:
                a[4] = np.nan  # flat row 4 = scenario 1, path 1
            return a

        with pytest.raises(SimulationError) as err:
            simulate(bad_policy, zero_field, noise, params, grid)
        assert err.value.scenario == 1
        assert err.value.path == 1
        assert err.value.step == 3

    def test_mismatched_field_shape_rejected(self, params, grid):
        noise = sample_noise(grid, 2, 2, 0, params)

        def bad_field(t, p):
            return np.zeros(3)

        with pytest.raises(ValueError):
            simulate(depreciation_policy(params), bad_field, noise, params,
                     grid)

    def test_mismatched_grid_rejected(self, params, grid):
        noise = sample_noise(grid, 2, 2, 0, params)
        with pytest.raises(ValueError):
            simulate(depreciation_policy(params), zero_field, noise, params,
                     TimeGrid(1.0, 5))


class TestEstimateObjective:
    def test_one_step_by_hand(self):
        grid = TimeGrid(0.5, 1)
        params = ModelParams(n=1, d=1, sigma=0.0, gamma=0.0, T=0.5,
                             production_floor=0.0)
        noise = sample_noise(grid, 1, 1, 0, params)
        level = 0.05

        def field(t, p):
            return np.full_like(p, 0.1)

        paths = simulate(constant_policy(level), field, noise, params,
                         grid)
        got = estimate_objective(paths, None, params, grid)

        # independent reconstruction from the closed forms
        k0, p0, dt = 0.2, 0.1, 0.5
        b1 = 1.0 / (1.0 + np.exp(0.5 * p0 - 0.1))
        F0 = (b1 * k0) ** 0.3
        flow = (F0 - level) ** 0.8 + 0.1 * (-level * np.log(level))
        k1 = k0 + (level - 0.1 * k0) * dt
        p1 = p0 + (0.3 * 0.1 - 0.1 * p0) * dt
        b1_T = 1.0 / (1.0 + np.exp(0.5 * p1 - 0.1))
        FT = (b1_T * k1) ** 0.3
        g = FT ** 0.8 * np.exp(-0.1 * 0.5) / 0.1
        expect = dt * flow + g * np.exp(-0.1 * 0.5)
        np.testing.assert_allclose(got, expect, rtol=1e-12)

    def test_entropy_sign_switch(self):
        grid = TimeGrid(0.5, 1)
        level = 0.05
        shared = dict(n=1, d=1, sigma=0.0, gamma=0.0, T=0.5)
        plus = ModelParams(entropy_sign=1, **shared)
        minus = ModelParams(entropy_sign=-1, **shared)
        noise = sample_noise(grid, 1, 1, 0, plus)
        paths = simulate(constant_policy(level), zero_field, noise, plus,
                         grid)
        hi = estimate_objective(paths, None, plus, grid)
        lo = estimate_objective(paths, None, minus, grid)
        gap = 2.0 * plus.theta * (-level * np.log(level)) * grid.dt
        np.testing.assert_allclose(hi - lo, gap, rtol=1e-12)

    def test_infeasible_consumption_rejected(self, params, grid):
        noise = sample_noise(grid, 1, 1, 0, params)
        paths = simulate(constant_policy(5.0), zero_field, noise, params,
                         grid)
        with pytest.raises(ValueError, match="infeasible"):
            estimate_objective(paths, None, params, grid)

    def test_empty_batch_rejected(self, params, grid):
        noise = sample_noise(grid, 1, 1, 0, params)
        paths = simulate(depreciation_policy(params), zero_field, noise,
                         params, grid)
        paths.k = paths.k[:0]
        with pytest.raises(ValueError, match="empty"):
            estimate_objective(paths, None, params, grid)

    def test_grid_mismatch_rejected(self, params, grid):
        noise = sample_noise(grid, 1, 1, 0, params)
        paths = simulate(depreciation_policy(params), zero_field, noise,
                         params, grid)
        with pytest.raises(ValueError):
            estimate_objective(paths, None, params, TimeGrid(1.0, 6))

    def test_more_paths_reduce_dispersion(self):
        grid = TimeGrid(1.0, 4)
        params = ModelParams(n=1, d=1, gamma=0.0, sigma=0.5)
        policy = depreciation_policy(params)

        def spread(paths_per_scenario):
            vals = []
            for s in range(24):
                noise = sample_noise(grid, 1, paths_per_scenario,
                                     (100, s), params)
                paths = simulate(policy, zero_field, noise, params, grid)
                vals.append(estimate_objective(paths, None, params, grid))
            return np.std(vals)

        # quadrupling the paths should roughly halve the Monte Carlo
        # noise; allow a generous band around the 1/2 ratio
        ratio = spread(32) / spread(8)
        assert 0.25 < ratio < 0.85


class TestPathwiseGradient:
    def test_matches_finite_differences(self):
        grid = TimeGrid(0.5, 2)
        params = ModelParams(n=1, d=1, T=0.5)
        noise = sample_noise(grid, 2, 2, 42, params)
        rng = np.random.default_rng(7)
        net = ad.Mlp.initialize([3, 4, 2], rng)
        policy = softmax_policy(net, params)

        tape = ad.Tape()
        paths = simulate(policy, zero_field, noise, params, grid, tape=tape)
        assert paths.k_vars is not None
        total = estimate_objective(paths, policy, params, grid)
        assert isinstance(total, ad.Var)
        tape.backward(total)
        grads = [v.grad.copy() for v in net.parameter_vars(tape)]

        def objective_at(flat):
            shapes = [p.shape for p in net.parameters()]
            rebuilt, at = [], 0
            for shape in shapes:
                size = int(np.prod(shape))
                rebuilt.append(flat[at:at + size].reshape(shape))
                at += size
            probe = net.clone()
            probe.set_parameters(rebuilt)
            probe_policy = softmax_policy(probe, params)
            run = simulate(probe_policy, zero_field, noise, params, grid)
            return estimate_objective(run, None, params, grid)

        flat0 = np.concatenate([p.ravel() for p in net.parameters()])
        flat_grad = np.concatenate([g.ravel() for g in grads])
        h = 1e-6
        for j in range(flat0.size):
            bump = np.zeros_like(flat0)
            bump[j] = h
            fd = (objective_at(flat0 + bump)
                  - objective_at(flat0 - bump)) / (2 * h)
            assert abs(fd - flat_grad[j]) <= 1e-4 * max(1.0, abs(fd)), \
                f"weight {j}: fd={fd}, ad={flat_grad[j]}"

    def test_taped_objective_value_matches_plain(self):
        grid = TimeGrid(0.5, 2)
        params = ModelParams(n=1, d=1, T=0.5)
        noise = sample_noise(grid, 2, 2, 8, params)
        net = ad.Mlp.initialize([3, 4, 2], np.random.default_rng(0))
        policy = softmax_policy(net, params)
        plain = estimate_objective(
            simulate(policy, zero_field, noise, params, grid),
            None, params, grid)
        tape = ad.Tape()
        taped = estimate_objective(
            simulate(policy, zero_field, noise, params, grid, tape=tape),
            None, params, grid)
        np.testing.assert_allclose(ad.value(taped), plain, rtol=1e-14)


class TestEmpiricalQuantiles:
    def test_known_sample(self):
        data = np.arange(5.0).reshape(5, 1)  # 0..4 down the scenario axis
        q = empirical_quantiles(data, [0.5])
        assert q.shape == (1, 1)
        assert q[0, 0] == 2.0

    def test_interpolated_quantile(self):
        data = np.array([[0.0], [1.0]])
        np.testing.assert_allclose(
            empirical_quantiles(data, [0.25])[0, 0], 0.25)

    def test_monotone_in_level(self, params):
        rng = np.random.default_rng(0)
        data = rng.gamma(2.0, size=(40, 7))
        q = empirical_quantiles(data, [0.05, 0.5, 0.95])
        assert np.all(q[0] <= q[1]) and np.all(q[1] <= q[2])

    def test_preserves_trailing_shape(self):
        data = np.random.default_rng(1).normal(size=(30, 6, 2))
        q = empirical_quantiles(data, [0.1, 0.9])
        assert q.shape == (2, 6, 2)

    @pytest.mark.parametrize("levels", [[0.0], [1.0], [-0.1], [1.5]])
    def test_rejects_levels_outside_open_interval(self, levels):
        with pytest.raises(ValueError):
            empirical_quantiles(np.ones((3, 2)), levels)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            empirical_quantiles(np.zeros((0, 4)), [0.5])


class TestExportPaths:
    def test_round_trip(self, tmp_path, params, grid):
        noise = sample_noise(grid, 2, 2, 3, params)
        paths = simulate(depreciation_policy(params), zero_field, noise,
                         params, grid)
        out = tmp_path / "paths.csv"
        export_paths(paths, out, comment="seed=3")
        lines = out.read_text().splitlines()
        assert lines[0] == "# seed=3"
        header = lines[1].split(",")
        assert header == ["scenario", "path", "step", "t",
                          "k1", "k2", "p1", "a1", "a2"]
        rows = list(csv.DictReader(lines[1:]))
        assert len(rows) == 2 * 2 * (grid.n_steps + 1)
        first = rows[0]
        assert float(first["k1"]) == 0.2
        assert float(first["t"]) == 0.0
        # terminal rows carry no controls
        last = rows[grid.n_steps]
        assert last["a1"] == "" and last["a2"] == ""
        mid = rows[1]
        np.testing.assert_allclose(float(mid["p1"]), paths.p[0, 1, 0])
