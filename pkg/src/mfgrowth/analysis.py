"""Closed-form well-posedness checks and solver diagnostics.

The contraction report evaluates the horizon-dependent constants whose
composite below one guarantees a unique equilibrium; the monotonicity report
evaluates the three diagonal-dominance inequalities of the quadratic
example, plus the lower bound on the running-cost convexity.  Both work on
user-supplied Lipschitz bounds: the sampled estimator at the bottom is a
convenience and is empirical, not certified.

The solver diagnostics are independent of the training stack: a costate
recursion check for deterministic instances and a dynamic-programming value
oracle on a capital grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import model
from .sim import FLOOR_K, FLOOR_P


@dataclass(frozen=True)
class LipschitzConstants:
    """User-supplied Lipschitz bounds of the coupled system's maps.

    Names follow the role of each map: `drift_in_emission` bounds the
    pollution drift's sensitivity to the aggregate emission, `adjoint_*`
    bound the costate drift, `control_*` the feedback-control map, and the
    `terminal_slope_*` pair bounds the terminal reward gradient.
    `depreciation` enters the scalar formulas as the worst (smallest
    damping) sector, i.e. use min over sectors when rates differ.
    """

    drift_in_emission: float
    drift_in_pollution: float
    emission_map: float
    pollution_vol: float
    capital_vol: float
    terminal_slope_in_capital: float
    terminal_slope_in_pollution: float
    adjoint_drift_in_capital: float
    adjoint_drift_in_pollution: float
    adjoint_drift_in_costate: float
    control_in_capital: float
    control_in_pollution: float
    control_in_costate: float
    depreciation: float
    discount: float
    horizon: float
    empirical: bool = False

    def __post_init__(self):
        for f in dc_fields(self):
            if f.name == "empirical":
                continue
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and nonnegative")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")


@dataclass(frozen=True)
class ContractionReport:
    """The five propagation constants, the damping exponent under both of
    its published readings, and the fixed-point verdict.

    verdict is the conservative one: true only when the composite stays
    below one under BOTH exponent variants.
    """

    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    nu: float
    composite: float
    nu_alt: float
    c2_alt: float
    c3_alt: float
    composite_alt: float
    verdict: bool

    def rows(self):
        return [(f.name, getattr(self, f.name)) for f in dc_fields(self)]


def _growth_integral(nu, horizon):
    """integral of exp(nu*s) over [0, horizon] = (e^{nu*T} - 1)/nu, with a
    series fallback near nu = 0 where the quotient loses precision."""
    x = nu * horizon
    if abs(nu) < 1e-8:
        return horizon * (1.0 + x / 2.0 + x * x / 6.0 + x ** 3 / 24.0)
    return (np.exp(x) - 1.0) / nu


def contraction_constants(lc):
    """Evaluate the propagation constants and the uniqueness verdict."""
    T = lc.horizon
    c1 = (lc.drift_in_emission * lc.emission_map * T
          * np.exp((lc.drift_in_emission + 2.0 * lc.drift_in_pollution
                    + lc.pollution_vol ** 2) * T))
    damping_common = (lc.capital_vol ** 2 + lc.adjoint_drift_in_capital
                      + lc.adjoint_drift_in_pollution
                      - 2.0 * (lc.depreciation + lc.discount))
    nu = damping_common + lc.adjoint_drift_in_costate ** 2
    nu_alt = damping_common + 2.0 * lc.adjoint_drift_in_costate

    def backward_pair(nu_val):
        growth = _growth_integral(nu_val, T)
        c2 = (lc.terminal_slope_in_capital ** 2
              + T * lc.adjoint_drift_in_capital ** 2) * growth
        c3 = (lc.terminal_slope_in_pollution ** 2
              + T * lc.adjoint_drift_in_pollution ** 2) * growth
        return c2, c3

    c2, c3 = backward_pair(nu)
    c2_alt, c3_alt = backward_pair(nu_alt)
    control_rate = (lc.control_in_pollution + lc.control_in_costate
                    + 2.0 * lc.control_in_capital + lc.capital_vol ** 2
                    - 2.0 * lc.depreciation) * T
    c4 = lc.control_in_pollution * T * np.exp(control_rate)
    c5 = lc.control_in_costate * T * np.exp(control_rate)
    composite = c4 * c1 + c5 * (c2 + c3 * c1)
    composite_alt = c4 * c1 + c5 * (c2_alt + c3_alt * c1)
    return ContractionReport(
        c1=float(c1), c2=float(c2), c3=float(c3), c4=float(c4),
        c5=float(c5), nu=float(nu), composite=float(composite),
        nu_alt=float(nu_alt), c2_alt=float(c2_alt), c3_alt=float(c3_alt),
        composite_alt=float(composite_alt),
        verdict=bool(composite < 1.0 and composite_alt < 1.0))


@dataclass(frozen=True)
class MonotonicityInputs:
    """Inputs of the diagonal-dominance inequalities and the convexity
    lower bound.

    `control_convexity` is the running cost's strong-convexity modulus in
    the control; `alpha_weight`/`beta_weight` scale the pollution and
    control blocks of the comparison matrix; `epsilon_split` shifts mass
    between the first two inequalities.  The `cross_*` norms bound the
    mixed second derivatives of the running cost.
    """

    control_convexity: float
    alpha_weight: float
    beta_weight: float
    epsilon_split: float
    drift_in_emission: float = 0.0
    drift_in_pollution: float = 0.0
    depreciation: float = 0.0
    discount: float = 0.0
    capital_vol: float = 0.0
    pollution_vol: float = 0.0
    cross_control_pollution: float = 0.0
    cross_capital_pollution: float = 0.0
    entropic_weight: float = 0.1
    horizon: float = 1.0
    consumption_ref: float = 1.0
    prod_slope_bound: float = 0.0
    terminal_slope_bound: float = 1.0
    target_bound: float = 0.0
    utility_exponent: float = 0.8

    def __post_init__(self):
        if not (self.control_convexity > 0 and self.alpha_weight > 0
                and self.beta_weight > 0):
            raise ValueError("convexity modulus and block weights must be "
                             "positive")
        if not 0.0 <= self.epsilon_split <= 1.0:
            raise ValueError("epsilon_split must lie in [0, 1]")
        if not (self.entropic_weight > 0 and self.horizon > 0
                and self.consumption_ref > 0):
            raise ValueError("entropic weight, horizon, and consumption "
                             "reference must be positive")
        if not 0.0 < self.utility_exponent < 1.0:
            raise ValueError("utility exponent must lie in (0, 1)")


@dataclass(frozen=True)
class MonotonicityReport:
    convexity_slack: float
    capital_slack: float
    pollution_slack: float
    verdict: bool

    def rows(self):
        return [(f.name, getattr(self, f.name)) for f in dc_fields(self)]


def check_monotonicity_example(mi):
    """Slack of each dominance inequality (positive slack = satisfied)."""
    s1 = (2.0 * mi.control_convexity
          - ((1.0 - mi.epsilon_split) * mi.beta_weight
             + 0.5 * mi.cross_control_pollution))
    s2 = (mi.beta_weight * (0.5 * mi.discount + mi.depreciation
                            - 0.5 * mi.capital_vol ** 2 - mi.epsilon_split)
          - (0.5 * mi.cross_capital_pollution
             + mi.alpha_weight * mi.drift_in_emission))
    s3 = (mi.alpha_weight * (mi.drift_in_pollution
                             - 0.5 * mi.drift_in_emission + mi.depreciation
                             - 0.5 * mi.pollution_vol ** 2)
          - (0.5 * mi.cross_control_pollution
             + 0.5 * mi.cross_capital_pollution))
    return MonotonicityReport(convexity_slack=float(s1),
                              capital_slack=float(s2),
                              pollution_slack=float(s3),
                              verdict=bool(s1 > 0 and s2 > 0 and s3 > 0))


@dataclass(frozen=True)
class LambdaBoundReport:
    verdict: bool
    reasons: tuple
    implied_bound: float
    target_bound: float

    def rows(self):
        return [("lambda_verdict", self.verdict),
                ("implied_bound", self.implied_bound),
                ("target_bound", self.target_bound),
                ("reasons", ";".join(self.reasons))]


def check_lambda_bound(mi):
    """Convexity lower bound: under a normalized terminal slope and a
    production slope dominated by depreciation plus discount, the
    convexity modulus is at least
    theta * exp(-(T/theta) * u'(consumption_ref) * prod_slope_bound)."""
    reasons = []
    if abs(mi.terminal_slope_bound - 1.0) > 1e-12:
        reasons.append("g-gradient normalization")
    if mi.prod_slope_bound > mi.depreciation + mi.discount:
        reasons.append("production slope exceeds depreciation plus "
                       "discount")
    marginal = (mi.utility_exponent
                * mi.consumption_ref ** (mi.utility_exponent - 1.0))
    implied = mi.entropic_weight * np.exp(
        -mi.horizon * marginal * mi.prod_slope_bound / mi.entropic_weight)
    if mi.target_bound > implied:
        reasons.append("target exceeds implied bound")
    return LambdaBoundReport(verdict=not reasons, reasons=tuple(reasons),
                             implied_bound=float(implied),
                             target_bound=float(mi.target_bound))


def _require_deterministic(params):
    if np.any(params.sigma != 0) or np.any(params.gamma != 0):
        raise ValueError("deterministic check requires zero volatilities")


@dataclass
class PontryaginReport:
    residual_sup: float
    residuals: np.ndarray
    k: np.ndarray
    p: np.ndarray
    y: np.ndarray
    controls: np.ndarray


def deterministic_pontryagin_check(policy, params, grid):
    """First-order optimality audit on the noise-free single-agent system.

    Rolls the state forward under the policy (the aggregate emission is the
    agent's own, the mean-field consistency condition of a deterministic
    point mass), recovers the costate by the backward Euler recursion from
    the terminal reward gradient, and compares the policy with the feedback
    rule the costate dictates.  The residual is the normalized sup over
    grid times and sectors.
    """
    _require_deterministic(params)
    n, d = params.n, params.d
    N = grid.n_steps
    dt = grid.dt
    k = np.empty((N + 1, n))
    p = np.empty((N + 1, d))
    a = np.empty((N, n))
    k[0] = params.k0
    p[0] = params.p0
    for i in range(N):
        a[i] = np.asarray(policy(float(grid.times[i]),
                                 p[i].reshape(1, -1),
                                 k[i].reshape(1, -1))).reshape(n)
        k[i + 1] = np.maximum(k[i] + (a[i] - params.delta * k[i]) * dt,
                              FLOOR_K)
        emission = model.phi(k[i], params)
        p[i + 1] = np.maximum(
            p[i] + model.externality_drift(emission, p[i], params) * dt,
            FLOOR_P)
    y = np.empty((N + 1, n))
    y[N] = model.terminal_grad_k(k[N], p[N], params)
    z = np.zeros((n, n))
    for i in range(N - 1, -1, -1):
        y[i] = y[i + 1] + model.grad_k_hamiltonian(
            a[i], k[i], p[i], y[i + 1], z, params) * dt
    residuals = np.empty((N, n))
    for i in range(N):
        best = model.feedback_control(k[i], p[i], y[i], params)
        residuals[i] = np.abs(a[i] - best) / (1.0 + np.abs(a[i]))
    return PontryaginReport(residual_sup=float(residuals.max()),
                            residuals=residuals, k=k, p=p, y=y, controls=a)


def deterministic_reference_policy(params, n_steps=2000, sweeps=200,
                                   damping=0.5, tol=1e-12):
    """Near-exact open-loop control of the noise-free instance.

    Damped Picard iteration on a fine grid: sweep the state forward under
    the feedback rule for the current costate guess, pull the costate
    backward, and relax.  Returns a policy closure evaluating the feedback
    rule at the interpolated costate, usable on any coarser grid.
    """
    _require_deterministic(params)
    n, d = params.n, params.d
    times = np.linspace(0.0, params.T, n_steps + 1)
    dt = params.T / n_steps
    y = np.zeros((n_steps + 1, n))
    k = np.empty((n_steps + 1, n))
    p = np.empty((n_steps + 1, d))
    k[0] = params.k0
    p[0] = params.p0
    z = np.zeros((n, n))
    for _ in range(sweeps):
        a = np.empty((n_steps, n))
        for i in range(n_steps):
            a[i] = model.feedback_control(k[i], p[i], y[i], params)
            k[i + 1] = np.maximum(
                k[i] + (a[i] - params.delta * k[i]) * dt, FLOOR_K)
            emission = model.phi(k[i], params)
            p[i + 1] = np.maximum(
                p[i] + model.externality_drift(emission, p[i], params) * dt,
                FLOOR_P)
        y_new = np.empty_like(y)
        y_new[n_steps] = model.terminal_grad_k(k[n_steps], p[n_steps],
                                               params)
        for i in range(n_steps - 1, -1, -1):
            y_new[i] = y_new[i + 1] + model.grad_k_hamiltonian(
                a[i], k[i], p[i], y_new[i + 1], z, params) * dt
        shift = float(np.max(np.abs(y_new - y)))
        y = damping * y_new + (1.0 - damping) * y
        if shift < tol:
            y = y_new
            break

    def policy(t, p_rows, k_rows, tape=None):
        frac = np.clip(float(t) / params.T, 0.0, 1.0) * n_steps
        lo = min(int(frac), n_steps - 1)
        w = frac - lo
        y_t = (1.0 - w) * y[lo] + w * y[lo + 1]
        k_rows = np.asarray(k_rows, dtype=float)
        p_rows = np.asarray(p_rows, dtype=float)
        out = np.empty_like(k_rows)
        for r in range(k_rows.shape[0]):
            out[r] = model.feedback_control(k_rows[r], p_rows[r], y_t,
                                            params)
        return out

    return policy


@dataclass(frozen=True)
class DpGridSpec:
    low: float = 1e-3
    high: float = 5.0
    count: int = 400

    def nodes(self):
        return np.geomspace(self.low, self.high, self.count)


@dataclass
class DpResult:
    value: float
    refined_value: float
    refinement_gap: float
    too_coarse: bool
    nodes: np.ndarray


def dp_oracle(params, grid, k_grid_spec=None):
    """Backward-induction value of the noise-free single-sector problem.

    Requires zero volatilities, zero emission coupling (the pollution path
    is then a known function of time), and one sector.  Maximizes the
    one-step reward plus linearly interpolated continuation over the
    feasible investment interval by golden-section search, which is exact
    enough here because the objective is concave in the investment up to
    interpolation kinks.  `grid=None` means a horizonless instance: no
    decisions, value = terminal reward at the start.

    The result carries a refinement diagnostic: the value recomputed on a
    doubled grid, with `too_coarse` set when they disagree by over 0.5%.
    """
    _require_deterministic(params)
    if params.ext_coupling != 0:
        raise ValueError("value oracle requires zero emission coupling")
    if params.n != 1:
        raise ValueError("value oracle handles a single sector only")
    if k_grid_spec is None:
        k_grid_spec = DpGridSpec()
    if grid is None:
        return DpResult(
            value=float(model.terminal_reward(params.k0, params.p0,
                                              params)),
            refined_value=float(model.terminal_reward(params.k0, params.p0,
                                                      params)),
            refinement_gap=0.0, too_coarse=False,
            nodes=k_grid_spec.nodes())

    def run(spec):
        nodes = spec.nodes()
        N = grid.n_steps
        dt = grid.dt
        p = np.empty((N + 1, params.d))
        p[0] = params.p0
        for i in range(N):
            p[i + 1] = np.maximum(
                p[i] + model.externality_drift(np.zeros(params.d), p[i],
                                               params) * dt, FLOOR_P)
        value = model.terminal_reward(
            nodes.reshape(-1, 1), np.broadcast_to(p[N], (spec.count,
                                                         params.d)),
            params) * np.exp(-params.rho * grid.horizon)
        sign_theta = params.entropy_sign * params.theta
        for i in range(N - 1, -1, -1):
            F = model.production(nodes.reshape(-1, 1),
                                 np.broadcast_to(p[i], (spec.count,
                                                        params.d)),
                                 params)
            discount = np.exp(-params.rho * grid.times[i])

            def step_reward(a):
                c = F - a
                flow = (model.utility(c, params)
                        + sign_theta * (-a * np.log(a))) * discount * dt
                k_next = np.maximum(nodes + (a - params.delta[0] * nodes)
                                    * dt, FLOOR_K)
                return flow + np.interp(k_next, nodes, value)

            lo = np.full(spec.count, 1e-12)
            hi = F * (1.0 - 1e-9)
            inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
            x1 = hi - inv_phi * (hi - lo)
            x2 = lo + inv_phi * (hi - lo)
            f1 = step_reward(x1)
            f2 = step_reward(x2)
            for _ in range(80):
                take_left = f1 > f2
                x1o, x2o, f1o, f2o = x1, x2, f1, f2
                hi = np.where(take_left, x2o, hi)
                lo = np.where(take_left, lo, x1o)
                width = hi - lo
                x1 = np.where(take_left, hi - inv_phi * width, x2o)
                x2 = np.where(take_left, x1o, lo + inv_phi * width)
                f_probe = step_reward(np.where(take_left, x1, x2))
                f1 = np.where(take_left, f_probe, f2o)
                f2 = np.where(take_left, f1o, f_probe)
                if np.max(width) < 1e-12:
                    break
            value = step_reward(0.5 * (lo + hi))
        return float(np.interp(params.k0[0], nodes, value))

    coarse = run(k_grid_spec)
    fine = run(DpGridSpec(low=k_grid_spec.low, high=k_grid_spec.high,
                          count=2 * k_grid_spec.count))
    gap = abs(coarse - fine) / max(abs(fine), 1e-300)
    return DpResult(value=coarse, refined_value=fine,
                    refinement_gap=float(gap),
                    too_coarse=bool(gap > 0.005),
                    nodes=k_grid_spec.nodes())


def estimate_lipschitz_constants(params, count=200, seed=0,
                                 k_range=(0.05, 3.0), p_range=(0.0, 5.0),
                                 y_range=(0.0, 3.0), step=1e-6):
    """Sampled bounds on the map sensitivities: empirical, not certified.

    The drift and volatility entries are exact (the maps are linear); the
    adjoint-drift, control, and terminal-slope entries are finite
    difference sups over a random box, so they can only undershoot the
    true constants.
    """
    rng = np.random.default_rng(seed)
    n, d = params.n, params.d
    k = rng.uniform(*k_range, size=(count, n))
    p = rng.uniform(*p_range, size=(count, d))
    y = rng.uniform(*y_range, size=(count, n))
    z = np.zeros((n, n))

    def adjoint(ki, pi, yi):
        a = model.feedback_control(ki, pi, yi, params)
        return model.grad_k_hamiltonian(a, ki, pi, yi, z, params)

    def control(ki, pi, yi):
        return model.feedback_control(ki, pi, yi, params)

    def slope(fn, wrt):
        worst = 0.0
        for i in range(count):
            args = [k[i].copy(), p[i].copy(), y[i].copy()]
            base = np.asarray(fn(*args))
            direction = rng.normal(size=args[wrt].shape)
            direction /= np.linalg.norm(direction)
            args[wrt] = args[wrt] + step * direction
            bumped = np.asarray(fn(*args))
            worst = max(worst, float(np.linalg.norm(bumped - base) / step))
        return worst

    def terminal(ki, pi, _):
        return model.terminal_grad_k(ki, pi, params)

    return LipschitzConstants(
        drift_in_emission=float(params.ext_coupling),
        drift_in_pollution=float(params.ext_decay),
        emission_map=float(np.linalg.norm(params.phi_matrix, 2)),
        pollution_vol=float(params.gamma.max()),
        capital_vol=float(params.sigma.max()),
        terminal_slope_in_capital=slope(terminal, 0),
        terminal_slope_in_pollution=slope(terminal, 1),
        adjoint_drift_in_capital=slope(adjoint, 0),
        adjoint_drift_in_pollution=slope(adjoint, 1),
        adjoint_drift_in_costate=slope(adjoint, 2),
        control_in_capital=slope(control, 0),
        control_in_pollution=slope(control, 1),
        control_in_costate=slope(control, 2),
        depreciation=float(params.delta.min()),
        discount=float(params.rho),
        horizon=float(params.T),
        empirical=True)


def format_report(contraction=None, monotonicity=None, lambda_bound=None):
    """Plain-text rendering of whichever reports are given."""
    lines = []
    if contraction is not None:
        lines.append("uniqueness contraction check")
        for name, val in contraction.rows():
            lines.append(f"  {name} = {val}")
        lines.append("  condition: c4*c1 + c5*(c2 + c3*c1) < 1 "
                     f"-> {'holds' if contraction.verdict else 'FAILS'}")
    if monotonicity is not None:
        lines.append("monotonicity dominance check")
        for name, val in monotonicity.rows():
            lines.append(f"  {name} = {val}")
        lines.append("  all slacks positive "
                     f"-> {'holds' if monotonicity.verdict else 'FAILS'}")
    if lambda_bound is not None:
        lines.append("convexity lower bound")
        for name, val in lambda_bound.rows():
            lines.append(f"  {name} = {val}")
        lines.append("  verdict "
                     f"-> {'holds' if lambda_bound.verdict else 'FAILS'}")
    return "\n".join(lines) + "\n"


def write_rows_csv(rows, path, comment=None):
    """Two-column (name, value) CSV used by the report serializers."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["name", "value"])
        for name, val in rows:
            writer.writerow([name, val])
