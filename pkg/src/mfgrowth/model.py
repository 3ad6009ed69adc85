"""Closed-form model primitives for the multi-sector growth game.

Capital earns output through a concave production function whose first-sector
productivity decays logistically in the pollution level; investment is priced
by an entropic adjustment cost; pollution aggregates emissions that are linear
in capital.  The optimal investment rule solves a one-dimensional root-finding
problem in the total investment, derived from the first-order condition of the
Hamiltonian, and its implicit-function gradients are available in closed form.

Functions accept plain numpy inputs (any batch shape with the component axis
last) and, where noted, taped variables from :mod:`mfgrowth.autodiff` so the
same formulas run inside the differentiable simulation rollout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

BRACKET_MARGIN = 1e-12
MAX_ROOT_ITER = 200


@dataclass
class CrraUtility:
    """Power utility c**q with q in (0, 1); marginal utility blows up at 0."""

    exponent: float

    def u(self, c):
        return ad.power(c, self.exponent)

    def u_prime(self, c):
        return self.exponent * ad.power(c, self.exponent - 1.0)

    def u_second(self, c):
        q = self.exponent
        return q * (q - 1.0) * np.asarray(c, dtype=float) ** (q - 2.0)


@dataclass
class ModelParams:
    """Economic and stochastic constants plus functional-form coefficients.

    Vectors are stored per sector (capital side, length ``n``) or per
    pollution component (length ``d``); scalar inputs are broadcast.

    Notes on individual fields:

    * ``prod_logistic_slope``/``prod_logistic_shift`` parameterize the first
      sector's productivity coefficient 1/(1 + exp(slope*P - shift)) where P
      is the total pollution level; the remaining sectors use the constant
      coefficients in ``prod_const_coeffs`` (length ``n - 1``).
    * ``production_floor`` shifts the pre-power base away from zero so output
      stays strictly positive even at zero capital; set it to 0 to recover
      the unshifted form.
    * ``ext_coupling`` scales how aggregate emissions push pollution up;
      ``ext_decay`` is pollution's own linear decay rate.
    * ``sigma0`` is recorded for completeness; nothing downstream reads it.
    * ``entropy_sign`` switches the sign of the entropic term in the
      simulated objective (+1: reward u(c) + theta*K(a); -1: u(c) -
      theta*K(a), with K(a) = -sum a ln a). The Hamiltonian and the feedback
      control always use the +1 convention.
    * ``utility`` may be set to any object with u/u_prime/u_second methods;
      None selects power utility with ``utility_exponent``.
    """

    n: int = 2
    d: int = 1
    T: float = 45.0
    rho: float = 0.1
    theta: float = 0.1
    delta: np.ndarray = 0.1
    sigma: np.ndarray = 0.04
    gamma: np.ndarray = 0.15
    utility_exponent: float = 0.8
    prod_exponent: float = 0.3
    prod_const_coeffs: np.ndarray = None
    prod_logistic_slope: float = 0.5
    prod_logistic_shift: float = 0.1
    production_floor: float = 1e-6
    phi_matrix: np.ndarray = None
    ext_coupling: float = 0.3
    ext_decay: float = 0.1
    k0: np.ndarray = 0.2
    p0: np.ndarray = 0.1
    sigma0: float = 0.1
    entropy_sign: int = 1
    utility: object = None

    def __post_init__(self):
        self.n = int(self.n)
        self.d = int(self.d)
        if self.n < 1 or self.d < 1:
            raise ValueError("need at least one sector and one pollution "
                             "component")
        if not (self.T > 0):
            raise ValueError("horizon must be positive")
        if not (self.theta > 0):
            raise ValueError("entropic weight must be positive")
        if self.rho < 0:
            raise ValueError("discount rate must be nonnegative")
        if not (0.0 < self.utility_exponent < 1.0):
            raise ValueError("utility exponent must lie in (0, 1)")
        if not (0.0 < self.prod_exponent <= 1.0):
            raise ValueError("production exponent must lie in (0, 1]")
        if self.production_floor < 0:
            raise ValueError("production floor must be nonnegative")
        self.delta = self._per(self.delta, self.n, "delta")
        self.sigma = self._per(self.sigma, self.n, "sigma")
        self.gamma = self._per(self.gamma, self.d, "gamma")
        for name in ("delta", "sigma", "gamma"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} must be nonnegative")
        if np.any(self.delta <= 0):
            raise ValueError("depreciation rates must be positive")
        if self.prod_const_coeffs is None:
            self.prod_const_coeffs = np.full(self.n - 1, 0.4)
        self.prod_const_coeffs = np.atleast_1d(
            np.asarray(self.prod_const_coeffs, dtype=float))
        if self.prod_const_coeffs.shape != (self.n - 1,):
            raise ValueError("prod_const_coeffs must have one entry per "
                             "sector beyond the first")
        if np.any(self.prod_const_coeffs < 0):
            raise ValueError("productivity coefficients must be nonnegative")
        if self.phi_matrix is None:
            self.phi_matrix = np.zeros((self.d, self.n))
            self.phi_matrix[0, 0] = 0.5
        self.phi_matrix = np.asarray(self.phi_matrix, dtype=float)
        if self.phi_matrix.shape != (self.d, self.n):
            raise ValueError(f"phi_matrix must be {(self.d, self.n)}, got "
                             f"{self.phi_matrix.shape}")
        self.k0 = self._per(self.k0, self.n, "k0")
        self.p0 = self._per(self.p0, self.d, "p0")
        if self.entropy_sign not in (1, -1):
            raise ValueError("entropy_sign must be +1 or -1")

    @staticmethod
    def _per(value, count, name):
        arr = np.atleast_1d(np.asarray(value, dtype=float))
        if arr.shape == (1,) and count > 1:
            arr = np.full(count, arr[0])
        if arr.shape != (count,):
            raise ValueError(f"{name} must be scalar or length {count}")
        return arr.copy()

    @classmethod
    def default(cls):
        """Two-sector benchmark calibration (45-year horizon)."""
        return cls()


def _ufn(params):
    if params.utility is not None:
        return params.utility
    return CrraUtility(params.utility_exponent)


def utility(c, params):
    """Felicity of consumption; domain error on nonpositive input."""
    if not isinstance(c, ad.Var):
        c = np.asarray(c, dtype=float)
        if np.any(c <= 0):
            raise ValueError("consumption must be positive")
    return _ufn(params).u(c)


def utility_prime(c, params):
    """Marginal felicity u'(c)."""
    if not isinstance(c, ad.Var):
        c = np.asarray(c, dtype=float)
        if np.any(c <= 0):
            raise ValueError("consumption must be positive")
    return _ufn(params).u_prime(c)


def _pollution_level(p):
    p = np.asarray(p, dtype=float)
    return p.sum(axis=-1)


def _b1(p, params):
    """First-sector productivity coefficient and its derivative in the
    total pollution level."""
    z = (params.prod_logistic_slope * _pollution_level(p)
         - params.prod_logistic_shift)
    z = np.clip(z, -700.0, 700.0)
    b1 = 1.0 / (1.0 + np.exp(z))
    db1 = -params.prod_logistic_slope * b1 * (1.0 - b1)
    return b1, db1


def _prod_weights(p, params):
    b1, db1 = _b1(p, params)
    if params.n == 1:
        w = b1[..., None]
    else:
        rest = np.broadcast_to(params.prod_const_coeffs,
                               b1.shape + (params.n - 1,))
        w = np.concatenate([b1[..., None], rest], axis=-1)
    return w, db1


def sector_productivities(p, params):
    """Productivity coefficient of each sector at pollution level p.

    The first sector's coefficient decays with the total level; the
    remaining ones are the fixed configured constants.
    """
    w, _ = _prod_weights(p, params)
    return w


def production(k, p, params):
    """Output F(k, p): a concave power of the productivity-weighted capital
    stock. Accepts taped capital."""
    w, _ = _prod_weights(p, params)
    if isinstance(k, ad.Var):
        base = ad.vsum(k * w, axis=-1) + params.production_floor
        return ad.power(base, params.prod_exponent)
    k = np.asarray(k, dtype=float)
    base = (k * w).sum(axis=-1) + params.production_floor
    if np.any(base < 0):
        raise ValueError("production base went negative; capital must be "
                         "nonnegative")
    out = base ** params.prod_exponent
    return float(out) if out.ndim == 0 else out


def production_grad(k, p, params):
    """Analytic (d F/d k, d F/d p)."""
    k = np.asarray(k, dtype=float)
    w, db1 = _prod_weights(p, params)
    base = (k * w).sum(axis=-1) + params.production_floor
    scale = params.prod_exponent * base ** (params.prod_exponent - 1.0)
    grad_k = scale[..., None] * w
    # only the first sector's coefficient moves with pollution, and it
    # responds to the total level, so every component sees the same slope
    dp_scalar = scale * k[..., 0] * db1
    grad_p = np.repeat(dp_scalar[..., None], params.d, axis=-1)
    return grad_k, grad_p


def entropic_cost(a):
    """K(a) = -sum_i a_i ln a_i, the entropic adjustment cost."""
    if isinstance(a, ad.Var):
        return -ad.vsum(a * ad.log(a), axis=-1)
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise ValueError("investments must be positive")
    out = -(a * np.log(a)).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def phi(k, params):
    """Emission vector: linear map of the capital stock."""
    k = np.asarray(k, dtype=float)
    return k @ params.phi_matrix.T


def externality_drift(e, p, params):
    """Pollution drift: coupling * emissions - decay * level."""
    e = np.asarray(e, dtype=float)
    p = np.asarray(p, dtype=float)
    return params.ext_coupling * e - params.ext_decay * p


def terminal_reward(k, p, params):
    """Scrap value g(k, p); proportional to the felicity of terminal output."""
    F = production(k, p, params)
    if not isinstance(F, ad.Var):
        if np.any(np.asarray(F) <= 0):
            raise ValueError("terminal reward undefined at zero output")
    scale = np.exp(-params.rho * params.T) / params.rho
    return _ufn(params).u(F) * scale


def terminal_grad_k(k, p, params):
    """Analytic gradient of the scrap value in capital."""
    F = production(k, p, params)
    if np.any(np.asarray(F) <= 0):
        raise ValueError("terminal reward undefined at zero output")
    grad_F, _ = production_grad(k, p, params)
    scale = np.exp(-params.rho * params.T) / params.rho
    up = np.asarray(_ufn(params).u_prime(F), dtype=float)
    return up[..., None] * grad_F * scale


def _flatten_point(k, p, y, params):
    k = np.asarray(k, dtype=float)
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if k.shape[-1] != params.n or y.shape[-1] != params.n:
        raise ValueError("capital/costate must have one entry per sector")
    if p.shape[-1] != params.d:
        raise ValueError("pollution must have one entry per component")
    batch = np.broadcast_shapes(k.shape[:-1], p.shape[:-1], y.shape[:-1])
    k = np.broadcast_to(k, batch + (params.n,)).reshape(-1, params.n)
    p = np.broadcast_to(p, batch + (params.d,)).reshape(-1, params.d)
    y = np.broadcast_to(y, batch + (params.n,)).reshape(-1, params.n)
    return k, p, y, batch


class _XiState:
    __slots__ = ("xi", "F", "c", "weights", "slope_term", "f_slope",
                 "k", "p", "y", "batch")


def _xi_state(k, p, y, params, tol):
    """Solve the total-investment root problem at every point.

    The residual f(xi) = xi - sum_i exp((y_i - u'(F - xi))/theta - 1) is
    strictly increasing with slope >= 1, so a Newton iteration safeguarded by
    the bracket (0, F) cannot miss. Interior starting point: F/2.

    A point also counts as converged once its bracket has collapsed to
    machine width: where the residual slope is steep, |f| at the nearest
    representable root can exceed a very tight tolerance, and no float64
    answer can do better than the one-ulp bracket.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    kf, pf, yf, batch = _flatten_point(k, p, y, params)
    ufn = _ufn(params)
    theta = params.theta
    F = np.atleast_1d(np.asarray(production(kf, pf, params), dtype=float))
    lo = np.full_like(F, BRACKET_MARGIN)
    hi = F * (1.0 - BRACKET_MARGIN)
    if np.any(hi <= lo):
        raise ValueError("output too small to bracket an interior root")
    x = 0.5 * (lo + hi)
    f = np.empty_like(x)
    done = np.zeros(x.shape, dtype=bool)
    for _ in range(MAX_ROOT_ITER):
        c = F - x
        expo = (yf - np.asarray(ufn.u_prime(c))[..., None]) / theta - 1.0
        weights = np.exp(np.clip(expo, -745.0, 700.0))
        total = weights.sum(axis=-1)
        f = x - total
        machine_width = (hi - lo) <= 4.0 * np.finfo(float).eps * np.abs(x)
        done = (np.abs(f) <= tol) | machine_width
        if done.all():
            break
        hi = np.where(f > 0, np.minimum(hi, x), hi)
        lo = np.where(f < 0, np.maximum(lo, x), lo)
        f_slope = 1.0 - np.asarray(ufn.u_second(c)) * total / theta
        step = x - f / f_slope
        fallback = ~np.isfinite(step) | (step <= lo) | (step >= hi)
        x = np.where(done, x, np.where(fallback, 0.5 * (lo + hi), step))
    if not done.all():
        worst = int(np.argmax(np.abs(f)))
        raise ArithmeticError(
            f"investment root not found in {MAX_ROOT_ITER} iterations: "
            f"|f|={abs(f[worst]):.3e} with bracket "
            f"({lo[worst]:.17g}, {hi[worst]:.17g})")
    st = _XiState()
    st.xi = x
    st.F = F
    st.c = F - x
    expo = (yf - np.asarray(ufn.u_prime(st.c))[..., None]) / theta - 1.0
    st.weights = np.exp(np.clip(expo, -745.0, 700.0))
    st.slope_term = np.asarray(ufn.u_second(st.c)) * st.weights.sum(-1) / theta
    st.f_slope = 1.0 - st.slope_term
    st.k, st.p, st.y, st.batch = kf, pf, yf, batch
    return st


def solve_xi(k, p, y, params, tol=1e-10):
    """Total optimal investment: the root of the first-order condition.

    Returns a scalar for single-point input, else an array over the batch.
    The root always lies strictly between 0 and F(k, p).
    """
    st = _xi_state(k, p, y, params, tol)
    out = st.xi.reshape(st.batch)
    return float(out) if out.ndim == 0 else out


def xi_gradient(k, p, y, params, tol=1e-10):
    """Implicit-function gradients of the total investment.

    Returns (d xi/d k, d xi/d p, d xi/d y). The capital and pollution
    gradients are bounded in magnitude by the corresponding output gradients.
    """
    st = _xi_state(k, p, y, params, tol)
    grad_F_k, grad_F_p = production_grad(st.k, st.p, params)
    inv = 1.0 / st.f_slope
    grad_k = -(st.slope_term * inv)[..., None] * grad_F_k
    grad_p = -(st.slope_term * inv)[..., None] * grad_F_p
    grad_y = st.weights / params.theta * inv[..., None]
    return (grad_k.reshape(st.batch + (params.n,)),
            grad_p.reshape(st.batch + (params.d,)),
            grad_y.reshape(st.batch + (params.n,)))


def feedback_control(k, p, y, params, tol=1e-10):
    """Optimal sector investments a_i = exp((y_i - u'(c))/theta - 1).

    Componentwise positive with total strictly below output.
    """
    st = _xi_state(k, p, y, params, tol)
    return st.weights.reshape(st.batch + (params.n,))


def hamiltonian(a, k, p, y, z, params):
    """Current-value Hamiltonian at a single point.

    `z` is the (n, n) diffusion costate; only its diagonal interacts with
    the capital-proportional volatility.
    """
    a = np.asarray(a, dtype=float)
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(a <= 0):
        raise ValueError("investments must be positive")
    F = production(k, p, params)
    c = F - a.sum()
    if c <= 0:
        raise ValueError("infeasible investment: consumption is nonpositive")
    drift = a - (params.delta + params.rho) * k
    noise_term = float((params.sigma * k * np.diag(z)).sum())
    return (float(drift @ y) + float(utility(c, params))
            + params.theta * entropic_cost(a) + noise_term)


def grad_k_hamiltonian(a, k, p, y, z, params):
    """Capital gradient of the Hamiltonian (the costate drift)."""
    a = np.asarray(a, dtype=float)
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(a <= 0):
        raise ValueError("investments must be positive")
    F = production(k, p, params)
    c = F - a.sum()
    if c <= 0:
        raise ValueError("infeasible investment: consumption is nonpositive")
    grad_F, _ = production_grad(k, p, params)
    return (-(params.delta + params.rho) * y
            + params.sigma * np.diag(z)
            + float(utility_prime(c, params)) * grad_F)
