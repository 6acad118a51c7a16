"""Device/edge-server data-submission game.

The device publishes a rule ``v*(s)`` (its valuation as a function of the
server's offered profit); the server answers with the profit ``s*`` that
maximizes its own utility given its private leakage degree ``theta``.
All utilities integrate a time-constant integrand over ``[0, T]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

DOMAIN_TOL = 1e-12


class MechanismError(ValueError):
    pass


class ConditionViolated(MechanismError):
    """Raised when eta*xi <= 1, where the device's objective is not concave in v."""


@dataclass(frozen=True)
class MechanismParams:
    R: float = 10.0
    alpha_s: float = 3.0
    beta_s: float = 2.0
    epsilon: float = 0.9
    v_bar: float = 50.0
    s_bar: float = 500.0
    c_d: float = 2.0
    eta: float = 2.0
    xi: float = 2.0
    T: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha_s < 0 or self.beta_s < 0:
            raise MechanismError("alpha_s and beta_s must be >= 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise MechanismError("epsilon must lie in [0, 1]")
        if self.v_bar <= 0 or self.s_bar <= 0:
            raise MechanismError("v_bar and s_bar must be > 0")
        if self.c_d < 0:
            raise MechanismError("c_d must be >= 0")
        if self.eta <= 0 or self.xi <= 0:
            raise MechanismError("eta and xi must be > 0")
        if self.T <= 0:
            raise MechanismError("T must be > 0")

    @property
    def k(self) -> float:
        """The product eta*xi: marginal privacy cost per unit of declared value."""
        return self.eta * self.xi

    def leakage_reward(self, theta: float) -> float:
        return self.alpha_s * theta + self.beta_s

    def require_concave(self) -> None:
        if not self.k > 1.0:
            raise ConditionViolated(f"eta*xi must exceed 1 (got {self.k:g})")
        if self.epsilon <= 0.0:
            raise ConditionViolated("epsilon must be > 0 for the device's rule to exist")

    def with_(self, **changes) -> "MechanismParams":
        return replace(self, **changes)


def _check_theta(theta: float) -> None:
    if not 0.0 <= theta <= 1.0:
        raise MechanismError(f"theta must lie in [0, 1], got {theta}")


def _check_vs(v, s, params: MechanismParams) -> None:
    v = np.asarray(v, float)
    s = np.asarray(s, float)
    if np.any(v < -DOMAIN_TOL) or np.any(v > params.v_bar * (1 + DOMAIN_TOL)):
        raise MechanismError(f"v outside [0, {params.v_bar}]")
    if np.any(s < -DOMAIN_TOL) or np.any(s > params.s_bar * (1 + DOMAIN_TOL)):
        raise MechanismError(f"s outside [0, {params.s_bar}]")


def _g(v, s, p: MechanismParams):
    return p.epsilon * v / p.v_bar + (1.0 - p.epsilon) * s / p.s_bar


def collection_probability(v, s, params: MechanismParams):
    _check_vs(v, s, params)
    return _g(v, s, params)


def server_utility(v, s, theta: float, params: MechanismParams):
    _check_vs(v, s, params)
    _check_theta(theta)
    return _server_utility(v, s, theta, params)


def _server_utility(v, s, theta, p: MechanismParams):
    return p.T * (p.R + p.leakage_reward(theta) - v - s) * _g(v, s, p)


def device_integrand(v, s, params: MechanismParams):
    """(v + s - C) * g with C = c_d + eta*xi*v; defined off the box too, for derivatives."""
    p = params
    return (v + s - p.c_d - p.k * v) * _g(v, s, p)


def device_utility(v, s, params: MechanismParams):
    _check_vs(v, s, params)
    return params.T * device_integrand(v, s, params)


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GameRule:
    """v*(s) = (num_s * s + num_0) / den, the device's optimal rule."""

    params: MechanismParams

    @property
    def num_s(self) -> float:
        p = self.params
        return (1 - p.epsilon) * (p.k - 1) * p.v_bar - p.epsilon * p.s_bar

    @property
    def num_0(self) -> float:
        p = self.params
        return p.epsilon * p.s_bar * p.c_d

    @property
    def den(self) -> float:
        p = self.params
        return 2 * p.epsilon * (1 - p.k) * p.s_bar

    @property
    def slope(self) -> float:
        return self.num_s / self.den

    @property
    def intercept(self) -> float:
        return self.num_0 / self.den

    def __call__(self, s):
        return (self.num_s * np.asarray(s, float) + self.num_0) / self.den

    def clamped(self, s):
        return np.clip(self(s), 0.0, self.params.v_bar)


def optimal_game_rule(params: MechanismParams) -> GameRule:
    params.require_concave()
    return GameRule(params)


def device_curvature(params: MechanismParams) -> float:
    """d^2 F_d / dv^2, constant in (v, s)."""
    return 2 * (1 - params.k) * params.epsilon / params.v_bar


def server_strategy_unclamped(theta: float, params: MechanismParams) -> float:
    """The stationary point of U_s(s, v*(s)) in s, before projection onto [0, s_bar]."""
    params.require_concave()
    _check_theta(theta)
    p = params
    eps, k = p.epsilon, p.k
    a0 = eps / p.v_bar + (k - 1) * (eps - 1) / p.s_bar
    a1 = 2 * (k - 1)
    first = (p.R + p.alpha_s * theta + p.beta_s + p.c_d / a1) / (2 * (p.v_bar * a0 / (eps * a1) + 1))
    second = p.c_d * eps / (2 * p.v_bar * a1 * (a0 / a1 - (eps - 1) / p.s_bar))
    return first + second


def optimal_server_strategy(theta: float, params: MechanismParams) -> float:
    return float(np.clip(server_strategy_unclamped(theta, params), 0.0, params.s_bar))


def server_objective_curvature(params: MechanismParams) -> float:
    """Second derivative in s of U_s(s, v*(s)) / T; negative means s* is a maximum."""
    rule = GameRule(params)
    a = rule.slope
    p = params
    return -2 * (a + 1) * (p.epsilon * a / p.v_bar + (1 - p.epsilon) / p.s_bar)


def utility_under_rule(s, theta: float, params: MechanismParams, clamp_v: bool = False):
    """U_s(s, v*(s); theta). With ``clamp_v`` the rule is projected onto [0, v_bar]."""
    rule = GameRule(params)
    v = rule.clamped(s) if clamp_v else rule(s)
    return _server_utility(v, np.asarray(s, float), theta, params)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def grid_argmax_server(theta: float, params: MechanismParams, steps: int = 10_000,
                       clamp_v: bool = False) -> tuple[float, float]:
    """Brute-force best profit over ``s = i * s_bar / steps``; returns (s, grid step)."""
    params.require_concave()
    grid = np.linspace(0.0, params.s_bar, steps + 1)
    values = utility_under_rule(grid, theta, params, clamp_v=clamp_v)
    return float(grid[int(np.argmax(values))]), params.s_bar / steps


def grid_argmax_device(s: float, params: MechanismParams, steps: int = 10_000) -> tuple[float, float]:
    grid = np.linspace(0.0, params.v_bar, steps + 1)
    values = device_integrand(grid, s, params)
    return float(grid[int(np.argmax(values))]), params.v_bar / steps


def stationarity_residual(s: float, params: MechanismParams, h: float | None = None) -> float:
    """Central-difference dF_d/dv evaluated at v = v*(s)."""
    v = float(GameRule(params)(s))
    h = h if h is not None else 1e-4 * params.v_bar
    return float((device_integrand(v + h, s, params) - device_integrand(v - h, s, params)) / (2 * h))


def second_derivative_fd(s: float, params: MechanismParams, v: float | None = None,
                         h: float | None = None) -> float:
    v = float(GameRule(params)(s)) if v is None else v
    h = h if h is not None else 1e-2 * params.v_bar
    f = device_integrand
    return float((f(v + h, s, params) - 2 * f(v, s, params) + f(v - h, s, params)) / h**2)


# ---------------------------------------------------------------------------
# Protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubmissionOutcome:
    accepted: bool
    s_star: float = 0.0
    v_star: float = 0.0
    payment: float = 0.0
    U_d: float = 0.0
    U_s: float = 0.0
    reason: str = ""


def run_submission_protocol(params: MechanismParams, server_theta: float, timeout: float = 1.0,
                            response_delay: float = 0.0) -> SubmissionOutcome:
    """One device/server exchange.

    The device publishes v*(s); the server computes s*, and replies only if
    U_s(v*(s*), s*) > 0. A reply arriving after ``timeout`` counts as silence.
    Rule outputs are clamped to the feasible box before they are used.
    """
    rule = optimal_game_rule(params)
    _check_theta(server_theta)
    s_star = optimal_server_strategy(server_theta, params)
    v_at = float(rule.clamped(s_star))
    u_s = float(_server_utility(v_at, s_star, server_theta, params))
    if not u_s > 0.0:
        return SubmissionOutcome(False, reason="server kept silent: accepting is not profitable")
    if response_delay > timeout:
        return SubmissionOutcome(False, reason="timeout: no reply within the time limit")
    u_d = float(params.T * device_integrand(v_at, s_star, params))
    return SubmissionOutcome(True, s_star, v_at, v_at + s_star, u_d, u_s)


def incentive_compatibility_check(theta_true: float, theta_fake_samples: Iterable[float],
                                  params: MechanismParams, rtol: float = 1e-12) -> bool:
    """True iff reporting the true type is never beaten by a sampled misreport."""
    _check_theta(theta_true)
    s_true = optimal_server_strategy(theta_true, params)
    best = float(utility_under_rule(s_true, theta_true, params))
    for fake in theta_fake_samples:
        _check_theta(fake)
        s_fake = optimal_server_strategy(fake, params)
        u = float(utility_under_rule(s_fake, theta_true, params))
        if u > best + rtol * max(1.0, abs(best)):
            return False
    return True


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("eta", "xi", "epsilon", "theta", "s_star", "v_star", "U_s_max", "U_d_max")


def maximized_utilities(params: MechanismParams, theta: float) -> dict:
    """Utilities at the (clamped) equilibrium (s*, v*(s*)); NaN where no rule exists."""
    row = {"eta": params.eta, "xi": params.xi, "epsilon": params.epsilon, "theta": theta}
    try:
        s = optimal_server_strategy(theta, params)
    except ConditionViolated:
        row.update(s_star=math.nan, v_star=math.nan, U_s_max=math.nan, U_d_max=math.nan)
        return row
    v = float(GameRule(params).clamped(s))
    row.update(s_star=s, v_star=v,
               U_s_max=float(_server_utility(v, s, theta, params)),
               U_d_max=float(params.T * device_integrand(v, s, params)))
    return row


def sweep(base: MechanismParams, theta: float, etas: Sequence[float] | None = None,
          xis: Sequence[float] | None = None, epsilons: Sequence[float] | None = None) -> list[dict]:
    """Maximized utilities over the product grid; unspecified axes stay at ``base``."""
    rows = []
    for eps in (epsilons if epsilons is not None else [base.epsilon]):
        for eta in (etas if etas is not None else [base.eta]):
            for xi in (xis if xis is not None else [base.xi]):
                try:
                    params = base.with_(eta=eta, xi=xi, epsilon=eps)
                except MechanismError:
                    # eta = 0 or xi = 0 lies outside the parameter domain
                    rows.append({"eta": eta, "xi": xi, "epsilon": eps, "theta": theta, "s_star": math.nan,
                                 "v_star": math.nan, "U_s_max": math.nan, "U_d_max": math.nan})
                    continue
                rows.append(maximized_utilities(params, theta))
    return rows


@dataclass(frozen=True)
class Discrepancy:
    eta: float
    xi: float
    epsilon: float
    closed_form: float
    grid_argmax: float
    grid_step: float
    clamp_v: bool

    @property
    def gap(self) -> float:
        return abs(self.closed_form - self.grid_argmax)


def closed_form_discrepancies(base: MechanismParams, theta: float, etas: Sequence[float],
                              xis: Sequence[float], clamp_v: bool = False,
                              steps: int = 10_000) -> list[Discrepancy]:
    """Grid points where closed-form s* and the brute-force argmax differ by more than one step."""
    out = []
    for eta in etas:
        for xi in xis:
            if eta <= 0 or xi <= 0 or eta * xi <= 1:
                continue
            p = base.with_(eta=eta, xi=xi)
            s_cf = optimal_server_strategy(theta, p)
            s_grid, step = grid_argmax_server(theta, p, steps=steps, clamp_v=clamp_v)
            if abs(s_cf - s_grid) > step:
                out.append(Discrepancy(eta, xi, p.epsilon, s_cf, s_grid, step, clamp_v))
    return out


def is_non_increasing(values: Sequence[float]) -> bool:
    return all(b <= a for a, b in zip(values, values[1:]))


def has_interior_max(values: Sequence[float]) -> bool:
    """Strictly rising to an interior peak, strictly falling after it."""
    if len(values) < 3:
        return False
    peak = int(np.argmax(values))
    if peak in (0, len(values) - 1):
        return False
    rising = all(b > a for a, b in zip(values[:peak], values[1:peak + 1]))
    falling = all(b < a for a, b in zip(values[peak:], values[peak + 1:]))
    return rising and falling
