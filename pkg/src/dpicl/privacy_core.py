"""Renyi-DP accounting primitives.

Costs are tracked as delta-approximate RDP triples ``(alpha, epsilon, delta)``.
Conversions to ``(epsilon, delta)``-DP use the bound

    delta_hat = delta + exp((alpha - 1) * (eps - eps_hat)) / alpha
                * (1 - 1 / alpha) ** (alpha - 1)

which is evaluated (and inverted) in log space.

Example:

    >>> cost = compose([gaussian_rdp(GaussianMechanismSpec(10.0, 2 ** 0.5), 32)] * 3)
    >>> invert_conversion(cost, 1e-5).epsilon_hat  # doctest: +ELLIPSIS
    1.18...
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from dpicl.errors import InfeasibleError, InvalidParameterError, UnsupportedOrderError

# Orders used by the filter and by calibration; a run commits to one of them.
ALPHA_GRID = (1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0)


def _check_alpha(alpha):
    alpha = float(alpha)
    if not math.isfinite(alpha) or alpha <= 1.0:
        raise InvalidParameterError(f"Renyi order must be finite and > 1, got {alpha}")
    return alpha


def _clip_delta(delta):
    return min(max(delta, 0.0), 1.0)


@dataclass(frozen=True)
class ApproxRdp:
    """A delta-approximate (alpha, epsilon)-RDP cost."""

    alpha: float
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", _check_alpha(self.alpha))
        if not self.epsilon >= 0.0:
            raise InvalidParameterError(f"RDP epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 <= self.delta <= 1.0:
            raise InvalidParameterError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class DpGuarantee:
    epsilon_hat: float
    delta_hat: float

    def __post_init__(self):
        if not self.epsilon_hat >= 0.0:
            raise InvalidParameterError(f"epsilon_hat must be >= 0, got {self.epsilon_hat}")
        if not 0.0 <= self.delta_hat <= 1.0:
            raise InvalidParameterError(f"delta_hat must lie in [0, 1], got {self.delta_hat}")


@dataclass(frozen=True)
class GaussianMechanismSpec:
    """Gaussian noise of standard deviation ``sigma`` on an l2-``sensitivity`` query."""

    sigma: float
    sensitivity: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise InvalidParameterError(f"sigma must be > 0, got {self.sigma}")
        if not self.sensitivity > 0.0:
            raise InvalidParameterError(f"sensitivity must be > 0, got {self.sensitivity}")


@dataclass(frozen=True)
class SamplingConfig:
    """Poisson inclusion probability."""

    gamma: float

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidParameterError(f"gamma must lie in [0, 1], got {self.gamma}")


def gaussian_rdp(spec, alpha):
    """RDP of the Gaussian mechanism: ``alpha * sensitivity**2 / (2 sigma**2)``."""
    alpha = _check_alpha(alpha)
    eps = alpha * spec.sensitivity**2 / (2.0 * spec.sigma**2)
    return ApproxRdp(alpha, eps, 0.0)


def pure_dp_to_rdp(epsilon, alpha):
    """RDP at ``alpha`` implied by pure ``epsilon``-DP.

    Both ``epsilon`` (the order-infinity bound) and ``alpha * epsilon**2 / 2``
    bound the divergence, so the smaller one is returned.
    """
    alpha = _check_alpha(alpha)
    if not epsilon >= 0.0:
        raise InvalidParameterError(f"epsilon must be >= 0, got {epsilon}")
    return ApproxRdp(alpha, min(epsilon, 0.5 * alpha * epsilon**2), 0.0)


def compose(costs):
    """Sequential composition at a common order: epsilons and deltas add."""
    costs = list(costs)
    if not costs:
        raise InvalidParameterError("cannot compose an empty list of costs")
    alpha = costs[0].alpha
    if any(c.alpha != alpha for c in costs):
        raise InvalidParameterError("all composed costs must share the same Renyi order")
    eps = sum(c.epsilon for c in costs)
    delta = sum(c.delta for c in costs)
    return ApproxRdp(alpha, eps, _clip_delta(delta))


def _log_conversion_term(alpha, epsilon, epsilon_hat):
    return (alpha - 1.0) * (epsilon - epsilon_hat) - math.log(alpha) + (alpha - 1.0) * math.log1p(-1.0 / alpha)


def approx_rdp_to_dp(cost, epsilon_hat):
    """DP delta obtained from ``cost`` at the chosen ``epsilon_hat``."""
    log_term = _log_conversion_term(cost.alpha, cost.epsilon, float(epsilon_hat))
    term = math.exp(log_term) if log_term < 700.0 else math.inf
    return DpGuarantee(max(float(epsilon_hat), 0.0), _clip_delta(cost.delta + term))


def invert_conversion(cost, delta_hat):
    """Smallest ``epsilon_hat >= 0`` whose converted delta does not exceed ``delta_hat``."""
    if not delta_hat > cost.delta:
        raise InfeasibleError(
            f"target delta_hat={delta_hat} must exceed the approximation delta={cost.delta}"
        )
    if delta_hat > 1.0:
        raise InvalidParameterError(f"delta_hat must be <= 1, got {delta_hat}")
    alpha = cost.alpha
    slack = delta_hat - cost.delta
    eps_hat = (
        cost.epsilon
        - (math.log(slack) + math.log(alpha)) / (alpha - 1.0)
        + math.log1p(-1.0 / alpha)
    )
    return DpGuarantee(max(eps_hat, 0.0), float(delta_hat))


def best_conversion(costs, delta_hat):
    """Tightest DP guarantee over several orders.

    Args:
      costs: ApproxRdp values for the same mechanism at different orders.
      delta_hat: Target DP delta.

    Returns:
      ``(DpGuarantee, alpha)`` for the order giving the smallest epsilon_hat.
      Orders whose approximation delta already reaches ``delta_hat`` are skipped.
    """
    best = None
    for cost in costs:
        if cost.delta >= delta_hat:
            continue
        g = invert_conversion(cost, delta_hat)
        if best is None or g.epsilon_hat < best[0].epsilon_hat:
            best = (g, cost.alpha)
    if best is None:
        raise InfeasibleError(f"no order can reach delta_hat={delta_hat}")
    return best


def _integer_order(alpha):
    if isinstance(alpha, (int, np.integer)):
        value = int(alpha)
    elif isinstance(alpha, float) and alpha.is_integer():
        value = int(alpha)
    else:
        raise UnsupportedOrderError(f"subsampling bound needs an integer order, got {alpha}")
    if value < 2:
        raise UnsupportedOrderError(f"subsampling bound needs an order >= 2, got {alpha}")
    return value


def _log_binom(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def subsampled_rdp(base, gamma, delta, alpha):
    """RDP of a mechanism run on a Poisson subsample.

    Uses the generic integer-order amplification bound

        1/(a-1) * log(1 + g**2 C(a,2) min(4(e^{eps(2)} - 1), 2 e^{eps(2)})
                      + sum_{j=3}^{a} g**j C(a,j) 2 e^{(j-1) eps(j)})

    at the adjusted rate ``g = gamma (1 - delta) / (1 - gamma delta)``, capped
    by the unsampled curve (subsampling never hurts).

    Args:
      base: Callable mapping an integer order to the base mechanism's RDP epsilon.
      gamma: SamplingConfig or float inclusion probability.
      delta: Approximation delta of the base mechanism.
      alpha: Integer order >= 2.

    Returns:
      ApproxRdp with delta ``gamma * delta``.
    """
    if not isinstance(gamma, SamplingConfig):
        gamma = SamplingConfig(float(gamma))
    g = gamma.gamma
    order = _integer_order(alpha)
    if not 0.0 <= delta <= 1.0:
        raise InvalidParameterError(f"delta must lie in [0, 1], got {delta}")
    base_eps = float(base(order))
    if g == 0.0:
        return ApproxRdp(order, 0.0, 0.0)
    rate = g * (1.0 - delta) / (1.0 - g * delta) if g * delta < 1.0 else 1.0
    if rate <= 0.0:
        return ApproxRdp(order, 0.0, _clip_delta(g * delta))
    log_rate = math.log(rate)

    log_terms = [0.0]
    eps2 = float(base(2))
    if eps2 > 0.0:
        log_min = min(math.log(4.0) + math.log(math.expm1(eps2)), math.log(2.0) + eps2)
        log_terms.append(2 * log_rate + _log_binom(order, 2) + log_min)
    for j in range(3, order + 1):
        log_terms.append(j * log_rate + _log_binom(order, j) + math.log(2.0) + (j - 1) * float(base(j)))
    eps_sub = float(logsumexp(log_terms)) / (order - 1)
    return ApproxRdp(order, min(eps_sub, base_eps), _clip_delta(g * delta))


def classical_gaussian_sigma(epsilon, delta, sensitivity, uses=1):
    """Textbook calibration ``sensitivity * sqrt(2 T ln(1.25/delta)) / epsilon``."""
    return sensitivity * math.sqrt(2.0 * uses * math.log(1.25 / delta)) / epsilon


def calibrate_sigma(
    target: DpGuarantee,
    sensitivity: float,
    uses: int = 1,
    alpha_grid: Sequence[float] = ALPHA_GRID,
    extra_rdp: Optional[Callable[[float], float]] = None,
    rtol: float = 1e-6,
):
    """Smallest Gaussian noise scale meeting ``target`` after ``uses`` compositions.

    Args:
      target: End-to-end (epsilon_hat, delta_hat).
      sensitivity: l2 sensitivity of the noised statistic.
      uses: Number of times the mechanism is applied to one record.
      alpha_grid: Candidate orders; the best one is committed to.
      extra_rdp: Optional per-use RDP added at each order (e.g. a pure-DP
        selection step run alongside the Gaussian test).
      rtol: Relative bracket width at which bisection stops.

    Returns:
      ``(sigma, alpha_star)``.
    """
    alphas = np.array([_check_alpha(a) for a in alpha_grid], dtype=float)
    if alphas.size == 0:
        raise InvalidParameterError("alpha_grid must not be empty")
    if not target.epsilon_hat > 0.0 or not 0.0 < target.delta_hat < 1.0:
        raise InvalidParameterError(f"unsupported target {target}")
    if uses < 1:
        raise InvalidParameterError(f"uses must be >= 1, got {uses}")
    # search over the noise multiplier sigma / sensitivity, then rescale
    sensitivity = max(float(sensitivity), 1e-300)
    extra = np.array([extra_rdp(a) for a in alphas]) if extra_rdp is not None else np.zeros_like(alphas)
    log_fixed = (np.log(target.delta_hat) + np.log(alphas)) / (alphas - 1.0) - np.log1p(-1.0 / alphas)

    def eps_hat(mult):
        rdp = uses * (alphas / (2.0 * mult**2) + extra)
        return np.maximum(rdp - log_fixed, 0.0)

    def feasible(mult):
        return eps_hat(mult).min() <= target.epsilon_hat

    hi = classical_gaussian_sigma(target.epsilon_hat, target.delta_hat, 1.0, uses)
    while not feasible(hi):
        hi *= 2.0
        if hi > 1e100:
            raise InfeasibleError(f"target {target} unreachable with this alpha grid")
    lo = hi / 2.0
    while feasible(lo):
        lo /= 2.0
    while hi / lo > 1.0 + rtol:
        mid = math.sqrt(lo * hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi * sensitivity, float(alphas[np.argmin(eps_hat(hi))])
