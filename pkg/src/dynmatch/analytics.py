"""Closed-form market quantities: the no-perishing pool-size chain, loss
and waiting bounds, and steady-state heuristic predictions.

Without perishing the pool size is a birth-death chain: from size k an
arrival joins with probability (1 - d/m)^k and matches (size k-1)
otherwise, so the embedded discrete chain has p(k, k+1) = (1 - d/m)^k,
p(k, k-1) = 1 - (1 - d/m)^k, and p(0, 1) = 1.  Its stationary
distribution is computed by the detailed-balance recursion in log space
with a certified geometric tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import DomainError, NumericError


@dataclass(frozen=True)
class ChainParams:
    """Arrival rate and density of the no-perishing pool-size chain."""

    m: float
    d: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.m) and math.isfinite(self.d) and 0 < self.d <= self.m):
            raise DomainError(f"need 0 < d <= m, got d={self.d}, m={self.m}")

    @property
    def q(self) -> float:
        return 1.0 - self.d / self.m


def transition_prob(k: int, params: ChainParams) -> tuple[float, float]:
    """(p_up, p_down) of the embedded chain at pool size k."""
    if k < 0:
        raise DomainError(f"pool size must be >= 0, got {k}")
    if k == 0:
        return 1.0, 0.0
    up = params.q**k
    return up, 1.0 - up


@dataclass(frozen=True)
class StationaryDistribution:
    """Truncated stationary law of the pool-size chain.

    ``probs[k]`` is the stationary mass at size k for k <= truncation_K;
    ``tail_bound`` is a certified upper bound on the (normalized) mass
    above the truncation, so probs sum to 1 - tail_bound.
    """

    params: ChainParams
    probs: np.ndarray = field(repr=False)
    log_probs: np.ndarray = field(repr=False)
    truncation_K: int
    tail_bound: float

    def mass_above(self, x: float) -> float:
        """Upper bound on the stationary mass of (x, inf)."""
        k0 = int(math.floor(x)) + 1
        if k0 > self.truncation_K:
            return self.tail_bound
        return float(self.probs[max(k0, 0) :].sum()) + self.tail_bound

    def quantile(self, q: float) -> int:
        if not 0 < q < 1:
            raise DomainError(f"quantile level must be in (0, 1), got {q}")
        return int(np.searchsorted(np.cumsum(self.probs), q))


def _log_p_up(k: int, log_q: float) -> float:
    return k * log_q


def _log_p_down(k: int, log_q: float) -> float:
    # log(1 - q^k), stable for q^k near 0 and near 1
    return math.log(-math.expm1(k * log_q))


def stationary(
    params: ChainParams, tail_tol: float = 1e-12, min_K: int | None = None
) -> StationaryDistribution:
    """Stationary distribution by detailed balance, in log space.

    The truncation K is extended until the certified geometric tail (the
    balance ratio drops below 1/2 once p_up < 1/3, and keeps decreasing)
    is below ``tail_tol`` relative to the total mass, and past ``min_K``
    when given.
    """
    if not 0 < tail_tol < 1:
        raise DomainError(f"tail_tol must be in (0, 1), got {tail_tol}")

    if params.d == params.m:
        # p_up(1) = 0: the chain flips between sizes 0 and 1.
        probs = np.array([0.5, 0.5])
        return StationaryDistribution(params, probs, np.log(probs), 1, 0.0)

    log_q = math.log1p(-params.d / params.m)
    logs = [0.0]
    k = 0
    log_total = 0.0
    hard_cap = 5_000_000
    while True:
        # ratio rho(k+1)/rho(k) = p(k, k+1) / p(k+1, k)
        log_ratio = _log_p_up(k, log_q) - _log_p_down(k + 1, log_q)
        logs.append(logs[-1] + log_ratio)
        k += 1
        log_total = float(np.logaddexp(log_total, logs[-1]))
        p_up = math.exp(_log_p_up(k, log_q))
        if p_up < 1.0 / 3.0 and (min_K is None or k >= min_K):
            r = math.exp(_log_p_up(k, log_q) - _log_p_down(k + 1, log_q))
            log_tail = (
                logs[-1] + math.log(r) - math.log1p(-r) if r > 0.0 else -math.inf
            )
            if log_tail - log_total <= math.log(tail_tol):
                break
        if k > hard_cap:
            raise NumericError("stationary truncation exceeded the hard cap")

    log_arr = np.array(logs)
    peak = float(log_arr.max())
    log_Z = peak + math.log(np.exp(log_arr - peak).sum() + math.exp(log_tail - peak))
    if not math.isfinite(log_Z):
        raise NumericError("stationary normalization is not finite")
    log_probs = log_arr - log_Z
    return StationaryDistribution(
        params=params,
        probs=np.exp(log_probs),
        log_probs=log_probs,
        truncation_K=k,
        tail_bound=math.exp(log_tail - log_Z),
    )


def stationary_mean(dist: StationaryDistribution) -> float:
    """Mean pool size: sum of k * probs[k] plus the tail remainder bound."""
    k = np.arange(dist.probs.size)
    mean = float((k * dist.probs).sum())
    K = dist.truncation_K
    tb = dist.tail_bound
    if tb > 0:
        # tail mass is dominated by a geometric with the ratio at K
        p_up = dist.params.q**K
        r = p_up / (1.0 - dist.params.q ** (K + 1))
        mean += tb * K + math.exp(dist.log_probs[K]) * r / (1.0 - r) ** 2
    m, d = dist.params.m, dist.params.d
    if m >= 1e3:
        assert mean <= 1.01 * math.ceil(math.log(3) * m / d) + 11
    return mean


@dataclass(frozen=True)
class BoundConstants:
    """The three pool-size threshold constants; c1 < c2 < c3, c1 -> 1."""

    c1: float
    c2: float
    c3: float


def bound_constants(m: float, d: float) -> BoundConstants:
    if m <= 1:
        raise DomainError(f"constants need m > 1, got {m}")
    c1 = 1.0 + 10.0 / (math.log(2) * math.log(m))
    step = d * math.log(m) ** 2 / (m * math.log(2))
    return BoundConstants(c1, c1 + 2 * step, c1 + 4 * step)


@dataclass(frozen=True)
class TailDecayReport:
    """Certified geometric decay of the stationary tail."""

    threshold: int
    decay_bound: float
    max_ratio_beyond: float
    extended_threshold: float
    mass_beyond: float
    mass_cap: float
    passed: bool


def stationary_tail_decay(params: ChainParams, tail_tol: float = 1e-12) -> TailDecayReport:
    """Check the per-step tail decay of the stationary distribution.

    Beyond pool size c1*log(2)*m/d every balance ratio must fall below
    exp(-10/log m), and the mass above that threshold plus 1.5*log(m)^2
    must not exceed m^-9.
    """
    m, d = params.m, params.d
    consts = bound_constants(m, d)
    threshold = math.ceil(consts.c1 * math.log(2) * m / d)
    extended = consts.c1 * math.log(2) * m / d + 1.5 * math.log(m) ** 2
    dist = stationary(params, tail_tol=tail_tol, min_K=int(extended) + 10)
    ratios = np.exp(np.diff(dist.log_probs[threshold:]))
    max_ratio = float(ratios.max()) if ratios.size else 0.0
    decay_bound = math.exp(-10.0 / math.log(m))
    mass_beyond = dist.mass_above(extended)
    mass_cap = m**-9
    return TailDecayReport(
        threshold=threshold,
        decay_bound=decay_bound,
        max_ratio_beyond=max_ratio,
        extended_threshold=extended,
        mass_beyond=mass_beyond,
        mass_cap=mass_cap,
        passed=(max_ratio <= decay_bound and mass_beyond <= mass_cap),
    )


# --------------------------------------------------------------------------
# Loss and waiting bounds


def gdy_loss_upper(d: float, eps_min_sojourn: float) -> float:
    """Greedy loss upper bound exp(-eps*d / (2 log 2)).

    Valid when d >= 2 and the departure distribution puts no mass below
    ``eps_min_sojourn`` (the caller certifies this, e.g. via
    ``departure_cdf``).
    """
    if d < 2:
        raise DomainError(f"upper bound requires d >= 2, got {d}")
    if eps_min_sojourn <= 0:
        raise DomainError(f"minimum sojourn must be > 0, got {eps_min_sojourn}")
    return math.exp(-eps_min_sojourn * d / (2 * math.log(2)))


def gdy_loss_lower(d: float, eps: float, delta: float) -> float:
    """Greedy loss lower bound (delta/2) * exp(-eps*d).

    Valid when the departure distribution puts mass at least ``delta`` on
    [0, eps] (caller certifies).  Holds for any matching policy that
    leaves at least half of the agents unmatched at arrival.
    """
    if d <= 0 or eps <= 0:
        raise DomainError(f"need d > 0 and eps > 0, got d={d}, eps={eps}")
    if not 0 <= delta <= 1:
        raise DomainError(f"delta must be a probability, got {delta}")
    return 0.5 * delta * math.exp(-eps * d)


def pat_loss_upper(d: float) -> float:
    """Patient loss upper bound exp(-d/5) under unit constant sojourn."""
    if d < 0:
        raise DomainError(f"need d >= 0, got {d}")
    return math.exp(-d / 5.0)


def waiting_bounds(
    m: float, T: float, d: float, c_min: float, mass_at_least_c: float
) -> tuple[float | None, float]:
    """(lower, upper) bounds on the expected total waiting time under greedy.

    Upper bound 6mT/(5d) holds for any departure distribution (m large).
    The lower bound mT/(8d) needs mass more than 9/10 on [c, inf] with
    c > 1/d; when that certification fails the lower bound is None.
    """
    if m <= 0 or T <= 0 or d <= 0:
        raise DomainError("need m, T, d > 0")
    upper = 6.0 * m * T / (5.0 * d)
    lower = m * T / (8.0 * d) if (mass_at_least_c > 0.9 and c_min > 1.0 / d) else None
    return lower, upper


class HeuristicPrediction(NamedTuple):
    """Equilibrium pool sizes and the common loss level of both policies."""

    pool_gdy: float
    pool_pat: float
    loss_both: float


def heuristic_predictions(m: float, d: float) -> HeuristicPrediction:
    """Equilibrium pool sizes and the common loss level 0.5*exp(-d/(2 ln 2)).

    At equilibrium a greedy pool holds log(2)*m/d agents and a patient
    pool m/(2 log 2); both policies then lose about half of
    exp(-d/(2 log 2)) of their agents.
    """
    if d < 1:
        raise DomainError(f"prediction requires d >= 1, got {d}")
    if m <= 0:
        raise DomainError(f"need m > 0, got {m}")
    pool_gdy = math.log(2) * m / d
    pool_pat = m / (2 * math.log(2))
    loss_both = 0.5 * math.exp(-d / (2 * math.log(2)))
    return HeuristicPrediction(pool_gdy, pool_pat, loss_both)


def chernoff_poisson(mu: float, delta: float) -> float:
    """Chernoff tail bound exp(-mu*delta^2/3) for Poisson/Bernoulli sums."""
    if mu <= 0:
        raise DomainError(f"need mu > 0, got {mu}")
    if not 0 < delta <= 1:
        raise DomainError(f"need 0 < delta <= 1, got {delta}")
    return math.exp(-mu * delta * delta / 3.0)


def exp_estimate(c: float, m: float) -> float:
    """The bound exp(-c) for (1 - c/m)^m, checked before returning."""
    if not 0 <= c < m:
        raise DomainError(f"need 0 <= c < m, got c={c}, m={m}")
    bound = math.exp(-c)
    if (1.0 - c / m) ** m > bound * (1 + 1e-12):
        raise NumericError("exponential estimate violated")
    return bound
