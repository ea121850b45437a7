"""Domain types and randomness plumbing for the matching-market simulator.

A run is parameterized by ``MarketConfig``: agents arrive at Poisson rate
``m`` over the horizon ``[0, T]``, any two agents are compatible with
probability ``p = d/m`` (one independent Bernoulli draw per unordered
pair), and each agent carries a maximum sojourn time drawn from the
departure distribution.

Seeding contract
----------------
Every random draw of a run derives from the 64-bit ``seed``.  The master
seed is expanded into four named sub-streams (interarrival, sojourn,
compatibility, tie-break) with the splitmix64 mixer, each feeding its own
PCG64 generator.  Arrivals and sojourns therefore stay bit-identical when
only the matching policy changes, which is what makes paired-seed policy
comparisons and the coupled two-pool mode meaningful.  Reproducibility is
guaranteed within one implementation, not across languages or RNG
libraries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Union

import numpy as np


class ConfigError(ValueError):
    """Invalid market or departure configuration."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class RangeError(ValueError):
    """Instrumentation time outside the admissible window."""


class FormatError(ValueError):
    """Malformed structured input (trajectory, record list, flag syntax)."""


class NumericError(ArithmeticError):
    """Numeric invariant breached (underflow, failed internal cross-check)."""


_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Sub-stream indices under the master seed.
STREAM_INTERARRIVAL = 0
STREAM_SOJOURN = 1
STREAM_COMPATIBILITY = 2
STREAM_TIEBREAK = 3


def splitmix64(x: int) -> int:
    """One splitmix64 round; the documented mixing primitive for seeds."""
    x = (x + _GOLDEN) & _M64
    z = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def mix_seed(master: int, *indices: int) -> int:
    """Derive a sub-seed by folding indices into the master seed.

    Folding is left to right, one splitmix64 round per index, so
    ``mix_seed(s, a, b)`` is a fixed, documented function of its inputs.
    """
    h = master & _M64
    for ix in indices:
        h = splitmix64((h ^ (ix & _M64)) & _M64)
    return h


class PolicyKind(str, Enum):
    """Matching policy: match at arrival, at the last moment, or at
    arrival with preference for the partner closest to departure."""

    GREEDY = "greedy"
    PATIENT = "patient"
    GREEDY_SOJOURN = "greedy-sojourn"


# --------------------------------------------------------------------------
# Departure (maximum-sojourn) distributions


@dataclass(frozen=True)
class Constant:
    c: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ConfigError(f"constant sojourn must be finite and >= 0, got {self.c}")


@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.rate) and self.rate > 0):
            raise ConfigError(f"exponential rate must be finite and > 0, got {self.rate}")


@dataclass(frozen=True)
class Uniform:
    a: float
    b: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.a) and math.isfinite(self.b) and 0 <= self.a < self.b):
            raise ConfigError(f"uniform support needs 0 <= a < b, got [{self.a}, {self.b}]")


@dataclass(frozen=True)
class NeverPerish:
    """Point mass at +inf: agents never perish."""


@dataclass(frozen=True)
class Mixture:
    components: tuple[tuple[float, "DepartureSpec"], ...]

    def __post_init__(self) -> None:
        if not self.components:
            raise ConfigError("mixture needs at least one component")
        total = math.fsum(w for w, _ in self.components)
        if not (math.isfinite(total) and total > 0):
            raise ConfigError(f"mixture weights must sum to a positive value, got {total}")
        if any(w <= 0 for w, _ in self.components):
            raise ConfigError("mixture weights must be positive")
        normalized = tuple((w / total, spec) for w, spec in self.components)
        object.__setattr__(self, "components", normalized)


DepartureSpec = Union[Constant, Exponential, Uniform, NeverPerish, Mixture]


def sample_sojourn(spec: DepartureSpec, rng: np.random.Generator) -> float:
    """Draw one maximum sojourn time; NeverPerish yields +inf.

    Constant consumes no randomness; Exponential inverts the CDF on one
    uniform; Uniform is an affine transform of one uniform; Mixture spends
    one uniform on component selection, then samples the component.
    """
    if type(spec) is Constant:
        return spec.c
    if type(spec) is Exponential:
        return exponential_icdf(rng.random(), spec.rate)
    if type(spec) is Uniform:
        return spec.a + (spec.b - spec.a) * rng.random()
    if type(spec) is NeverPerish:
        return math.inf
    if type(spec) is Mixture:
        u = rng.random()
        acc = 0.0
        for w, comp in spec.components:
            acc += w
            if u < acc:
                return sample_sojourn(comp, rng)
        return sample_sojourn(spec.components[-1][1], rng)
    raise ConfigError(f"unknown departure spec {spec!r}")


def exponential_icdf(u: float, rate: float) -> float:
    """Inverse CDF of Exponential(rate) at u in [0, 1)."""
    return -math.log1p(-u) / rate


def sample_interarrival(m: float, rng: np.random.Generator) -> float:
    """One Exponential(m) interarrival gap, via inverse CDF."""
    return exponential_icdf(rng.random(), m)


def departure_cdf(spec: DepartureSpec, x: float) -> float:
    """Mass of [0, x] under the departure distribution, exact per variant."""
    if x < 0:
        raise DomainError(f"cdf argument must be >= 0, got {x}")
    if type(spec) is Constant:
        return 1.0 if x >= spec.c else 0.0
    if type(spec) is Exponential:
        return -math.expm1(-spec.rate * x)
    if type(spec) is Uniform:
        if x <= spec.a:
            return 0.0
        if x >= spec.b:
            return 1.0
        return (x - spec.a) / (spec.b - spec.a)
    if type(spec) is NeverPerish:
        return 0.0
    if type(spec) is Mixture:
        return math.fsum(w * departure_cdf(comp, x) for w, comp in spec.components)
    raise ConfigError(f"unknown departure spec {spec!r}")


def support_min(spec: DepartureSpec) -> float:
    """Left endpoint of the support (inf for NeverPerish)."""
    if type(spec) is Constant:
        return spec.c
    if type(spec) is Exponential:
        return 0.0
    if type(spec) is Uniform:
        return spec.a
    if type(spec) is NeverPerish:
        return math.inf
    if type(spec) is Mixture:
        return min(support_min(comp) for _, comp in spec.components)
    raise ConfigError(f"unknown departure spec {spec!r}")


def departure_kind(spec: DepartureSpec) -> str:
    return {
        Constant: "constant",
        Exponential: "exponential",
        Uniform: "uniform",
        NeverPerish: "never",
        Mixture: "mixture",
    }[type(spec)]


def departure_to_dict(spec: DepartureSpec) -> dict:
    if type(spec) is Constant:
        return {"kind": "constant", "c": spec.c}
    if type(spec) is Exponential:
        return {"kind": "exponential", "rate": spec.rate}
    if type(spec) is Uniform:
        return {"kind": "uniform", "a": spec.a, "b": spec.b}
    if type(spec) is NeverPerish:
        return {"kind": "never"}
    if type(spec) is Mixture:
        return {
            "kind": "mixture",
            "components": [
                {"weight": w, "spec": departure_to_dict(comp)} for w, comp in spec.components
            ],
        }
    raise ConfigError(f"unknown departure spec {spec!r}")


def departure_from_dict(data: dict) -> DepartureSpec:
    try:
        kind = data["kind"]
    except (TypeError, KeyError):
        raise ConfigError(f"departure object needs a 'kind' key, got {data!r}") from None
    try:
        if kind == "constant":
            return Constant(float(data["c"]))
        if kind == "exponential":
            return Exponential(float(data["rate"]))
        if kind == "uniform":
            return Uniform(float(data["a"]), float(data["b"]))
        if kind == "never":
            return NeverPerish()
        if kind == "mixture":
            return Mixture(
                tuple(
                    (float(entry["weight"]), departure_from_dict(entry["spec"]))
                    for entry in data["components"]
                )
            )
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"malformed departure object {data!r}: {exc}") from None
    raise ConfigError(f"unknown departure kind {kind!r}")


def parse_departure_flag(text: str) -> DepartureSpec:
    """Parse the CLI departure syntax.

    Accepted forms: ``const:<c>``, ``exp:<rate>``, ``unif:<a>:<b>``,
    ``never``, and ``mix:<w>*<inner>,<w>*<inner>,...`` (inner specs must
    not themselves be mixtures; use JSON configs for nesting).
    """
    try:
        if text == "never":
            return NeverPerish()
        if text.startswith("const:"):
            return Constant(float(text[6:]))
        if text.startswith("exp:"):
            return Exponential(float(text[4:]))
        if text.startswith("unif:"):
            a, b = text[5:].split(":")
            return Uniform(float(a), float(b))
        if text.startswith("mix:"):
            comps = []
            for part in text[4:].split(","):
                weight, inner = part.split("*", 1)
                if inner.startswith("mix:"):
                    raise FormatError("nested mixtures are not supported in flag syntax")
                comps.append((float(weight), parse_departure_flag(inner)))
            return Mixture(tuple(comps))
    except (ValueError, IndexError) as exc:
        raise FormatError(f"cannot parse departure flag {text!r}: {exc}") from None
    raise FormatError(f"cannot parse departure flag {text!r}")


# --------------------------------------------------------------------------
# Agents and compatibility


class AgentOutcome(IntEnum):
    UNRESOLVED = 0
    MATCHED = 1
    PERISHED = 2
    IN_POOL_AT_HORIZON = 3


@dataclass(slots=True)
class Agent:
    """One market participant; ids are 1-based in arrival order."""

    id: int
    arrival_time: float
    max_sojourn: float
    critical_time: float
    outcome: int = AgentOutcome.UNRESOLVED
    partner_id: int | None = None
    outcome_time: float | None = None

    def resolve(self, outcome: int, time: float, partner_id: int | None = None) -> None:
        assert self.outcome == AgentOutcome.UNRESOLVED
        self.outcome = outcome
        self.outcome_time = time
        self.partner_id = partner_id


class PairCompatibilityOracle:
    """Bernoulli(p) compatibility draws, one per unordered agent pair.

    Draws are taken lazily at the first (and only) time a pair is queried:
    at the later agent's arrival under greedy matching, at the earlier
    criticality under patient matching.  Each pair is queried at most once
    per run, so lazy drawing is distributionally exact; enable pair
    tracking in tests to assert the at-most-once guarantee.
    """

    __slots__ = ("rng", "p", "_seen")

    def __init__(self, rng: np.random.Generator, p: float) -> None:
        if not 0 < p <= 1:
            raise ConfigError(f"compatibility probability must be in (0, 1], got {p}")
        self.rng = rng
        self.p = p
        self._seen: set[tuple[int, int]] | None = None

    def enable_pair_tracking(self) -> None:
        self._seen = set()

    def query_block(self, agent_id: int, member_ids: list[int]) -> np.ndarray:
        """Query one agent against a block of pool members (one draw each)."""
        bits = self.rng.random(len(member_ids)) < self.p
        if self._seen is not None:
            for mid in member_ids:
                pair = (agent_id, mid) if agent_id < mid else (mid, agent_id)
                assert pair not in self._seen, f"pair {pair} queried twice"
                self._seen.add(pair)
        return bits


# --------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class MarketConfig:
    """Full parameterization of one market run."""

    m: float
    d: float
    T: float
    policy: PolicyKind
    departure: DepartureSpec
    seed: int
    pool_trace: bool = False

    def __post_init__(self) -> None:
        if not (math.isfinite(self.m) and self.m > 0):
            raise ConfigError(f"arrival rate m must be finite and > 0, got {self.m}")
        if not (math.isfinite(self.T) and self.T > 0):
            raise ConfigError(f"horizon T must be finite and > 0, got {self.T}")
        if not (math.isfinite(self.d) and 0 < self.d <= self.m):
            raise ConfigError(
                f"density d must satisfy 0 < d <= m so p = d/m is a probability, got d={self.d}, m={self.m}"
            )
        if not isinstance(self.policy, PolicyKind):
            raise ConfigError(f"policy must be a PolicyKind, got {self.policy!r}")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 1 << 64):
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    @property
    def p(self) -> float:
        return self.d / self.m

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "d": self.d,
            "T": self.T,
            "policy": self.policy.value,
            "departure": departure_to_dict(self.departure),
            "seed": self.seed,
            "pool_trace": self.pool_trace,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MarketConfig":
        try:
            return cls(
                m=float(data["m"]),
                d=float(data["d"]),
                T=float(data["T"]),
                policy=PolicyKind(data["policy"]),
                departure=departure_from_dict(data["departure"]),
                seed=int(data["seed"]),
                pool_trace=bool(data.get("pool_trace", False)),
            )
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed market config: {exc}") from None


@dataclass(frozen=True)
class RngStreams:
    """The four per-run generators derived from one master seed."""

    interarrival: np.random.Generator = field(repr=False)
    sojourn: np.random.Generator = field(repr=False)
    compatibility: np.random.Generator = field(repr=False)
    tiebreak: np.random.Generator = field(repr=False)

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        def gen(stream: int) -> np.random.Generator:
            return np.random.Generator(np.random.PCG64(mix_seed(seed, stream)))

        return cls(
            interarrival=gen(STREAM_INTERARRIVAL),
            sojourn=gen(STREAM_SOJOURN),
            compatibility=gen(STREAM_COMPATIBILITY),
            tiebreak=gen(STREAM_TIEBREAK),
        )
