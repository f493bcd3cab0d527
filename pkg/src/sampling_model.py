"""
Binomial model of host detection under packet sampling.

A host sending ``host_rate_per_min`` packets per minute for ``days`` days
contributes that many packets out of the ``N`` crossing the exchange; the
number of its packets among ``n`` sampled ones is Binomial(n, p_hat).
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ModelValidityError

logger = logging.getLogger(__name__)

MINUTES_PER_DAY = 60 * 24
MIN_TRIALS = 10_000
Z_95 = 1.959963984540054


@dataclass(frozen=True)
class SamplingModel:
    days: float
    sampled_n: int
    rate_reciprocal: int = 4096
    total_n: float = None
    host_rate_per_min: float = 1.0
    strict: bool = False

    def __post_init__(self):
        if not self.days > 0:
            raise DomainError(f"observation period must be positive, got {self.days}")
        if self.sampled_n < 1 or int(self.sampled_n) != self.sampled_n:
            raise DomainError(f"sampled packet count must be a positive integer, "
                              f"got {self.sampled_n}")
        if self.rate_reciprocal < 1:
            raise DomainError(f"rate reciprocal must be positive, got {self.rate_reciprocal}")
        if self.total_n is not None and not self.total_n > 0:
            raise DomainError(f"total packet count must be positive, got {self.total_n}")
        if self.host_rate_per_min < 0:
            raise DomainError(f"host rate must be non-negative, got {self.host_rate_per_min}")

    @classmethod
    def for_probability(cls, sampled_n, probability):
        """A model with the given n whose p_hat equals probability."""
        total = 10.0 * sampled_n
        return cls(days=1.0, sampled_n=sampled_n, total_n=total,
                   host_rate_per_min=probability * total / MINUTES_PER_DAY)

    @property
    def n_total(self):
        """Packets crossing the exchange in the period (n * rate when not given)."""
        if self.total_n is not None:
            return float(self.total_n)
        return float(self.sampled_n) * self.rate_reciprocal

    @property
    def valid(self):
        """The sample must be at least ten times smaller than the population."""
        return self.sampled_n * 10 <= self.n_total

    def check_validity(self):
        if self.valid:
            return
        message = (f"model outside its validity range: n={self.sampled_n} is not at least "
                   f"10 times lower than N={self.n_total:g}")
        if self.strict:
            raise ModelValidityError(message)
        logger.warning(message)

    def p_hat(self):
        """Probability that one sampled packet belongs to the host."""
        self.check_validity()
        expected = self.host_rate_per_min * MINUTES_PER_DAY * self.days
        return min(1.0, expected / self.n_total)

    def _log_q(self, p):
        return self.sampled_n * math.log1p(-p)

    def prob_k(self, k):
        """Probability of observing exactly k of the host's packets (log-space pmf)."""
        n = self.sampled_n
        if k < 0 or k > n or int(k) != k:
            raise DomainError(f"k must be an integer in [0, {n}], got {k}")
        p = self.p_hat()
        if p == 0.0:
            return 1.0 if k == 0 else 0.0
        if p == 1.0:
            return 1.0 if k == n else 0.0
        if k == 0:
            return math.exp(self._log_q(p))
        log_pmf = (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
                   + k * math.log(p) + (n - k) * math.log1p(-p))
        return math.exp(log_pmf)

    def pmf(self):
        """Every prob_k for k = 0..n; meant for small n."""
        return [self.prob_k(k) for k in range(self.sampled_n + 1)]

    def prob_at_least_one(self):
        """
        Probability of observing at least one of the host's packets.

        Nondecreasing in days and in the host rate. It grows with sampled_n only
        while total_n is held fixed; with the default total_n = sampled_n * rate
        a larger sample also means a larger population and a smaller p_hat.
        """
        p = self.p_hat()
        if p == 0.0:
            return 0.0
        if p == 1.0:
            return 1.0
        return -math.expm1(self._log_q(p))

    def expected_sampled(self):
        """Expected number of the host's packets in the sample."""
        return self.sampled_n * self.p_hat()

    def estimated_host_rate(self, observed):
        """Packets per minute a host must send to yield ``observed`` samples on average."""
        return observed * self.rate_reciprocal / (MINUTES_PER_DAY * self.days)

    def describe(self):
        return {
            "days": self.days,
            "sampled_n": self.sampled_n,
            "rate_reciprocal": self.rate_reciprocal,
            "total_n": self.n_total,
            "host_rate_per_min": self.host_rate_per_min,
            "valid": self.valid,
        }


def pmf_total(model):
    """Compensated sum of the pmf (1 up to rounding)."""
    return math.fsum(model.pmf())


@dataclass(frozen=True)
class MonteCarloResult:
    probability: float
    half_width: float
    trials: int
    seed: int


def wilson_half_width(successes, trials, z=Z_95):
    """Half-width of the Wilson score interval for a binomial proportion."""
    p = successes / trials
    spread = p * (1.0 - p) / trials + z * z / (4.0 * trials * trials)
    return z * math.sqrt(spread) / (1.0 + z * z / trials)


def monte_carlo_detection(model, trials, seed, shards=8):
    """
    Estimate P(X >= 1) by simulation.

    Each trial draws the host's sampled count from Binomial(n, p_hat). Trials
    are split over shards with independent counter-based streams spawned from
    the seed and merged by summation, so the result depends only on the seed.

    Args:
        model: SamplingModel
        trials: Number of simulated observation periods (>= 10^4)
        seed: Integer seed
        shards: Number of independent streams

    Returns:
        MonteCarloResult with the empirical probability and a 95% half-width
    """
    if trials < MIN_TRIALS:
        raise DomainError(f"at least {MIN_TRIALS} trials are needed, got {trials}")
    p = model.p_hat()
    if p == 0.0:
        return MonteCarloResult(0.0, wilson_half_width(0, trials), trials, seed)

    shards = max(1, min(shards, trials))
    sizes = [trials // shards + (1 if i < trials % shards else 0) for i in range(shards)]
    hits = 0
    for child, size in zip(np.random.SeedSequence(seed).spawn(shards), sizes):
        rng = np.random.Generator(np.random.Philox(child))
        hits += int(np.count_nonzero(rng.binomial(model.sampled_n, p, size=size)))
    return MonteCarloResult(hits / trials, wilson_half_width(hits, trials), trials, seed)


def binomial_bounds(n, p, z=3.0):
    """
    Mean and z-sigma interval of a Binomial(n, p) count.

    Returns:
        (low, high, mean, sigma)
    """
    mean = n * p
    sigma = math.sqrt(n * p * (1.0 - p))
    return mean - z * sigma, mean + z * sigma, mean, sigma
