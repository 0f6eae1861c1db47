"""Low-level numerical helpers: special functions, quadratic roots, counter-based
random streams and trinomial sampling by inversion.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.random import Philox
from scipy import special
from scipy.stats import binom

__all__ = [
    "log_gamma",
    "regularized_gamma_q",
    "solve_quadratic",
    "RngStream",
    "substream_id",
    "sample_trinomial",
    "TrinomialSampler",
]

_MASK64 = (1 << 64) - 1
_U53 = 2.0**-53

# substream_id bit layout: config index | replication | resample attempt
_ATTEMPT_BITS = 8
_REP_BITS = 32
_CONFIG_BITS = 64 - _REP_BITS - _ATTEMPT_BITS


def log_gamma(x: float) -> float:
    """Natural log of the gamma function for ``x > 0``."""
    if not x > 0 or not math.isfinite(x):
        raise ValueError(f"log_gamma requires a finite x > 0, got {x!r}")
    return math.lgamma(x)


def regularized_gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x) = Gamma(a, x) / Gamma(a)."""
    if not a > 0 or not math.isfinite(a):
        raise ValueError(f"regularized_gamma_q requires a > 0, got a={a!r}")
    if not x >= 0:
        raise ValueError(f"regularized_gamma_q requires x >= 0, got x={x!r}")
    if math.isinf(x):
        return 0.0
    return float(special.gammaincc(a, x))


def solve_quadratic(a: float, b: float, c: float) -> list[float]:
    """Real roots of ``a*x**2 + b*x + c``, ascending.

    Uses ``q = -(b + sign(b)*sqrt(disc))/2`` with roots ``q/a`` and ``c/q`` so
    that neither root suffers cancellation. A zero leading coefficient falls
    back to the linear equation. No real root gives an empty list.
    """
    if a == 0.0 and b == 0.0 and c == 0.0:
        raise ValueError("solve_quadratic: all coefficients are zero")
    if a == 0.0:
        if b == 0.0:
            return []
        return [-c / b]
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return []
    sq = math.sqrt(disc)
    q = -0.5 * (b + math.copysign(sq, b))
    if q == 0.0:
        # b == 0 and c == 0
        return [0.0, 0.0]
    roots = sorted((q / a, c / q))
    return roots


def substream_id(config_index: int, replication: int, attempt: int = 0) -> int:
    """Pack (configuration, replication, resample attempt) into a 64-bit stream id."""
    if not 0 <= attempt < (1 << _ATTEMPT_BITS):
        raise ValueError(f"attempt out of range: {attempt}")
    if not 0 <= replication < (1 << _REP_BITS):
        raise ValueError(f"replication out of range: {replication}")
    if not 0 <= config_index < (1 << _CONFIG_BITS):
        raise ValueError(f"config_index out of range: {config_index}")
    return (config_index << (_REP_BITS + _ATTEMPT_BITS)) | (replication << _ATTEMPT_BITS) | attempt


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox4x64 bit generator with the 128-bit key set to the
    pair, so two streams with the same key produce the same sequence on every
    platform, and distinct keys give independent sequences. Draws advance the
    stream like any numpy generator.
    """

    __slots__ = ("seed", "stream_id", "_bitgen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._bitgen = Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def uniforms(self, k: int) -> np.ndarray:
        """``k`` doubles on [0, 1) with 53 random bits each."""
        raw = self._bitgen.random_raw(k)
        return (raw >> np.uint64(11)).astype(np.float64) * _U53

    def generator(self) -> np.random.Generator:
        """A numpy Generator sharing this stream's state."""
        return np.random.Generator(self._bitgen)


def _invert(cdf_row: np.ndarray, u: float) -> int:
    # number of k in 0..n-1 with CDF(k) <= u
    return int(np.count_nonzero(cdf_row[:-1] <= u))


def _conditional_p1(p1: float, p2: float) -> float:
    tot = p1 + p2
    return p1 / tot if tot > 0 else 0.0


def sample_trinomial(rng: RngStream, n: int, probs) -> tuple[int, int, int]:
    """Draw (m0, m1, m2) ~ Multinomial(n; p0, p1, p2).

    m0 is Binomial(n, p0) and m1 given m0 is Binomial(n - m0, p1 / (p1 + p2)),
    each by CDF inversion on one uniform from ``rng``.
    """
    p0, p1, p2 = (float(p) for p in probs)
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    u0, u1 = rng.uniforms(2)
    k = np.arange(n + 1)
    m0 = _invert(binom.cdf(k, n, p0), u0)
    rest = n - m0
    m1 = _invert(binom.cdf(np.arange(rest + 1), rest, _conditional_p1(p1, p2)), u1) if rest > 0 else 0
    return m0, m1, rest - m1


class TrinomialSampler:
    """Vectorized twin of :func:`sample_trinomial` for a fixed (n, probs).

    Precomputes the marginal CDF of m0 and the conditional CDF table for m1,
    so a batch of uniform pairs maps to the same counts the scalar sampler
    would produce from the same uniforms.
    """

    def __init__(self, n: int, probs):
        p0, p1, p2 = (float(p) for p in probs)
        self.n = int(n)
        k = np.arange(self.n + 1)
        self._cdf0 = binom.cdf(k, self.n, p0)[:-1]
        q = _conditional_p1(p1, p2)
        table = np.ones((self.n + 1, self.n))
        for rest in range(1, self.n + 1):
            table[rest, :rest] = binom.cdf(np.arange(rest + 1), rest, q)[:-1]
        self._cdf1 = table

    def sample(self, u0: np.ndarray, u1: np.ndarray) -> np.ndarray:
        """Map uniform arrays ``u0, u1`` of shape (R,) to counts of shape (R, 3)."""
        m0 = np.count_nonzero(self._cdf0[None, :] <= u0[:, None], axis=1)
        rest = self.n - m0
        m1 = np.count_nonzero(self._cdf1[rest] <= u1[:, None], axis=1)
        return np.stack([m0, m1, rest - m1], axis=1)
