"""Monte Carlo estimates of size and power for the three homogeneity tests.

Every replication owns a random stream keyed by (seed, configuration index,
replication, resample attempt), so results do not depend on batching or on
the number of worker threads. A table with a responder-free group (or one
whose statistics come out non-finite) is redrawn from the next attempt's
stream and counted in ``degenerate_count``.
"""

from __future__ import annotations

import math
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .estimation import degenerate_mask
from .inference import METHODS, chisq_quantile, statistics_batch
from .model import FEAS_TOL, ParameterError, cell_probs
from .numeric import RngStream, TrinomialSampler, substream_id

__all__ = [
    "GAMMA_CASES",
    "PI_CASES",
    "SIZE_DELTAS",
    "POWER_DELTA_A",
    "SIZE_M",
    "SIZE_J",
    "ResamplingExhausted",
    "SimConfig",
    "SimSummary",
    "repeat_pattern",
    "simulate",
    "simulate_statistics",
    "size_configs",
    "power_configs",
    "size_grid",
    "power_grid",
    "sweep_configs",
    "random_sweep",
    "default_workers",
]

GAMMA_CASES = {"I": (0.2, 0.4), "II": (0.3, 0.3), "III": (0.3, 0.5), "IV": (0.6, 0.6)}
PI_CASES = {"a": (0.2, 0.4), "b": (0.3, 0.3), "c": (0.2, 0.3)}
SIZE_DELTAS = (1.0, 1.2, 0.8)
POWER_DELTA0 = 0.5
POWER_DELTA_A = (1.0, 1.2, 1.4)
SIZE_M = (25, 50, 100)
SIZE_J = (2, 4, 6, 8)

MAX_ATTEMPTS = 100
CHUNK_SIZE = 2000
SWEEP_MAX_REJECTIONS = 100_000
# stream id reserved for drawing sweep parameters
SWEEP_PARAM_STREAM = (1 << 24) - 1

_CONFIG_MASK = (1 << 24) - 2


class ResamplingExhausted(RuntimeError):
    """A replication stayed degenerate through every resample attempt."""


def repeat_pattern(pattern: Sequence[float], J: int) -> tuple[float, ...]:
    """Cycle ``pattern`` out to length ``J``."""
    return tuple(float(pattern[j % len(pattern)]) for j in range(J))


def _fmt_vec(v) -> str:
    return ";".join(f"{x:g}" for x in v)


@dataclass(frozen=True)
class SimConfig:
    J: int
    m: int
    gamma_vec: tuple[float, ...]
    pi1_vec: tuple[float, ...]
    delta_vec: tuple[float, ...]
    replications: int = 50_000
    alpha: float = 0.05
    seed: int = 0
    # labels carried into CSV output
    gamma_case: str | None = None
    pi_case: str | None = None
    delta_spec: str | None = None

    def __post_init__(self):
        for name in ("gamma_vec", "pi1_vec", "delta_vec"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.J < 1:
            raise ParameterError(f"J must be at least 1, got {self.J}")
        if self.J < 2:
            raise ParameterError(f"df = 0: homogeneity test undefined for J = {self.J}")
        if self.m < 1:
            raise ParameterError(f"m must be at least 1, got {self.m}")
        if self.replications < 1:
            raise ParameterError(f"replications must be at least 1, got {self.replications}")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("gamma_vec", "pi1_vec", "delta_vec"):
            if len(getattr(self, name)) != self.J:
                raise ParameterError(f"{name} has length {len(getattr(self, name))}, expected J = {self.J}")
        for j, (g, p, d) in enumerate(zip(self.gamma_vec, self.pi1_vec, self.delta_vec)):
            if not (0.0 <= g <= 1.0 and 0.0 < p <= 1.0 and d > 0.0):
                raise ParameterError(f"stratum {j + 1}: invalid parameters gamma={g}, pi1={p}, delta={d}")
            if (2.0 - g) * p > 1.0 + FEAS_TOL or (2.0 - g) * d * p > 1.0 + FEAS_TOL:
                raise ParameterError(
                    f"stratum {j + 1}: infeasible parameters gamma={g}, pi1={p}, delta={d} "
                    f"((2-gamma)*pi exceeds 1)"
                )

    @property
    def config_index(self) -> int:
        """Stream key derived from the model parameters alone (not reps, seed or labels)."""
        key = f"{self.J}|{self.m}|{self.gamma_vec!r}|{self.pi1_vec!r}|{self.delta_vec!r}"
        return zlib.crc32(key.encode()) & _CONFIG_MASK

    def labels(self) -> tuple[str, str, str]:
        return (
            self.delta_spec or _fmt_vec(self.delta_vec),
            self.gamma_case or _fmt_vec(self.gamma_vec),
            self.pi_case or _fmt_vec(self.pi1_vec),
        )


@dataclass(frozen=True)
class SimSummary:
    config: SimConfig
    rejection_pct: dict[str, float]
    se_pct: dict[str, float]
    valid_replications: int
    degenerate_count: int
    nonconverged_count: int
    critical_value: float
    runtime_s: float = field(default=0.0, compare=False)

    def rows(self) -> list[dict]:
        c = self.config
        delta_spec, gamma_case, pi_case = c.labels()
        return [
            {
                "j": c.J,
                "m": c.m,
                "delta_spec": delta_spec,
                "gamma_case": gamma_case,
                "pi_case": pi_case,
                "method": meth,
                "rejection_pct": self.rejection_pct[meth],
                "se_pct": self.se_pct[meth],
                "degenerate_count": self.degenerate_count,
                "reps": self.valid_replications,
                "seed": c.seed,
            }
            for meth in METHODS
        ]


def default_workers() -> int:
    n = os.cpu_count() or 1
    cap = os.environ.get("BILAT_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


class _Engine:
    """Draws and analyzes replications for one configuration."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.crit = chisq_quantile(1.0 - config.alpha, config.J - 1)
        self.cfg_index = config.config_index
        g = np.asarray(config.gamma_vec)
        p1 = np.asarray(config.pi1_vec)
        probs1 = cell_probs(p1, g)
        probs2 = cell_probs(np.asarray(config.delta_vec) * p1, g)
        self.samplers = [
            (TrinomialSampler(config.m, probs1[j]), TrinomialSampler(config.m, probs2[j]))
            for j in range(config.J)
        ]

    def draw(self, reps: np.ndarray, attempt: np.ndarray) -> np.ndarray:
        """Counts (len(reps), J, 2, 3); uniforms ordered stratum-major, group, (u0, u1)."""
        J = self.config.J
        seed = self.config.seed
        u = np.empty((reps.size, 4 * J))
        for k, (r, a) in enumerate(zip(reps.tolist(), attempt.tolist())):
            u[k] = RngStream(seed, substream_id(self.cfg_index, r, a)).uniforms(4 * J)
        out = np.empty((reps.size, J, 2, 3), dtype=float)
        for j, (s1, s2) in enumerate(self.samplers):
            out[:, j, 0] = s1.sample(u[:, 4 * j], u[:, 4 * j + 1])
            out[:, j, 1] = s2.sample(u[:, 4 * j + 2], u[:, 4 * j + 3])
        return out

    def chunk_statistics(self, start: int, stop: int):
        """Statistics (stop-start, 3), convergence flags and the resample count."""
        reps = np.arange(start, stop)
        attempt = np.zeros(reps.size, dtype=int)
        stats = np.full((reps.size, len(METHODS)), np.nan)
        converged = np.zeros(reps.size, dtype=bool)
        todo = np.arange(reps.size)
        degenerate = 0
        while todo.size:
            counts = self.draw(reps[todo], attempt[todo])
            bad = degenerate_mask(counts)
            good = todo[~bad]
            if good.size:
                res = statistics_batch(counts[~bad])
                finite = np.all(np.isfinite(res.stats), axis=1)
                stats[good[finite]] = res.stats[finite]
                converged[good[finite]] = res.converged[finite]
                bad_idx = np.concatenate([todo[bad], good[~finite]])
            else:
                bad_idx = todo[bad]
            bad_idx.sort()
            degenerate += bad_idx.size
            attempt[bad_idx] += 1
            if bad_idx.size and attempt[bad_idx].max() >= MAX_ATTEMPTS:
                r = int(reps[bad_idx[attempt[bad_idx] >= MAX_ATTEMPTS][0]])
                raise ResamplingExhausted(
                    f"replication {r} still degenerate after {MAX_ATTEMPTS} draws "
                    f"(J={self.config.J}, m={self.config.m}, pi1={self.config.pi1_vec}, "
                    f"gamma={self.config.gamma_vec}, delta={self.config.delta_vec})"
                )
            todo = bad_idx
        return stats, converged, degenerate

    def run_chunk(self, start: int, stop: int):
        stats, converged, degenerate = self.chunk_statistics(start, stop)
        rejections = np.count_nonzero(stats > self.crit, axis=0)
        return rejections, degenerate, int(np.count_nonzero(~converged))


def _map_chunks(fn, R: int, workers: int | None, chunk_size: int) -> list:
    bounds = [(s, min(s + chunk_size, R)) for s in range(0, R, chunk_size)]
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(bounds) == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=min(workers, len(bounds))) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


def simulate_statistics(config: SimConfig, workers: int | None = None,
                        chunk_size: int = CHUNK_SIZE) -> np.ndarray:
    """The (replications, 3) array of (T_L, T_SC, T_W) behind :func:`simulate`."""
    parts = _map_chunks(_Engine(config).chunk_statistics, config.replications, workers, chunk_size)
    return np.concatenate([p[0] for p in parts])


def simulate(config: SimConfig, workers: int | None = None, chunk_size: int = CHUNK_SIZE) -> SimSummary:
    """Rejection rates of the three tests at level ``config.alpha``.

    All three tests see the same tables. Chunk boundaries are fixed by
    ``chunk_size`` only, and each replication's draws depend only on its own
    stream, so the worker count never changes the result.
    """
    t0 = time.perf_counter()
    eng = _Engine(config)
    R = config.replications
    parts = _map_chunks(eng.run_chunk, R, workers, chunk_size)
    rejections = np.sum([p[0] for p in parts], axis=0)
    degenerate = sum(p[1] for p in parts)
    nonconv = sum(p[2] for p in parts)
    rate = rejections / R
    return SimSummary(
        config=config,
        rejection_pct={m: float(100.0 * rate[k]) for k, m in enumerate(METHODS)},
        se_pct={m: float(100.0 * math.sqrt(rate[k] * (1.0 - rate[k]) / R)) for k, m in enumerate(METHODS)},
        valid_replications=R,
        degenerate_count=int(degenerate),
        nonconverged_count=int(nonconv),
        critical_value=eng.crit,
        runtime_s=time.perf_counter() - t0,
    )


# ------------------------------------------------------------------ #
# grids
# ------------------------------------------------------------------ #


def size_configs(js: Iterable[int] = SIZE_J, ms: Iterable[int] = SIZE_M, deltas: Iterable[float] = SIZE_DELTAS,
                 gamma_cases: Iterable[str] = tuple(GAMMA_CASES), pi_cases: Iterable[str] = tuple(PI_CASES),
                 replications: int = 50_000, alpha: float = 0.05, seed: int = 0) -> list[SimConfig]:
    """Null configurations: common ratio ``delta`` in every stratum."""
    out = []
    for J, d, g, p, m in product(js, deltas, gamma_cases, pi_cases, ms):
        out.append(SimConfig(
            J=J, m=m,
            gamma_vec=repeat_pattern(GAMMA_CASES[g], J),
            pi1_vec=repeat_pattern(PI_CASES[p], J),
            delta_vec=(float(d),) * J,
            replications=replications, alpha=alpha, seed=seed,
            gamma_case=g, pi_case=p, delta_spec=f"{float(d):g}",
        ))
    return out


def power_configs(js: Iterable[int] = SIZE_J, ms: Iterable[int] = SIZE_M,
                  delta_a: Iterable[float] = POWER_DELTA_A, delta0: float = POWER_DELTA0,
                  gamma_cases: Iterable[str] = tuple(GAMMA_CASES), pi_cases: Iterable[str] = tuple(PI_CASES),
                  replications: int = 50_000, alpha: float = 0.05, seed: int = 0,
                  delta_vector: Sequence[float] | None = None) -> list[SimConfig]:
    """Alternatives: ratios alternate ``(delta0, delta_a, delta0, ...)``.

    An explicit ``delta_vector`` (cycled to length J) replaces the alternating
    pattern, and ``delta_a`` is then ignored.
    """
    specs = [tuple(delta_vector)] if delta_vector is not None else [(delta0, float(a)) for a in delta_a]
    out = []
    for J, spec, g, p, m in product(js, specs, gamma_cases, pi_cases, ms):
        label = _fmt_vec(spec) if delta_vector is not None else f"{spec[0]:g}/{spec[1]:g}"
        out.append(SimConfig(
            J=J, m=m,
            gamma_vec=repeat_pattern(GAMMA_CASES[g], J),
            pi1_vec=repeat_pattern(PI_CASES[p], J),
            delta_vec=repeat_pattern(spec, J),
            replications=replications, alpha=alpha, seed=seed,
            gamma_case=g, pi_case=p, delta_spec=label,
        ))
    return out


def size_grid(workers: int | None = None, **kwargs) -> list[tuple[SimConfig, SimSummary]]:
    """Simulate every null configuration; keyword arguments narrow the grid."""
    return [(c, simulate(c, workers)) for c in size_configs(**kwargs)]


def power_grid(workers: int | None = None, **kwargs) -> list[tuple[SimConfig, SimSummary]]:
    """Simulate every alternative configuration; keyword arguments narrow the grid."""
    return [(c, simulate(c, workers)) for c in power_configs(**kwargs)]


DEFAULT_BOUNDS = {"pi1": (0.1, 0.5), "gamma": (0.1, 0.9), "delta": (0.5, 1.5)}


def sweep_configs(n_configs: int, J: int, m: int, bounds: dict | None = None,
                  replications: int = 50_000, alpha: float = 0.05, seed: int = 0) -> list[SimConfig]:
    """Null configurations with per-stratum (pi1, gamma) and a common delta drawn uniformly.

    Draws falling outside the feasible region are rejected; ``ParameterError``
    is raised after 100000 consecutive rejections.
    """
    b = dict(DEFAULT_BOUNDS)
    b.update(bounds or {})
    for key, (lo, hi) in b.items():
        if key not in DEFAULT_BOUNDS:
            raise ParameterError(f"unknown bound {key!r}")
        if not lo <= hi:
            raise ParameterError(f"bound {key} has lo > hi: ({lo}, {hi})")
    if b["delta"][0] <= 0 or b["pi1"][0] <= 0 or b["gamma"][0] < 0 or b["gamma"][1] > 1:
        raise ParameterError(f"bounds leave the parameter space: {b}")
    gen = RngStream(seed, SWEEP_PARAM_STREAM).generator()
    out = []
    while len(out) < n_configs:
        for _ in range(SWEEP_MAX_REJECTIONS):
            p = gen.uniform(*b["pi1"], size=J)
            g = gen.uniform(*b["gamma"], size=J)
            d = gen.uniform(*b["delta"])
            s = 2.0 - g
            if np.all(s * p * max(1.0, d) <= 1.0):
                break
        else:
            raise ParameterError(f"bounds infeasible: {SWEEP_MAX_REJECTIONS} consecutive draws rejected ({b})")
        out.append(SimConfig(
            J=J, m=m, gamma_vec=tuple(g), pi1_vec=tuple(p), delta_vec=(float(d),) * J,
            replications=replications, alpha=alpha, seed=seed,
        ))
    return out


def random_sweep(n_configs: int, J: int, m: int, bounds: dict | None = None, replications: int = 50_000,
                 seed: int = 0, alpha: float = 0.05, workers: int | None = None) -> list[SimSummary]:
    return [simulate(c, workers) for c in sweep_configs(n_configs, J, m, bounds, replications, alpha, seed)]
