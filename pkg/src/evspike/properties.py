"""Randomized self-checks of core numerical properties.

Each check returns a small report dict (``name``, ``value``, ``bound``,
``pass``) so it can be embedded in an experiment summary as well as asserted
in tests.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .baselines import abs_threshold, neo
from .encoder import delta_levels
from .evaluation import match_counts
from .evspd import MovingSum, moving_sum


def _report(name, value, bound, ok) -> dict:
    return {"name": name, "value": value, "bound": bound, "pass": bool(ok)}


def delta_residual(n_signals: int = 100_000, seed: int = 0) -> dict:
    """Largest ``|x - v_reset| / threshold`` seen after any sample."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_signals):
        n = int(rng.integers(1, 40))
        x = np.cumsum(rng.normal(0.0, rng.uniform(0.01, 2.0), n))
        thr = float(rng.uniform(0.01, 1.0))
        r = np.max(np.abs(x - delta_levels(x, thr))) / thr
        worst = max(worst, float(r))
    return _report("delta residual / threshold", worst, "< 1", worst < 1.0)


def streaming_moving_sum(n_sequences: int = 10_000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_sequences):
        n_s = int(rng.integers(1, 12))
        a = rng.integers(0, 2, int(rng.integers(0, 60)))
        ms = MovingSum(n_s)
        stream = [ms.push(int(v)) for v in a]
        if stream != moving_sum(a, n_s).tolist():
            bad += 1
    return _report("streaming vs batch moving-sum mismatches", bad, "== 0", bad == 0)


def neo_affine(n_cases: int = 1000, seed: int = 0) -> dict:
    """On ``x[n] = a*n + b`` the energy operator is ``a**2`` away from the ends."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        a, b = rng.uniform(-1.0, 1.0, 2)
        x = a * np.arange(int(rng.integers(3, 100))) + b
        err = np.max(np.abs(neo(x)[1:-1] - a * a))
        worst = max(worst, float(err))
    return _report("NEO affine identity max error", worst, "< 1e-9", worst < 1e-9)


def abs_threshold_gaussian(n: int = 1_000_000, seed: int = 0) -> dict:
    x = np.random.default_rng(seed).standard_normal(n)
    v = abs_threshold(x, 4.0)
    return _report("absolute threshold on unit Gaussian", v, "4.0 +- 0.05", abs(v - 4.0) <= 0.05)


def optimal_match_count(truth, detected, tolerance_us: int) -> int:
    """Maximum one-to-one matching within tolerance via assignment."""
    t = np.asarray(truth, dtype=np.int64)
    d = np.asarray(detected, dtype=np.int64)
    if len(t) == 0 or len(d) == 0:
        return 0
    ok = np.abs(t[:, None] - d[None, :]) <= tolerance_us
    r, c = linear_sum_assignment(-ok.astype(float))
    return int(ok[r, c].sum())


def matching_vs_optimal(n_cases: int = 5000, seed: int = 0, tolerance_us: int = 1000) -> dict:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_cases):
        nt, nd = rng.integers(0, 11, 2)
        span = int(rng.integers(1, 20_000))
        t = np.sort(rng.integers(0, span, nt))
        d = np.sort(rng.integers(0, span, nd))
        if match_counts(t, d, tolerance_us)[0] != optimal_match_count(t, d, tolerance_us):
            bad += 1
    return _report("greedy vs optimal matching disagreements", bad, "== 0", bad == 0)


def run_all(seed: int = 0) -> dict:
    checks = [delta_residual(seed=seed), streaming_moving_sum(seed=seed), neo_affine(seed=seed),
              abs_threshold_gaussian(seed=seed), matching_vs_optimal(seed=seed)]
    return {"name": "property suites", "value": {c["name"]: c["value"] for c in checks},
            "bound": "; ".join(f"{c['name']} {c['bound']}" for c in checks),
            "pass": all(c["pass"] for c in checks), "checks": checks}
