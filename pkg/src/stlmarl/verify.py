"""Monte Carlo estimation of task satisfaction with Wald intervals.

A policy is scored by rolling seeded episodes and counting the runs whose
complete trace satisfies the conjunction of all agent formulas with
strictly positive robustness.  The satisfaction probability estimate comes
with a two-sided normal-approximation confidence interval.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .stl import Formula, conjoin, robustness
from .world import GameConfig, run_episode

# Rational minimax fit of the standard normal quantile (P. J. Acklam),
# absolute error below 1.2e-9 over the open unit interval.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425

MAX_CONFIDENCE = 0.9999


def _poly(coeffs, x: float) -> float:
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def _normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile argument must be in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return _poly(_C, q) / (_poly(_D, q) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -_poly(_C, q) / (_poly(_D, q) * q + 1.0)
    q = p - 0.5
    r = q * q
    return _poly(_A, r) * q / (_poly(_B, r) * r + 1.0)


def z_value(confidence: float) -> float:
    """Two-sided critical value: the (1 + confidence) / 2 normal quantile.

    Confidence levels above ``MAX_CONFIDENCE`` are rejected; the interval
    width they ask for is not meaningfully resolvable this way.
    """
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must be in (0, 1), got {confidence}")
    if confidence > MAX_CONFIDENCE:
        raise ValueError(
            f"confidence {confidence} exceeds the supported maximum {MAX_CONFIDENCE}")
    return _normal_quantile(0.5 * (1.0 + confidence))


@dataclass(frozen=True)
class BernoulliEstimate:
    """Point estimate of a success probability with a Wald interval.

    ``lo`` and ``hi`` are clamped to [0, 1]; ``half_width`` is the raw
    unclamped half-width z * sqrt(p_hat * (1 - p_hat) / trials).
    """

    successes: int
    trials: int
    confidence: float
    p_hat: float
    half_width: float
    lo: float
    hi: float


def wald_interval(successes: int, trials: int, confidence: float) -> BernoulliEstimate:
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if not 0 <= successes <= trials:
        raise ValueError(f"successes must be in 0..{trials}, got {successes}")
    z = z_value(confidence)
    p_hat = successes / trials
    half = z * math.sqrt(p_hat * (1.0 - p_hat) / trials)
    return BernoulliEstimate(
        successes=int(successes),
        trials=int(trials),
        confidence=float(confidence),
        p_hat=p_hat,
        half_width=half,
        lo=max(0.0, p_hat - half),
        hi=min(1.0, p_hat + half),
    )


@dataclass
class VerificationResult:
    """Outcome of a batch of scoring episodes.

    ``robustness`` holds the strict robustness of the conjoined task
    formula on each complete trace, in episode order; an episode counts as
    a success exactly when its entry is strictly positive.
    """

    estimate: BernoulliEstimate
    robustness: np.ndarray

    @property
    def successes(self) -> int:
        return self.estimate.successes

    @property
    def trials(self) -> int:
        return self.estimate.trials


def satisfied(spec: Formula, trajectory) -> bool:
    """Zero robustness counts as a violation."""
    return robustness(spec, trajectory, 0) > 0.0


def estimate_satisfaction(
    game: GameConfig,
    specs: list[Formula],
    act_fn,
    n_episodes: int,
    confidence: float,
    seed: int | Sequence[int],
    workers: int = 4,
    reward_floor: float = -10.0,
) -> VerificationResult:
    """Roll ``n_episodes`` seeded episodes and estimate the satisfaction rate.

    Episode k draws its randomness from entropy ``[*seed, k]``; the result
    does not depend on ``workers``.  The returned estimate uses a Wald
    interval at the given confidence.
    """
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be >= 1, got {n_episodes}")
    z_value(confidence)  # validate before spending work on rollouts
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    spec = conjoin(specs)

    def one(k: int) -> float:
        record = run_episode(game, specs, act_fn, base + [k], reward_floor=reward_floor)
        return robustness(spec, record.trajectory, 0)

    if workers > 1 and n_episodes > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(one, range(n_episodes)))
    else:
        values = [one(k) for k in range(n_episodes)]

    rob = np.asarray(values, dtype=float)
    successes = int((rob > 0.0).sum())
    return VerificationResult(
        estimate=wald_interval(successes, n_episodes, confidence),
        robustness=rob,
    )


def report_dict(result: VerificationResult, **extra) -> dict:
    """JSON-ready summary of a verification run.

    Extra key/value pairs (checkpoint name, task label, seed, greedy flag)
    are merged in; collisions with the core fields are rejected.
    """
    est = result.estimate
    core = {
        "successes": est.successes,
        "trials": est.trials,
        "confidence": est.confidence,
        "p_hat": est.p_hat,
        "half_width": est.half_width,
        "lo": est.lo,
        "hi": est.hi,
        "mean_robustness": float(result.robustness.mean()),
    }
    overlap = set(core) & set(extra)
    if overlap:
        raise ValueError(f"extra report keys collide with core fields: {sorted(overlap)}")
    core.update(extra)
    return core
