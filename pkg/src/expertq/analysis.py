"""Drift estimation, stability classification, and boundary sweeps.

These are the harnesses that tie simulation output back to the analytic
capacity values: a one-slot drift estimator for the service-weighted
queue sum, an empirical stable/unstable verdict with an explicit
inconclusive band, a load sweep that brackets the capacity boundary, and
a stability check under certified misestimation of research times.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .capacity import single_capacity
from .model import ArrivalSpec, Instance
from .sched import Scheduler, work_conserving_single
from .sim import SimConfig, TraceStats, run

__all__ = [
    "DriftReport",
    "StabilityVerdict",
    "SweepCell",
    "SweepResult",
    "MisestimationRun",
    "MisestimationResult",
    "drift_check",
    "classify_stability",
    "capacity_boundary_sweep",
    "misestimation_check",
    "analytic_boundary",
    "with_load",
]


@dataclass(frozen=True)
class DriftReport:
    """One-slot drift of L(t) = sum_x Q_x(t)/q(x), busy slots only.

    ``delta`` is the analytic stability margin 1 - lam * sum_x p(x)/q(x);
    the predicted busy-slot drift is exactly ``-delta``. The empirical
    mean is taken over slots whose starting state had work queued, where
    a work-conserving expert serves with certainty.
    """

    empirical_drift: float
    predicted_drift: float
    delta: float
    busy_slots: int
    std_error: float
    lyapunov_series: np.ndarray

    def within(self, n_std_errors: float = 4.0) -> bool:
        return abs(self.empirical_drift - self.predicted_drift) <= (
            n_std_errors * self.std_error
        )


@dataclass(frozen=True)
class StabilityVerdict:
    """Empirical proxy for long-run queue stability.

    ``stable`` requires the fitted growth slope of the total queue over
    the final half to stay at or below the threshold; ``unstable``
    requires ten times the threshold; anything between, or too short a
    trace, is ``inconclusive``.
    """

    verdict: str
    growth_slope: float
    final_quarter_mean: float
    slope_threshold: float


def drift_check(stats: TraceStats, p, q, lam: float, expert: int = 0) -> DriftReport:
    """Compare the simulated busy-slot drift against its analytic value.

    Requires a run recorded with ``record_lyapunov``; raises if the trace
    lacks per-slot resolution or if some mass-bearing topic has zero
    success probability (the weighted sum is undefined there). On
    multi-expert runs, checks the given expert against the topic mass and
    success vector her queues actually see.
    """
    if stats.lyapunov_series is None or stats.busy_series is None:
        raise ValueError("drift check needs a run with record_lyapunov enabled")
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((p > 0) & (q <= 0)):
        raise ValueError("drift undefined: mass-bearing topic with zero success prob")
    mass = p > 0
    total_ratio = float(np.sum(p[mass] / q[mass]))
    delta = 1.0 - lam * total_ratio

    level = stats.lyapunov_series[:, expert]
    busy = stats.busy_series[:, expert]
    steps = np.diff(level)[busy]
    if steps.size < 2:
        raise ValueError("not enough busy slots to estimate drift")
    empirical = float(steps.mean())
    std_error = float(steps.std(ddof=1) / math.sqrt(steps.size))
    return DriftReport(
        empirical_drift=empirical,
        predicted_drift=-delta,
        delta=delta,
        busy_slots=int(steps.size),
        std_error=std_error,
        lyapunov_series=level,
    )


def classify_stability(
    stats: TraceStats, lam: float, slope_threshold: float | None = None
) -> StabilityVerdict:
    """Classify a finished run as stable, unstable, or inconclusive.

    The default threshold is 0.01 * lam requests per slot. The slope is a
    least-squares fit of the sampled total queue against time over the
    final half of the horizon.
    """
    threshold = 0.01 * lam if slope_threshold is None else float(slope_threshold)
    times = stats.sample_times
    totals = stats.total_queue_series
    mask = times >= stats.horizon / 2
    final_quarter_mean = float(stats.mean_queue_final_quarter.sum())
    if int(mask.sum()) < 2:
        return StabilityVerdict("inconclusive", math.nan, final_quarter_mean, threshold)
    slope = float(np.polyfit(times[mask], totals[mask].astype(np.float64), 1)[0])
    if slope <= threshold and math.isfinite(final_quarter_mean):
        verdict = "stable"
    elif slope >= 10.0 * threshold:
        verdict = "unstable"
    else:
        verdict = "inconclusive"
    return StabilityVerdict(verdict, slope, final_quarter_mean, threshold)


def with_load(inst: Instance, lam: float) -> Instance:
    """Copy an instance with a different request load."""
    return Instance(
        experts=inst.experts,
        arrivals=ArrivalSpec(lam=lam, pmf=inst.arrivals.pmf),
        graph=inst.graph,
    )


@dataclass(frozen=True)
class SweepCell:
    lam: float
    seed: int
    verdict: str
    growth_slope: float
    final_quarter_mean: float
    empty_fraction: float


@dataclass(frozen=True)
class SweepResult:
    """Verdicts per (load, seed) plus the stability bracket.

    ``lambda_lo`` is the largest load every seed called stable and
    ``lambda_hi`` the smallest load every seed called unstable; either
    side is None when the grid never reached it. The true boundary should
    lie within the bracket widened by one grid step.
    """

    cells: tuple[SweepCell, ...]
    lambdas: tuple[float, ...]
    seeds: tuple[int, ...]
    lambda_lo: float | None
    lambda_hi: float | None

    def verdicts(self, lam: float) -> list[str]:
        return [c.verdict for c in self.cells if c.lam == lam]


def _sweep_cell(args) -> SweepCell:
    inst, sched, lam, seed, horizon, sample_interval, slope_threshold = args
    stats = run(
        SimConfig(
            instance=with_load(inst, lam),
            scheduler=sched,
            horizon=horizon,
            seed=seed,
            sample_interval=sample_interval,
        )
    )
    verdict = classify_stability(stats, lam, slope_threshold)
    return SweepCell(
        lam=lam,
        seed=seed,
        verdict=verdict.verdict,
        growth_slope=verdict.growth_slope,
        final_quarter_mean=verdict.final_quarter_mean,
        empty_fraction=stats.empty_fraction,
    )


def capacity_boundary_sweep(
    inst: Instance,
    sched: Scheduler,
    lambdas,
    horizon: int,
    seeds,
    slope_threshold: float | None = None,
    sample_interval: int = 100,
    workers: int = 1,
) -> SweepResult:
    """Simulate a sorted load grid across seeds and bracket the boundary.

    Cells are independent runs (seeded per cell), so ``workers > 1``
    executes them in a process pool without changing any result.
    """
    lambdas = tuple(float(v) for v in lambdas)
    if list(lambdas) != sorted(lambdas):
        raise ValueError("load grid must be sorted ascending")
    seeds = tuple(int(s) for s in seeds)
    jobs = [
        (inst, sched, lam, seed, horizon, sample_interval, slope_threshold)
        for lam in lambdas
        for seed in seeds
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = tuple(pool.map(_sweep_cell, jobs))
    else:
        cells = tuple(_sweep_cell(job) for job in jobs)

    lambda_lo = None
    lambda_hi = None
    for lam in lambdas:
        verdicts = [c.verdict for c in cells if c.lam == lam]
        if verdicts and all(v == "stable" for v in verdicts):
            lambda_lo = lam if lambda_lo is None else max(lambda_lo, lam)
        if verdicts and all(v == "unstable" for v in verdicts):
            lambda_hi = lam if lambda_hi is None else min(lambda_hi, lam)
    return SweepResult(
        cells=cells,
        lambdas=lambdas,
        seeds=seeds,
        lambda_lo=lambda_lo,
        lambda_hi=lambda_hi,
    )


def analytic_boundary(inst: Instance, sched: Scheduler) -> float:
    """Capacity of the instance under the given policy, in arrival-load units.

    For a single expert this is the closed-form capacity (with admission
    probabilities folded into the topic masses for a loss policy). For
    fixed-routing schedulers it is the reciprocal of the worst per-expert
    service load per unit of arrival rate, computed from the routing
    actually in use; for the optimal routing matrix this coincides with
    the coordinated capacity.
    """
    kind = getattr(sched, "kind", None)
    if kind in ("work_conserving", "loss"):
        p = inst.arrivals.pmf[0]
        q = inst.experts[0].success_prob
        if kind == "loss":
            p = p * sched.policy.mu
        return single_capacity(p, q).lambda_star
    if kind in ("routing", "baseline"):
        merged = inst.arrivals.pmf.sum(axis=0)
        qmat = inst.success_matrix()
        if kind == "routing":
            s = sched.policy.s
        else:
            s = np.zeros_like(qmat)
            for x, dest in enumerate(sched.destination):
                s[dest, x] = 1.0
        worst = 0.0
        for i in range(inst.n_experts):
            load = 0.0
            for x in range(inst.n_topics):
                flow = merged[x] * s[i, x]
                if flow <= 0.0:
                    continue
                if qmat[i, x] <= 0.0:
                    return 0.0
                load += flow / qmat[i, x]
            worst = max(worst, load)
        return math.inf if worst == 0.0 else 1.0 / worst
    raise ValueError(f"no analytic boundary known for scheduler kind {kind!r}")


@dataclass(frozen=True)
class MisestimationRun:
    seed: int
    estimated_capacity: float
    lam: float
    verdict: str
    growth_slope: float


@dataclass(frozen=True)
class MisestimationResult:
    runs: tuple[MisestimationRun, ...]
    gamma: float

    @property
    def all_stable(self) -> bool:
        return all(r.verdict == "stable" for r in self.runs)


def _default_inflate(mean_time: np.ndarray, gamma: float, rng) -> np.ndarray:
    return mean_time * rng.uniform(gamma, 1.0, size=mean_time.shape)


def misestimation_check(
    inst: Instance,
    gamma: float,
    seeds,
    horizon: int = 100_000,
    inflate=None,
    load_fraction: float = 0.95,
    tie_break: str = "arbitrary",
    slope_threshold: float | None = None,
    sample_interval: int = 100,
) -> MisestimationResult:
    """Stability under capacity computed from misestimated research times.

    For each seed, an estimate generator produces per-topic times bounded
    below by ``gamma`` times the truth (anything violating that bound is
    rejected before any simulation). The run then drives the true system
    at ``load_fraction * gamma`` times the capacity computed from the
    estimates; every such load is guaranteed sustainable, so each run
    should classify stable.
    """
    if inst.n_experts != 1:
        raise ValueError("misestimation check is defined for a single expert")
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    generator = _default_inflate if inflate is None else inflate
    true_times = inst.experts[0].mean_time
    p = inst.arrivals.pmf[0]
    sched = work_conserving_single(inst, tie_break=tie_break)

    runs = []
    for seed in seeds:
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([int(seed), 0x7E57]))
        )
        estimated = np.asarray(generator(true_times, gamma, rng), dtype=np.float64)
        if estimated.shape != true_times.shape:
            raise ValueError("estimate generator returned the wrong shape")
        if np.any(estimated < gamma * true_times - 1e-12):
            raise ValueError(
                "estimate generator violated its bound: some estimated time "
                "is below gamma times the true time"
            )
        with np.errstate(divide="ignore"):
            q_hat = np.where(np.isfinite(estimated), 1.0 / estimated, 0.0)
        est_capacity = single_capacity(p, q_hat).lambda_star
        lam = load_fraction * gamma * est_capacity
        stats = run(
            SimConfig(
                instance=with_load(inst, lam),
                scheduler=sched,
                horizon=horizon,
                seed=int(seed),
                sample_interval=sample_interval,
            )
        )
        verdict = classify_stability(stats, lam, slope_threshold)
        runs.append(
            MisestimationRun(
                seed=int(seed),
                estimated_capacity=est_capacity,
                lam=lam,
                verdict=verdict.verdict,
                growth_slope=verdict.growth_slope,
            )
        )
    return MisestimationResult(runs=tuple(runs), gamma=float(gamma))
