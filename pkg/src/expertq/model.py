"""Domain model for multi-topic expert request queues.

Topics are dense integer ids ``0 .. n_topics-1``; they carry no internal
structure. An expert is described by per-topic mean research times
``T(x) >= 1`` (``inf`` when the expert cannot answer that topic) or,
equivalently, per-slot success probabilities ``q(x) = 1/T(x)``. Requests
arrive Bernoulli per (topic, expert) pair with probability
``lam * p_i(x)`` each slot.

All model types are immutable after construction and safe to share across
threads or processes. Validation is collected by :func:`validate_instance`
rather than raised at construction time, so malformed instances can be
inspected and reported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "TopicId",
    "ExpertProfile",
    "ArrivalSpec",
    "Instance",
    "validate_instance",
    "merged_pmf",
    "expertise",
    "instance_to_dict",
    "instance_from_dict",
    "load_instance",
    "save_instance",
]

# Dense non-negative index into the topic universe.
TopicId = int

PMF_TOL = 1e-9
CONSISTENCY_TOL = 1e-12


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ExpertProfile:
    """Per-topic skill of one expert.

    ``mean_time[x]`` is the expected number of slots to answer a topic-x
    request (at least 1, or ``inf`` for topics the expert cannot answer);
    ``success_prob[x] = 1/mean_time[x]`` is the per-slot completion
    probability while working on such a request.
    """

    expert_id: int
    mean_time: np.ndarray
    success_prob: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean_time", _frozen_array(self.mean_time))
        object.__setattr__(self, "success_prob", _frozen_array(self.success_prob))

    @classmethod
    def from_mean_times(cls, expert_id: int, mean_times) -> "ExpertProfile":
        """Build a profile from mean research times; ``None`` means infinity."""
        t = np.array(
            [np.inf if v is None else float(v) for v in mean_times], dtype=np.float64
        )
        with np.errstate(divide="ignore"):
            q = np.where(np.isfinite(t) & (t > 0), 1.0 / t, 0.0)
        return cls(expert_id=expert_id, mean_time=t, success_prob=q)

    @classmethod
    def from_success_probs(cls, expert_id: int, success_probs) -> "ExpertProfile":
        """Build a profile from per-slot success probabilities in [0, 1]."""
        q = np.asarray(success_probs, dtype=np.float64)
        with np.errstate(divide="ignore", over="ignore"):
            t = np.where(q > 0, 1.0 / q, np.inf)
        return cls(expert_id=expert_id, mean_time=t, success_prob=q)

    @property
    def n_topics(self) -> int:
        return self.success_prob.shape[0]


@dataclass(frozen=True)
class ArrivalSpec:
    """Request load ``lam`` and one arrival p.m.f. per expert.

    ``pmf`` has shape (n_experts, n_topics); row i is expert i's topic
    distribution. Each row sums to 1. Zero entries are permitted even
    though typical workloads have mass everywhere; operations that divide
    by topic mass guard for this.
    """

    lam: float
    pmf: np.ndarray

    def __post_init__(self) -> None:
        pmf = np.atleast_2d(np.asarray(self.pmf, dtype=np.float64))
        object.__setattr__(self, "pmf", _frozen_array(pmf))
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def n_experts(self) -> int:
        return self.pmf.shape[0]

    @property
    def n_topics(self) -> int:
        return self.pmf.shape[1]


@dataclass(frozen=True)
class Instance:
    """A complete problem instance: experts plus the arrival process.

    Only the complete coordination graph is supported: any expert may be
    handed any request. The arrival spec defines the topic universe width;
    every expert profile must be indexed over the same universe.
    """

    experts: tuple[ExpertProfile, ...]
    arrivals: ArrivalSpec
    graph: str = "complete"

    def __post_init__(self) -> None:
        object.__setattr__(self, "experts", tuple(self.experts))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def n_topics(self) -> int:
        return self.arrivals.n_topics

    def success_matrix(self) -> np.ndarray:
        """Stack success probabilities into shape (n_experts, n_topics)."""
        return np.vstack([e.success_prob for e in self.experts])


def validate_instance(inst: Instance) -> list[str]:
    """Check every model invariant; return a description per violation.

    Returns an empty list iff the instance is well formed. Pure: the same
    instance always yields the same list, and nothing is mutated.
    """
    violations: list[str] = []

    if inst.n_experts < 1:
        violations.append("instance: needs at least one expert")
    if inst.graph != "complete":
        violations.append(f"graph: only 'complete' is supported, got {inst.graph!r}")

    n_topics = inst.n_topics
    if inst.arrivals.n_experts != inst.n_experts:
        violations.append(
            f"arrivals.pmf: {inst.arrivals.n_experts} rows for "
            f"{inst.n_experts} experts"
        )

    lam = inst.arrivals.lam
    # The arrival model wants 0 < lam < 1; lam == 0 is accepted as a
    # degenerate no-traffic configuration used by diagnostics.
    if not (0.0 <= lam < 1.0):
        violations.append(f"arrivals.lambda: must lie in [0, 1), got {lam}")

    for i, row in enumerate(inst.arrivals.pmf):
        neg = np.nonzero(row < 0)[0]
        for x in neg:
            violations.append(f"arrivals.pmf[expert {i}][topic {x}]: negative mass {row[x]}")
        total = float(row.sum())
        if abs(total - 1.0) > PMF_TOL:
            violations.append(
                f"arrivals.pmf[expert {i}]: sums to {total!r}, expected 1 within {PMF_TOL}"
            )

    for e in inst.experts:
        if e.n_topics != n_topics or e.mean_time.shape[0] != n_topics:
            violations.append(
                f"expert {e.expert_id}: profile over {e.n_topics} topics, "
                f"instance universe has {n_topics}"
            )
            continue
        for x in range(n_topics):
            t = e.mean_time[x]
            q = e.success_prob[x]
            if np.isinf(t):
                if q != 0.0:
                    violations.append(
                        f"expert {e.expert_id}.success_prob[topic {x}]: "
                        f"must be 0 when mean_time is infinite, got {q}"
                    )
                continue
            if t < 1.0:
                violations.append(
                    f"expert {e.expert_id}.mean_time[topic {x}]: T(x) >= 1 required, got {t}"
                )
            if not (0.0 <= q <= 1.0):
                violations.append(
                    f"expert {e.expert_id}.success_prob[topic {x}]: outside [0, 1], got {q}"
                )
            if t > 0 and abs(q * t - 1.0) > CONSISTENCY_TOL:
                violations.append(
                    f"expert {e.expert_id}[topic {x}]: success_prob {q} and "
                    f"mean_time {t} inconsistent (q*T deviates from 1 by "
                    f"{abs(q * t - 1.0):.3g})"
                )

    return violations


def merged_pmf(inst: Instance) -> np.ndarray:
    """Entry-wise sum of the per-expert arrival p.m.f.s.

    Sums to n_experts, not to 1; downstream capacity formulas are
    scale-covariant and consume it either raw (per-expert load units) or
    divided by n (system load units).
    """
    return inst.arrivals.pmf.sum(axis=0)


def expertise(e: ExpertProfile) -> float:
    """Crude scalar skill measure: the sum of per-topic success probabilities."""
    return float(e.success_prob.sum())


def instance_to_dict(inst: Instance) -> dict:
    """Serialize to the canonical JSON document (``null`` encodes infinity)."""
    return {
        "topics": inst.n_topics,
        "lambda": inst.arrivals.lam,
        "pmf": [[float(v) for v in row] for row in inst.arrivals.pmf],
        "experts": [
            {
                "id": e.expert_id,
                "T": [None if np.isinf(t) else float(t) for t in e.mean_time],
            }
            for e in inst.experts
        ],
    }


def instance_from_dict(doc: dict) -> Instance:
    """Parse the canonical JSON document. Raises ValueError on bad shape."""
    try:
        n_topics = int(doc["topics"])
        lam = float(doc["lambda"])
        pmf = [[float(v) for v in row] for row in doc["pmf"]]
        experts = tuple(
            ExpertProfile.from_mean_times(int(spec["id"]), spec["T"])
            for spec in doc["experts"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed instance document: {exc}") from exc

    for row in pmf:
        if len(row) != n_topics:
            raise ValueError(
                f"pmf row has {len(row)} entries, 'topics' declares {n_topics}"
            )
    for e in experts:
        if e.n_topics != n_topics:
            raise ValueError(
                f"expert {e.expert_id} has {e.n_topics} topics, "
                f"'topics' declares {n_topics}"
            )
    return Instance(experts=experts, arrivals=ArrivalSpec(lam=lam, pmf=pmf))


def load_instance(path: str | Path) -> Instance:
    with open(path, "r", encoding="utf-8") as fh:
        return instance_from_dict(json.load(fh))


def save_instance(inst: Instance, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(instance_to_dict(inst), fh, indent=2)
        fh.write("\n")
