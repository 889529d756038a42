"""Scheduling policies: admission, routing, and per-slot service selection.

A scheduler is an immutable policy table consumed by the simulator. All
randomness comes from the per-run streams handed in at each decision, so
scheduler objects can be shared freely across concurrent runs. Policies
are memoryless: decisions may read current queue lengths and the fixed
tables, never per-request history.
"""

from __future__ import annotations

import numpy as np

from .capacity import LossPolicy, RoutingPolicy, routing_policy_violations
from .model import Instance
from .rng import RngStreams

__all__ = [
    "Scheduler",
    "work_conserving_single",
    "offline_loss_scheduler",
    "offline_routing_scheduler",
    "mismatch_baseline",
]

TIE_BREAKS = ("arbitrary", "uniform_random", "longest_queue")
SELECTION_MODES = ("request_weighted", "topic_uniform")


def _normalize(name: str, allowed: tuple[str, ...], what: str) -> str:
    norm = name.replace("-", "_")
    if norm not in allowed:
        raise ValueError(f"unknown {what} {name!r}; expected one of {allowed}")
    return norm


class Scheduler:
    """Base policy: admit everything, keep requests where they arrive,
    serve work-conservingly.

    ``admit`` and ``route`` run once per arrival; ``select`` runs once per
    expert per slot and is only called with a non-empty queue row, so a
    compliant implementation can never pick an empty queue.
    """

    kind = "base"

    def __init__(self, n_experts: int, n_topics: int) -> None:
        self.n_experts = n_experts
        self.n_topics = n_topics

    def admit(self, topic: int, door_expert: int, streams: RngStreams) -> bool:
        return True

    def route(self, topic: int, door_expert: int, streams: RngStreams) -> int:
        return door_expert

    def select(
        self, expert: int, queue_row: list[int], total: int, streams: RngStreams
    ) -> int:
        raise NotImplementedError

    def compatible_with(self, inst: Instance) -> None:
        if inst.n_experts != self.n_experts or inst.n_topics != self.n_topics:
            raise ValueError(
                f"scheduler built for {self.n_experts} experts x "
                f"{self.n_topics} topics, instance has {inst.n_experts} x "
                f"{inst.n_topics}"
            )


class _TieBreakSelect(Scheduler):
    """Work-conserving single-queue-set selection with a pluggable tie break."""

    def __init__(self, n_experts: int, n_topics: int, tie_break: str) -> None:
        super().__init__(n_experts, n_topics)
        self.tie_break = _normalize(tie_break, TIE_BREAKS, "tie break")

    def select(self, expert, queue_row, total, streams):
        if self.tie_break == "arbitrary":
            for x, count in enumerate(queue_row):
                if count:
                    return x
        elif self.tie_break == "longest_queue":
            best, best_count = 0, -1
            for x, count in enumerate(queue_row):
                if count > best_count:
                    best, best_count = x, count
            return best
        else:
            nonempty = [x for x, count in enumerate(queue_row) if count]
            return nonempty[int(streams.selection.next() * len(nonempty))]
        raise AssertionError("select called with empty queues")


class _WorkConservingSingle(_TieBreakSelect):
    kind = "work_conserving"


class _LossScheduler(_TieBreakSelect):
    """Drop a topic-x arrival with probability 1 - mu[x], independently of
    queue state; otherwise behave like the work-conserving scheduler."""

    kind = "loss"

    def __init__(self, n_topics: int, policy: LossPolicy, tie_break: str) -> None:
        super().__init__(1, n_topics, tie_break)
        self.policy = policy
        self.mu = policy.mu.tolist()

    def admit(self, topic, door_expert, streams):
        return streams.admission.next() < self.mu[topic]


class _QueueDrawSelect(Scheduler):
    """Selection over one expert's own queues, request- or topic-weighted."""

    def __init__(self, n_experts: int, n_topics: int, selection: str) -> None:
        super().__init__(n_experts, n_topics)
        self.selection = _normalize(selection, SELECTION_MODES, "selection mode")

    def select(self, expert, queue_row, total, streams):
        if self.selection == "request_weighted":
            target = streams.selection.next() * total
            acc = 0.0
            for x, count in enumerate(queue_row):
                acc += count
                if target < acc:
                    return x
            for x in range(len(queue_row) - 1, -1, -1):
                if queue_row[x]:
                    return x
        nonempty = [x for x, count in enumerate(queue_row) if count]
        return nonempty[int(streams.selection.next() * len(nonempty))]


class _RoutingScheduler(_QueueDrawSelect):
    """Send each admitted arrival to an expert drawn from that topic's
    routing distribution; the door expert is ignored (complete graph)."""

    kind = "routing"

    def __init__(self, n_experts, n_topics, policy: RoutingPolicy, selection) -> None:
        super().__init__(n_experts, n_topics, selection)
        self.policy = policy
        self.cumulative = np.cumsum(policy.s, axis=0).T.tolist()

    def route(self, topic, door_expert, streams):
        u = streams.routing.next()
        cum = self.cumulative[topic]
        for i, edge in enumerate(cum):
            if u < edge:
                return i
        return self.n_experts - 1


class _MismatchBaseline(_QueueDrawSelect):
    """Negative control: deterministically route every topic to the
    slowest expert still able to answer it."""

    kind = "baseline"

    def __init__(self, n_experts, n_topics, destination: list[int], selection) -> None:
        super().__init__(n_experts, n_topics, selection)
        self.destination = destination

    def route(self, topic, door_expert, streams):
        return self.destination[topic]


def work_conserving_single(inst: Instance, tie_break: str = "arbitrary") -> Scheduler:
    """Single-expert scheduler that admits everything and never idles while
    any topic queue is non-empty. Any tie break keeps the same capacity."""
    if inst.n_experts != 1:
        raise ValueError("work-conserving single-expert scheduler needs exactly 1 expert")
    return _WorkConservingSingle(1, inst.n_topics, tie_break)


def offline_loss_scheduler(
    inst: Instance, policy: LossPolicy, tie_break: str = "arbitrary"
) -> Scheduler:
    """Single-expert scheduler with randomized admission per topic.

    The admission draw is independent of queue state; rejected arrivals
    count as losses at the door and are never enqueued.
    """
    if inst.n_experts != 1:
        raise ValueError("loss scheduler needs exactly 1 expert")
    if policy.mu.shape[0] != inst.n_topics:
        raise ValueError(
            f"admission policy covers {policy.mu.shape[0]} topics, "
            f"instance has {inst.n_topics}"
        )
    return _LossScheduler(inst.n_topics, policy, tie_break)


def offline_routing_scheduler(
    inst: Instance, policy: RoutingPolicy, selection: str = "request_weighted"
) -> Scheduler:
    """Coordinated-expert scheduler driven by a fixed routing matrix.

    Each admitted topic-x arrival is sent to an expert drawn from column x
    of the routing matrix, wherever it arrived. Each expert then serves a
    request drawn from her own queues (request-weighted by default, so a
    longer topic queue is proportionally likelier; ``topic_uniform`` picks
    uniformly among her non-empty topics instead) and idles only when all
    her own queues are empty.
    """
    if policy.s is None:
        raise ValueError("routing scheduler needs a routing matrix")
    problems = routing_policy_violations(policy, inst.success_matrix())
    if problems:
        raise ValueError("invalid routing policy: " + "; ".join(problems))
    return _RoutingScheduler(inst.n_experts, inst.n_topics, policy, selection)


def mismatch_baseline(inst: Instance, selection: str = "request_weighted") -> Scheduler:
    """Anti-optimal deterministic routing used as a negative control.

    Every topic goes to the expert with the smallest positive success
    probability for it (the worst per-request service ratio among experts
    that can answer at all). Topics nobody can answer fall back to expert
    0; they pile up wherever they land.
    """
    qmat = inst.success_matrix()
    destination = []
    for x in range(inst.n_topics):
        col = qmat[:, x]
        candidates = np.nonzero(col > 0)[0]
        if candidates.size == 0:
            destination.append(0)
        else:
            destination.append(int(candidates[np.argmin(col[candidates])]))
    return _MismatchBaseline(inst.n_experts, inst.n_topics, destination, selection)
