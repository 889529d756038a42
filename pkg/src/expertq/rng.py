"""Seeded random streams for the simulator.

One 64-bit seed fans out into five named child streams, one per draw
purpose. Keeping arrivals on their own stream means swapping the
scheduler (which consumes admission/routing/selection/service draws)
never perturbs the arrival sample path for a given seed. Reproducibility
is within-implementation: the same seed and config always replay the same
trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RngStreams", "UniformBuffer"]

_PURPOSES = ("arrivals", "admission", "routing", "selection", "service")


class UniformBuffer:
    """Block-buffered scalar uniforms from one generator.

    Pops Python floats from a pre-drawn block; refills transparently. The
    consumption order is exactly the generator's native sequence, so
    buffering does not change any trajectory.
    """

    __slots__ = ("_gen", "_block", "_buf", "_pos")

    def __init__(self, gen: np.random.Generator, block: int = 8192) -> None:
        self._gen = gen
        self._block = block
        self._buf: list[float] = []
        self._pos = 0

    def next(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._gen.random(self._block).tolist()
            self._pos = 0
        v = self._buf[self._pos]
        self._pos += 1
        return v


@dataclass
class RngStreams:
    """The five per-purpose generators driving one simulation run."""

    arrivals: np.random.Generator
    admission: UniformBuffer
    routing: UniformBuffer
    selection: UniformBuffer
    service: UniformBuffer

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        children = np.random.SeedSequence(seed).spawn(len(_PURPOSES))
        gens = {
            name: np.random.Generator(np.random.PCG64(child))
            for name, child in zip(_PURPOSES, children)
        }
        return cls(
            arrivals=gens["arrivals"],
            admission=UniformBuffer(gens["admission"]),
            routing=UniformBuffer(gens["routing"]),
            selection=UniformBuffer(gens["selection"]),
            service=UniformBuffer(gens["service"]),
        )
