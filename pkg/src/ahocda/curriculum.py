"""Distance-sorted curriculum, stage partition and fake-source pools."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ParameterError, StateError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Curriculum:
    """Compound images ordered near-source to far-source, split into K stages.

    ``dropped`` holds the largest-distance items removed so that K divides
    the staged list; they are not part of any stage.
    """

    ordered: tuple[tuple[str, float], ...]
    K: int
    stages: tuple[tuple[str, ...], ...]
    dropped: tuple[tuple[str, float], ...] = ()

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.ordered]

    @property
    def size(self) -> int:
        return len(self.ordered)

    def to_json(self, beta: float) -> dict:
        return {
            "beta": beta,
            "K": self.K,
            "ordered": [{"id": i, "delta": d} for i, d in self.ordered],
            "stages": [list(s) for s in self.stages],
            "fake_source_per_stage": [fake_source_ids(self, j) for j in range(1, self.K + 1)],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Curriculum":
        ordered = tuple((e["id"], float(e["delta"])) for e in obj["ordered"])
        stages = tuple(tuple(s) for s in obj["stages"])
        return cls(ordered, int(obj["K"]), stages)


def build_curriculum(distances: Sequence[tuple[str, float]], K: int) -> Curriculum:
    """Sort by ascending distance (ties by id) and cut into K equal stages."""
    if not distances:
        raise ParameterError("curriculum needs at least one image")
    if int(K) != K or K < 1:
        raise ParameterError(f"K must be a positive integer, got {K}")
    if K > len(distances):
        raise ParameterError(f"K={K} exceeds the number of images ({len(distances)})")
    ranked = sorted(((str(i), float(d)) for i, d in distances), key=lambda t: (t[1], t[0]))
    extra = len(ranked) % K
    dropped: tuple = ()
    if extra:
        log.warning("K=%d does not divide %d images; dropping the %d farthest",
                    K, len(ranked), extra)
        dropped = tuple(ranked[-extra:])
        ranked = ranked[:-extra]
    per = len(ranked) // K
    stages = tuple(tuple(i for i, _ in ranked[s * per:(s + 1) * per]) for s in range(K))
    return Curriculum(tuple(ranked), int(K), stages, dropped)


def fake_source_size(n: int, K: int, j: int) -> int:
    return (n * (j - 1)) // (2 * K)


def fake_source_ids(curriculum: Curriculum, j: int) -> list[str]:
    """Ids of the nearest-source images reused as pseudo-labeled source at stage j."""
    if not 1 <= j <= curriculum.K:
        raise ParameterError(f"stage index must be in [1, {curriculum.K}], got {j}")
    return curriculum.ids[:fake_source_size(curriculum.size, curriculum.K, j)]


@dataclass(frozen=True)
class FakeSourceSet:
    stage: int
    members: tuple[tuple[str, np.ndarray], ...]
    provenance: str

    def __len__(self):
        return len(self.members)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.members]


def materialize_fake_source(ids: Sequence[str], model, images: Mapping[str, object],
                            stage: int = 1, provenance: str = "") -> FakeSourceSet:
    """Pseudo-label each image by the argmax of ``model.predict_proba``.

    Labels are computed once here and stay fixed for the whole stage.
    """
    if model is None or not getattr(model, "initialized", True):
        raise StateError("model must be initialized before pseudo-labelling")
    members = []
    for i in ids:
        probs = model.predict_proba(images[i])
        members.append((i, np.argmax(probs, axis=-1).astype(np.int64)))
    return FakeSourceSet(int(stage), tuple(members), provenance)
