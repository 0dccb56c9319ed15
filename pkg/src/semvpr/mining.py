"""Triplet mining against a periodically refreshed descriptor cache."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, TextIO

import numpy as np

from .retrieval import geo_distance


class QueryUnusable(LookupError):
    """The query has no eligible positive or no eligible negative."""


@dataclass
class MiningPolicy:
    positive_radius_m: float = 10.0
    negative_exclusion_radius_m: float = 25.0
    negatives_per_query: int = 1
    cache_refresh_every: int = 50
    # when set, negatives are searched in a seeded random subset of this size
    negative_pool: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.negative_exclusion_radius_m >= self.positive_radius_m > 0:
            raise ValueError("need negative_exclusion_radius_m >= positive_radius_m > 0")
        if self.negatives_per_query != 1:
            raise ValueError("only one negative per query is supported")


@dataclass(frozen=True)
class Triplet:
    query: int
    positive: int
    negative: int
    d_pos: float
    d_neg: float


class DescriptorCache:
    def __init__(self, ids, vectors: Optional[np.ndarray] = None, refresh_every: int = 50):
        self.ids = np.asarray(ids, dtype=np.int64)
        dim = 0 if vectors is None else np.asarray(vectors).shape[1]
        self.vectors = (np.zeros((len(self.ids), dim)) if vectors is None
                        else np.array(vectors, dtype=np.float64))
        if self.vectors.shape[0] != len(self.ids):
            raise ValueError("one cached vector per id required")
        self.generation = 0
        self.refresh_every = refresh_every
        self._row = {int(i): k for k, i in enumerate(self.ids)}

    def row(self, rid: int) -> int:
        return self._row[int(rid)]

    def vector(self, rid: int) -> np.ndarray:
        return self.vectors[self._row[int(rid)]]

    def replace(self, vectors: np.ndarray) -> None:
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.shape[0] != len(self.ids):
            raise ValueError("refresh must supply one vector per cached id")
        self.vectors = vectors
        self.generation += 1

    def due(self, iteration: int) -> bool:
        return self.refresh_every > 0 and iteration % self.refresh_every == 0


def refresh_cache(model, manifest, cache: DescriptorCache) -> None:
    """Recompute every cached descriptor with the current parameters."""
    if len(manifest.records) == 0:
        cache.replace(cache.vectors)
        return
    by_id = {r.id: r for r in manifest.records}
    images = np.stack([manifest.load_image(by_id[int(i)]) for i in cache.ids])
    cache.replace(model.describe(images))


def _argmin_by_id(dist: np.ndarray, ids: np.ndarray) -> int:
    """Position of the smallest distance, ties going to the lowest id."""
    best = dist.min()
    tied = np.flatnonzero(dist == best)
    return int(tied[np.argmin(ids[tied])])


def mine_triplet(query_id: int, manifest, cache: DescriptorCache, policy: MiningPolicy,
                 rng_seed: int = 0) -> Triplet:
    """Best positive within ``positive_radius_m`` and hardest negative beyond
    ``negative_exclusion_radius_m``, ranked by cached descriptor distance."""
    coords = manifest.coords
    ids = manifest.ids
    pos_of = {int(r): k for k, r in enumerate(ids)}
    if int(query_id) not in pos_of:
        raise KeyError(f"query {query_id} not in manifest")
    qcoord = coords[pos_of[int(query_id)]]
    geo = geo_distance(coords, qcoord, manifest.convention)
    qvec = cache.vector(query_id)
    rows = np.array([cache.row(i) for i in ids])
    diff = cache.vectors[rows] - qvec
    desc = np.sqrt((diff * diff).sum(axis=1))

    pos_mask = (geo <= policy.positive_radius_m) & (ids != int(query_id))
    neg_mask = geo > policy.negative_exclusion_radius_m
    if not pos_mask.any():
        raise QueryUnusable(f"query {query_id}: no gallery record within {policy.positive_radius_m} m")
    if not neg_mask.any():
        raise QueryUnusable(f"query {query_id}: no gallery record beyond {policy.negative_exclusion_radius_m} m")
    neg_idx = np.flatnonzero(neg_mask)
    if policy.negative_pool is not None and len(neg_idx) > policy.negative_pool:
        rng = np.random.default_rng([rng_seed, int(query_id), cache.generation])
        neg_idx = np.sort(rng.choice(neg_idx, size=policy.negative_pool, replace=False))
    pos_idx = np.flatnonzero(pos_mask)
    p = pos_idx[_argmin_by_id(desc[pos_idx], ids[pos_idx])]
    n = neg_idx[_argmin_by_id(desc[neg_idx], ids[neg_idx])]
    return Triplet(int(query_id), int(ids[p]), int(ids[n]), float(desc[p]), float(desc[n]))


@dataclass
class MiningStats:
    mined: int = 0
    unusable: int = 0
    unusable_ids: List[int] = field(default_factory=list)

    @property
    def unusable_fraction(self) -> float:
        total = self.mined + self.unusable
        return self.unusable / total if total else 0.0


class TripletLog:
    """CSV writer for ``iteration,query_id,pos_id,neg_id,d_pos,d_neg``."""

    def __init__(self, stream: TextIO):
        self._w = csv.writer(stream, lineterminator="\n")
        self._w.writerow(["iteration", "query_id", "pos_id", "neg_id", "d_pos", "d_neg"])

    def write(self, iteration: int, t: Triplet) -> None:
        self._w.writerow([iteration, t.query, t.positive, t.negative, repr(t.d_pos), repr(t.d_neg)])
