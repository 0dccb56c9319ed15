"""Exact descriptor retrieval and geographic Recall@N."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import DimensionError

EARTH_RADIUS_M = 6371000.0


def geo_distance(a, b, convention: str = "utm") -> np.ndarray:
    """Distance in meters between coordinate pairs (broadcasts over leading axes).

    ``utm`` pairs are (easting, northing); ``latlon`` pairs are degrees and use
    the haversine formula.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if convention == "utm":
        d = a - b
        return np.sqrt((d * d).sum(axis=-1))
    if convention == "latlon":
        lat1, lon1 = np.radians(a[..., 0]), np.radians(a[..., 1])
        lat2, lon2 = np.radians(b[..., 0]), np.radians(b[..., 1])
        h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
        return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    raise ValueError(f"unknown coordinate convention {convention!r}")


class DescriptorIndex:
    """Immutable gallery of descriptors searched by brute force."""

    def __init__(self, ids: Sequence[int], matrix: np.ndarray):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise DimensionError(f"descriptor matrix must be 2-D, got {matrix.shape}")
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) != matrix.shape[0]:
            raise DimensionError(f"{len(ids)} ids for {matrix.shape[0]} rows")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("descriptor ids must be unique")
        self.ids = ids
        self.matrix = matrix
        self.matrix.setflags(write=False)
        self.ids.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def distances(self, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query, dtype=np.float64)
        if query.shape[-1] != self.dim:
            raise DimensionError(f"query length {query.shape[-1]} != index dim {self.dim}")
        diff = self.matrix - query[..., None, :]
        return np.sqrt((diff * diff).sum(axis=-1))

    def ranking(self, query: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Full ascending ranking as (row positions, distances); ties by lower id."""
        d = self.distances(query)
        order = np.lexsort((self.ids, d))
        return order, d[order]


def knn(index: DescriptorIndex, query: np.ndarray, k: int) -> List[Tuple[int, float]]:
    """The ``k`` nearest gallery entries as (id, distance), ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("index is empty")
    order, dist = index.ranking(query)
    k = min(k, len(order))
    return [(int(index.ids[i]), float(d)) for i, d in zip(order[:k], dist[:k])]


@dataclass
class EvalResult:
    recalls: Dict[int, float]
    ranks: Dict[int, int] = field(default_factory=dict)
    num_queries: int = 0
    excluded: List[int] = field(default_factory=list)

    def recall(self, n: int) -> float:
        return self.recalls[n]


def recall_at_n(index: DescriptorIndex, query_ids: Sequence[int], query_vectors: np.ndarray,
                query_coords: np.ndarray, gallery_coords: np.ndarray,
                positive_radius_m: float = 25.0, ns: Sequence[int] = (1, 5, 10),
                convention: str = "utm") -> EvalResult:
    """Fraction of queries with a gallery record within ``positive_radius_m``
    among their top-N descriptor neighbours.

    ``gallery_coords`` rows align with the index rows. Queries without any
    geographic positive in the gallery are left out of the denominator and
    listed in ``excluded``.
    """
    query_vectors = np.asarray(query_vectors, dtype=np.float64)
    query_coords = np.asarray(query_coords, dtype=np.float64)
    gallery_coords = np.asarray(gallery_coords, dtype=np.float64)
    if len(gallery_coords) != len(index):
        raise DimensionError("gallery coordinates do not align with the index")
    ranks: Dict[int, int] = {}
    excluded: List[int] = []
    for qid, vec, coord in zip(query_ids, query_vectors, query_coords):
        positive = geo_distance(gallery_coords, coord, convention) <= positive_radius_m
        if not positive.any():
            excluded.append(int(qid))
            continue
        order, _ = index.ranking(vec)
        ranks[int(qid)] = int(np.argmax(positive[order])) + 1
    counted = np.array(list(ranks.values()), dtype=np.int64)
    recalls = {int(n): (float((counted <= n).mean()) if len(counted) else 0.0) for n in ns}
    return EvalResult(recalls=recalls, ranks=ranks, num_queries=len(counted), excluded=excluded)


def format_table(result: EvalResult, label: str = "model") -> str:
    ns = sorted(result.recalls)
    head = " / ".join(str(n) for n in ns)
    vals = " / ".join(f"{100 * result.recalls[n]:.1f}" for n in ns)
    width = max(len(label), 5)
    lines = [
        f"{'':<{width}}  Recall@N {head}",
        f"{label:<{width}}  {vals}",
        f"queries: {result.num_queries}  excluded (no positive): {len(result.excluded)}",
    ]
    return "\n".join(lines)


def to_csv(result: EvalResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "recall"])
    for n in sorted(result.recalls):
        w.writerow([n, f"{result.recalls[n]:.6f}"])
    w.writerow([])
    w.writerow(["query_id", "first_positive_rank"])
    for qid in sorted(result.ranks):
        w.writerow([qid, result.ranks[qid]])
    return buf.getvalue()
