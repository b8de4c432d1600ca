"""Per-modality memory banks: greedy coreset construction and exact k-NN.

The bank stores full-dimensional prototype vectors selected by farthest-point
(greedy k-center) sampling. Selection starts at index 0 for reproducibility;
an optional seeded Gaussian random projection accelerates the *selection*
distances only. Queries are exact brute-force scans with ties broken toward
the lower prototype index.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyBankError, ShapeError
from .tensorio import read_tensor, write_tensor

__all__ = [
    "MemoryBank",
    "NeighborSet",
    "build_bank",
    "query_neighbors",
    "query_neighbors_batch",
    "nearest_distance",
    "covering_radius",
    "save_bank",
    "load_bank",
]


@dataclass
class MemoryBank:
    modality: str
    prototypes: np.ndarray
    source_refs: list = field(default_factory=list)
    coreset_fraction: float = 1.0

    def __post_init__(self):
        self.prototypes = np.ascontiguousarray(self.prototypes, dtype=np.float32)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1:
            raise EmptyBankError("bank needs a (P, D) prototype matrix with P >= 1")
        if not np.all(np.isfinite(self.prototypes)):
            raise ConfigError("bank prototypes must be finite")
        self.prototypes.setflags(write=False)  # banks are immutable after build

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass
class NeighborSet:
    """Ordered nearest prototypes: indices plus nondecreasing L2 distances.

    ``truncated`` flags the degenerate case where the bank holds fewer than
    the requested 2k+1 prototypes and the full bank is returned instead.
    """

    indices: np.ndarray
    distances: np.ndarray
    truncated: bool = False

    def __len__(self):
        return len(self.indices)


def _sq_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = points.astype(np.float64) - query.astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def build_bank(
    features,
    modality: str,
    fraction: float,
    seed: int | None = None,
    projection_dim: int | None = None,
    source_refs=None,
) -> MemoryBank:
    """Greedy k-center selection of ``ceil(fraction * N)`` prototypes.

    ``features`` is any iterable of D-vectors (foreground features of the
    training split). When ``projection_dim`` is set, selection distances are
    computed in a seeded Gaussian random-projection space for speed, but the
    stored prototypes are always full-dimensional.
    """
    points = np.asarray(list(features) if not isinstance(features, np.ndarray) else features,
                        dtype=np.float32)
    if points.ndim != 2 or points.shape[0] == 0:
        raise EmptyBankError("cannot build a bank from an empty feature set")
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"coreset fraction {fraction} outside (0, 1]")
    n = points.shape[0]
    budget = min(n, math.ceil(fraction * n))

    space = points
    if projection_dim is not None and projection_dim < points.shape[1]:
        rng = np.random.default_rng(np.random.SeedSequence([0 if seed is None else int(seed), 0x9A]))
        proj = rng.standard_normal((points.shape[1], projection_dim)) / np.sqrt(projection_dim)
        space = points.astype(np.float64) @ proj

    selected = np.empty(budget, dtype=np.int64)
    selected[0] = 0
    min_sq = _sq_distances(space, space[0])
    min_sq[0] = -np.inf  # selected rows can never win the argmax again
    for i in range(1, budget):
        nxt = int(np.argmax(min_sq))  # argmax takes the lowest index on ties
        selected[i] = nxt
        np.minimum(min_sq, _sq_distances(space, space[nxt]), out=min_sq)
        min_sq[nxt] = -np.inf

    refs = None
    if source_refs is not None:
        source_refs = list(source_refs)
        if len(source_refs) != n:
            raise ShapeError("source_refs length must match the feature count")
        refs = [source_refs[i] for i in selected]
    return MemoryBank(modality, points[selected], refs or [], fraction)


def query_neighbors(bank: MemoryBank, f: np.ndarray, k: int) -> NeighborSet:
    """Exact 2k+1 nearest prototypes of ``f``, nearest first."""
    f = np.asarray(f)
    if f.shape != (bank.dim,):
        raise ShapeError(f"query shape {f.shape} != bank dim ({bank.dim},)")
    want = 2 * k + 1
    d = np.sqrt(_sq_distances(bank.prototypes, f))
    order = np.argsort(d, kind="stable")[:want]
    return NeighborSet(order, d[order], truncated=bank.size < want)


def query_neighbors_batch(bank: MemoryBank, queries: np.ndarray, k: int, chunk: int = 1024):
    """Vectorized :func:`query_neighbors` over rows of ``queries`` (N, D).

    Returns (indices (N, n), distances (N, n), truncated) with
    n = min(2k+1, bank size).
    """
    queries = np.asarray(queries)
    if queries.ndim != 2 or queries.shape[1] != bank.dim:
        raise ShapeError(f"queries shape {queries.shape} incompatible with bank dim {bank.dim}")
    want = 2 * k + 1
    n = min(want, bank.size)
    out_idx = np.empty((queries.shape[0], n), dtype=np.int64)
    out_dist = np.empty((queries.shape[0], n), dtype=np.float64)
    protos = bank.prototypes.astype(np.float64)
    for start in range(0, queries.shape[0], chunk):
        block = queries[start : start + chunk].astype(np.float64)
        diff = block[:, None, :] - protos[None, :, :]
        d = np.sqrt(np.einsum("bpd,bpd->bp", diff, diff))
        order = np.argsort(d, axis=1, kind="stable")[:, :n]
        out_idx[start : start + block.shape[0]] = order
        out_dist[start : start + block.shape[0]] = np.take_along_axis(d, order, axis=1)
    return out_idx, out_dist, bank.size < want


def nearest_distance(bank: MemoryBank, f: np.ndarray) -> float:
    return float(query_neighbors(bank, f, 0).distances[0])


def covering_radius(bank: MemoryBank, features: np.ndarray) -> float:
    """Max over ``features`` of the distance to the nearest prototype."""
    _, dist, _ = query_neighbors_batch(bank, np.asarray(features, dtype=np.float32), 0)
    return float(dist[:, 0].max())


def save_bank(bank: MemoryBank, path):
    """Persist prototypes as a tensor container plus a JSON sidecar of refs."""
    path = Path(path)
    write_tensor(path, bank.prototypes, {"kind": "memory_bank", "modality": bank.modality})
    sidecar = {
        "modality": bank.modality,
        "coreset_fraction": bank.coreset_fraction,
        "source_refs": [list(r) for r in bank.source_refs],
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=1) + "\n"
    )


def load_bank(path) -> MemoryBank:
    path = Path(path)
    protos, header = read_tensor(path)
    if header.get("kind") != "memory_bank":
        raise ConfigError(f"{path} is not a memory bank container")
    sidecar_path = path.with_suffix(path.suffix + ".json")
    refs, fraction = [], 1.0
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text())
        refs = [tuple(r) for r in sidecar.get("source_refs", [])]
        fraction = sidecar.get("coreset_fraction", 1.0)
    return MemoryBank(header["modality"], protos, refs, fraction)
