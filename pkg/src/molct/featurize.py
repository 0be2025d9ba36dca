"""Dual-representation graph featurization.

A molecule is described twice: by particle coordinates and by relational
edges (bonds, sequence links). Coordinates become log-distance radial basis
vectors plus a smooth cutoff weight; relational edges become learned vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class VocabularyError(ValueError):
    pass


class DegeneracyError(ValueError):
    pass


@dataclass
class MolecularGraph:
    species: np.ndarray
    coords: np.ndarray
    relational_edges: list[tuple[int, int, int]] = field(default_factory=list)
    directed: bool = False

    def __post_init__(self):
        self.species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.relational_edges = [tuple(int(v) for v in e) for e in self.relational_edges]
        n = len(self.species)
        if n < 1:
            raise ValueError("a molecular graph needs at least one particle")
        if self.coords.shape != (n, 3):
            raise ValueError(f"coords shape {self.coords.shape} does not match {n} particles")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coordinates must be finite")
        for i, j, _ in self.relational_edges:
            if i == j:
                raise ValueError(f"self relational edge ({i},{i}) is not allowed")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"relational edge ({i},{j}) out of range for {n} particles")

    @property
    def n_particles(self) -> int:
        return len(self.species)

    def relation_matrix(self) -> np.ndarray:
        """N x N relation type ids, -1 where no edge; undirected edges are mirrored."""
        n = self.n_particles
        rel = np.full((n, n), -1, dtype=np.int64)
        for i, j, t in self.relational_edges:
            rel[i, j] = t
            if not self.directed:
                rel[j, i] = t
        return rel

    def with_coords(self, coords) -> "MolecularGraph":
        return MolecularGraph(self.species.copy(), coords, list(self.relational_edges), self.directed)

    def permuted(self, perm: Sequence[int]) -> "MolecularGraph":
        """Relabel particles so that new particle k is old particle perm[k]."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        edges = [(int(inv[i]), int(inv[j]), t) for i, j, t in self.relational_edges]
        return MolecularGraph(self.species[perm], self.coords[perm], edges, self.directed)


@dataclass
class FeaturizerConfig:
    d: int = 32
    r_min: float = 0.5
    r_cut: float = 10.0
    sigma: float | None = None
    D: int = 64
    relation_vocab_size: int = 4
    species_vocab_size: int = 20
    basis: str = "log"  # "log" or "linear" (distance RBF baseline)

    def __post_init__(self):
        if not 0.0 < self.r_min < self.r_cut:
            raise ValueError(f"need 0 < r_min < r_cut, got {self.r_min}, {self.r_cut}")
        if self.d < 2:
            raise ValueError("edge width d must be >= 2")
        if self.basis not in ("log", "linear"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def mu(self) -> np.ndarray:
        if self.basis == "log":
            return np.linspace(math.log(self.r_min), math.log(self.r_cut), self.d)
        return np.linspace(self.r_min, self.r_cut, self.d)

    @property
    def width(self) -> float:
        """RBF width; defaults to the spacing between neighbouring centres."""
        if self.sigma is not None:
            return self.sigma
        mu = self.mu
        return float(mu[1] - mu[0])


def _rbf(x: Tensor, cfg: FeaturizerConfig) -> Tensor:
    mu = Tensor(cfg.mu)
    diff = ad.sub(ad.reshape(x, x.shape + (1,)), mu)
    return ad.exp(ad.mul(ad.mul(diff, diff), -1.0 / (2.0 * cfg.width**2)))


def log_rbf(r, cfg: FeaturizerConfig):
    """e_k(r) = exp(-(log r - mu_k)^2 / (2 sigma^2)); accepts floats, arrays or Tensors."""
    is_tensor = isinstance(r, Tensor)
    rt = r if is_tensor else Tensor(r)
    if np.any(rt.data <= 0):
        raise ValueError("log_rbf is undefined for r <= 0")
    x = ad.log(rt) if cfg.basis == "log" else rt
    out = _rbf(x, cfg)
    return out if is_tensor else out.data


def cutoff_weight(r, r_cut: float):
    """Behler cosine cutoff 0.5 (cos(pi min(r, r_cut) / r_cut) + 1)."""
    is_tensor = isinstance(r, Tensor)
    rt = r if is_tensor else Tensor(r)
    inside = rt.data < r_cut
    clipped = ad.where(inside, rt, r_cut)
    out = ad.mul(ad.add(ad.cos(ad.mul(clipped, math.pi / r_cut)), 1.0), 0.5)
    return out if is_tensor else out.data


def embed_nodes(species, table: Tensor) -> Tensor:
    species = np.asarray(species, dtype=np.int64)
    if species.size and (species.min() < 0 or species.max() >= table.shape[0]):
        bad = species[(species < 0) | (species >= table.shape[0])]
        raise VocabularyError(f"species id {int(bad[0])} outside vocabulary of size {table.shape[0]}")
    return ad.take(table, species)


def embed_relations(rel_types, table: Tensor) -> tuple[Tensor, np.ndarray]:
    """Dense relational edge vectors (zero where no edge) and the edge-presence mask."""
    rel_types = np.asarray(rel_types, dtype=np.int64)
    has = rel_types >= 0
    if np.any(rel_types >= table.shape[0]):
        bad = rel_types[rel_types >= table.shape[0]]
        raise VocabularyError(f"relation id {int(bad[0])} outside vocabulary of size {table.shape[0]}")
    v = ad.take(table, np.where(has, rel_types, 0))
    v = ad.mul(v, Tensor(has[..., None].astype(np.float64)))
    return v, has


@dataclass
class GraphBatch:
    """Graphs with a common particle count, stacked along a leading batch axis."""

    species: np.ndarray  # (B, N)
    coords: Tensor  # (B, N, 3)
    rel_types: np.ndarray  # (B, N, N), -1 = no edge

    @classmethod
    def from_graphs(cls, graphs: Sequence[MolecularGraph], requires_grad: bool = False) -> "GraphBatch":
        n = {g.n_particles for g in graphs}
        if len(n) != 1:
            raise ValueError(f"graphs in a batch must share a particle count, got {sorted(n)}")
        species = np.stack([g.species for g in graphs])
        coords = Tensor(np.stack([g.coords for g in graphs]), requires_grad=requires_grad)
        rel = np.stack([g.relation_matrix() for g in graphs])
        return cls(species, coords, rel)

    @property
    def n_graphs(self) -> int:
        return self.species.shape[0]

    @property
    def n_particles(self) -> int:
        return self.species.shape[1]


@dataclass
class EdgeFeatures:
    positional: Tensor  # (B, N, N, d); diagonal zero, filled by the learned self-edge later
    rel_types: np.ndarray  # (B, N, N)
    neighbor_mask: np.ndarray  # (B, N, N) relational connectivity plus self
    cutoff: Tensor  # (B, N, N), 1 on the diagonal
    r: Tensor  # (B, N, N), diagonal holds a placeholder 1.0

    @property
    def distances(self) -> np.ndarray:
        out = self.r.data.copy()
        n = out.shape[-1]
        out[..., np.arange(n), np.arange(n)] = 0.0
        return out

    @property
    def has_relation(self) -> np.ndarray:
        return self.rel_types >= 0


def pairwise_distances(coords: Tensor) -> Tensor:
    """|R_i - R_j| with a placeholder 1.0 on the diagonal so gradients stay finite."""
    b, n, _ = coords.shape
    diff = ad.sub(ad.reshape(coords, (b, n, 1, 3)), ad.reshape(coords, (b, 1, n, 3)))
    r2 = ad.add(ad.tsum(ad.mul(diff, diff), axis=-1), Tensor(np.eye(n)))
    return ad.sqrt(r2)


def featurize(batch: GraphBatch, cfg: FeaturizerConfig) -> EdgeFeatures:
    n = batch.n_particles
    eye = np.eye(n, dtype=bool)
    r = pairwise_distances(batch.coords)
    off = r.data[:, ~eye]
    if off.size and off.min() < cfg.r_min / 10.0:
        raise DegeneracyError(
            f"particles closer than {cfg.r_min / 10.0} A (min distance {off.min():.3g} A)"
        )
    x = ad.log(r) if cfg.basis == "log" else r
    e = _rbf(x, cfg)
    e = ad.where(~eye[None, :, :, None], e, 0.0)
    fc = ad.where(~eye[None], cutoff_weight(r, cfg.r_cut), 1.0)
    rel = batch.rel_types
    mask = (rel >= 0) | eye[None]
    return EdgeFeatures(e, rel, mask, fc, r)
