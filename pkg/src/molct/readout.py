"""Node, edge and graph readouts; energy/force prediction and the force-matching loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .featurize import GraphBatch, MolecularGraph
from .nn import MLP, Module


class NodeReadout(Module):
    """D -> D/2 -> 1 atomic energy network."""

    def __init__(self, rng, D: int):
        self.mlp = MLP(rng, [D, max(1, D // 2), 1])

    def __call__(self, n: Tensor) -> Tensor:
        return ad.reshape(self.mlp(n), n.shape[:-1])


class EdgeReadout(Module):
    def __init__(self, rng, D: int, d_rel: int, d_pos: int, out: int = 1, hidden: int | None = None):
        width = 2 * D + d_rel + d_pos
        self.mlp = MLP(rng, [width, hidden or D, out])


def edge_readout(n_i: Tensor, n_j: Tensor, v_ij: Tensor, v_ji: Tensor, e_ij: Tensor, params: EdgeReadout) -> Tensor:
    """Order-free pair prediction from (n_i + n_j, |n_i - n_j|, mean of both relation directions, e_ij)."""
    n_i, n_j = ad.constant(n_i), ad.constant(n_j)
    s = ad.add(n_i, n_j)
    diff = ad.sub(n_i, n_j)
    a = ad.sqrt(ad.add(ad.mul(diff, diff), 1e-24))
    v = ad.mul(ad.add(ad.constant(v_ij), ad.constant(v_ji)), 0.5)
    return params.mlp(ad.concat([s, a, v, ad.constant(e_ij)], axis=-1))


class GraphReadout(Module):
    def __init__(self, rng, D: int, out: int | None = None):
        self.mlp = MLP(rng, [D, D, out or D])


def graph_readout(n: Tensor, params: GraphReadout) -> Tensor:
    """Mean-pool over the node axis (second to last), then an MLP."""
    if n.shape[-2] < 1:
        raise ContractError("graph readout needs at least one node")
    return params.mlp(ad.mean(n, axis=-2))


@dataclass
class EnergyForcePrediction:
    total_energy: np.ndarray  # (B,)
    per_atom_energy: np.ndarray  # (B, N)
    forces: np.ndarray  # (B, N, 3)
    steps: list
    # differentiable handles, in standardized model units
    energy_t: Tensor | None = None
    forces_t: Tensor | None = None
    ponder_t: Tensor | None = None


def _as_batch(graphs) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, MolecularGraph):
        graphs = [graphs]
    return GraphBatch.from_graphs(graphs, requires_grad=True)


def predict_energy_forces(graphs, model, T_max: int | None = None, create_graph: bool = False,
                          physical_units: bool = True) -> EnergyForcePrediction:
    """Per-atom energies from the node readout, forces as the exact -dE/dx.

    With ``create_graph`` the force tensor stays differentiable w.r.t. parameters
    (needed to train on force labels). Arrays are in physical units unless
    ``physical_units`` is false; the tensor handles are always in model units.
    """
    from .niu import molct_forward

    batch = _as_batch(graphs)
    if not batch.coords.requires_grad:
        batch = GraphBatch(batch.species, Tensor(batch.coords.data, requires_grad=True), batch.rel_types)
    # forces need the graph even when called under no_grad
    with ad.enable_grad():
        res = molct_forward(batch, model, T_max)
        atom_e = model.readout(res.nodes)
        energy = ad.tsum(atom_e, axis=-1)
        (dedx,) = ad.grad(ad.tsum(energy), [batch.coords], create_graph=create_graph)
    forces = ad.neg(dedx)
    n = batch.n_particles
    scale = model.energy_scale if physical_units else 1.0
    shift = model.energy_per_atom if physical_units else 0.0
    return EnergyForcePrediction(
        total_energy=energy.data * scale + shift * n,
        per_atom_energy=atom_e.data * scale + shift,
        forces=forces.data * scale,
        steps=res.steps,
        energy_t=energy,
        forces_t=forces,
        ponder_t=res.ponder,
    )


def loss(pred: EnergyForcePrediction, energy_labels, force_labels, lam: float = 0.99,
         ponder_weight: float = 0.0) -> Tensor:
    """Batch mean of (1-lam)(E0 - sum E_i)^2 + lam sum_i |F_i0 - F_i|^2 (+ ponder cost).

    Labels must be in the same (standardized) units as ``pred.energy_t``/``pred.forces_t``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    e0 = np.asarray(energy_labels, dtype=np.float64).reshape(pred.energy_t.shape)
    f0 = np.asarray(force_labels, dtype=np.float64)
    if f0.shape != pred.forces_t.shape:
        raise ContractError(f"force labels {f0.shape} do not match predictions {pred.forces_t.shape}")
    de = ad.sub(pred.energy_t, Tensor(e0))
    df = ad.sub(pred.forces_t, Tensor(f0))
    fterm = ad.tsum(ad.mul(df, df), axis=(-2, -1))
    per = ad.add(ad.mul(ad.mul(de, de), 1.0 - lam), ad.mul(fterm, lam))
    if ponder_weight and pred.ponder_t is not None:
        per = ad.add(per, ad.mul(pred.ponder_t, ponder_weight))
    return ad.mean(per)


def loss_terms(pred: EnergyForcePrediction, energy_labels, force_labels) -> tuple[float, float]:
    """(mean squared energy error, mean per-sample summed squared force error) in model units."""
    e0 = np.asarray(energy_labels, dtype=np.float64).reshape(pred.energy_t.shape)
    f0 = np.asarray(force_labels, dtype=np.float64)
    de = pred.energy_t.data - e0
    df = pred.forces_t.data - f0
    return float(np.mean(de**2)), float(np.mean(np.sum(df**2, axis=(-2, -1))))
