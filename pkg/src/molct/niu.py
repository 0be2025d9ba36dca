"""Neural Interaction Units (tied Ego-Attention with per-node adaptive halting) and model assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ego_attention import CfcParams, EaParams, cfc_block, ea_block
from .featurize import EdgeFeatures, FeaturizerConfig, GraphBatch, embed_nodes, embed_relations, featurize
from .nn import MLP, Module, param
from .rme import RmeBlockParams, RmeStack, rme_forward


def time_embedding(t: int, D: int) -> np.ndarray:
    """Sinusoidal step embedding: entry 2k = sin(w_k t), entry 2k+1 = cos(w_k t), w_k = 10000^(-2k/D)."""
    if t < 0:
        raise ValueError("step index must be non-negative")
    out = np.empty(D)
    k = np.arange((D + 1) // 2)
    w = 1.0 / 10000.0 ** (2.0 * k / D)
    out[0::2] = np.sin(w * t)
    out[1::2] = np.cos(w[: D // 2] * t)
    return out


class PonderNet(Module):
    def __init__(self, rng, D: int, hidden: int):
        self.mlp = MLP(rng, [D, hidden, 1])


def halting_prob(n: Tensor, t: int, ponder: PonderNet) -> Tensor:
    """sigmoid(FFN(n + T(t))) for every node; n (..., D) -> (...)."""
    x = ad.add(n, Tensor(time_embedding(t, n.shape[-1])))
    logit = ponder.mlp(x)
    return ad.reshape(ad.sigmoid(logit), n.shape[:-1])


class NiuParams(Module):
    def __init__(self, rng, D: int, d: int, heads: int, ponder_hidden: int, T_max_train: int = 3,
                 halt_epsilon: float = 0.01, use_ffn: bool = False):
        if T_max_train < 1:
            raise ValueError("T_max_train must be >= 1")
        if not 0.0 < halt_epsilon < 0.5:
            raise ValueError("halt_epsilon must lie in (0, 0.5)")
        self.ea = EaParams(rng, D, d, heads, use_ffn=use_ffn)
        self.ponder = PonderNet(rng, D, ponder_hidden)
        self.T_max_train = T_max_train
        self.halt_epsilon = halt_epsilon


@dataclass
class HaltState:
    cumulative: np.ndarray  # (B, N) accumulated halting mass
    halted: np.ndarray  # (B, N) bool
    steps: np.ndarray  # (B, N) step at which each node halted (0 = not yet)


@dataclass
class NiuResult:
    nodes: Tensor
    steps: np.ndarray
    ponder: Tensor  # (B,) mean over nodes of halting step + remainder
    alphas: list = field(default_factory=list)
    history: list = field(default_factory=list)


def niu_forward(n: Tensor, feats: EdgeFeatures, params: NiuParams, T_max: int | None = None,
                keep_history: bool = False) -> NiuResult:
    """Iterate the tied EA block; a node halts once its summed halting probability reaches 1 - eps.

    Halted rows are copied forward unchanged but stay visible to other nodes as keys/values.
    Every node is forced to halt at step T_max.
    """
    T_max = params.T_max_train if T_max is None else T_max
    if T_max < 1:
        raise ValueError("T_max must be >= 1")
    b, N, _ = n.shape
    state = HaltState(np.zeros((b, N)), np.zeros((b, N), dtype=bool), np.zeros((b, N), dtype=np.int64))
    mass = Tensor(np.zeros((b, N)))  # differentiable running sum of p before halting
    remainder = Tensor(np.zeros((b, N)))
    alphas = []
    history = [n.data.copy()] if keep_history else []
    for t in range(1, T_max + 1):
        active = ~state.halted
        if not active.any():
            break
        upd, alpha = ea_block(n, feats, params.ea, return_alpha=True)
        n = ad.where(active[..., None], upd, n)
        alphas.append(alpha.data)
        p = halting_prob(n, t, params.ponder)
        cum = state.cumulative + np.where(active, p.data, 0.0)
        stop = active & ((cum >= 1.0 - params.halt_epsilon) | (t == T_max))
        going = active & ~stop
        remainder = ad.add(remainder, ad.where(stop, ad.sub(1.0, mass), 0.0))
        mass = ad.add(mass, ad.where(going, p, 0.0))
        state.cumulative = cum
        state.steps[active] = t
        state.halted = state.halted | stop
        if keep_history:
            history.append(n.data.copy())
    ponder = ad.mean(ad.add(remainder, Tensor(state.steps.astype(np.float64))), axis=-1)
    return NiuResult(n, state.steps.copy(), ponder, alphas, history)


@dataclass
class ModelConfig:
    D: int = 64
    d: int = 32
    heads: int = 8
    rme_blocks: int = 1
    unit: str = "niu"  # "niu", "ea" or "cfc"
    n_units: int = 1
    iterations: int = 3  # fixed-T repetitions for "ea" / "cfc" units
    T_max: int = 3
    halt_epsilon: float = 0.01
    ponder_hidden: int | None = None
    use_ffn: bool = False
    cfc_filters: int | None = None
    r_min: float = 0.5
    r_cut: float = 10.0
    sigma: float | None = None
    basis: str = "log"
    species_vocab_size: int = 20
    relation_vocab_size: int = 4

    def featurizer(self) -> FeaturizerConfig:
        return FeaturizerConfig(
            d=self.d, r_min=self.r_min, r_cut=self.r_cut, sigma=self.sigma, D=self.D,
            relation_vocab_size=self.relation_vocab_size, species_vocab_size=self.species_vocab_size,
            basis=self.basis,
        )


class InteractionUnit(Module):
    def __init__(self, kind: str, block: Module, iterations: int = 1):
        self.kind = kind
        self.block = block
        self.iterations = iterations


class MolCtModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        from .readout import NodeReadout

        if cfg.unit not in ("niu", "ea", "cfc"):
            raise ValueError(f"unknown interaction unit {cfg.unit!r}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.species_table = param(rng.normal(0.0, 0.1, size=(cfg.species_vocab_size, cfg.D)))
        self.relation_table = param(rng.normal(0.0, 0.1, size=(cfg.relation_vocab_size, cfg.d)))
        self.rme = RmeStack([RmeBlockParams(rng, cfg.D, cfg.d, cfg.heads) for _ in range(cfg.rme_blocks)])
        ponder_hidden = cfg.ponder_hidden or max(2, cfg.D // 8)
        units = []
        for _ in range(cfg.n_units):
            if cfg.unit == "niu":
                block = NiuParams(rng, cfg.D, cfg.d, cfg.heads, ponder_hidden, cfg.T_max, cfg.halt_epsilon,
                                  use_ffn=cfg.use_ffn)
                units.append(InteractionUnit("niu", block))
            elif cfg.unit == "ea":
                units.append(InteractionUnit("ea", EaParams(rng, cfg.D, cfg.d, cfg.heads, use_ffn=cfg.use_ffn),
                                             cfg.iterations))
            else:
                units.append(InteractionUnit("cfc", CfcParams(rng, cfg.D, cfg.d, cfg.cfc_filters), cfg.iterations))
        self.units = units
        self.readout = NodeReadout(rng, cfg.D)
        self.featurizer = cfg.featurizer()
        # label standardization: E = energy_scale * E_model + energy_per_atom * N
        self.energy_per_atom = 0.0
        self.energy_scale = 1.0


@dataclass
class ForwardResult:
    nodes: Tensor
    feats: EdgeFeatures
    steps: list  # per unit (B, N) halting steps (fixed-T units report their T)
    ponder: Tensor  # (B,)
    alphas: list


def molct_forward(batch: GraphBatch, model: MolCtModel, T_max: int | None = None) -> ForwardResult:
    """featurize -> relational encoder -> interaction units -> final node matrix."""
    feats = featurize(batch, model.featurizer)
    z = embed_nodes(batch.species, model.species_table)
    if model.rme.blocks:
        v_rel, _ = embed_relations(batch.rel_types, model.relation_table)
        n = rme_forward(z, v_rel, feats.neighbor_mask, model.rme)
    else:
        n = z
    b, N = batch.species.shape
    ponder = Tensor(np.zeros(b))
    steps, alphas = [], []
    for unit in model.units:
        if unit.kind == "niu":
            res = niu_forward(n, feats, unit.block, T_max)
            n = res.nodes
            ponder = ad.add(ponder, res.ponder)
            steps.append(res.steps)
            alphas.extend(res.alphas)
        else:
            fn = ea_block if unit.kind == "ea" else cfc_block
            for _ in range(unit.iterations):
                n, alpha = fn(n, feats, unit.block, return_alpha=True)
                if alpha is not None:
                    alphas.append(alpha.data)
            steps.append(np.full((b, N), unit.iterations, dtype=np.int64))
    return ForwardResult(n, feats, steps, ponder, alphas)


def diagnostics_rows(result: ForwardResult, graph_index: int = 0) -> list[dict]:
    """Per-node halting steps and head-averaged attention rows from the last EA application."""
    rows = []
    att = result.alphas[-1][graph_index].mean(axis=-2) if result.alphas else None
    for u, steps in enumerate(result.steps):
        for i, t in enumerate(steps[graph_index]):
            rows.append(dict(unit=u, node=i, halting_step=int(t),
                             attention=[] if att is None else [float(a) for a in att[i]]))
    return rows
