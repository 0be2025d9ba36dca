"""Relational encoder: inject relational edges into node vectors, no geometry."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import MhaParams, PositionWiseFFN, mha
from .autodiff import Tensor
from .nn import LayerNorm, Module, xavier_uniform


class RmeBlockParams(Module):
    def __init__(self, rng, D: int, d: int, heads: int, ffn_hidden: int | None = None):
        self.mha = MhaParams(rng, D, heads)
        # edge projections map d -> D so that k_ji = z_j + v_ij W typechecks for d != D
        self.w_k2 = xavier_uniform(rng, d, D)
        self.w_v2 = xavier_uniform(rng, d, D)
        self.ffn = PositionWiseFFN(rng, D, ffn_hidden)
        self.norm_attn = LayerNorm(D)
        self.norm_ffn = LayerNorm(D)


class RmeStack(Module):
    def __init__(self, blocks: list[RmeBlockParams] | None = None):
        self.blocks = list(blocks or [])


def rme_keys_values(z: Tensor, v_rel: Tensor, params: RmeBlockParams):
    """Keys and values for every reference node at once.

    z (B, N, D), v_rel (B, N, N, d) with v_rel[b, i, j] = v_ij (zero if no edge).
    Returns K, V of shape (B, N_i, N_j, D) where row j of node i is z_j + v_ij W.
    """
    b, n, D = z.shape
    zj = ad.reshape(z, (b, 1, n, D))
    keys = ad.add(zj, ad.matmul(v_rel, params.w_k2))
    values = ad.add(zj, ad.matmul(v_rel, params.w_v2))
    return keys, values


def rme_block(z: Tensor, v_rel: Tensor, neighbor_mask: np.ndarray, params: RmeBlockParams) -> Tensor:
    """Post-norm residual MHA over relational neighbours, then post-norm residual FFN."""
    keys, values = rme_keys_values(z, v_rel, params)
    upd = mha(z, keys, values, params.mha, allowed=neighbor_mask)
    n = params.norm_attn(ad.add(z, upd))
    return params.norm_ffn(ad.add(n, params.ffn(n)))


def rme_forward(z: Tensor, v_rel: Tensor, neighbor_mask: np.ndarray, stack: RmeStack) -> Tensor:
    for block in stack.blocks:
        z = rme_block(z, v_rel, neighbor_mask, block)
    return z
