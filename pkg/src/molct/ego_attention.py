"""Ego-Attention many-body operator and the continuous-filter convolution baseline."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import MhaParams, PositionWiseFFN, mha
from .autodiff import Tensor
from .featurize import EdgeFeatures
from .nn import MLP, LayerNorm, Linear, Module, param, xavier_uniform, zeros


class EaParams(Module):
    def __init__(self, rng, D: int, d: int, heads: int, use_ffn: bool = False, ffn_hidden: int | None = None):
        self.w_p = xavier_uniform(rng, d, D)
        self.b_p = zeros(D)
        # stands in for e_ii, shared by every reference node
        self.self_edge = param(rng.uniform(0.0, 1.0, size=d))
        self.mha = MhaParams(rng, D, heads)
        self.norm = LayerNorm(D)
        self.use_ffn = use_ffn
        if use_ffn:
            self.ffn = PositionWiseFFN(rng, D, ffn_hidden)
            self.norm_ffn = LayerNorm(D)


def positional_embed(positional: Tensor, params: EaParams) -> Tensor:
    """P[b, i, j] = e_ij W_P + b_P, with e_ii replaced by the learned self-edge vector."""
    n = positional.shape[-2]
    eye = np.eye(n, dtype=bool)[None, :, :, None]
    e = ad.where(eye, params.self_edge, positional)
    return ad.add(ad.matmul(e, params.w_p), params.b_p)


def ego_attention_update(n: Tensor, feats: EdgeFeatures, params: EaParams, return_alpha: bool = False):
    """One synchronous Ego-Attention update of every node.

    Node i position-embeds all nodes relative to itself (n_j * P_ji), layer-normalizes,
    queries with its own embedded vector and attends over all particles, attention
    damped by the cutoff weight. Returns n + MHA(...) of shape (B, N, D).
    """
    b, N, D = n.shape
    P = positional_embed(feats.positional, params)
    emb = ad.mul(ad.reshape(n, (b, 1, N, D)), P)
    normed = params.norm(emb)
    ar = np.arange(N)
    query = ad.take(normed, (slice(None), ar, ar))
    upd, alpha = mha(query, normed, normed, params.mha, decay=feats.cutoff, return_alpha=True)
    out = ad.add(n, upd)
    return (out, alpha) if return_alpha else out


def ea_block(n: Tensor, feats: EdgeFeatures, params: EaParams, return_alpha: bool = False):
    out, alpha = ego_attention_update(n, feats, params, return_alpha=True)
    if params.use_ffn:
        out = ad.add(out, params.ffn(params.norm_ffn(out)))
    return (out, alpha) if return_alpha else out


class CfcParams(Module):
    """SchNet-style interaction: filter network on edge features, elementwise product, neighbour sum."""

    def __init__(self, rng, D: int, d: int, filters: int | None = None, ffn_hidden: int | None = None):
        F = filters or D
        self.filter_net = MLP(rng, [d, F, F])
        self.w_in = xavier_uniform(rng, D, F)
        self.out = Linear(rng, F, D)
        self.ffn = PositionWiseFFN(rng, D, ffn_hidden)


def cfc_block(n: Tensor, feats: EdgeFeatures, params: CfcParams, return_alpha: bool = False):
    b, N, D = n.shape
    x = ad.matmul(n, params.w_in)
    F = x.shape[-1]
    w = params.filter_net(feats.positional)
    offdiag = (~np.eye(N, dtype=bool)).astype(np.float64)
    weight = ad.mul(feats.cutoff, Tensor(offdiag))
    w = ad.mul(w, ad.reshape(weight, (b, N, N, 1)))
    conv = ad.tsum(ad.mul(w, ad.reshape(x, (b, 1, N, F))), axis=2)
    out = ad.add(n, params.out(conv))
    out = ad.add(out, params.ffn(out))
    return (out, None) if return_alpha else out
