"""Scaled dot-product attention, multi-head attention, position-wise FFN."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .nn import Linear, Module, project, xavier_uniform

MASK_LOGIT = -1e30


def _attend(q, k, v, allowed, decay, scale):
    """q (..., H, 1, c), k/v (..., H, N, c); allowed/decay broadcast against (..., 1, 1, N)."""
    logits = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / scale)
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if not np.all(allowed.any(axis=-1)):
            raise ContractError("attention row with every key disallowed")
        logits = ad.add(logits, Tensor(np.where(allowed, 0.0, MASK_LOGIT)))
    alpha = ad.softmax(logits, axis=-1)
    if decay is not None:
        alpha = ad.mul(alpha, decay)
    return ad.matmul(alpha, v), alpha


def dot_attention(Q: Tensor, K: Tensor, V: Tensor, allowed=None, decay: Tensor | None = None):
    """Single-head attention of a query row over N key/value rows.

    Shapes: Q (..., D), K (..., N, D), V (..., N, Dv); ``allowed`` (..., N) booleans;
    ``decay`` (..., N) weights multiplied into alpha after the softmax, without
    renormalizing. Returns ``(out (..., Dv), alpha (..., N))``.
    """
    Q, K, V = ad.constant(Q), ad.constant(K), ad.constant(V)
    if K.shape[-1] != Q.shape[-1] or K.shape[:-1] != V.shape[:-1]:
        raise ad.ShapeError(f"attention shapes disagree: Q {Q.shape}, K {K.shape}, V {V.shape}")
    lead = Q.shape[:-1]
    q = ad.reshape(Q, lead + (1, Q.shape[-1]))
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)[..., None, :]
    if decay is not None:
        decay = ad.reshape(ad.constant(decay), decay.shape[:-1] + (1, decay.shape[-1]))
    out, alpha = _attend(q, K, V, allowed, decay, math.sqrt(Q.shape[-1]))
    return ad.reshape(out, lead + (V.shape[-1],)), ad.reshape(alpha, lead + (K.shape[-2],))


class MhaParams(Module):
    """Per-head projections stored side by side as D x D matrices (head h owns columns h*c:(h+1)*c)."""

    def __init__(self, rng, D: int, heads: int):
        if D % heads:
            raise ValueError(f"D={D} is not divisible by {heads} heads")
        self.heads = heads
        self.w_q = xavier_uniform(rng, D, D)
        self.w_k = xavier_uniform(rng, D, D)
        self.w_v = xavier_uniform(rng, D, D)
        self.w_o = xavier_uniform(rng, D, D)


def mha(Q: Tensor, K: Tensor, V: Tensor, params: MhaParams, allowed=None, decay: Tensor | None = None,
        return_alpha: bool = False):
    """[head_1, ..., head_k] W_O with per-head logits scaled by sqrt(D/k).

    Q (..., D), K and V (..., N, D). Returns (..., D), plus alpha (..., k, N) on request.
    """
    D = Q.shape[-1]
    H = params.heads
    c = D // H
    N = K.shape[-2]
    lead = Q.shape[:-1]
    q = ad.reshape(project(Q, params.w_q), lead + (H, 1, c))
    k = ad.swapaxes(ad.reshape(project(K, params.w_k), K.shape[:-1] + (H, c)), -3, -2)
    v = ad.swapaxes(ad.reshape(project(V, params.w_v), V.shape[:-1] + (H, c)), -3, -2)
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)[..., None, None, :]
    if decay is not None:
        decay = ad.reshape(decay, decay.shape[:-1] + (1, 1, N))
    heads, alpha = _attend(q, k, v, allowed, decay, math.sqrt(c))
    out = project(ad.reshape(heads, lead + (D,)), params.w_o)
    if return_alpha:
        return out, ad.reshape(alpha, lead + (H, N))
    return out


class PositionWiseFFN(Module):
    """One hidden layer with shifted softplus, applied to every node with shared weights."""

    def __init__(self, rng, D: int, hidden: int | None = None):
        hidden = hidden or 2 * D
        self.inner = Linear(rng, D, hidden)
        self.outer = Linear(rng, hidden, D)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ad.shifted_softplus(self.inner(x)))


def position_wise_ffn(x: Tensor, params: PositionWiseFFN) -> Tensor:
    return params(x)
