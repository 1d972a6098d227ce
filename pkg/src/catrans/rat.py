"""Affinity branch: self-affinities, cross-affinity and their transformer fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, TransformerBlock, param
from .tensor import ShapeError, Tensor


@dataclass
class AffinityMaps:
    a_ss: Tensor
    a_qq: Tensor
    a_sq: Tensor
    a_out: Tensor
    level: int = 0


def _affinity(x_q: Tensor, x_k: Tensor, w_q: Tensor, w_k: Tensor, width: int) -> Tensor:
    logits = T.matmul(T.matmul(x_q, w_q), T.transpose(T.matmul(x_k, w_k)))
    return T.softmax_rows(T.scale(logits, 1.0 / math.sqrt(width)))


def support_self_affinity(f_s: Tensor, f_m: Tensor, w_q: Tensor, w_k: Tensor) -> Tensor:
    if f_s.shape[0] != f_m.shape[0]:
        raise ShapeError(f"support has {f_s.shape[0]} tokens but mask has {f_m.shape[0]}")
    x = T.concat_channels([f_m, f_s])
    return _affinity(x, x, w_q, w_k, x.shape[1])


def query_self_affinity(f_q: Tensor, w_q: Tensor, w_k: Tensor) -> Tensor:
    return _affinity(f_q, f_q, w_q, w_k, f_q.shape[1])


def cross_affinity(f_q: Tensor, f_s: Tensor, w_q: Tensor, w_k: Tensor) -> Tensor:
    """Row i: how query token i distributes over the support tokens."""
    if f_q.shape[0] != f_s.shape[0]:
        raise ShapeError(f"query has {f_q.shape[0]} tokens, support {f_s.shape[0]}; resolutions must match")
    return _affinity(f_q, f_s, w_q, w_k, f_q.shape[1])


def _qk_pair(c: int, rng, dtype, init: str):
    if init == "identity":
        return (Tensor(np.eye(c, dtype=dtype), requires_grad=True),
                Tensor(np.eye(c, dtype=dtype), requires_grad=True))
    return param((c, c), rng, dtype, std=1.0 / math.sqrt(c)), param((c, c), rng, dtype, std=1.0 / math.sqrt(c))


class RAT(Module):
    """Affinity transformer for one level with ``n_tokens`` positions per image.

    Each affinity owns a (W_q, W_k) pair with no value projection. With
    ``share_qk`` the query-self and cross affinities use one pair.

    Affinity rows are probability vectors with entries near 1/N, so their
    spread is tiny; the fusion norm uses a large variance floor ``ln_eps`` so
    it does not blow that spread up into unit-scale noise.
    """

    def __init__(self, c_feat: int, c_mask: int, n_tokens: int, rng, dtype=np.float32,
                 heads: int = 1, share_qk: bool = False, init: str = "identity", ln_eps: float = 1000.0):
        cs = c_feat + c_mask
        self.ss_q, self.ss_k = _qk_pair(cs, rng, dtype, init)
        self.qq_q, self.qq_k = _qk_pair(c_feat, rng, dtype, init)
        self.share_qk = share_qk
        if not share_qk:
            self.sq_q, self.sq_k = _qk_pair(c_feat, rng, dtype, init)
        # the query self-affinity enters before the norm, so the block has no outer residual
        self.fuse = TransformerBlock(n_tokens, n_tokens, n_tokens, rng, dtype, heads=heads, residual=False,
                                     init=init, ln_eps=ln_eps)
        self.n_tokens = n_tokens

    def _cross_weights(self):
        return (self.qq_q, self.qq_k) if self.share_qk else (self.sq_q, self.sq_k)

    def maps(self, f_s: Tensor, f_q: Tensor, f_m: Tensor, a_qq: Tensor | None = None,
             level: int = 0) -> AffinityMaps:
        n = f_q.shape[0]
        if n != self.n_tokens or f_s.shape[0] != n or f_m.shape[0] != n:
            raise ShapeError(
                f"RAT built for {self.n_tokens} tokens, got query {n}, support {f_s.shape[0]}, mask {f_m.shape[0]}"
            )
        a_ss = support_self_affinity(f_s, f_m, self.ss_q, self.ss_k)
        if a_qq is None:
            a_qq = query_self_affinity(f_q, self.qq_q, self.qq_k)
        a_sq = cross_affinity(f_q, f_s, *self._cross_weights())
        a_out = self.fuse(a_sq, a_ss, a_sq, inner=a_qq)
        return AffinityMaps(a_ss, a_qq, a_sq, a_out, level)

    def __call__(self, f_s_maps: list[Tensor], f_q_map: Tensor, f_m_maps: list[Tensor]) -> Tensor:
        """Per-shot affinity views averaged over shots; returns H_l x W_l x N."""
        h, w, _ = f_q_map.shape
        f_q = T.flatten_tokens(f_q_map)
        a_qq = query_self_affinity(f_q, self.qq_q, self.qq_k)
        views = []
        for fs, fm in zip(f_s_maps, f_m_maps):
            if fs.shape[:2] != (h, w) or fm.shape[:2] != (h, w):
                raise ShapeError(f"support/query resolutions differ: {fs.shape} vs {f_q_map.shape}")
            maps = self.maps(T.flatten_tokens(fs), f_q, T.flatten_tokens(fm), a_qq)
            views.append(maps.a_out)
        out = views[0]
        for v in views[1:]:
            out = T.add(out, v)
        if len(views) > 1:
            out = T.scale(out, 1.0 / len(views))
        return T.unflatten_tokens(out, h, w)


def rat_forward(f_s: Tensor, f_q: Tensor, f_m: Tensor, params: RAT) -> Tensor:
    return params([f_s], f_q, [f_m])
