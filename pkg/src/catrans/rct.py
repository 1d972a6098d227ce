"""Context branch: self-context of support and query, then support-to-query cross-context."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, TransformerBlock
from .tensor import ShapeError, Tensor

RCT_VARIANTS = ("full", "no_support_self")


@dataclass
class ContextMaps:
    c_ss: Tensor
    c_qq: Tensor
    c_sq: Tensor
    level: int


class RCT(Module):
    """Context transformer for one pyramid level.

    Support tokens of width ``c_feat`` with mask tokens of width ``c_mask``;
    the output has ``c_mask`` channels per query position.

    Mask features mark the foreground mostly by magnitude (background rows
    are near zero), so the support self-context norm uses a large variance
    floor ``mask_ln_eps`` rather than rescaling every row to unit spread.
    """

    def __init__(self, c_feat: int, c_mask: int, rng, dtype=np.float32, heads: int = 1,
                 variant: str = "full", init: str = "identity", mask_ln_eps: float = 10.0,
                 ln_eps: float = 1e-5):
        if variant not in RCT_VARIANTS:
            raise ValueError(f"unknown RCT variant {variant!r}")
        self.variant = variant
        if variant == "full":
            # Q=K=F_s, V=F_m: output width c_mask, so no residual
            self.support_self = TransformerBlock(c_feat, c_feat, c_mask, rng, dtype, heads=heads, init=init,
                                                 ln_eps=mask_ln_eps)
        else:
            self.mask_proj = Linear(c_mask, c_mask, rng, dtype)
            if init == "identity":
                self.mask_proj.weight.data[...] = np.eye(c_mask)
        self.query_self = TransformerBlock(c_feat, c_feat, c_feat, rng, dtype, heads=heads, init=init,
                                           ln_eps=ln_eps)
        self.cross = TransformerBlock(c_feat, c_feat, c_mask, rng, dtype, heads=heads, init=init, ln_eps=ln_eps)

    def self_context_support(self, f_s: Tensor, f_m: Tensor) -> Tensor:
        if f_s.shape[0] != f_m.shape[0]:
            raise ShapeError(f"support has {f_s.shape[0]} tokens but mask has {f_m.shape[0]}")
        if self.variant == "full":
            return self.support_self(f_s, f_s, f_m)
        return self.mask_proj(f_m)

    def self_context_query(self, f_q: Tensor) -> Tensor:
        return self.query_self(f_q, f_q, f_q)

    def cross_context(self, c_qq: Tensor, f_s: Tensor, c_ss: Tensor) -> Tensor:
        # keys are the raw support features; values are the support self-context
        if f_s.shape[0] != c_ss.shape[0]:
            raise ShapeError(f"{f_s.shape[0]} support keys but {c_ss.shape[0]} context values")
        return self.cross(c_qq, f_s, c_ss)

    def maps(self, f_s: Tensor, f_q: Tensor, f_m: Tensor, level: int = 0) -> ContextMaps:
        """Token-level pass. ``f_s``/``f_m`` may hold several shots stacked on the token axis."""
        c_ss = self.self_context_support(f_s, f_m)
        c_qq = self.self_context_query(f_q)
        return ContextMaps(c_ss, c_qq, self.cross_context(c_qq, f_s, c_ss), level)

    def __call__(self, f_s_maps: list[Tensor], f_q_map: Tensor, f_m_maps: list[Tensor]) -> Tensor:
        """Spatial maps in, H_l x W_l x c_mask context out. Lists hold one entry per shot."""
        h, w, _ = f_q_map.shape
        for fs, fm in zip(f_s_maps, f_m_maps):
            if fs.shape[:2] != (h, w) or fm.shape[:2] != (h, w):
                raise ShapeError(f"level maps disagree: {fs.shape}, {fm.shape}, {f_q_map.shape}")
        f_s = T.concat_tokens([T.flatten_tokens(x) for x in f_s_maps]) if len(f_s_maps) > 1 \
            else T.flatten_tokens(f_s_maps[0])
        f_m = T.concat_tokens([T.flatten_tokens(x) for x in f_m_maps]) if len(f_m_maps) > 1 \
            else T.flatten_tokens(f_m_maps[0])
        c = self.maps(f_s, T.flatten_tokens(f_q_map), f_m)
        return T.unflatten_tokens(c.c_sq, h, w)


def rct_forward(f_s: Tensor, f_q: Tensor, f_m: Tensor, params: RCT) -> Tensor:
    return params([f_s], f_q, [f_m])
