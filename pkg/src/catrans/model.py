"""Hierarchical fusion of context and affinity, the decoder, and the end-to-end model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import VARIANTS, ModelConfig
from .encoders import ImageEncoder, MaskEncoder
from .nn import Conv3x3, ConvBlock, Linear, Module
from .rat import RAT
from .rct import RCT
from .tensor import ShapeError, Tensor


@dataclass
class Prediction:
    logits: Tensor
    hard_mask: np.ndarray


def hard_mask(logits: np.ndarray) -> np.ndarray:
    # ties go to background
    return (logits[..., 1] > logits[..., 0]).astype(np.float32)


def fuse_level(context: Tensor, affinity_view: Tensor) -> Tensor:
    if context.shape[:2] != affinity_view.shape[:2]:
        raise ShapeError(f"fuse_level: context {context.shape} vs affinity {affinity_view.shape}")
    return T.concat_channels([context, affinity_view])


def level_tokens(cfg: ModelConfig, level: int) -> int:
    return (cfg.image_size // 2 ** level) ** 2


def fused_width(cfg: ModelConfig, level: int) -> int:
    return cfg.mask_channels[level - 1] + level_tokens(cfg, level)


class Decoder(Module):
    """Coarse-to-fine ladder: level 4 -> 3 -> 2 -> 1 -> full resolution, two logits per pixel."""

    def __init__(self, in4: int, in3: int, c2: int, c1: int, widths, rng, dtype=np.float32):
        d4, d3, d2, d1 = widths
        self.b4a = ConvBlock(in4, d4, rng, dtype)
        self.b4b = ConvBlock(d4, d4, rng, dtype)
        self.b3 = ConvBlock(d4 + in3, d3, rng, dtype)
        self.b2 = ConvBlock(d3 + c2, d2, rng, dtype)
        self.b1 = ConvBlock(d2 + c1, d1, rng, dtype)
        self.head = Conv3x3(d1, 2, rng, dtype)

    def __call__(self, x4: Tensor, x3: Tensor, f_q2: Tensor, f_q1: Tensor) -> Tensor:
        x = self.b4b(self.b4a(x4))
        x = self.b3(T.concat_channels([_up_to(x, x3), x3]))
        x = self.b2(T.concat_channels([_up_to(x, f_q2), f_q2]))
        x = self.b1(T.concat_channels([_up_to(x, f_q1), f_q1]))
        h, w, _ = f_q1.shape
        return self.head(T.bilinear_resize(x, 2 * h, 2 * w))


def _up_to(x: Tensor, ref: Tensor) -> Tensor:
    return T.bilinear_resize(x, ref.shape[0], ref.shape[1])


def decode(fused_l4: Tensor, fused_l3: Tensor, f_q2: Tensor, f_q1: Tensor, params: Decoder) -> Prediction:
    logits = params(fused_l4, fused_l3, f_q2, f_q1)
    return Prediction(logits, hard_mask(logits.data))


class CATrans(Module):
    """Encoders, per-level context/affinity branches, fusion and decoder.

    Levels not listed in ``cfg.levels`` feed the decoder with the raw query
    features of that level instead of a fused map.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        dt = cfg.dtype
        self.image_encoder = ImageEncoder(cfg.channels, rng, dt)
        self.mask_encoder = MaskEncoder(cfg.mask_channels, rng, dt)
        self.rct: dict[str, RCT] = {}
        self.rat: dict[str, RAT] = {}
        self.baseline: dict[str, Linear] = {}
        for l in cfg.levels:
            c, cm, n = cfg.channels[l - 1], cfg.mask_channels[l - 1], level_tokens(cfg, l)
            if cfg.variant == "baseline":
                self.baseline[str(l)] = Linear(2 * c + cm, cm + n, rng, dt)
            else:
                rct_variant = "no_support_self" if cfg.variant == "rct_nosupport" else "full"
                self.rct[str(l)] = RCT(c, cm, rng, dt, heads=cfg.heads, variant=rct_variant, init=cfg.init,
                                       mask_ln_eps=cfg.ln_eps_mask)
                self.rat[str(l)] = RAT(c, cm, n, rng, dt, heads=cfg.heads, share_qk=cfg.share_qk, init=cfg.init,
                                       ln_eps=cfg.ln_eps_affinity)
        in4 = fused_width(cfg, 4) if 4 in cfg.levels else cfg.channels[3]
        in3 = fused_width(cfg, 3) if 3 in cfg.levels else cfg.channels[2]
        self.decoder = Decoder(in4, in3, cfg.channels[1], cfg.channels[0], cfg.decoder_channels, rng, dt)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def _fused(self, level: int, f_s: list[Tensor], f_q: Tensor, f_m: list[Tensor]) -> Tensor:
        key = str(level)
        h, w, _ = f_q.shape
        if self.variant == "baseline":
            fs = _mean(f_s)
            fm = _mean(f_m)
            tokens = T.flatten_tokens(T.concat_channels([fs, f_q, fm]))
            return T.unflatten_tokens(self.baseline[key](tokens), h, w)
        cm = self.cfg.mask_channels[level - 1]
        n = h * w
        if self.variant == "rat_only":
            context = Tensor(np.zeros((h, w, cm), dtype=f_q.dtype))
        else:
            context = self.rct[key](f_s, f_q, f_m)
        if self.variant == "rct_only":
            affinity = Tensor(np.zeros((h, w, n), dtype=f_q.dtype))
        else:
            affinity = self.rat[key](f_s, f_q, f_m)
        return fuse_level(context, affinity)

    def forward(self, support_images, support_masks, query_image) -> Prediction:
        """Predict the query mask from the support set and the query image alone."""
        if len(support_images) != len(support_masks) or not support_images:
            raise ValueError("need matching, non-empty support images and masks")
        dt = self.cfg.dtype
        s = self.cfg.image_size
        q_img = Tensor(np.asarray(query_image, dtype=dt))
        if q_img.shape != (s, s, 3):
            raise ShapeError(f"query image {q_img.shape}, model expects {(s, s, 3)}")
        f_q = self.image_encoder(q_img)
        f_s = [self.image_encoder(Tensor(np.asarray(i, dtype=dt))) for i in support_images]
        f_m = [self.mask_encoder(np.asarray(m)) for m in support_masks]
        inputs = {}
        for l in (3, 4):
            if l in self.cfg.levels:
                inputs[l] = self._fused(l, [p[l - 1] for p in f_s], f_q[l - 1], [p[l - 1] for p in f_m])
            else:
                inputs[l] = f_q[l - 1]
        return decode(inputs[4], inputs[3], f_q[1], f_q[0], self.decoder)

    def predict(self, episode) -> Prediction:
        return self.forward(episode.support_images, episode.support_masks, episode.query_image)

    __call__ = predict


def _mean(xs: list[Tensor]) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    out = xs[0]
    for x in xs[1:]:
        out = T.add(out, x)
    return T.scale(out, 1.0 / len(xs))


def catrans_forward(episode, params: CATrans, variant: str | None = None) -> Prediction:
    if variant is not None and variant != params.variant:
        raise ValueError(f"model was built as {params.variant!r}, asked for {variant!r}")
    return params.predict(episode)


def episode_loss(model: CATrans, episode) -> tuple[Tensor, Prediction]:
    pred = model.predict(episode)
    loss = T.weighted_cross_entropy(pred.logits, episode.query_mask, model.cfg.w_bg, model.cfg.w_fg)
    return loss, pred


__all__ = ["CATrans", "Decoder", "Prediction", "VARIANTS", "catrans_forward", "decode", "episode_loss",
           "fuse_level", "fused_width", "hard_mask", "level_tokens"]
