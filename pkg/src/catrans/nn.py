"""Parameter containers, attention, multi-head attention and the transformer block."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Holds parameters and child modules as attributes; iteration follows definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(shape, rng: np.random.Generator | None, dtype, std: float = 0.0, fill: float = 0.0) -> Tensor:
    if rng is None or std == 0.0:
        data = np.full(shape, fill, dtype=dtype)
    else:
        data = rng.normal(0.0, std, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, bias: bool = True):
        self.weight = param((cin, cout), rng, dtype, std=1.0 / math.sqrt(cin))
        self.bias = param((cout,), None, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, c: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = param((c,), None, dtype, fill=1.0)
        self.beta = param((c,), None, dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class ChannelNorm(Module):
    """Per-sample channel normalisation with a learned affine; stands in for frozen BatchNorm."""

    def __init__(self, c: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = param((c,), None, dtype, fill=1.0)
        self.beta = param((c,), None, dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.channel_norm(x, self.gamma, self.beta, self.eps)


class Conv3x3(Module):
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, stride: int = 1, bias: bool = True):
        self.weight = param((3, 3, cin, cout), rng, dtype, std=math.sqrt(2.0 / (9 * cin)))
        # a conv feeding a norm gets a fixed zero bias: the norm's shift makes it redundant
        self.bias = param((cout,), None, dtype) if bias else Tensor(np.zeros(cout, dtype=dtype))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_3x3(x, self.weight, self.bias, self.stride)


class ConvBlock(Module):
    """conv3x3 -> channel norm -> ReLU."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, stride: int = 1):
        self.conv = Conv3x3(cin, cout, rng, dtype, stride, bias=False)
        self.norm = ChannelNorm(cout, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


INITS = ("random", "identity")


class AttentionParams(Module):
    """Query/key projections to a shared width ``d`` and an optional value projection.

    ``d`` defaults to the key input width. With ``init="identity"`` every
    square projection starts as the identity, so the first logits are plain
    feature similarities and values pass through unchanged.
    """

    def __init__(self, c_q: int, c_k: int, c_v: int, rng, dtype=np.float32, heads: int = 1,
                 d: int | None = None, d_v: int | None = None, value_proj: bool = True,
                 init: str = "random"):
        if init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {init!r}")
        d = c_k if d is None else d
        d_v = c_v if d_v is None else d_v
        if heads < 1 or d % heads:
            raise ValueError(f"projection width {d} is not divisible by {heads} heads")
        if value_proj and d_v % heads:
            raise ValueError(f"value width {d_v} is not divisible by {heads} heads")
        if not value_proj and c_v % heads:
            raise ValueError(f"value width {c_v} is not divisible by {heads} heads")
        self.w_q = _projection(c_q, d, rng, dtype, init)
        self.w_k = _projection(c_k, d, rng, dtype, init)
        self.w_v = _projection(c_v, d_v, rng, dtype, init) if value_proj else None
        self.heads = heads
        self.d = d

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1] if self.w_v is not None else None


def _projection(cin: int, cout: int, rng, dtype, init: str) -> Tensor:
    if init == "identity" and cin == cout:
        return Tensor(np.eye(cin, dtype=dtype), requires_grad=True)
    return param((cin, cout), rng, dtype, std=1.0 / math.sqrt(cin))


def _scaled_attention(q: Tensor, k: Tensor, v: Tensor, d: int) -> Tensor:
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    return T.matmul(T.softmax_rows(logits), v)


def attention(q_tokens: Tensor, k_tokens: Tensor, v_tokens: Tensor, p: AttentionParams) -> Tensor:
    """Single-head scaled dot-product attention with projections."""
    if k_tokens.shape[0] != v_tokens.shape[0]:
        raise ShapeError(f"attention: {k_tokens.shape[0]} keys but {v_tokens.shape[0]} values")
    if k_tokens.shape[0] < 1:
        raise ShapeError("attention needs at least one key")
    q = T.matmul(q_tokens, p.w_q)
    k = T.matmul(k_tokens, p.w_k)
    v = v_tokens if p.w_v is None else T.matmul(v_tokens, p.w_v)
    return _scaled_attention(q, k, v, p.d)


def mha(q_tokens: Tensor, k_tokens: Tensor, v_tokens: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head attention: channel groups attend independently, outputs are concatenated.

    Each head scales its logits by the square root of its own group width.
    """
    if p.heads == 1:
        return attention(q_tokens, k_tokens, v_tokens, p)
    if k_tokens.shape[0] != v_tokens.shape[0]:
        raise ShapeError(f"mha: {k_tokens.shape[0]} keys but {v_tokens.shape[0]} values")
    h = p.heads
    q = T.matmul(q_tokens, p.w_q)
    k = T.matmul(k_tokens, p.w_k)
    v = v_tokens if p.w_v is None else T.matmul(v_tokens, p.w_v)
    if q.shape[1] % h or v.shape[1] % h:
        raise ValueError(f"widths {q.shape[1]}/{v.shape[1]} not divisible by {h} heads")
    dq, dv = q.shape[1] // h, v.shape[1] // h
    outs = []
    for m in range(h):
        outs.append(_scaled_attention(
            T.take_channels(q, m * dq, (m + 1) * dq),
            T.take_channels(k, m * dq, (m + 1) * dq),
            T.take_channels(v, m * dv, (m + 1) * dv),
            dq,
        ))
    return T.concat_channels(outs)


class MLP(Module):
    """Two layers with a ReLU in between; hidden width is ``expansion`` times the input."""

    def __init__(self, width: int, rng, dtype=np.float32, expansion: int = 2):
        self.fc1 = Linear(width, expansion * width, rng, dtype)
        self.fc2 = Linear(expansion * width, width, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))

    def set_identity(self) -> None:
        """relu(x) - relu(-x) = x: the MLP starts as the identity map."""
        c = self.fc1.weight.shape[0]
        if self.fc1.weight.shape[1] != 2 * c:
            raise ValueError("identity start needs a hidden width of exactly twice the input")
        eye = np.eye(c, dtype=self.fc1.weight.dtype)
        self.fc1.weight.data[...] = np.concatenate([eye, -eye], axis=1)
        self.fc2.weight.data[...] = np.concatenate([eye, -eye], axis=0)
        self.fc1.bias.data[...] = 0.0
        self.fc2.bias.data[...] = 0.0


class TransformerBlock(Module):
    """MLP(LN(MHA(q, k, v))), plus q when its width equals the output width.

    ``residual`` may be forced off. ``inner`` (passed at call time) is added
    to the attention output before the norm. ``ln_eps`` sets the floor of the
    norm's variance; a large value keeps the magnitude of low-variance rows
    instead of stretching them to unit scale.
    """

    def __init__(self, c_q: int, c_k: int, c_v: int, rng, dtype=np.float32, heads: int = 1,
                 d: int | None = None, residual: bool = True, init: str = "random", ln_eps: float = 1e-5):
        self.attn = AttentionParams(c_q, c_k, c_v, rng, dtype, heads=heads, d=d, init=init)
        width = self.attn.d_v
        self.norm = LayerNorm(width, dtype, eps=ln_eps)
        self.mlp = MLP(width, rng, dtype)
        self.residual = residual and c_q == width
        if self.residual:
            # block starts as the identity on its query input
            self.mlp.fc2.weight.data[...] = 0.0
        elif init == "identity":
            self.mlp.set_identity()

    @property
    def width(self) -> int:
        return self.attn.d_v

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, inner: Tensor | None = None) -> Tensor:
        a = mha(q, k, v, self.attn)
        if inner is not None:
            a = T.add(a, inner)
        y = self.mlp(self.norm(a))
        return T.add(y, q) if self.residual else y


def transformer_block(q: Tensor, k: Tensor, v: Tensor, p: TransformerBlockParams) -> Tensor:
    return p(q, k, v)


TransformerBlockParams = TransformerBlock
