"""
Network building blocks with hand-written forward and backward passes.

Parameters live in a flat ``{name: ndarray}`` mapping shared by the model, the
optimizer and the model file. Each layer's ``forward`` returns its output and a
cache; ``backward`` consumes the cache, accumulates parameter gradients into a
mapping of the same layout and returns the gradient with respect to its input.
Feature maps are NCHW inside the convolutional network.
"""

import math
from typing import Dict, MutableMapping, Tuple

import numpy as np

from .errors import ConfigError

Params = MutableMapping[str, np.ndarray]

GROUPNORM_EPS = 1e-5


def zeros_like_params(params: Params) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in params.items()}


def silu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, x


def silu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-x))
    return dy * (sig + x * sig * (1.0 - sig))


def avg_pool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(dy: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * 0.25


def upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos features of the timestep (no parameters)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        self.weight = f"{name}.weight"
        self.bias = f"{name}.bias"

    def init(self, params: Params, gen: np.random.Generator, gain: float = 1.0) -> None:
        std = gain / math.sqrt(self.d_in)
        params[self.weight] = gen.normal(0.0, std, size=(self.d_in, self.d_out))
        params[self.bias] = np.zeros(self.d_out)

    def forward(self, params: Params, x: np.ndarray):
        return x @ params[self.weight] + params[self.bias], x

    def backward(self, params: Params, x: np.ndarray, dy: np.ndarray, grads: Params):
        grads[self.weight] += x.T @ dy
        grads[self.bias] += dy.sum(axis=0)
        return dy @ params[self.weight].T


class Conv2d:
    """Stride-1 convolution with zero 'same' padding, kernel 1 or 3."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int = 3):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.weight = f"{name}.weight"
        self.bias = f"{name}.bias"

    def init(self, params: Params, gen: np.random.Generator, gain: float = 1.0) -> None:
        fan_in = self.c_in * self.kernel * self.kernel
        params[self.weight] = gen.normal(
            0.0, gain / math.sqrt(fan_in), size=(self.c_out, self.c_in, self.kernel, self.kernel)
        )
        params[self.bias] = np.zeros(self.c_out)

    def forward(self, params: Params, x: np.ndarray):
        n, _, h, w = x.shape
        pad = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        weight = params[self.weight]
        out = np.zeros((n, self.c_out, h, w))
        for i in range(self.kernel):
            for j in range(self.kernel):
                patch = xp[:, :, i : i + h, j : j + w]
                out += np.einsum("nchw,oc->nohw", patch, weight[:, :, i, j], optimize=True)
        out += params[self.bias][None, :, None, None]
        return out, xp

    def backward(self, params: Params, xp: np.ndarray, dy: np.ndarray, grads: Params):
        _, _, h, w = dy.shape
        pad = self.kernel // 2
        weight = params[self.weight]
        dweight = grads[self.weight]
        dxp = np.zeros_like(xp)
        for i in range(self.kernel):
            for j in range(self.kernel):
                patch = xp[:, :, i : i + h, j : j + w]
                dweight[:, :, i, j] += np.einsum("nohw,nchw->oc", dy, patch, optimize=True)
                dxp[:, :, i : i + h, j : j + w] += np.einsum(
                    "nohw,oc->nchw", dy, weight[:, :, i, j], optimize=True
                )
        grads[self.bias] += dy.sum(axis=(0, 2, 3))
        return dxp[:, :, pad : pad + h, pad : pad + w]


class GroupNorm:
    def __init__(self, name: str, channels: int, groups: int):
        if groups < 1 or channels % groups:
            raise ConfigError(
                f"model.groups: {name} has {channels} channels, not divisible by {groups} groups"
            )
        self.name = name
        self.channels = channels
        self.groups = groups
        self.gamma = f"{name}.gamma"
        self.beta = f"{name}.beta"

    def init(self, params: Params, gen: np.random.Generator) -> None:
        params[self.gamma] = np.ones(self.channels)
        params[self.beta] = np.zeros(self.channels)

    def forward(self, params: Params, x: np.ndarray):
        n, c, h, w = x.shape
        xg = x.reshape(n, self.groups, c // self.groups, h, w)
        mean = xg.mean(axis=(2, 3, 4), keepdims=True)
        var = xg.var(axis=(2, 3, 4), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + GROUPNORM_EPS)
        xhat = ((xg - mean) * inv_std).reshape(n, c, h, w)
        y = xhat * params[self.gamma][None, :, None, None] + params[self.beta][None, :, None, None]
        return y, (xhat, inv_std)

    def backward(self, params: Params, cache, dy: np.ndarray, grads: Params):
        xhat, inv_std = cache
        n, c, h, w = dy.shape
        grads[self.gamma] += (dy * xhat).sum(axis=(0, 2, 3))
        grads[self.beta] += dy.sum(axis=(0, 2, 3))

        group_shape = (n, self.groups, c // self.groups, h, w)
        dxhat = (dy * params[self.gamma][None, :, None, None]).reshape(group_shape)
        xhat_g = xhat.reshape(group_shape)
        count = group_shape[2] * h * w
        axes = (2, 3, 4)
        dx = (inv_std / count) * (
            count * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat_g * (dxhat * xhat_g).sum(axis=axes, keepdims=True)
        )
        return dx.reshape(n, c, h, w)


def film(h: np.ndarray, modulation: np.ndarray):
    """Feature-wise affine modulation ``h * (1 + scale) + shift``.

    ``modulation`` is (N, 2C) for NCHW or (N, 2D) for flat features.
    """
    channels = h.shape[1]
    scale, shift = modulation[:, :channels], modulation[:, channels:]
    if h.ndim == 4:
        scale = scale[:, :, None, None]
        shift = shift[:, :, None, None]
    return h * (1.0 + scale) + shift, (h, scale)


def film_backward(dy: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray]:
    h, scale = cache
    dh = dy * (1.0 + scale)
    if dy.ndim == 4:
        dscale = (dy * h).sum(axis=(2, 3))
        dshift = dy.sum(axis=(2, 3))
    else:
        dscale = dy * h
        dshift = dy
    return dh, np.concatenate([dscale, dshift], axis=1)


class ResBlock:
    """GroupNorm -> SiLU -> conv -> GroupNorm -> FiLM(emb) -> SiLU -> conv, plus skip."""

    def __init__(self, name: str, c_in: int, c_out: int, emb_dim: int, groups: int):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.norm1 = GroupNorm(f"{name}.norm1", c_in, groups)
        self.conv1 = Conv2d(f"{name}.conv1", c_in, c_out)
        self.norm2 = GroupNorm(f"{name}.norm2", c_out, groups)
        self.emb_proj = Linear(f"{name}.emb_proj", emb_dim, 2 * c_out)
        self.conv2 = Conv2d(f"{name}.conv2", c_out, c_out)
        self.skip = None if c_in == c_out else Conv2d(f"{name}.skip", c_in, c_out, kernel=1)

    def init(self, params: Params, gen: np.random.Generator) -> None:
        self.norm1.init(params, gen)
        self.conv1.init(params, gen)
        self.norm2.init(params, gen)
        self.emb_proj.init(params, gen, gain=0.1)
        self.conv2.init(params, gen, gain=0.5)
        if self.skip is not None:
            self.skip.init(params, gen)

    def forward(self, params: Params, x: np.ndarray, emb: np.ndarray):
        h, c_norm1 = self.norm1.forward(params, x)
        h, c_act1 = silu(h)
        h, c_conv1 = self.conv1.forward(params, h)
        h, c_norm2 = self.norm2.forward(params, h)
        modulation, c_emb = self.emb_proj.forward(params, emb)
        h, c_film = film(h, modulation)
        h, c_act2 = silu(h)
        h, c_conv2 = self.conv2.forward(params, h)
        if self.skip is None:
            skip, c_skip = x, None
        else:
            skip, c_skip = self.skip.forward(params, x)
        cache = (c_norm1, c_act1, c_conv1, c_norm2, c_emb, c_film, c_act2, c_conv2, c_skip)
        return skip + h, cache

    def backward(self, params: Params, cache, dy: np.ndarray, grads: Params):
        c_norm1, c_act1, c_conv1, c_norm2, c_emb, c_film, c_act2, c_conv2, c_skip = cache
        dh = self.conv2.backward(params, c_conv2, dy, grads)
        dh = silu_backward(dh, c_act2)
        dh, dmodulation = film_backward(dh, c_film)
        demb = self.emb_proj.backward(params, c_emb, dmodulation, grads)
        dh = self.norm2.backward(params, c_norm2, dh, grads)
        dh = self.conv1.backward(params, c_conv1, dh, grads)
        dh = silu_backward(dh, c_act1)
        dx = self.norm1.backward(params, c_norm1, dh, grads)
        if self.skip is None:
            dx = dx + dy
        else:
            dx = dx + self.skip.backward(params, c_skip, dy, grads)
        return dx, demb
