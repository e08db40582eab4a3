"""Positional encoding and the fixed-architecture coordinate MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class PosEncConfig:
    levels: int = 10
    include_input: bool = True

    def out_dim(self, in_dim):
        return in_dim * (int(self.include_input) + 2 * self.levels)


def posenc(p, cfg: PosEncConfig):
    """``[p, sin(2^k pi p), cos(2^k pi p)]`` for ``k < levels`` along the last axis.

    Works on arrays and on :class:`~invrender.nnet.autodiff.Tensor`.
    """
    parts = [p] if cfg.include_input else []
    for k in range(cfg.levels):
        arg = ad.mul(p, (2.0 ** k) * np.pi)
        parts.append(ad.sin(arg))
        parts.append(ad.cos(arg))
    if not parts:
        shape = np.shape(ad.value(p))[:-1] + (0,)
        return np.zeros(shape, dtype=ad.value(p).dtype)
    if len(parts) == 1:
        return parts[0]
    return ad.concat(parts, axis=-1)


@dataclass(frozen=True)
class MlpConfig:
    in_dim: int
    out_dim: int
    width: int = 128
    depth: int = 4
    # index of the hidden layer whose input is [previous hidden, encoded input]
    skip_layer: int | None = 1
    out_act: str = "identity"

    def layer_shapes(self):
        shapes = []
        for i in range(self.depth):
            fan_in = self.in_dim if i == 0 else self.width
            if i == self.skip_layer and i > 0:
                fan_in += self.in_dim
            shapes.append((fan_in, self.width))
        shapes.append((self.width if self.depth else self.in_dim, self.out_dim))
        return shapes


def init_mlp(cfg: MlpConfig, rng: np.random.Generator, prefix="", dtype=np.float32):
    """Fan-in scaled uniform init; returns a flat ``{name: array}`` dict."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(cfg.layer_shapes()):
        bound = np.sqrt(6.0 / fan_in) if i < cfg.depth else np.sqrt(1.0 / fan_in)
        params[f"{prefix}w{i}"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
        params[f"{prefix}b{i}"] = np.zeros(fan_out, dtype=dtype)
    return params


def mlp_forward(params, cfg: MlpConfig, inputs, prefix=""):
    """Run the MLP on ``inputs``.

    ``inputs`` is one array/tensor or a list of pieces whose last axes
    concatenate to ``cfg.in_dim``; pieces may broadcast against each other
    (e.g. per-point ``(B, 1, d)`` with per-light ``(1, K, e)``).
    """
    pieces = list(inputs) if isinstance(inputs, (list, tuple)) else [inputs]
    width_in = sum(np.shape(ad.value(x))[-1] for x in pieces)
    if width_in != cfg.in_dim:
        raise ValueError(f"mlp_forward: expected input width {cfg.in_dim}, got {width_in}")
    h = pieces
    for i in range(cfg.depth):
        layer_in = h if i == 0 else ([h] + pieces if i == cfg.skip_layer else [h])
        h = ad.dense(layer_in, params[f"{prefix}w{i}"], params[f"{prefix}b{i}"], "relu")
    last = [h] if cfg.depth else pieces
    return ad.dense(last, params[f"{prefix}w{cfg.depth}"], params[f"{prefix}b{cfg.depth}"], cfg.out_act)
