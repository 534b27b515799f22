"""Multi-head attention and the query network shared by both samplers.

The network is a small pre-norm transformer: learnable query rows are
mixed with the text rows by self-attention, read the visual rows by
cross-attention, and pass through a GELU MLP, with residual connections
around each block.  The temporal selector and the spatial sampler use
this same architecture with separate parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int, w_out: Tensor | None = None
) -> Tensor:
    """Scaled dot-product attention over ``heads`` column blocks.

    Per-head scale is 1/sqrt(d/heads); head outputs are concatenated and,
    when ``w_out`` is given, linearly mixed by it.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention expects 2-d q, k, v")
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d or k.shape[0] != v.shape[0]:
        raise DimensionError(
            f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    if heads < 1 or d % heads != 0:
        raise ConfigError(f"attention: dim {d} not divisible by heads {heads}")
    dh = d // heads
    inv = 1.0 / np.sqrt(dh)
    outputs = []
    for h in range(heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
        kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
        weights = ad.softmax_rows(ad.scale(qh @ ad.transpose(kh), inv))
        outputs.append(weights @ vh)
    mixed = ad.concat_cols(outputs)
    if w_out is not None:
        mixed = mixed @ w_out
    return mixed


def sinusoidal_positions(n: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Classic sin/cos position table, rows 0..n-1."""
    pos = np.arange(n, dtype=dtype)[:, None]
    idx = np.arange(dim, dtype=dtype)[None, :]
    angle = pos / np.power(10000.0, 2 * (idx // 2) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


@dataclass
class LayerParams:
    """One pre-norm block: self-attention, cross-attention, MLP."""

    ln1_gain: Tensor
    ln1_bias: Tensor
    wq_self: Tensor
    wk_self: Tensor
    wv_self: Tensor
    wo_self: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    wq_cross: Tensor
    wk_cross: Tensor
    wv_cross: Tensor
    wo_cross: Tensor
    ln3_gain: Tensor
    ln3_bias: Tensor
    w_up: Tensor
    b_up: Tensor
    w_down: Tensor
    b_down: Tensor


class AttentionStack:
    """Parameters plus forward pass of the query network."""

    def __init__(self, layers: list[LayerParams], heads: int, dim: int):
        if not layers:
            raise ConfigError("AttentionStack needs at least one layer")
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.layers = layers
        self.heads = heads
        self.dim = dim

    @classmethod
    def create(cls, rng: np.random.Generator, layers: int, heads: int, dim: int) -> "AttentionStack":
        """Random initialization: N(0, 1/sqrt(fan_in)) projections, identity norms."""

        def w(rows, cols):
            return Tensor(rng.standard_normal((rows, cols)) / np.sqrt(rows), requires_grad=True)

        built = []
        for _ in range(layers):
            built.append(
                LayerParams(
                    ln1_gain=Tensor(np.ones(dim), requires_grad=True),
                    ln1_bias=Tensor(np.zeros(dim), requires_grad=True),
                    wq_self=w(dim, dim),
                    wk_self=w(dim, dim),
                    wv_self=w(dim, dim),
                    wo_self=w(dim, dim),
                    ln2_gain=Tensor(np.ones(dim), requires_grad=True),
                    ln2_bias=Tensor(np.zeros(dim), requires_grad=True),
                    wq_cross=w(dim, dim),
                    wk_cross=w(dim, dim),
                    wv_cross=w(dim, dim),
                    wo_cross=w(dim, dim),
                    ln3_gain=Tensor(np.ones(dim), requires_grad=True),
                    ln3_bias=Tensor(np.zeros(dim), requires_grad=True),
                    w_up=w(dim, 4 * dim),
                    b_up=Tensor(np.zeros(4 * dim), requires_grad=True),
                    w_down=w(4 * dim, dim),
                    b_down=Tensor(np.zeros(dim), requires_grad=True),
                )
            )
        return cls(built, heads, dim)

    @classmethod
    def zeros(cls, layers: int, heads: int, dim: int) -> "AttentionStack":
        """All projection weights zero; the stack becomes the identity map."""
        rng = np.random.default_rng(0)
        stack = cls.create(rng, layers, heads, dim)
        for layer in stack.layers:
            for f in fields(LayerParams):
                if f.name.startswith(("wq", "wk", "wv", "wo", "w_")):
                    setattr(layer, f.name, Tensor(np.zeros(getattr(layer, f.name).shape), requires_grad=True))
        return stack

    def parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, layer in enumerate(self.layers):
            for f in fields(LayerParams):
                named[f"layer{i}.{f.name}"] = getattr(layer, f.name)
        return named

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Replace parameter tensors with fresh leaves holding ``state``."""
        for i, layer in enumerate(self.layers):
            for f in fields(LayerParams):
                key = f"layer{i}.{f.name}"
                current = getattr(layer, f.name)
                if state[key].shape != current.shape:
                    raise DimensionError(
                        f"{key}: expected shape {current.shape}, got {state[key].shape}"
                    )
                setattr(layer, f.name, Tensor(state[key], requires_grad=True))

    def forward(self, queries: Tensor, text: Tensor, kv: Tensor) -> Tensor:
        """Run the query rows through every block; returns updated query rows."""
        for t in (queries, text, kv):
            if t.ndim != 2 or t.shape[1] != self.dim:
                raise ConfigError(
                    f"AttentionStack(dim={self.dim}) got input of shape {t.shape}"
                )
        n_q = queries.shape[0]
        x = queries
        for layer in self.layers:
            joint = ad.concat_rows([x, text])
            normed = ad.layernorm(joint, layer.ln1_gain, layer.ln1_bias)
            attended = multi_head_attention(
                normed @ layer.wq_self,
                normed @ layer.wk_self,
                normed @ layer.wv_self,
                self.heads,
                layer.wo_self,
            )
            x = x + ad.slice_rows(attended, 0, n_q)

            normed = ad.layernorm(x, layer.ln2_gain, layer.ln2_bias)
            attended = multi_head_attention(
                normed @ layer.wq_cross,
                kv @ layer.wk_cross,
                kv @ layer.wv_cross,
                self.heads,
                layer.wo_cross,
            )
            x = x + attended

            normed = ad.layernorm(x, layer.ln3_gain, layer.ln3_bias)
            hidden = ad.gelu(ad.add_bias(normed @ layer.w_up, layer.b_up))
            x = x + ad.add_bias(hidden @ layer.w_down, layer.b_down)
        return x
