"""
Compatibility functions, scaled attention, multi-head attention and the
Multi-head / Self Attention Blocks composed post-norm:

    H   = LayerNorm(Q + MHA(Q, K, V))
    MAB = LayerNorm(H + FF(H))
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterator, Literal

import numpy as np
from pydantic import ConfigDict

from abclust.registry import TypedModel
from abclust.tensor import (Tensor, activation, add, concat_cols, elementwise, glorot, layer_norm,
                            matmul, ones, pairwise_additive, row_softmax, scale,
                            transpose, zeros)
from abclust.utils import ConfigurationError, DataError, ShapeError

FF_HIDDEN_FACTOR = 2


class CompatSpec(ABC, TypedModel):
    """Configuration of a compatibility function. Learned weights live in the params."""
    model_config = ConfigDict(use_attribute_docstrings=True, frozen=True, extra="forbid")

    def weight_cols(self, dim: int) -> int | None:
        """Width of the learned vector this compat needs for `dim`-wide inputs."""
        return None

    @abstractmethod
    def scores(self, q: Tensor, k: Tensor, w: Tensor | None) -> Tensor:
        ...

    @abstractmethod
    def score_bound(self, row_norm: float, dim: int, w: Tensor | None) -> float:
        """Largest |score| between rows whose norms are at most `row_norm`."""
        ...


class MultiplicativeCompat(CompatSpec):
    """Scaled dot product q.k / sqrt(d)"""
    type: Literal["multiplicative"] = "multiplicative"

    def scores(self, q: Tensor, k: Tensor, w: Tensor | None) -> Tensor:
        if q.cols != k.cols:
            raise ShapeError(f"multiplicative compat: query dim {q.cols} != key dim {k.cols}")
        return scale(matmul(q, transpose(k)), 1.0 / np.sqrt(q.cols))

    def score_bound(self, row_norm: float, dim: int, w: Tensor | None) -> float:
        return row_norm * row_norm / np.sqrt(dim)


class AdditiveCompat(CompatSpec):
    """act(q + k) . w with a learned vector w"""
    type: Literal["additive"] = "additive"
    act: Literal["tanh", "sigmoid", "relu"] = "tanh"
    """Element wise activation applied to q + k"""

    def weight_cols(self, dim: int) -> int | None:
        return dim

    def scores(self, q: Tensor, k: Tensor, w: Tensor | None) -> Tensor:
        if w is None:
            raise ConfigurationError("additive compat requires a weight vector")
        return pairwise_additive(q, k, w, self.act)

    def score_bound(self, row_norm: float, dim: int, w: Tensor | None) -> float:
        if w is None:
            raise ConfigurationError("additive compat requires a weight vector")
        # every act is at most 1-Lipschitz, so |act(q + k)| <= |act(0)| sqrt(d) + 2 row_norm
        at_zero = abs(float(activation(self.act)[0](np.zeros(1))[0]))
        return float(np.linalg.norm(w.data)) * (at_zero * np.sqrt(dim) + 2.0 * row_norm)


@dataclass(frozen=True)
class CompatKind:
    spec: CompatSpec
    w: Tensor | None = None

    def __post_init__(self):
        needs = self.spec.weight_cols(self.w.cols if self.w is not None else 0) is not None
        if needs and self.w is None:
            raise ConfigurationError(f"{self.spec.get_type()} compat requires a weight vector")
        if not needs and self.w is not None:
            raise ConfigurationError(f"{self.spec.get_type()} compat carries no parameters")
        if self.w is not None and self.w.rows != 1:
            raise ShapeError(f"compat weight must be a row vector, got {self.w.shape}")


def init_compat_weight(spec: CompatSpec, dim: int, rng: np.random.Generator) -> Tensor | None:
    cols = spec.weight_cols(dim)
    if cols is None:
        return None
    return glorot(rng, 1, cols, fan_in=cols, fan_out=1)


def compat(q_rows: Tensor, k_rows: Tensor, c: CompatKind) -> Tensor:
    return c.spec.scores(q_rows, k_rows, c.w)


def attention_weights(q: Tensor, k: Tensor, c: CompatKind) -> Tensor:
    if k.rows == 0:
        raise DataError("attention over an empty set")
    return row_softmax(compat(q, k, c))


def attention(q: Tensor, k: Tensor, v: Tensor, c: CompatKind) -> Tensor:
    if k.rows != v.rows:
        raise ShapeError(f"attention: keys {k.shape} and values {v.shape} differ in rows")
    return matmul(attention_weights(q, k, c), v)


@dataclass
class MhaParams:
    heads: int
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor
    compat: CompatSpec
    compat_w: list[Tensor]

    def __post_init__(self):
        d = self.wo.cols
        if self.heads < 1 or d % self.heads:
            raise ConfigurationError(f"model width {d} is not divisible by {self.heads} heads")
        dh = d // self.heads
        for name in ("wq", "wk", "wv"):
            mats = getattr(self, name)
            if len(mats) != self.heads or any(m.shape != (d, dh) for m in mats):
                raise ShapeError(f"{name} must hold {self.heads} matrices of shape {(d, dh)}")
        if self.wo.shape != (self.heads * dh, d):
            raise ShapeError(f"wo must be {(self.heads * dh, d)}, got {self.wo.shape}")
        expected = 0 if self.compat.weight_cols(dh) is None else self.heads
        if len(self.compat_w) != expected:
            raise ShapeError(f"{self.compat.get_type()} compat needs {expected} head weight vectors")

    @property
    def dim(self) -> int:
        return self.wo.cols

    @staticmethod
    def init(dim: int, heads: int, spec: CompatSpec, rng: np.random.Generator) -> "MhaParams":
        if heads < 1 or dim % heads:
            raise ConfigurationError(f"model width {dim} is not divisible by {heads} heads")
        dh = dim // heads
        wq = [glorot(rng, dim, dh) for _ in range(heads)]
        wk = [glorot(rng, dim, dh) for _ in range(heads)]
        wv = [glorot(rng, dim, dh) for _ in range(heads)]
        wo = glorot(rng, heads * dh, dim)
        ws = [init_compat_weight(spec, dh, rng) for _ in range(heads)]
        return MhaParams(heads, wq, wk, wv, wo, spec, [w for w in ws if w is not None])

    def head_compat(self, i: int) -> CompatKind:
        return CompatKind(self.compat, self.compat_w[i] if self.compat_w else None)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i in range(self.heads):
            yield f"{prefix}.wq.{i}", self.wq[i]
            yield f"{prefix}.wk.{i}", self.wk[i]
            yield f"{prefix}.wv.{i}", self.wv[i]
        yield f"{prefix}.wo", self.wo
        for i, w in enumerate(self.compat_w):
            yield f"{prefix}.compat_w.{i}", w


@dataclass
class MabParams:
    mha: MhaParams
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def __post_init__(self):
        d = self.mha.dim
        hidden = self.ff_w1.cols
        if self.ff_w1.rows != d or self.ff_w2.shape != (hidden, d):
            raise ShapeError(f"feed-forward must map {d} -> {hidden} -> {d}")
        if self.ff_b1.shape != (1, hidden) or self.ff_b2.shape != (1, d):
            raise ShapeError("feed-forward biases do not match layer widths")

    @staticmethod
    def init(dim: int, heads: int, spec: CompatSpec, rng: np.random.Generator,
             hidden_factor: int = FF_HIDDEN_FACTOR) -> "MabParams":
        hidden = hidden_factor * dim
        return MabParams(
            mha=MhaParams.init(dim, heads, spec, rng),
            ff_w1=glorot(rng, dim, hidden), ff_b1=zeros(1, hidden),
            ff_w2=glorot(rng, hidden, dim), ff_b2=zeros(1, dim),
            ln1_gain=ones(1, dim), ln1_bias=zeros(1, dim),
            ln2_gain=ones(1, dim), ln2_bias=zeros(1, dim),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.mha.named(f"{prefix}.mha")
        for name in ("ff_w1", "ff_b1", "ff_w2", "ff_b2",
                     "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            yield f"{prefix}.{name}", getattr(self, name)


def mha(q: Tensor, k: Tensor, v: Tensor, p: MhaParams) -> Tensor:
    for name, t in (("queries", q), ("keys", k), ("values", v)):
        if t.cols != p.dim:
            raise ShapeError(f"mha: {name} have {t.cols} features, params expect {p.dim}")
    heads = [
        attention(matmul(q, p.wq[i]), matmul(k, p.wk[i]), matmul(v, p.wv[i]), p.head_compat(i))
        for i in range(p.heads)
    ]
    return matmul(concat_cols(heads), p.wo)


def feed_forward(h: Tensor, p: MabParams) -> Tensor:
    hidden = elementwise(add(matmul(h, p.ff_w1), p.ff_b1), "relu")
    return add(matmul(hidden, p.ff_w2), p.ff_b2)


def mab(q: Tensor, k: Tensor, v: Tensor, p: MabParams) -> Tensor:
    h = layer_norm(add(q, mha(q, k, v, p.mha)), p.ln1_gain, p.ln1_bias)
    return layer_norm(add(h, feed_forward(h, p)), p.ln2_gain, p.ln2_bias)


def sab(x: Tensor, p: MabParams) -> Tensor:
    return mab(x, x, x, p)
