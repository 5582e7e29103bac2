"""
The ABC map: an embedding stack of SABs, a symmetrised sigmoid kernel over
the embedded elements and the mean BCE training loss, plus the pairwise
ablation which skips the embedding stack entirely.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Iterator, Literal, TypeAlias

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, ValidationError,
                      model_validator)

from abclust.__version__ import __version__
from abclust.attention import (AdditiveCompat, CompatKind, CompatSpec, MabParams,
                               MultiplicativeCompat, init_compat_weight, sab)
from abclust.common_registries import CommonRegistries as CR
from abclust.registry import REGISTRIES_CONTEXT_KEY, Registries
from abclust.regunion import RegistryUnion
from abclust.tensor import (Tensor, add, binary_cross_entropy, elementwise, glorot, matmul,
                            scale, transpose, zeros)
from abclust.utils import ConfigurationError, DataError, ShapeError, write_atomic

CompatUnion: TypeAlias = Annotated[CompatSpec, RegistryUnion(CR.COMPAT),
                                   Field(title="Compat")]

Variant = Literal["abc-mul", "abc-add", "pairwise"]
VARIANTS: tuple[Variant, ...] = ("abc-mul", "abc-add", "pairwise")
INIT_SCORE_BOUND = 0.25


class AbcConfig(BaseModel):
    """Architecture of an ABC model"""
    model_config = ConfigDict(use_attribute_docstrings=True, frozen=True, extra="forbid")

    input_dim: int = Field(2, ge=1)
    """Features per input element"""
    latent_dim: int = Field(32, ge=1)
    """Width of the embedding. Must be divisible by `heads`"""
    sab_count: int = Field(2, ge=0)
    """Number of stacked SABs, 0 selects the pairwise ablation"""
    heads: int = Field(4, ge=1)
    compat_embed: CompatUnion = MultiplicativeCompat()
    """Compatibility used inside every attention head of the embedding"""
    compat_sim: CompatUnion = MultiplicativeCompat()
    """Compatibility of the similarity kernel"""
    input_affine: bool = True
    """Project inputs to `latent_dim` before the first SAB"""
    ff_hidden_factor: int = Field(2, ge=1)
    """Hidden width of the block feed-forward, in multiples of `latent_dim`"""

    @model_validator(mode="after")
    def check_dims(self) -> "AbcConfig":
        if self.latent_dim % self.heads:
            raise ValueError(f"latent_dim {self.latent_dim} is not divisible by heads {self.heads}")
        if not self.input_affine and self.input_dim != self.latent_dim:
            raise ValueError("input_dim must equal latent_dim when input_affine is disabled")
        return self

    @property
    def is_pairwise(self) -> bool:
        return self.sab_count == 0

    def with_variant(self, variant: Variant) -> "AbcConfig":
        """Derives the configuration of a named ablation variant"""
        if variant == "abc-mul":
            c = MultiplicativeCompat()
            return self.model_copy(update={"compat_embed": c, "compat_sim": c,
                                           "sab_count": self.sab_count or 2})
        if variant == "abc-add":
            c = AdditiveCompat()
            return self.model_copy(update={"compat_embed": c, "compat_sim": c,
                                           "sab_count": self.sab_count or 2})
        if variant == "pairwise":
            return self.model_copy(update={"sab_count": 0})
        raise ConfigurationError(f"Unknown variant {variant!r}, expected one of {VARIANTS}")


class ArrayRecord(BaseModel):
    shape: tuple[int, int]
    data: list[float]

    @staticmethod
    def of(arr: np.ndarray) -> "ArrayRecord":
        return ArrayRecord(shape=(arr.shape[0], arr.shape[1]), data=arr.reshape(-1).tolist())

    def to_array(self) -> np.ndarray:
        rows, cols = self.shape
        if len(self.data) != rows * cols:
            raise DataError(f"Array of shape {self.shape} holds {len(self.data)} values")
        return np.array(self.data, dtype=np.float64).reshape(rows, cols)


class TrainState(BaseModel):
    """Optimizer progress stored next to the weights so training can resume"""
    step: int
    adam_t: int
    adam_m: dict[str, ArrayRecord]
    adam_v: dict[str, ArrayRecord]
    loss_trace: list[float] = []


class Checkpoint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: str = __version__
    config: AbcConfig
    arrays: dict[str, ArrayRecord]
    train: TrainState | None = None


@dataclass
class ModelParams:
    config: AbcConfig
    input_w: Tensor | None
    input_b: Tensor | None
    blocks: list[MabParams]
    sim_w: Tensor | None

    @staticmethod
    def init(config: AbcConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        d_z = config.latent_dim
        input_w = input_b = None
        if config.input_affine:
            input_w = glorot(rng, config.input_dim, d_z)
            input_b = zeros(1, d_z)
        blocks = [MabParams.init(d_z, config.heads, config.compat_embed, rng,
                                 config.ff_hidden_factor)
                  for _ in range(config.sab_count)]
        sim_w = init_compat_weight(config.compat_sim, d_z, rng)
        if blocks:
            # last layer norm leaves rows of norm gain * sqrt(d), scores start within INIT_SCORE_BOUND
            gain = np.sqrt(INIT_SCORE_BOUND) * d_z ** -0.25
            blocks[-1].ln2_gain.data[...] = gain
            if sim_w is not None:
                bound = config.compat_sim.score_bound(gain * np.sqrt(d_z), d_z, sim_w)
                if bound > INIT_SCORE_BOUND:
                    sim_w.data *= INIT_SCORE_BOUND / bound
        return ModelParams(config, input_w, input_b, blocks, sim_w)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        """All learnable tensors in a fixed order"""
        if self.input_w is not None and self.input_b is not None:
            yield "input.w", self.input_w
            yield "input.b", self.input_b
        for i, block in enumerate(self.blocks):
            yield from block.named(f"blocks.{i}")
        if self.sim_w is not None:
            yield "sim.w", self.sim_w

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    @property
    def sim_compat(self) -> CompatKind:
        return CompatKind(self.config.compat_sim, self.sim_w)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    def to_checkpoint(self, train: TrainState | None = None) -> Checkpoint:
        return Checkpoint(config=self.config,
                          arrays={name: ArrayRecord.of(t.data) for name, t in self.named()},
                          train=train)

    def save(self, path: Path, train: TrainState | None = None):
        data = self.to_checkpoint(train).model_dump(mode="json")
        write_atomic(path, json.dumps(data))

    @staticmethod
    def from_checkpoint(ckpt: Checkpoint) -> "ModelParams":
        params = ModelParams.init(ckpt.config, 0)
        expected = dict(params.named())
        missing = sorted(set(expected) - set(ckpt.arrays))
        extra = sorted(set(ckpt.arrays) - set(expected))
        if missing or extra:
            raise DataError(f"Checkpoint arrays do not match config: missing {missing}, unexpected {extra}")
        for name, t in expected.items():
            arr = ckpt.arrays[name].to_array()
            if arr.shape != t.shape:
                raise ShapeError(f"Checkpoint array {name!r} has shape {arr.shape}, expected {t.shape}")
            t.data[...] = arr
        return params

    @staticmethod
    def load(path: Path, registries: Registries | None = None
             ) -> "tuple[ModelParams, TrainState | None]":
        if not path.is_file():
            raise DataError(f"Checkpoint {path} does not exist")
        try:
            raw: dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"Checkpoint {path} is not valid JSON: {e}") from e
        context = {REGISTRIES_CONTEXT_KEY: registries} if registries else None
        try:
            ckpt = Checkpoint.model_validate(raw, context=context)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid checkpoint {path}:\n{e}") from e
        return ModelParams.from_checkpoint(ckpt), ckpt.train


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric n x n matrix with entries in (0, 1)"""
    tensor: Tensor

    @property
    def n(self) -> int:
        return self.tensor.rows

    def numpy(self) -> np.ndarray:
        return self.tensor.data


def _check_input(x: Tensor, p: ModelParams):
    if x.rows == 0:
        raise DataError("Cannot embed an empty set")
    if x.cols != p.config.input_dim:
        raise ShapeError(f"Input has {x.cols} features, model expects {p.config.input_dim}")


def project(x: Tensor, p: ModelParams) -> Tensor:
    _check_input(x, p)
    if p.input_w is None or p.input_b is None:
        return x
    return add(matmul(x, p.input_w), p.input_b)


def embed(x: Tensor, p: ModelParams) -> Tensor:
    z = project(x, p)
    for block in p.blocks:
        z = sab(z, block)
    return z


def similarity(z: Tensor, sim: CompatKind) -> SimilarityMatrix:
    if z.rows == 0:
        raise DataError("Similarity of an empty set")
    s = elementwise(sim.spec.scores(z, z, sim.w), "sigmoid", clamp=True)
    return SimilarityMatrix(scale(add(s, transpose(s)), 0.5))


def abc_forward(x: Tensor, p: ModelParams) -> SimilarityMatrix:
    return similarity(embed(x, p), p.sim_compat)


def pairwise_forward(x: Tensor, p: ModelParams) -> SimilarityMatrix:
    """Similarity of the projected inputs, no context mixing"""
    return similarity(project(x, p), p.sim_compat)


def check_ground_truth(g: np.ndarray, n: int | None = None):
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise DataError(f"Ground truth must be square, got shape {g.shape}")
    if n is not None and g.shape[0] != n:
        raise ShapeError(f"Ground truth is {g.shape[0]}x{g.shape[0]}, similarity is {n}x{n}")
    if not np.isin(g, (0.0, 1.0)).all():
        raise DataError("Ground truth kernel must be binary")
    if not np.array_equal(g, g.T):
        raise DataError("Ground truth kernel must be symmetric")
    if not (np.diag(g) == 1.0).all():
        raise DataError("Ground truth kernel must have a unit diagonal")


def bce_loss(s: SimilarityMatrix, g: np.ndarray) -> Tensor:
    g = np.asarray(g, dtype=np.float64)
    check_ground_truth(g, s.n)
    return binary_cross_entropy(s.tensor, g)
