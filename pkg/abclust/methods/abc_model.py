from abclust.common_registries import CommonRegistries as CR
from abclust.core import Environment, KernelMethod
from abclust.datasets import Instance
from abclust.model import ModelParams, SimilarityMatrix, abc_forward
from abclust.registry import Registries
from abclust.spectral import KernelMatrix
from abclust.tensor import Tensor
from abclust.utils import ConfigurationError, LateInit


class CheckpointMethod(KernelMethod):
    """Kernel predicted by a trained checkpoint"""
    params: LateInit[ModelParams] = LateInit()

    def setup(self, env: Environment):
        super().setup(env)
        if env.checkpoint is None:
            raise ConfigurationError(f"Method {self.key!r} needs a checkpoint")
        self.params, _ = ModelParams.load(env.checkpoint, env.registries)
        self.logger.debug(f"Loaded {env.checkpoint} ({len(self.params.parameters())} tensors)")

    def predict(self, x: Tensor) -> SimilarityMatrix:
        return abc_forward(x, self.params)

    def kernel(self, inst: Instance) -> KernelMatrix:
        return KernelMatrix(self.predict(Tensor(inst.x)).numpy())


class AbcMethod(CheckpointMethod):
    key = "abc"

    def get_logger_name(self):
        return "ABC"


KEY = AbcMethod.key


def setup(registries: Registries):
    registries.register_to(CR.METHOD, KEY, AbcMethod())
