from abclust.common_registries import CommonRegistries as CR
from abclust.methods.abc_model import CheckpointMethod
from abclust.model import SimilarityMatrix, pairwise_forward
from abclust.registry import Registries
from abclust.tensor import Tensor


class PairwiseMethod(CheckpointMethod):
    """Similarity of projected points only, the embedding blocks are skipped"""
    key = "pairwise"

    def get_logger_name(self):
        return "Pairwise"

    def predict(self, x: Tensor) -> SimilarityMatrix:
        return pairwise_forward(x, self.params)


KEY = PairwiseMethod.key


def setup(registries: Registries):
    registries.register_to(CR.METHOD, KEY, PairwiseMethod())
