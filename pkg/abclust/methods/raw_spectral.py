from abclust.common_registries import CommonRegistries as CR
from abclust.core import KernelMethod
from abclust.datasets import Instance
from abclust.registry import Registries
from abclust.spectral import KernelMatrix, gaussian_kernel


class GaussianKernelMethod(KernelMethod):
    """Out of the box spectral clustering on exp(-gamma |x_i - x_j|^2)"""
    key = "spectral"

    def get_logger_name(self):
        return "Spectral"

    def kernel(self, inst: Instance) -> KernelMatrix:
        return gaussian_kernel(inst.x, self.env.gamma)


KEY = GaussianKernelMethod.key


def setup(registries: Registries):
    registries.register_to(CR.METHOD, KEY, GaussianKernelMethod())
