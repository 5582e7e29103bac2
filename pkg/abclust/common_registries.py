from functools import cache

from abclust.registry import Registries


class CommonRegistries:
    COMPAT = "compat"
    METHOD = "method"

    class Dynamics:
        SUITE = "dynamics/suite"


@cache
def root_registry() -> Registries:
    """Registries shared by the whole application, filled on first use"""
    from abclust import dynamics
    from abclust.attention import AdditiveCompat, CompatSpec, MultiplicativeCompat
    from abclust.core import KernelMethod
    from abclust.methods import abc_model, pairwise, raw_spectral

    root = Registries()
    compats = root.create_model_registry(CommonRegistries.COMPAT, CompatSpec)
    compats.register_models(MultiplicativeCompat, AdditiveCompat)

    root.create_registry(CommonRegistries.METHOD, KernelMethod)
    for m in (abc_model, pairwise, raw_spectral):
        m.setup(root)

    root.create_registry(CommonRegistries.Dynamics.SUITE, dynamics.CheckSuite)
    dynamics.setup(root)
    return root
