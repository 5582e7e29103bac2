import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import tqdm

from abclust import utils
from abclust.core import KernelMethod
from abclust.datasets import Instance
from abclust.spectral import (ClusterResult, KernelMatrix, ari, laplacian_spectrum,
                              nmi, num_clusters, spectral_cluster)
from abclust.utils import ConfigurationError

KMode = Literal["auto", "true"] | int


def parse_k_mode(value: str) -> KMode:
    if value in ("auto", "true"):
        return value  # type: ignore[return-value]
    try:
        k = int(value)
    except ValueError:
        raise ConfigurationError(f"k must be 'auto', 'true' or a positive integer, got {value!r}") from None
    if k < 1:
        raise ConfigurationError(f"k must be positive, got {k}")
    return k


def instance_seed(seed: int, instance_id: int) -> int:
    return int(np.random.SeedSequence([seed, instance_id]).generate_state(1)[0])


@dataclass
class InstanceOutcome:
    instance_id: int
    result: ClusterResult
    k_true: int
    ari: float
    nmi: float
    kernel: KernelMatrix | None = None


@dataclass
class PipelineReport:
    outcomes: list[InstanceOutcome] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)

    @property
    def mean_ari(self) -> float:
        return float(np.mean([o.ari for o in self.outcomes])) if self.outcomes else float("nan")

    @property
    def mean_nmi(self) -> float:
        return float(np.mean([o.nmi for o in self.outcomes])) if self.outcomes else float("nan")

    @property
    def stderr_ari(self) -> float:
        if len(self.outcomes) < 2:
            return 0.0
        values = np.array([o.ari for o in self.outcomes])
        return float(values.std(ddof=1) / np.sqrt(values.size))


class ClusterPipeline:
    """Clusters instances with one kernel method and one way of picking k"""

    def __init__(self, method: KernelMethod, k_mode: KMode, seed: int, logger: logging.Logger,
                 k_max: int | None = None, literal_eigengap: bool = False,
                 debug: bool = False, progress: bool = True, keep_kernels: bool = False) -> None:
        self.method = method
        self.k_mode = k_mode
        self.seed = seed
        self.logger = logger
        self.k_max = k_max
        self.literal_eigengap = literal_eigengap
        self.debug = debug
        self.progress = progress
        self.keep_kernels = keep_kernels

    def choose_k(self, kernel: KernelMatrix, inst: Instance, spectrum) -> tuple[int, str]:
        if self.k_mode == "auto":
            return num_clusters(kernel, self.k_max, self.literal_eigengap, spectrum), "eigengap"
        if self.k_mode == "true":
            return inst.k_true, "given"
        return int(self.k_mode), "given"

    def cluster(self, inst: Instance) -> InstanceOutcome:
        kernel = self.method.kernel(inst)
        spectrum = laplacian_spectrum(kernel)
        k, source = self.choose_k(kernel, inst, spectrum)
        result = spectral_cluster(kernel, k, instance_seed(self.seed, inst.instance_id),
                                  source, spectrum)  # type: ignore[arg-type]
        if result.degenerate:
            self.logger.warning(f"⚠ Instance {inst.instance_id}: fewer distinct embeddings than k={k}")
        return InstanceOutcome(inst.instance_id, result, inst.k_true,
                               ari(inst.labels, result.labels), nmi(inst.labels, result.labels),
                               kernel if self.keep_kernels else None)

    def run(self, instances: Sequence[Instance]) -> PipelineReport:
        report = PipelineReport()
        if not instances:
            return report
        self.logger.info(f"🔄 Clustering {len(instances)} instance(s) with {self.method.key!r}, k={self.k_mode}")
        for inst in tqdm.tqdm(instances, desc=self.method.key, unit="inst", disable=not self.progress):
            try:
                report.outcomes.append(self.cluster(inst))
            except utils.FriendlyException as e:
                if self.debug:
                    self.logger.error(f"Exception clustering instance {inst.instance_id}: {e}", exc_info=e)
                else:
                    self.logger.error(f"Exception clustering instance {inst.instance_id}: {e}")
                report.failed.append(inst.instance_id)
        if report.failed:
            self.logger.warning(f"⚠ {len(report.failed)} of {len(instances)} instance(s) failed")
        if report.outcomes:
            self.logger.info(f"✅ {self.method.key}: mean ARI {report.mean_ari:.4f}, "
                             f"mean NMI {report.mean_nmi:.4f} over {len(report.outcomes)} instance(s)")
        return report
