"""Multi-class Gaussian-process classification with Polya-Gamma augmented one-vs-each likelihoods."""

__version__ = "0.1.0"

from .errors import OvePGError
from .inference import GibbsConfig, run_gibbs
from .kernels import KernelSpec, build_block_kernel
from .likelihoods import OveTransform, build_ove_transform, normalized_probs
from .metrics import auroc, calibration
from .polyagamma import sample_pg, sample_pg1

__all__ = [
    "OvePGError",
    "GibbsConfig",
    "run_gibbs",
    "KernelSpec",
    "build_block_kernel",
    "OveTransform",
    "build_ove_transform",
    "normalized_probs",
    "auroc",
    "calibration",
    "sample_pg",
    "sample_pg1",
]
