"""Mean-kurtosis estimation from diffusion MRI via the sub-diffusion model."""

__version__ = "0.1.0"

from .mlf import mittag_leffler, mittag_leffler_grad  # noqa: E402,F401
from .model import (  # noqa: E402,F401
    AcquisitionScheme,
    DkiParams,
    PulseSettings,
    SubDiffusionParams,
    connectome_scheme,
    diffusivity_star,
    forward_dki,
    forward_subdiffusion,
    kurtosis_from_beta,
)
from .fitting import FitOptions, VoxelSeries, fit_dki, fit_subdiffusion  # noqa: E402,F401
