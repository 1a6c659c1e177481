"""Covariance-aware diffusion sampling with frequency-domain Hutchinson estimates."""

from .denoiser import GaussianMixtureModel, GaussianModel, GuidedDenoiser, MlpDenoiser, StationaryGaussianModel
from .samplers import SamplerSpec, make_plan, run_sampler
from .schedule import Cosine, LinearLogsnr, NoiseInfo, ShiftedCosine, make_schedule
from .transforms import BlockDCT, ConvDCT, Haar, Identity, LeGall53, make_transform
from .tweedie import CovEstimatorConfig, frequency_hutchinson, noise_scale_factor

__version__ = "0.1.0"
