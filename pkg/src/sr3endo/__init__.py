"""Conditional diffusion super-resolution for endoscopy images, on a small numpy autodiff engine."""
from .tensor import Rng, Tensor, backward, get_dtype, no_grad, precision, set_precision
from .schedule import NoiseSchedule, make_cosine, make_linear, respace, sample_gamma
from .diffusion import forward_marginal, reverse_step, sample, training_loss
from .denoiser import Denoiser, DenoiserConfig, build
from .metrics import psnr, ssim

__version__ = "0.1.0"
