"""Salt-and-pepper denoising with median layers in a residual CNN."""

from .metrics import mse, psnr
from .median_ops import (MedianLayerSpec, GaussianKernelSpec, extract_patches,
                         median_layer_forward, median_layer_backward,
                         median_filter_2d, median_filter_1d, gaussian_filter,
                         repeated_median, alternate_filters_1d)
from .noise import NoiseSpec, apply_salt_pepper, noisy_psnr_reference, \
    build_training_set
from .tensor import Tape, Parameter, BatchNormState, finite_diff_grad
from .network import (NetworkConfig, Model, build_network, forward,
                      save_checkpoint, load_checkpoint, CheckpointError)
from .training import TrainConfig, Adam, SGD, PatchSet, train_step, train_loop
from .evaluation import EvalReport, evaluate_model, ablation_compare
from .estimators import (MedianFilterDenoiser, SaltPepperNoiser,
                         ResidualMedianDenoiser)

__version__ = "0.1.0"
