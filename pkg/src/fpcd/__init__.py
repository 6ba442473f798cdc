"""Frequency-domain knowledge distillation for video classifiers on numpy."""

from ._kernels import get_backend, set_backend
from .collab import DistillSchedule, build_confidence_profile, gate, schedule_weight, total_loss
from .data import DatasetConfig, VideoClip, generate_clip, generate_dataset, load_dataset, make_arrays
from .losses import ConfigurationError, Predictor, kl_divergence, parameter_distribution, pdd_loss, spectrum_loss
from .models import BackboneConfig, StagedBackbone, build_student, build_teacher, forward_with_stages
from .spectral import FeatureSpectrum, band_split, magnitude_spectrum, naive_dft, temporal_dft
from .tensor import NonFiniteError, Tensor, no_grad
from .train import RunConfig, distill, evaluate, train_baseline, train_teacher

__version__ = "0.1.0"
