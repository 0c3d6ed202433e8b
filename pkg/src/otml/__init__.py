"""Optimal-transport self-supervised pretraining on a small numpy autodiff engine."""

from .augment import AugmentationSpec, augment
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, parse, render
from .cvsim import CvSimParams, cross_attend, make_marginals
from .estimator import OptimlPretrainer
from .exceptions import *  # noqa: F401,F403
from .model import EncoderConfig, ExpanderConfig, LossWeights, OptimlModel, OTConfig
from .pgm import load_pgm, save_pgm
from .phantoms import PhantomSample, gen_phantom_dataset
from .probe import LinearProbe, ProbeResult, compute_auc, linear_probe
from .regularizers import covariance_term, variance_term
from .simplex import exact_ot_oracle
from .tensor import Tensor, backward, no_grad
from .trainer import MetricsRow, TrainState, collapse_report, pretrain, train_step
from .transport import TransportPlan, TransportProblem, build_cost, build_discrepancy, sinkhorn

__version__ = "0.1.0"
