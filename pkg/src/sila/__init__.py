"""Siamese-label auxiliary learning on a small numpy autodiff core."""

from .autodiff import Tape, Tensor, backward, zero_grads
from .data_io import BlobSpec, Dataset, generate_blobs, load_mnist_idx
from .losses import (
    combined_loss,
    cross_entropy,
    dml_kl_loss,
    group_loss,
    loss_diagnostics,
    make_siamese,
    sila_loss,
)
from .models import (
    MultiExitSpec,
    NetworkSpec,
    ParameterSet,
    build_network,
    forward,
    forward_multi_exit,
    penultimate_features,
    perturb_parameters,
)
from .training import TrainConfig, TrainReport, lr_at, sgd_step, train_multi_exit, train_pair

__version__ = "0.1.0"
