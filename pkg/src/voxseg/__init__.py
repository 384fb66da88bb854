"""voxseg: a volumetric multi-task segmentation engine on numpy.

Layers: a reverse-mode autodiff tape (`autodiff`), 3D network primitives
(`ops`), the U-Net-style shared-encoder multi-decoder network (`network`),
segmentation losses (`losses`), Adam (`optim`), volume I/O and synthetic
phantom data (`volume`, `preprocess`, `phantom`, `dataset`), evaluation
(`metrics`, `plots`), and the training/inference drivers behind the
command-line tool (`config`, `train`, `inference`, `checks`, `cli`).
"""

from .autodiff import GradMap, Graph, Parameter, Tensor, gradcheck
from .config import TrainConfig, load_config, preset
from .dataset import Sample, plan_folds
from .errors import (ConfigError, GraphError, HeaderError, IntegrityError,
                     NumericError, ShapeError)
from .inference import predict_volume
from .losses import LossConfig, bootstrap_ce_loss, dice_loss
from .metrics import compute_tkv, dice_score, mape, tkv_percent_error
from .network import (MultiTaskNet, TaskSpec, build_multitask_net,
                      load_checkpoint, save_checkpoint)
from .optim import Adam, train_step
from .phantom import PhantomSpec, generate_phantom_pair
from .train import run_training
from .volume import Volume, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ConfigError",
    "GradMap",
    "Graph",
    "GraphError",
    "HeaderError",
    "IntegrityError",
    "LossConfig",
    "MultiTaskNet",
    "NumericError",
    "Parameter",
    "PhantomSpec",
    "Sample",
    "ShapeError",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "Volume",
    "bootstrap_ce_loss",
    "build_multitask_net",
    "compute_tkv",
    "dice_loss",
    "dice_score",
    "generate_phantom_pair",
    "gradcheck",
    "load_checkpoint",
    "load_config",
    "mape",
    "plan_folds",
    "predict_volume",
    "preset",
    "read_volume",
    "run_training",
    "save_checkpoint",
    "tkv_percent_error",
    "train_step",
    "write_volume",
    "__version__",
]
