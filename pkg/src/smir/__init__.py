"""Selective masking image reconstruction pretraining for segmentation."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, run_pretraining, validate_reconstruction
from .segmentation import SegReport, compare_runs, iou_report, jaccard_loss, lowest_k, train_downstream
from .unet import UNet, UNetConfig, build_unet, transfer_weights

__version__ = "0.1.0"
