"""Few-shot promptable segmentation with LoRA-adapted mask decoding, box
prompting from a detector, Hadamard-product mask calibration and bi-level
prompt/weight training."""

from .decoder import DecoderOutput, MaskDecoder, calibrate, combine, predict_orig
from .model import AMSAM, ModelConfig
from .tensor import Tensor, backward, no_grad
from .trainer import SplitDataset, TrainConfig, Trainer, evaluate, split_dataset, train

__version__ = "0.1.0"
