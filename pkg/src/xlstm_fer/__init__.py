"""xLSTM-FER: patch-token xLSTM classifier for facial expression images, on a numpy autodiff core."""
from .mlstm import GateConfig, MLstmParams, MLstmState, forward_chunkwise, forward_parallel, forward_recurrent
from .model import PRESETS, ModelConfig, XLSTMFER, aggregate, cross_entropy, model_forward, preset
from .paths import ScanDirection, merge_paths, scan_order
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
