"""Low-light image enhancement with Retinex preprocessing and spiral-scanned WKV attention."""
from .losses import LossWeights, ms2_loss, ms2_total, psnr, ssim
from .model import DRWKV, ModelConfig, count_params_flops, load_model, save_weights
from .retinex import ger_recompose, gray_world
from .scan import all_spiral_paths, spiral_path
from .wkv import bi_wkv_naive, bi_wkv_scan, ev_wkv

__version__ = "0.1.0"

__all__ = [
    "DRWKV", "LossWeights", "ModelConfig", "all_spiral_paths", "bi_wkv_naive", "bi_wkv_scan",
    "count_params_flops", "ev_wkv", "ger_recompose", "gray_world", "load_model", "ms2_loss",
    "ms2_total", "psnr", "save_weights", "spiral_path", "ssim",
]
