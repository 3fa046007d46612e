"""Multi-domain item tokenization with a shared autoencoder, routed residual-quantization experts
and HSIC-based calibration across domains."""

from .data import Dataset, gen_synthetic, load_dataset, load_jsonl, save_binary, save_jsonl
from .estimator import ItemTokenizer
from .metrics import count_parameters, evaluate, quantization_error, theorem_report, token_entropy, zero_shot_eval
from .model import TokenizerModel, TrainConfig, load_model, save_model
from .moe import tokenize_dataset
from .trainer import train, train_baseline_single_codebook

__version__ = "0.1.0"

__all__ = [
    "Dataset", "ItemTokenizer", "TokenizerModel", "TrainConfig", "count_parameters", "evaluate",
    "gen_synthetic", "load_dataset", "load_jsonl", "load_model", "quantization_error", "save_binary",
    "save_jsonl", "save_model", "theorem_report", "token_entropy", "tokenize_dataset", "train",
    "train_baseline_single_codebook", "zero_shot_eval",
]
