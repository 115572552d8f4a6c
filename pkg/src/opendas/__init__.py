"""Prompt-based domain adaptation of a frozen dual encoder for open-vocabulary segment
classification."""

__version__ = "0.1.0"

from .errors import ShapeError, TruncationError, ValidationError  # noqa: E402
from .model import (DualEncoder, EncoderConfig, ModelConfig, PromptConfig,  # noqa: E402
                    Tokenizer, count_prompt_params, inject_prompts, predict)
from .objectives import LossConfig, TripletBatch, lambda_at, triplet_loss  # noqa: E402
from .mining import (LabelSpace, NegativeBank, build_label_space,  # noqa: E402
                     hardest_negative, load_negative_bank)
from .trainer import TrainConfig, run_adaptation, stage1_train, stage2_train  # noqa: E402
from .metrics import classification_metrics, export_embeddings, pixel_metrics  # noqa: E402

__all__ = [
    "ShapeError", "TruncationError", "ValidationError", "DualEncoder", "EncoderConfig",
    "ModelConfig", "PromptConfig", "Tokenizer", "count_prompt_params", "inject_prompts",
    "predict", "LossConfig", "TripletBatch", "lambda_at", "triplet_loss", "LabelSpace",
    "NegativeBank", "build_label_space", "hardest_negative", "load_negative_bank",
    "TrainConfig", "run_adaptation", "stage1_train", "stage2_train",
    "classification_metrics", "export_embeddings", "pixel_metrics",
]
