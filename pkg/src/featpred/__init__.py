"""Self-supervised feature-prediction pretraining for content-based image
retrieval on multi-band archives.

A context encoder sees a masked view of each image, a momentum-averaged
target encoder sees the full image, and a predictor reconstructs the
target encoder's features at the masked positions from mask tokens
carrying only positional information. A variance/covariance/invariance
regularizer keeps the embedding space from collapsing. Retrieval is exact
k-NN over average-pooled embeddings, scored by mean label-set F1@k.
"""

from .ablation import (AblationResult, AblationRow, AblationSpec,
                       apply_setting, run_ablation, train_and_evaluate)
from .config import (DataConfig, RetrievalConfig, RunConfig,
                     archive_from_config, build_run_config,
                     default_run_config, load_run_config, run_config_to_dict)
from .data import (ArchiveRecord, PatchSequence, generate_synthetic_archive,
                   load_archive, patchify, read_image_raw, save_archive,
                   split_archive, standardize_archive, tokenize_batch,
                   unpatchify, write_image_raw)
from .errors import (ConfigError, ContractError, DivergenceError,
                     EvaluationError, IngestionError, ShapeError)
from .losses import (VicregConfig, covariance_term, invariance_term,
                     prediction_loss, total_loss, variance_term, vicreg_loss)
from .masking import (MaskConfig, MaskPair, sample_batch, sample_mask,
                      sample_multi_block, sample_random_disjoint, target_count)
from .model import (EncoderConfig, ModelState, PredictorConfig,
                    TokenEmbeddings, encode_context, encode_target,
                    ema_update, init_model, model_for_archive,
                    pooled_embedding, pooled_embeddings_batch, predict_targets,
                    select_tokens, step_backward, step_forward, training_loss)
from .retrieval import (FeatureIndex, RetrievalResult, build_index,
                        evaluate_archive, f1_at_k, load_index, query,
                        save_index)
from .training import (TrainConfig, TrainState, collapse_monitor, ema_schedule,
                       fit, load_checkpoint, lr_schedule, save_checkpoint,
                       train_step, wd_schedule)

__version__ = "0.1.0"

__all__ = [
    "AblationResult", "AblationRow", "AblationSpec", "ArchiveRecord",
    "ConfigError", "ContractError", "DataConfig", "DivergenceError",
    "EncoderConfig", "EvaluationError", "FeatureIndex", "IngestionError",
    "MaskConfig", "MaskPair", "ModelState", "PatchSequence",
    "PredictorConfig", "RetrievalConfig", "RetrievalResult", "RunConfig",
    "ShapeError", "TokenEmbeddings", "TrainConfig", "TrainState",
    "VicregConfig", "apply_setting", "archive_from_config", "build_index",
    "build_run_config", "collapse_monitor", "covariance_term",
    "default_run_config", "ema_schedule", "ema_update", "encode_context",
    "encode_target", "evaluate_archive", "f1_at_k",
    "generate_synthetic_archive", "init_model", "invariance_term",
    "load_archive", "load_checkpoint", "load_index", "load_run_config",
    "lr_schedule", "model_for_archive", "patchify", "pooled_embedding",
    "pooled_embeddings_batch", "predict_targets", "prediction_loss",
    "query", "read_image_raw", "run_ablation", "run_config_to_dict",
    "sample_batch", "sample_mask", "sample_multi_block",
    "sample_random_disjoint", "save_archive", "save_checkpoint",
    "save_index", "select_tokens", "split_archive", "standardize_archive",
    "step_backward", "step_forward", "target_count", "tokenize_batch",
    "total_loss", "train_and_evaluate", "train_step", "training_loss",
    "unpatchify", "variance_term", "vicreg_loss", "wd_schedule",
    "write_image_raw",
]
