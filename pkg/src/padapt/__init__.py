"""Speaker adaptation for small visual-speech recognizers via learnable
convolution padding.

A frozen pretrained recognizer is personalized by optimizing only the padding
rings of its spatial convolutions per speaker; everything else stays fixed, so
one shared model plus a few-kilobyte ring file per speaker replaces per-user
model copies.

The public surface re-exported here covers the usual workflow: build or load a
model, pretrain it on the synthetic multi-speaker corpus, enroll speakers by
ring adaptation (supervised or self-training), recognize with their rings, and
group unlabeled video embeddings into per-speaker clusters.
"""

from .adapt import (
    AdaptBudget,
    adapt_self_training,
    adapt_speaker_code,
    adapt_supervised,
    evaluate_model,
    extract_features,
    finetune_all,
    new_speaker_code_adapter,
    parameter_report,
    predict_classification,
    predict_sequences,
    pretrain,
    pseudo_label,
    train_speaker_code,
    train_speaker_invariant,
)
from .cluster import (
    Thresholds,
    VideoEmbedding,
    adjusted_rand_index,
    load_embedding_dir,
    run_pipeline,
    save_embedding_dir,
    write_pipeline_outputs,
)
from .errors import PadaptError
from .harness import RunConfig, metric_table, read_metrics, storage_report, write_metrics
from .model import (
    ModelConfig,
    RecognizerModel,
    build_model,
    load_checkpoint,
    model_with_preset,
    ring_parameter_count,
    save_checkpoint,
    standard_config,
)
from .optim import AdamW
from .padding import (
    PaddingRegistry,
    UserPadding,
    init_user_padding,
    load_padding,
    save_padding,
)
from .synthdata import DataConfig, budget_subset, generate
from .synthdata import export as export_dataset
from .synthdata import load as load_dataset

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AdaptBudget",
    "DataConfig",
    "ModelConfig",
    "PaddingRegistry",
    "PadaptError",
    "RecognizerModel",
    "RunConfig",
    "Thresholds",
    "UserPadding",
    "VideoEmbedding",
    "adapt_self_training",
    "adapt_speaker_code",
    "adapt_supervised",
    "adjusted_rand_index",
    "budget_subset",
    "build_model",
    "evaluate_model",
    "export_dataset",
    "extract_features",
    "finetune_all",
    "generate",
    "init_user_padding",
    "load_checkpoint",
    "load_dataset",
    "load_embedding_dir",
    "load_padding",
    "metric_table",
    "model_with_preset",
    "new_speaker_code_adapter",
    "parameter_report",
    "predict_classification",
    "predict_sequences",
    "pretrain",
    "pseudo_label",
    "read_metrics",
    "ring_parameter_count",
    "run_pipeline",
    "save_checkpoint",
    "save_embedding_dir",
    "save_padding",
    "standard_config",
    "storage_report",
    "train_speaker_code",
    "train_speaker_invariant",
    "write_metrics",
    "write_pipeline_outputs",
]
