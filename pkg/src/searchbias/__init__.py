"""Toolkit for measuring and mitigating gender bias in embedding-based image search."""

__version__ = "0.1.0"

from .core import (
    DataError,
    Dataset,
    EmbeddingTable,
    GenderLabel,
    load_embeddings,
    load_labels,
    load_truth,
    save_embeddings,
    save_labels,
    save_truth,
    synth_dataset,
)
from .retrieval import RetrievalResult, cosine, retrieve_all, retrieve_topk
from .metrics import (
    BiasReport,
    OccupationBiasReport,
    RecallReport,
    UndefinedBiasError,
    bias_at_k,
    delta_k,
    occupation_bias,
    occupation_bias_report,
    recall_at_k,
)
from .clipper import ClipPlan, apply_clip, clipped_similarity, estimate_mi, fit_clip_plan
from .gender_text import (
    Caption,
    CaptionGender,
    GenderLexicon,
    caption_gender,
    image_gender,
    load_captions,
    neutralize,
    save_captions,
)
from .trainer import (
    LinearEncoders,
    TrainerConfig,
    TripletBatch,
    fair_loss_ti,
    total_loss,
    train,
    triplet_loss_it,
    triplet_loss_ti,
)

__all__ = [
    "BiasReport",
    "Caption",
    "CaptionGender",
    "ClipPlan",
    "DataError",
    "Dataset",
    "EmbeddingTable",
    "GenderLabel",
    "GenderLexicon",
    "LinearEncoders",
    "OccupationBiasReport",
    "RecallReport",
    "RetrievalResult",
    "TrainerConfig",
    "TripletBatch",
    "UndefinedBiasError",
    "apply_clip",
    "bias_at_k",
    "caption_gender",
    "clipped_similarity",
    "cosine",
    "delta_k",
    "estimate_mi",
    "fair_loss_ti",
    "fit_clip_plan",
    "image_gender",
    "load_captions",
    "load_embeddings",
    "load_labels",
    "load_truth",
    "neutralize",
    "occupation_bias",
    "occupation_bias_report",
    "recall_at_k",
    "retrieve_all",
    "retrieve_topk",
    "save_captions",
    "save_embeddings",
    "save_labels",
    "save_truth",
    "synth_dataset",
    "total_loss",
    "train",
    "triplet_loss_it",
    "triplet_loss_ti",
]
