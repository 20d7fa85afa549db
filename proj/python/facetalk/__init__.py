"""Conversational face-behavior models: listening, speaking and face synthesis."""

from ._facetalk import (
    FacetalkError,
    ConfigError,
    DataError,
    NumericError,
    ShapeError,
    ListeningPredictor,
    SpeakingPredictor,
    SynthGenerator,
    au_names,
    column_names,
    continuity_loss,
    eval_mse_cosine,
    extract_aupose,
    mse_loss,
    pose_names,
    read_checkpoint,
    read_csv,
    read_norm_stats,
    reconstruction_error,
    render_face,
    renderer_mask,
    synth_conversation,
    total_loss,
    write_checkpoint,
    write_csv,
)

__all__ = [
    "FacetalkError",
    "ConfigError",
    "DataError",
    "NumericError",
    "ShapeError",
    "ListeningPredictor",
    "SpeakingPredictor",
    "SynthGenerator",
    "au_names",
    "column_names",
    "continuity_loss",
    "eval_mse_cosine",
    "extract_aupose",
    "mse_loss",
    "pose_names",
    "read_checkpoint",
    "read_csv",
    "read_norm_stats",
    "reconstruction_error",
    "render_face",
    "renderer_mask",
    "synth_conversation",
    "total_loss",
    "write_checkpoint",
    "write_csv",
]
