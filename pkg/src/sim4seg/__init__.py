"""Toy diagnosis-and-segmentation pipeline with region-level visual prompting."""

from .decoder import DecoderConfig, PredictedMask, VisualFeatures, decode
from .embeddings import EmbeddingMatrix, ProjectionHead, SegEmbedding, SegTokenRaw, toy_encode
from .exceptions import (ContractViolation, EmptyDatasetError, GridTooFineError,
                         InvalidInputError, NoSegTokenError, PipelineIOError, SampleError,
                         Sim4SegError, UnparseableVerdictError)
from .harness import RunConfig, SweepResult, run_eval, sweep_tau, sweep_tts
from .losses import LossWeights, total_loss
from .metrics import EvalReport, MaskPair, ciou_dataset, giou_dataset, iou, quality
from .model import Sim4SegSegmenter
from .rvls2m import AbsoluteThreshold, RegionMask, TopFraction, TopK, rvls2m
from .synthdata import SceneSpec, generate

__all__ = [
    "AbsoluteThreshold", "ContractViolation", "DecoderConfig", "EmbeddingMatrix",
    "EmptyDatasetError", "EvalReport", "GridTooFineError", "InvalidInputError", "LossWeights",
    "MaskPair", "NoSegTokenError", "PipelineIOError", "PredictedMask", "ProjectionHead",
    "RegionMask", "RunConfig", "SampleError", "SceneSpec", "SegEmbedding", "SegTokenRaw",
    "Sim4SegError", "Sim4SegSegmenter", "SweepResult", "TopFraction", "TopK",
    "UnparseableVerdictError", "VisualFeatures", "ciou_dataset", "decode", "generate",
    "giou_dataset", "iou", "quality", "run_eval", "rvls2m", "sweep_tau", "sweep_tts",
    "toy_encode", "total_loss",
]
