"""Multi-step modality fusion for ad-image CTR regression.

Library layout:
  tensor      autodiff engine (conv, batch norm, affine, softmax, pooling)
  nn          layers, init, SGD
  fusion      conditional batch norm, spatial attention, high-level fusion
  model       network assembly, training, ablation grid
  objectives  losses (weighted MSE, KLD, EMD) and rank metrics (SPRC, LCC)
  pipeline    log aggregation, aux encoding, log-normal CTR bucketization
  color       dominant-color extraction (K-means + MCD Mahalanobis)
  stats       ANOVA / logistic attribute selection
  synth       planted-effect synthetic ad-log generator
  cli         command-line entry point
"""

__version__ = "0.1.0"

from . import checkpoint, color, fusion, model, nn, objectives, pipeline, stats, synth, tensor
from .model import M2FN, ModelConfig, Toggles, build_model, train, ablate_grid
from .objectives import ScoreDistribution, MetricReport, sprc, lcc
from .pipeline import AuxSchema, EmbeddingStore, aggregate, encode_aux
from .tensor import Tensor, grad_check

__all__ = [
    "__version__", "checkpoint", "color", "fusion", "model", "nn", "objectives",
    "pipeline", "stats", "synth", "tensor",
    "M2FN", "ModelConfig", "Toggles", "build_model", "train", "ablate_grid",
    "ScoreDistribution", "MetricReport", "sprc", "lcc",
    "AuxSchema", "EmbeddingStore", "aggregate", "encode_aux",
    "Tensor", "grad_check",
]
