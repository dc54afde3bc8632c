"""Graph-attention aesthetic crop scoring.

Scores candidate crops of an image by propagating spatial and semantic
relations between the crop and detected object regions through an adaptive
attention graph, then ranks the candidates. Ships with a minimal autodiff
engine, a trainable toy backbone, candidate generators, a training loop, rank
metrics, and a planted-model synthetic dataset for end-to-end verification.
"""

from .autodiff import (ConfigurationError, GradCheckReport, NumericalError,
                       Parameter, ShapeError, Tensor, UsageError, backward,
                       grad_check, layer_norm, matmul, mlp_forward,
                       softmax_rows)
from .candidates import (AnchorGrid, Circle, CropResult, circular_crop,
                         grid_anchors, rank_crops, ratio_anchors)
from .edges import (DisDropParams, DisEmbParams, EdgeTensors, SemanticParams,
                    correlation_adjacency, semantic_edges,
                    spatial_edges_disdrop, spatial_edges_disemb)
from .evaluation import EvalReport, acc_topk, evaluate, srcc
from .graph_attention import (AagConfig, AagParams, aag_block,
                              feature_aggregation_gate, s2o_self_attention,
                              score_head)
from .model import CropScorer, ModelConfig, load_checkpoint, save_checkpoint
from .rois import (FeatureMap, NodeSet, RegionBox, RegionError, ToyBackbone,
                   build_nodes, heuristic_proposals, read_feature_map,
                   rod_align, roi_align, write_feature_map)
from .synth import PlantedOracle, SynthSpec, synth_dataset
from .training import (AdamW, AnnotationRecord, DataError, TrainConfig,
                       loss_pred, loss_rank, read_manifest, train,
                       write_manifest)

__version__ = "0.1.0"
