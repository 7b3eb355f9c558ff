"""Cross-modal shape retrieval at desk scale.

Point clouds and image-like view features are embedded onto a shared unit
hypersphere by two small trainable encoders, aligned with either a symmetric
InfoNCE objective or a hard contrastive loss whose negatives are reweighted
by an unnormalized von Mises-Fisher density, and retrieved through an exact
cosine k-NN index.
"""

from .errors import (FingerprintError, FormatError, NumericError, ParameterError,
                     ShapeRetError)
from .geometry import (AugmentConfig, ColorRule, PointCloud, ShapeSpec, ViewFeature,
                       augment, gen_shape, load_cloud, normalize, project_views,
                       save_cloud)
from .encoders import (EncoderParams, Gradients, encode_image, encode_shape,
                       init_params, load_params, save_params)
from .losses import (BetaSchedule, LossConfig, anneal_beta, hcl, info_nce,
                     vmf_weights)
from .index import (RetrievalResult, ShapeIndex, build_index, load_index, query,
                    save_index)
from .metrics import EvalReport, acc_top_k, evaluate, map_at_k
from .datasets import (DatasetManifest, DatasetRecipe, gen_dataset, load_manifest,
                       save_manifest, split)
from .trainer import (EmbeddingCache, TrainConfig, TrainTuple, make_batch,
                      optimizer_step, precompute_image_embeddings, train)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "BetaSchedule", "ColorRule", "DatasetManifest",
    "DatasetRecipe", "EmbeddingCache", "EncoderParams", "EvalReport",
    "FingerprintError", "FormatError", "Gradients", "LossConfig",
    "NumericError", "ParameterError", "PointCloud", "RetrievalResult",
    "ShapeIndex", "ShapeRetError", "ShapeSpec", "TrainConfig", "TrainTuple",
    "ViewFeature", "acc_top_k", "anneal_beta", "augment", "build_index",
    "encode_image", "encode_shape", "evaluate", "gen_dataset", "gen_shape",
    "hcl", "info_nce", "init_params", "load_cloud", "load_index",
    "load_manifest", "load_params", "make_batch", "map_at_k", "normalize",
    "optimizer_step", "precompute_image_embeddings", "project_views", "query",
    "save_cloud", "save_index", "save_manifest", "save_params", "split",
    "train", "vmf_weights",
]
