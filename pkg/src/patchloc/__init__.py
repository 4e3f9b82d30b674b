"""Patch-level place recognition with weighted mutual-NN matching."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DegenerateDescriptorError,
    FormatError,
    InvalidGeometry,
    InvariantViolation,
    PatchlocError,
)
from .featureio import (
    DatasetManifest,
    FeatureMap,
    ManifestEntry,
    load_feature_map,
    load_manifest,
    save_feature_map,
    save_manifest,
    synth_feature_map,
)
from .patches import Patch, PatchGrid, extract_patches, patch_count, patch_of_pixel
from .vlad import (
    PatchDescriptor,
    PcaModel,
    VladParams,
    aggregate_vlad,
    apply_pca,
    cosine_distance,
    describe_global,
    describe_image,
    describe_patch,
    fit_pca,
    load_params,
    project,
    save_params,
    soft_assign,
    whiten,
)
from .keypoints import KeypointSet, load_keypoints, match_keypoints, ransac_filter, save_keypoints
from .finetune import (
    FinetuneConfig,
    Triplet,
    finetune,
    load_triplets,
    loss_gradient,
    mine_triplets,
    save_triplets,
    select_candidates,
    triplet_loss,
)
from .weighting import CentroidSet, WEIGHT_FLOOR, kmeans, patch_weight, weigh_index
from .matching import (
    Match,
    PairResult,
    distance_matrix,
    match_pair,
    mutual_nn,
    pair_score,
    spatial_score,
    weight_matrix,
)
from .retrieval import (
    IndexConfig,
    QueryResult,
    RetrievalIndex,
    build_index,
    geo_distance,
    load_index,
    query_topk,
    recall_at_n,
    recall_table,
    rerank,
    save_index,
)
from .config import RunConfig, load_config
