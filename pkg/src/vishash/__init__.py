"""Infographic topic tagging and visual hashtag localization.

Two-stage pipeline: transcript text extracted from inside an infographic
predicts its category and tags; those tags then steer a patch-based visual
classifier that localizes the image regions depicting them.  Includes a
synthetic corpus generator with planted ground truth, an evaluation
harness, a CLI, and an annotation backend for collecting human boxes.
"""

from .boxes import Box
from .corpus import (
    DatasetSplit,
    InfographicRecord,
    TagVocabulary,
    curate,
    load_manifest,
    merge_tags,
    split,
    write_manifest,
)
from .embed_text import (
    EmbeddingTable,
    TextFeature,
    embed_mean,
    snap_tags,
    tokenize_clean,
    vote_tags,
)
from .evaluate import (
    GroundTruthBoxSet,
    HashtagMetrics,
    category_chance,
    hashtag_metrics,
    iou,
    random_crop_baseline,
    tag_pr_at_k,
    topk_accuracy,
)
from .hashtag import (
    ActivationMap,
    HashtagConfig,
    HashtagProposal,
    accumulate_heatmap,
    connected_components,
    extract_hashtags,
    refine,
    score_crops,
    threshold_map,
)
from .mlp import MlpModel, TrainConfig, forward, grad, loss, predict_topk, train
from .synthgen import SynthConfig, generate
from .vision import (
    Bag,
    EncoderConfig,
    Patch,
    PatchEncoder,
    VisionModel,
    VisionTrainConfig,
    aggregate_bag,
    predict_bag,
    sample_random_patches,
    score_patch,
    squarify_proposals,
    train_vision,
)

__version__ = "0.1.0"
