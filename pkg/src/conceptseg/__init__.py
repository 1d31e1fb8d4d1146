"""Self-supervised pixel embeddings from local segments, VQ concepts and concept co-occurrence."""

from .concepts import Codebook, assign, init_codebook
from .data import DatasetManifest, SceneSpec, generate_scenes, generate_video, write_dataset
from .embeddings import EmbeddingField, segment_means
from .losses import LossWeights, total_loss
from .pseudoseg import SegmentMap, felzenszwalb_segment
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["Codebook", "DatasetManifest", "EmbeddingField", "LossWeights", "SceneSpec",
           "SegmentMap", "TrainConfig", "assign", "felzenszwalb_segment", "generate_scenes",
           "generate_video", "init_codebook", "segment_means", "total_loss", "train",
           "write_dataset"]
