"""Density-map counting of objects named by a text prompt, on a frozen CLIP dual encoder."""
from .alignment import ContrastiveConfig, ContrastiveLoss, derive_objectness_mask, patch_text_contrastive_loss, project_patches
from .backbone import Backbone, BackboneConfig, BackboneOutput, TextEmbedding, clip_similarity
from .config import RunConfig, build_model, stub_config, toy_config
from .data import (AugmentConfig, CountingDataset, CountingRecord, DensitySynthesisConfig, augment,
                   dots_to_density, load_dataset, make_toy_dataset, resize_with_density)
from .decoder import DecoderConfig, DensityDecoder, fuse_scales
from .engine import (EvalResult, TrainConfig, TrainState, evaluate, load_checkpoint, mse_loss, predict_count,
                     save_checkpoint, stitch_windows, train, window_origins)
from .errors import CheckpointError, ConfigError, DatasetError, InvalidInputError, NumericalError, PromptCountError
from .interaction import HierarchicalInteraction, InteractionConfig, upsample_features
from .model import PromptCounter, count_trainable, trainable_parameters

__version__ = "0.1.0"
