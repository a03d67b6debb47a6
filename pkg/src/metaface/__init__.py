"""Few-shot speaking-style adaptation: a meta-learned sequence-to-vertex
regressor with low-rank adapters and a set-conditioned style latent, plus a
synthetic speaker corpus and an ablation harness."""

from . import autodiff
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import build_corpus, default_manifest, generate_corpus, load_corpus, split
from .meta import MetaConfig, inner_adapt, meta_outer_step, personalize, sample_tasks
from .model import (
    FeatureClip,
    LoraAdapter,
    ModelConfig,
    MotionClip,
    ParameterSet,
    forward,
    init_adapters,
    init_params,
    parameter_count,
    predict,
    trainable_report,
)
from .objectives import LossWeights, MetricReport, dtw_lip_sync, l2_metrics

__version__ = "0.1.0"
