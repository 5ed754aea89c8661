"""Multi-view video proficiency estimation, desk scale.

A compact, fully self-contained stack: reverse-mode autodiff over numpy,
a divided space-time video encoder, low-rank adaptation of its dense layers,
an attention-based cross-view fusion head, a synthetic multi-view benchmark
with a Bayes-optimal reference, and training / evaluation / checkpoint tools.
"""

from .errors import (
    ConfigError,
    ContractError,
    CrossviewError,
    DataError,
    NumericError,
)
from .tensor import (
    Tensor,
    concat,
    gather_rows,
    gelu,
    layer_norm,
    logsumexp,
    make_rng,
    no_grad,
    sigmoid,
    softmax,
)
from .nn import Dropout, LayerNorm, Linear, Module, MultiheadAttention
from .gradcheck import grad_check, gradcheck_suite
from .backbone import BackboneConfig, VideoEncoder, interpolate_time_embeddings
from .lora import (
    LoraLinear,
    apply_lora,
    count_params,
    merge_lora,
    merged_copy,
)
from .fusion import CrossViewFusion
from .model import PRESETS, ModelConfig, ProficiencyClassifier, preset
from .data import (
    LabeledSample,
    SyntheticSpec,
    batch_clips,
    bayes_oracle,
    generate,
    load_dataset,
    preprocess,
    save_dataset,
    view_slice,
)
from .training import (
    AdamW,
    Metrics,
    TrainConfig,
    TrainResult,
    cosine_lr,
    cross_entropy,
    evaluate,
    evaluate_predictions,
    train,
)
from .checkpoint import (
    Checkpoint,
    build_model,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"
