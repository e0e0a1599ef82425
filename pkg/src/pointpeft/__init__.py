"""Desk-scale laboratory for parameter-efficient fine-tuning of
point-cloud transformers: a float64 autograd core, synthetic labeled
scenes, a miniature local-attention backbone, and the full family of
PEFT attachments (linear probe, BitFit, adapter, LoRA, prompt tuning,
and the geometry mixer with its spatial and context adapters).
"""

from .autograd import (
    ParamStore,
    Tensor,
    check_gradients,
    config_hash,
    cross_entropy,
    named_rng,
)
from .backbone import BackboneConfig, forward, init_backbone, load_backbone, save_backbone
from .geometry import (
    PointCloud,
    SceneSpec,
    build_neighbor_index,
    generate_scene,
    load_cloud,
    morton_codes,
    save_cloud,
    serialize,
)
from .instrumentation import OpCounter, count_pass, dump_attention, js_divergence
from .peft import (
    METHODS,
    PeftConfig,
    attach,
    budget_fit,
    load_peft,
    save_peft,
    trainable_fraction,
)
from .training import (
    ConfusionMatrix,
    TrainConfig,
    evaluate,
    finetune,
    generate_dataset,
    pretrain,
    prepare,
    source_spec,
    target_spec,
)

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ConfusionMatrix",
    "METHODS",
    "OpCounter",
    "ParamStore",
    "PeftConfig",
    "PointCloud",
    "SceneSpec",
    "Tensor",
    "TrainConfig",
    "attach",
    "budget_fit",
    "build_neighbor_index",
    "check_gradients",
    "config_hash",
    "count_pass",
    "cross_entropy",
    "dump_attention",
    "evaluate",
    "finetune",
    "forward",
    "generate_dataset",
    "generate_scene",
    "init_backbone",
    "js_divergence",
    "load_backbone",
    "load_cloud",
    "load_peft",
    "morton_codes",
    "named_rng",
    "prepare",
    "pretrain",
    "save_backbone",
    "save_cloud",
    "save_peft",
    "serialize",
    "source_spec",
    "target_spec",
    "trainable_fraction",
]
