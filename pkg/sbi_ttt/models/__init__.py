from .autodiff import Tape, Var
from .flow import (
    ConditionalFlow,
    FlowConfig,
    Standardizer,
    embed_observation,
    flow_log_prob,
    flow_sample,
    flow_sample_in_box,
    load_flow,
    save_flow,
)
from .lora import LoRAAdapter, LoraParams, LoRASpec, lora_attach
from .nn import ParamSource, StoreParams, mlp_forward
from .optim import AdamConfig, AdamState, sgd_adam_step
from .store import BlockSpec, FlowParameterStore, GradientHook, load_store, save_store

__all__ = [
    "AdamConfig",
    "AdamState",
    "BlockSpec",
    "ConditionalFlow",
    "FlowConfig",
    "FlowParameterStore",
    "GradientHook",
    "LoRAAdapter",
    "LoRASpec",
    "LoraParams",
    "ParamSource",
    "Standardizer",
    "StoreParams",
    "Tape",
    "Var",
    "embed_observation",
    "flow_log_prob",
    "flow_sample",
    "flow_sample_in_box",
    "load_flow",
    "load_store",
    "lora_attach",
    "mlp_forward",
    "save_flow",
    "save_store",
    "sgd_adam_step",
]
