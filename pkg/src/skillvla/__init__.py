"""Desk-scale vision-language-action policy with a frozen backbone.

Components: a float64 autodiff substrate, a frozen mock multimodal
transformer, a three-branch gated attention block fusing per-layer backbone
features, a FIFO skill memory with top-R L1 retrieval and cross-attention
readout, a denoising action head trained by imitation, and a deterministic
2D manipulation environment with a scripted expert.
"""

from .backbone import (BackboneConfig, LayerStates, TokenSequence, encode,
                       encode_view, init_frozen, observe, tokenize_instruction)
from .config import RunConfig, load_config
from .env import (TaskSpec, TrajectoryRecord, WorldState, generate_dataset,
                  load_dataset, make_task, rephrase_instruction, reset,
                  scripted_expert, step, success_check, swap_novel_object)
from .errors import SkillVLAError
from .gradcheck import grad_check
from .head import (ActionChunk, HeadConfig, Observation, PolicyOutput,
                   chunk_loss, denoise, embed_inputs, head_layer,
                   init_model_params, policy_forward)
from .mol import (GateReport, MoLLayerParams, dynamic_gate, gated_cross_attn,
                  mol_layer, self_attn_actions)
from .msm import (SkillEntry, SkillMemory, build_key, key_value_correlation,
                  refine)
from .params import Adam, ParamStore, param_checksum
from .tensor import DenseArray, backward, no_grad
from .training import TrainResult, train
from .evaluation import evaluate, evaluate_with_drop, run_ablation

__all__ = [
    "ActionChunk", "Adam", "BackboneConfig", "DenseArray", "GateReport",
    "HeadConfig", "LayerStates", "MoLLayerParams", "Observation", "ParamStore",
    "PolicyOutput", "RunConfig", "SkillEntry", "SkillMemory", "SkillVLAError",
    "TaskSpec", "TokenSequence", "TrainResult", "TrajectoryRecord", "WorldState",
    "backward", "build_key", "chunk_loss", "denoise", "dynamic_gate",
    "embed_inputs", "encode", "encode_view", "evaluate", "evaluate_with_drop",
    "gated_cross_attn", "generate_dataset", "grad_check", "head_layer",
    "init_frozen", "init_model_params", "key_value_correlation", "load_config",
    "load_dataset", "make_task", "mol_layer", "no_grad", "observe",
    "param_checksum", "policy_forward", "refine", "rephrase_instruction",
    "reset", "run_ablation", "scripted_expert", "step", "success_check",
    "swap_novel_object", "tokenize_instruction", "train",
]
