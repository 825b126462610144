"""Slow-fast token evolution for vision transformers.

A desk-scale numpy library: structure-preserving top-k token selection
driven by an evolved global class attention, dual-path (slow/fast) token
updating, from-scratch training with an assisted CLS loss, MAC-level FLOP
accounting, throughput benchmarking, and representation diagnostics.
"""

from .encoder import (
    AttentionRecord,
    EncoderConfig,
    embed,
    init_params,
    model_forward_vanilla,
    model_backward_vanilla,
    msa_forward,
    patchify,
)
from .evolution import (
    EvoConfig,
    GlobalClassAttention,
    SelectionResult,
    aggregate_placeholders,
    evo_block_forward,
    model_backward_evo,
    model_forward_evo,
    select_informative,
    update_global_attention,
)
from .kernels import (
    check_gradients,
    cross_entropy_logits,
    gelu_map,
    layer_norm_rows,
    matmul,
    softmax_rows,
)
from .params import Parameter, ParamSet, RngState
from .training import Adam, TrainConfig, assisted_cls_loss, schedule_mode, train
from .analysis import (
    evo_layer_macs,
    ffn_macs,
    flop_report,
    linear_cka,
    msa_macs,
    paired_speedup,
    throughput_bench,
    token_query_pcc,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
