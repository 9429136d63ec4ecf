"""spex: ordered, identifiable eigenfunction extraction from paired samples.

Learns the spectral decomposition of a positive-pair kernel from (a, a+)
draws alone: contrastive / low-rank and Rayleigh-quotient objectives, joint
and sequential nesting for ordered recovery, streaming Rayleigh-Ritz
post-processing, and a synthetic-kernel verification pipeline with analytic
ground truth.
"""

from .kernels import KernelSpec, SampleBatch, make_kernel, sample_pairs, validity_check
from .nesting import NestingPlan, joint_nested_loss, sequential_nested_loss
from .nn import AdamState, EncoderPair, FeatureMap, Network, adam_step
from .numerics import ContractViolation, RngState, SpectralResult, legendre_eval, sym_eig
from .objectives import (
    LossOutput,
    PenaltyConfig,
    SplitScheme,
    loss_lora_svd,
    loss_rq,
    loss_rq_direct,
    loss_scl,
    loss_vicreg,
)
from .rayleigh_ritz import RRTransform, StreamState, finalize, new_stream, stream_update
from .trainer import TrainConfig, TrainResult, pretrain_pool, sequential_train, train

__version__ = "0.1.0"
