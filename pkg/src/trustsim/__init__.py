"""Trusted multi-party iterative computation at desk scale.

A client runs an iterative computation and reports lattice-quantized delta
updates grouped into frames; endorsers validate each reported state by
recomputing it within a provable tolerance; an orderer commits validated
frames to a hash-chained audit ledger with subsampled records that anyone
can re-verify later. Includes the transaction/streaming/batch cost model
and a scenario runner for the compression/validation tradeoff study.
"""

from .codec import (
    CheckpointDictionary,
    DictIndex,
    Frame,
    LatticeQuantizer,
    NewEntry,
    QuantizedUpdate,
    RefinementChunk,
    apply_refinement,
    decode_frame,
    dequantize_update,
    dict_encode_checkpoint,
    encode_frame,
    quantize_update,
    refine_update,
    update_bit_cost,
)
from .compute import (
    AffineContraction,
    GaussianNoise,
    MiniBatchSGDClassifier,
    QuadraticGradientDescent,
    RandomDraw,
    derive_draw,
    estimate_lipschitz,
    iterate_k,
    step,
)
from .config import ComputationConfig, RunConfig, load_config
from .experiment import RunArtifacts, run_experiment, sweep_tolerances, vanilla_train
from .ledger import (
    AuditChain,
    append_block,
    choose_subsample_period,
    load_chain,
    save_chain,
    subsample_frame,
    verify_chain_integrity,
    verify_computation,
)
from .netsim import CostLedger, ModeParams, measured_vs_predicted, predicted_cost
from .protocol import (
    Endorsement,
    InvalidationNotice,
    RandomizedConfig,
    ToleranceSchedule,
    ValidationConfig,
    client_run_frames,
    deviation_probability_bound,
    endorse_frame,
    endorse_trajectory,
    handle_invalidation,
    max_quantizer_error,
    orderer_commit,
    randomized_endorse,
    required_endorsers,
)

__version__ = "0.1.0"
