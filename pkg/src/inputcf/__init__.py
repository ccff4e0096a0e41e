"""Collaborative filtering with learnable interaction inputs.

The engine treats each observed entry of the user-item interaction matrix
as a trainable scalar: user rows feed one branch network, item columns the
other, and the branch representations fuse into a score. Freezing those
input scalars at their initialization recovers the classical fixed-input
models exactly; training them jointly (or in alternating phases, or in a
final input-only pass) is the method under study. Baselines (identity-input
branches, matrix factorization) and the evaluation protocols live here too.
"""

from .data import (
    InteractionMatrix,
    LearnableInputSet,
    SplitBundle,
    ingest,
    init_inputs,
    row_distance,
    sample_negatives,
    split_leave_one_out,
    split_random,
    to_implicit,
    write_entries,
    write_id_maps,
)
from .metrics import (
    EvalReport,
    evaluate_implicit,
    evaluate_rating,
    hit_ratio_at_k,
    ndcg_at_k,
    precision_at_pct,
    rank_with_sampled_negatives,
    retrieved_count,
    rmse,
)
from .model import (
    CfModel,
    GradientSet,
    Hypothesis,
    ModelConfig,
    VARIANTS,
    backward_pair,
    backward_pairs,
    build_model,
    export_hypothesis,
    first_layer,
    forward_pair,
    forward_pairs,
    input_count,
    score_all_items,
    score_hypothesis,
    score_hypothesis_pairs,
    summation_fusion_param_count,
)
from .numerics import (
    MlpParams,
    MlpSpec,
    activation_apply,
    activation_grad,
    init_mlp_params,
    mlp_backward,
    mlp_forward,
)
from .rng import (
    STREAM_INIT,
    STREAM_NEGATIVES,
    STREAM_SHUFFLE,
    STREAM_SPLIT,
    stream,
)
from .training import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    BCE_EPS,
    NumericalError,
    Optimizer,
    RMSPROP_EPS,
    RMSPROP_RHO,
    TrainPlan,
    TrainResult,
    checkpoint_read,
    checkpoint_save,
    dataset_loss,
    dataset_rmse,
    loss_bce,
    loss_mse,
    predict_pairs,
    train_alternating,
    train_joint,
    train_post_input,
)

__version__ = "1.0.0"

__all__ = [
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
    "BCE_EPS",
    "CfModel",
    "EvalReport",
    "GradientSet",
    "Hypothesis",
    "InteractionMatrix",
    "LearnableInputSet",
    "ModelConfig",
    "MlpParams",
    "MlpSpec",
    "NumericalError",
    "Optimizer",
    "RMSPROP_EPS",
    "RMSPROP_RHO",
    "STREAM_INIT",
    "STREAM_NEGATIVES",
    "STREAM_SHUFFLE",
    "STREAM_SPLIT",
    "SplitBundle",
    "TrainPlan",
    "TrainResult",
    "VARIANTS",
    "activation_apply",
    "activation_grad",
    "backward_pair",
    "backward_pairs",
    "build_model",
    "checkpoint_read",
    "checkpoint_save",
    "dataset_loss",
    "dataset_rmse",
    "evaluate_implicit",
    "evaluate_rating",
    "export_hypothesis",
    "first_layer",
    "forward_pair",
    "forward_pairs",
    "hit_ratio_at_k",
    "ingest",
    "init_inputs",
    "init_mlp_params",
    "input_count",
    "loss_bce",
    "loss_mse",
    "mlp_backward",
    "mlp_forward",
    "ndcg_at_k",
    "precision_at_pct",
    "predict_pairs",
    "rank_with_sampled_negatives",
    "retrieved_count",
    "rmse",
    "row_distance",
    "sample_negatives",
    "score_all_items",
    "score_hypothesis",
    "score_hypothesis_pairs",
    "split_leave_one_out",
    "split_random",
    "stream",
    "summation_fusion_param_count",
    "to_implicit",
    "write_entries",
    "write_id_maps",
    "train_alternating",
    "train_joint",
    "train_post_input",
]
