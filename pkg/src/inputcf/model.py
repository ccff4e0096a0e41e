"""Model variants over a shared forward/backward contract.

Six variants share one code path wherever their math overlaps:

* ``ncf`` / ``inp-ncf``: two interaction-vector branches plus a fusion MLP on
  the concatenated representations. The branch input weights are the entries
  of the interaction matrix; ``inp-ncf`` trains them, ``ncf`` keeps them
  frozen at their initialization. Both are literally the same network, which
  makes the frozen-input reduction exact rather than approximate.
* ``cfnet`` / ``inp-cfnet``: adds a second joint representation built from
  linear-transform tables and an MLP over the concatenation, combined with
  the element-wise product of the branch outputs.
* ``ncf-id``: embedding-row lookup branches (one-hot by construction).
* ``mf``: dot-product of factors plus user/item/global biases.

The first layer of an interaction-vector branch is a weighted sum of
embedding rows selected by the entity's non-zero pattern:
``y = act(sum_l w_l * P[l, :])``. Batches of (user, item) pairs drive all
training; a single pair is a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .data import InteractionMatrix, LearnableInputSet, init_inputs
from .numerics import (
    MlpParams,
    MlpSpec,
    activation_apply,
    activation_grad,
    init_mlp_params,
    mlp_backward_batch,
    mlp_forward_batch,
    zeros_like_params,
)

VARIANTS = ("ncf", "inp-ncf", "ncf-id", "mf", "cfnet", "inp-cfnet")
INTERACTION_VARIANTS = ("ncf", "inp-ncf", "cfnet", "inp-cfnet")
CFNET_VARIANTS = ("cfnet", "inp-cfnet")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description, independent of any dataset sizes.

    ``user_layers`` / ``item_layers`` list the branch widths including the
    first (embedding) layer; a single entry means the branch is just that
    first layer. ``fusion_layers`` lists the fusion MLP widths after its
    input and must end in 1.
    """

    variant: str = "inp-ncf"
    user_layers: tuple[int, ...] = (100,)
    item_layers: tuple[int, ...] = (100,)
    fusion_layers: tuple[int, ...] = (100, 1)
    activation: str = "selu"
    output_activation: str = "identity"
    input_init: str = "ratings"
    value_max: float = 5.0
    first_layer_activation: str = "same"  # "same" as branch activation, or "identity"
    use_biases: bool = True
    embed_dim: int = 32
    cfnet_embed_dim: int = 64
    cfnet_h_layers: tuple[int, ...] = (64,)
    precision: str = "f32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("user_layers", "item_layers", "fusion_layers", "cfnet_h_layers"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.fusion_layers[-1] != 1:
            raise ValueError("fusion_layers must end with an output width of 1")
        if self.variant in CFNET_VARIANTS and self.user_layers[-1] != self.item_layers[-1]:
            raise ValueError("element-wise product needs equal branch output widths")
        if self.first_layer_activation not in ("same", "identity"):
            raise ValueError("first_layer_activation must be 'same' or 'identity'")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


class CfModel:
    """One variant's parameters bound to a training interaction pattern."""

    def __init__(self, config: ModelConfig, matrix: InteractionMatrix,
                 inputs: LearnableInputSet):
        self.config = config
        self.matrix = matrix
        self.inputs = inputs
        self.variant = config.variant
        self.dtype = config.dtype
        act = config.activation
        self.first_act = act if config.first_layer_activation == "same" else "identity"

        self.p_user = None   # (n, d) item-embedding rows feeding the user branch
        self.p_item = None   # (m, d) user-embedding rows feeding the item branch
        self.user_trunk_spec = self.user_trunk = None
        self.item_trunk_spec = self.item_trunk = None
        self.a_user = None   # (n, da) linear-transform table, second joint branch
        self.a_item = None   # (m, da)
        self.h_spec = self.h_params = None
        self.e_user = None   # (m, d) id-lookup embeddings
        self.e_item = None
        self.mf_user = self.mf_item = None
        self.mf_user_bias = self.mf_item_bias = self.mf_global = None
        self.fusion_spec = self.fusion = None

    @property
    def inputs_trainable(self) -> bool:
        return self.variant.startswith("inp-")

    def parameters(self) -> dict[str, np.ndarray]:
        """Stable name -> tensor registry of all network parameters.

        Input values are deliberately not included; they are a separate
        parameter group with their own optimizer state.
        """
        out: dict[str, np.ndarray] = {}

        def add_mlp(prefix, spec, params):
            for l, (w, b) in enumerate(zip(params.weights, params.biases)):
                out[f"{prefix}.w{l}"] = w
                if spec.use_biases:
                    out[f"{prefix}.b{l}"] = b

        if self.p_user is not None:
            out["user.first_layer"] = self.p_user
            out["item.first_layer"] = self.p_item
            if self.user_trunk is not None:
                add_mlp("user.trunk", self.user_trunk_spec, self.user_trunk)
            if self.item_trunk is not None:
                add_mlp("item.trunk", self.item_trunk_spec, self.item_trunk)
        if self.a_user is not None:
            out["cfnet.user_transform"] = self.a_user
            out["cfnet.item_transform"] = self.a_item
            add_mlp("cfnet.h", self.h_spec, self.h_params)
        if self.e_user is not None:
            out["id.user_embed"] = self.e_user
            out["id.item_embed"] = self.e_item
        if self.mf_user is not None:
            out["mf.user_factors"] = self.mf_user
            out["mf.item_factors"] = self.mf_item
            out["mf.user_bias"] = self.mf_user_bias
            out["mf.item_bias"] = self.mf_item_bias
            out["mf.global_bias"] = self.mf_global
        if self.fusion is not None:
            add_mlp("fusion", self.fusion_spec, self.fusion)
        return out

    def network_param_count(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))


def input_count(matrix: InteractionMatrix) -> int:
    """Learnable input scalars for a pattern: twice the observed interactions."""
    return 2 * matrix.nnz


def summation_fusion_param_count(m: int, n: int, p: int, d: int, num_f_layers: int) -> int:
    """Parameter count of the theoretical summation-fusion scoring model.

    Representation tables of width d for n + m entities plus a p-way output
    table, and (num_f_layers - 1) square d x d hidden layers in between.
    """
    return (n + m + p) * d + (num_f_layers - 1) * (d * d)


def _trunk_spec(layers, activation, use_biases):
    # Branch layers beyond the first; the branch nonlinearity applies at
    # every layer including the last one.
    if len(layers) < 2:
        return None
    return MlpSpec(layer_widths=tuple(layers), activation=activation,
                   output_activation=activation, use_biases=use_biases)


def build_model(config: ModelConfig, matrix: InteractionMatrix,
                rng: np.random.Generator) -> CfModel:
    """Allocate and initialize all parameter tensors for one variant.

    The draw order below is fixed: matched variants (ncf vs inp-ncf, cfnet vs
    inp-cfnet) allocate identical tensors in identical order, so a shared
    seed yields bit-identical initial weights.
    """
    dtype = config.dtype
    inputs = init_inputs(matrix, config.input_init, config.value_max, dtype=dtype)
    model = CfModel(config, matrix, inputs)

    def draw(shape, fan_in, fan_out):
        scale = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-scale, scale, size=shape).astype(dtype)

    act = config.activation
    if config.variant in INTERACTION_VARIANTS:
        d_u0, d_i0 = config.user_layers[0], config.item_layers[0]
        model.p_user = draw((matrix.n, d_u0), matrix.n, d_u0)
        model.user_trunk_spec = _trunk_spec(config.user_layers, act, config.use_biases)
        if model.user_trunk_spec is not None:
            model.user_trunk = init_mlp_params(model.user_trunk_spec, rng, dtype)
        model.p_item = draw((matrix.m, d_i0), matrix.m, d_i0)
        model.item_trunk_spec = _trunk_spec(config.item_layers, act, config.use_biases)
        if model.item_trunk_spec is not None:
            model.item_trunk = init_mlp_params(model.item_trunk_spec, rng, dtype)
        d_u, d_i = config.user_layers[-1], config.item_layers[-1]
        if config.variant in CFNET_VARIANTS:
            da = config.cfnet_embed_dim
            model.a_user = draw((matrix.n, da), matrix.n, da)
            model.a_item = draw((matrix.m, da), matrix.m, da)
            model.h_spec = MlpSpec(layer_widths=(2 * da, *config.cfnet_h_layers),
                                   activation=act, output_activation=act,
                                   use_biases=config.use_biases)
            model.h_params = init_mlp_params(model.h_spec, rng, dtype)
            fusion_in = d_u + config.cfnet_h_layers[-1]
        else:
            fusion_in = d_u + d_i
    elif config.variant == "ncf-id":
        d = config.embed_dim
        model.e_user = draw((matrix.m, d), matrix.m, d)
        model.e_item = draw((matrix.n, d), matrix.n, d)
        fusion_in = 2 * d
    elif config.variant == "mf":
        d = config.embed_dim
        model.mf_user = draw((matrix.m, d), matrix.m, d)
        model.mf_item = draw((matrix.n, d), matrix.n, d)
        model.mf_user_bias = np.zeros(matrix.m, dtype=dtype)
        model.mf_item_bias = np.zeros(matrix.n, dtype=dtype)
        model.mf_global = np.zeros((), dtype=dtype)
        return model
    else:  # pragma: no cover - VARIANTS is closed
        raise ValueError(config.variant)

    model.fusion_spec = MlpSpec(layer_widths=(fusion_in, *config.fusion_layers),
                                activation=act,
                                output_activation=config.output_activation,
                                use_biases=config.use_biases)
    model.fusion = init_mlp_params(model.fusion_spec, rng, dtype)
    return model


def first_layer(indices, weights, embed: np.ndarray, activation: str) -> np.ndarray:
    """Weighted sum of embedding rows followed by the activation.

    ``indices`` select rows of ``embed``; an empty selection yields
    ``act(0)`` (the cold-entity convention).
    """
    indices = np.asarray(indices, dtype=np.int64)
    weights = np.asarray(weights)
    if indices.shape != weights.shape or indices.ndim != 1:
        raise ValueError("indices and weights must be equal-length 1-D arrays")
    if indices.size and (indices.min() < 0 or indices.max() >= embed.shape[0]):
        raise ValueError(f"index out of range for {embed.shape[0]} embedding rows")
    pre = weights.astype(embed.dtype) @ embed[indices] if indices.size else \
        np.zeros(embed.shape[1], dtype=embed.dtype)
    return activation_apply(activation, pre)


def _ragged_positions(indptr, ids):
    """Canonical entry positions of several rows, concatenated.

    Returns (row_of_sample, positions, batch_indptr): ``positions[i]`` is an
    entry position, ``row_of_sample[i]`` tells which batch sample it belongs
    to, and ``batch_indptr`` bounds each sample's span.
    """
    lo = indptr[ids]
    hi = indptr[np.asarray(ids) + 1]
    counts = hi - lo
    total = int(counts.sum())
    batch_indptr = np.zeros(ids.size + 1, dtype=np.int64)
    np.cumsum(counts, out=batch_indptr[1:])
    sample_of = np.repeat(np.arange(ids.size), counts)
    positions = np.arange(total, dtype=np.int64) - np.repeat(batch_indptr[:-1], counts) \
        + np.repeat(lo, counts)
    return sample_of, positions, batch_indptr


@dataclass
class _SideTape:
    """Per-branch record: sparse gather structure plus activations."""

    sample_of: np.ndarray
    positions: np.ndarray        # entry positions in the side's value ordering
    col_ids: np.ndarray          # embedding-row index per gathered entry
    gather: sparse.csr_matrix    # (batch, table_rows) input-weight matrix
    pre1: np.ndarray             # first-layer pre-activation
    y: np.ndarray                # first-layer output
    trunk_tape: object = None
    z: np.ndarray = None
    # second joint branch (cfnet only)
    pre_v: np.ndarray = None
    v: np.ndarray = None


@dataclass
class PairTape:
    """Single-use record of one batched pair forward."""

    users: np.ndarray
    items: np.ndarray
    user_side: _SideTape = None
    item_side: _SideTape = None
    h_tape: object = None
    h_in: np.ndarray = None
    z1: np.ndarray = None
    fusion_tape: object = None
    fusion_in: np.ndarray = None
    scores: np.ndarray = None
    used: bool = False
    extras: dict = field(default_factory=dict)


def _user_side_forward(model: CfModel, users: np.ndarray) -> _SideTape:
    mtx = model.matrix
    sample_of, positions, batch_indptr = _ragged_positions(mtx.csr_indptr, users)
    col_ids = mtx.items[positions]
    weights = model.inputs.u_values[positions]
    gather = sparse.csr_matrix((weights, col_ids, batch_indptr),
                               shape=(users.size, mtx.n))
    pre1 = gather @ model.p_user
    y = activation_apply(model.first_act, pre1)
    side = _SideTape(sample_of=sample_of, positions=positions, col_ids=col_ids,
                     gather=gather, pre1=pre1, y=y)
    if model.user_trunk is not None:
        side.z, side.trunk_tape = mlp_forward_batch(model.user_trunk,
                                                    model.user_trunk_spec, y)
    else:
        side.z = y
    if model.a_user is not None:
        side.pre_v = gather @ model.a_user
        side.v = activation_apply(model.first_act, side.pre_v)
    return side


def _item_side_forward(model: CfModel, items: np.ndarray) -> _SideTape:
    mtx = model.matrix
    sample_of, positions, batch_indptr = _ragged_positions(mtx.csc_indptr, items)
    col_ids = mtx.users[mtx.csc_order[positions]]
    weights = model.inputs.v_values[positions]
    gather = sparse.csr_matrix((weights, col_ids, batch_indptr),
                               shape=(items.size, mtx.m))
    pre1 = gather @ model.p_item
    y = activation_apply(model.first_act, pre1)
    side = _SideTape(sample_of=sample_of, positions=positions, col_ids=col_ids,
                     gather=gather, pre1=pre1, y=y)
    if model.item_trunk is not None:
        side.z, side.trunk_tape = mlp_forward_batch(model.item_trunk,
                                                    model.item_trunk_spec, y)
    else:
        side.z = y
    if model.a_item is not None:
        side.pre_v = gather @ model.a_item
        side.v = activation_apply(model.first_act, side.pre_v)
    return side


def forward_pairs(model: CfModel, users, items):
    """Score a batch of (user, item) pairs. Returns (scores, tape)."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.shape != items.shape or users.ndim != 1:
        raise ValueError("users and items must be equal-length 1-D arrays")
    if users.size and (users.min() < 0 or users.max() >= model.matrix.m):
        raise ValueError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= model.matrix.n):
        raise ValueError("item index out of range")
    tape = PairTape(users=users, items=items)

    if model.variant == "mf":
        # Augmented-factor form [e, b, 1] . [e, 1, c + mu]: same association
        # order as the exported hypothesis, so export fidelity stays exact.
        b = users.size
        zu = np.concatenate([model.mf_user[users],
                             model.mf_user_bias[users, None],
                             np.ones((b, 1), dtype=model.dtype)], axis=1)
        zi = np.concatenate([model.mf_item[items],
                             np.ones((b, 1), dtype=model.dtype),
                             model.mf_item_bias[items, None] + model.mf_global],
                            axis=1)
        tape.scores = (zu * zi).sum(axis=1)
        return tape.scores, tape

    if model.variant == "ncf-id":
        zu, zi = model.e_user[users], model.e_item[items]
        tape.fusion_in = np.concatenate([zu, zi], axis=1)
    else:
        tape.user_side = _user_side_forward(model, users)
        tape.item_side = _item_side_forward(model, items)
        zu, zi = tape.user_side.z, tape.item_side.z
        if model.variant in CFNET_VARIANTS:
            tape.z1 = zu * zi
            tape.h_in = np.concatenate([tape.user_side.v, tape.item_side.v], axis=1)
            z2, tape.h_tape = mlp_forward_batch(model.h_params, model.h_spec, tape.h_in)
            tape.fusion_in = np.concatenate([tape.z1, z2], axis=1)
        else:
            tape.fusion_in = np.concatenate([zu, zi], axis=1)

    out, tape.fusion_tape = mlp_forward_batch(model.fusion, model.fusion_spec,
                                              tape.fusion_in)
    tape.scores = out[:, 0]
    return tape.scores, tape


def forward_pair(model: CfModel, j: int, k: int):
    """Single-pair convenience wrapper; a batch of one underneath."""
    scores, tape = forward_pairs(model, np.array([j]), np.array([k]))
    return float(scores[0]), tape


@dataclass
class GradientSet:
    """Gradients grouped the way the optimizers consume them.

    ``network`` mirrors ``CfModel.parameters()``. Input gradients are dense
    over the value arrays; ``*_touched`` lists the positions this batch
    actually reached (unique, sorted), which is what lazy sparse optimizer
    updates operate on.
    """

    network: dict[str, np.ndarray]
    input_u_grad: np.ndarray = None
    input_u_touched: np.ndarray = None
    input_v_grad: np.ndarray = None
    input_v_touched: np.ndarray = None


def _side_backward(model, side: _SideTape, g_z, table, a_table, g_v, input_grad):
    """Backpropagate one branch down to its tables and input values.

    Returns (d_table, d_a_table); accumulates input-value gradients into
    ``input_grad`` in place, or skips that work entirely when ``input_grad``
    is None (frozen inputs).
    """
    if side.trunk_tape is not None:
        trunk_grads, g_y = mlp_backward_batch(side.trunk_tape, g_z)
    else:
        trunk_grads, g_y = None, g_z
    g_pre1 = g_y * activation_grad(model.first_act, side.pre1)
    d_table = (side.gather.T @ g_pre1)
    if input_grad is not None:
        contrib = (g_pre1[side.sample_of] * table[side.col_ids]).sum(axis=1)
        np.add.at(input_grad, side.positions, contrib)
    d_a = None
    if g_v is not None:
        g_pre_v = g_v * activation_grad(model.first_act, side.pre_v)
        d_a = (side.gather.T @ g_pre_v)
        if input_grad is not None:
            contrib_v = (g_pre_v[side.sample_of] * a_table[side.col_ids]).sum(axis=1)
            np.add.at(input_grad, side.positions, contrib_v)
    return trunk_grads, d_table, d_a


def backward_pairs(model: CfModel, tape: PairTape, dscores,
                   want_input_grads: bool | None = None) -> GradientSet:
    """Gradients of a scalar loss given d(loss)/d(score) per pair.

    Produces gradients for every network parameter and for exactly the input
    values gathered by this batch; positions outside the non-zero pattern are
    never created or written. Input-value gradients are computed only when
    the inputs are trainable (the default follows the variant), so frozen
    configurations carry none by construction; a training schedule that
    overrides input trainability passes ``want_input_grads`` explicitly.
    """
    if tape.used:
        raise ValueError("tape already consumed; rerun the forward pass")
    tape.used = True
    dscores = np.asarray(dscores)
    if dscores.shape != tape.scores.shape:
        raise ValueError(f"dscores shape {dscores.shape} != scores {tape.scores.shape}")
    if dscores.dtype != model.dtype:
        dscores = dscores.astype(model.dtype)
    grads: dict[str, np.ndarray] = {}
    out = GradientSet(network=grads)

    if model.variant == "mf":
        users, items = tape.users, tape.items
        d_eu = np.zeros_like(model.mf_user)
        d_ei = np.zeros_like(model.mf_item)
        np.add.at(d_eu, users, dscores[:, None] * model.mf_item[items])
        np.add.at(d_ei, items, dscores[:, None] * model.mf_user[users])
        d_bu = np.zeros_like(model.mf_user_bias)
        d_bi = np.zeros_like(model.mf_item_bias)
        np.add.at(d_bu, users, dscores)
        np.add.at(d_bi, items, dscores)
        grads.update({"mf.user_factors": d_eu, "mf.item_factors": d_ei,
                      "mf.user_bias": d_bu, "mf.item_bias": d_bi,
                      "mf.global_bias": np.asarray(dscores.sum(), dtype=model.dtype)})
        return out

    def add_mlp_grads(prefix, spec, mlp_grads):
        for l, (w, b) in enumerate(zip(mlp_grads.weights, mlp_grads.biases)):
            grads[f"{prefix}.w{l}"] = w
            if spec.use_biases:
                grads[f"{prefix}.b{l}"] = b

    fusion_grads, g_fin = mlp_backward_batch(tape.fusion_tape, dscores[:, None])
    add_mlp_grads("fusion", model.fusion_spec, fusion_grads)

    if model.variant == "ncf-id":
        du = model.e_user.shape[1]
        g_zu, g_zi = g_fin[:, :du], g_fin[:, du:]
        d_eu = np.zeros_like(model.e_user)
        d_ei = np.zeros_like(model.e_item)
        np.add.at(d_eu, tape.users, g_zu)
        np.add.at(d_ei, tape.items, g_zi)
        grads.update({"id.user_embed": d_eu, "id.item_embed": d_ei})
        return out

    uside, iside = tape.user_side, tape.item_side
    g_vu = g_vi = None
    if model.variant in CFNET_VARIANTS:
        d1 = tape.z1.shape[1]
        g_z1, g_z2 = g_fin[:, :d1], g_fin[:, d1:]
        g_zu = g_z1 * iside.z
        g_zi = g_z1 * uside.z
        h_grads, g_hin = mlp_backward_batch(tape.h_tape, g_z2)
        add_mlp_grads("cfnet.h", model.h_spec, h_grads)
        dv = uside.v.shape[1]
        g_vu, g_vi = g_hin[:, :dv], g_hin[:, dv:]
    else:
        du = uside.z.shape[1]
        g_zu, g_zi = g_fin[:, :du], g_fin[:, du:]

    if want_input_grads is None:
        want_input_grads = model.inputs_trainable
    if want_input_grads:
        out.input_u_grad = np.zeros_like(model.inputs.u_values)
        out.input_v_grad = np.zeros_like(model.inputs.v_values)
    u_trunk_grads, d_pu, d_au = _side_backward(
        model, uside, g_zu, model.p_user, model.a_user, g_vu, out.input_u_grad)
    i_trunk_grads, d_pi, d_ai = _side_backward(
        model, iside, g_zi, model.p_item, model.a_item, g_vi, out.input_v_grad)
    grads["user.first_layer"] = d_pu
    grads["item.first_layer"] = d_pi
    if u_trunk_grads is not None:
        add_mlp_grads("user.trunk", model.user_trunk_spec, u_trunk_grads)
    if i_trunk_grads is not None:
        add_mlp_grads("item.trunk", model.item_trunk_spec, i_trunk_grads)
    if d_au is not None:
        grads["cfnet.user_transform"] = d_au
        grads["cfnet.item_transform"] = d_ai
    if want_input_grads:
        out.input_u_touched = np.unique(uside.positions)
        out.input_v_touched = np.unique(iside.positions)
    return out


def backward_pair(model: CfModel, tape: PairTape, dscore: float) -> GradientSet:
    """Single-pair convenience wrapper around the batch backward."""
    return backward_pairs(model, tape, np.array([dscore]))


@dataclass
class Hypothesis:
    """The deployable scoring artifact: representation tables plus the head.

    Everything the training-time machinery used to build the tables (branch
    networks, input values) is gone; scoring needs only lookups and the
    fusion head. ``fusion`` is one of "concat", "dot", "cfnet"; the cfnet
    form carries the second-branch precursor tables and its MLP as well.
    """

    fusion: str
    z_user: np.ndarray
    z_item: np.ndarray
    head_spec: MlpSpec = None
    head: MlpParams = None
    v_user: np.ndarray = None
    v_item: np.ndarray = None
    h_spec: MlpSpec = None
    h_params: MlpParams = None


def _copy_mlp(params: MlpParams) -> MlpParams:
    return MlpParams(weights=[w.copy() for w in params.weights],
                     biases=[b.copy() for b in params.biases])


def _branch_representations(model: CfModel, side: str, chunk: int = 2048):
    """All-entity branch outputs (and second-branch precursors) by chunks."""
    count = model.matrix.m if side == "user" else model.matrix.n
    forward = _user_side_forward if side == "user" else _item_side_forward
    z_rows, v_rows = [], []
    for lo in range(0, count, chunk):
        ids = np.arange(lo, min(lo + chunk, count), dtype=np.int64)
        tape = forward(model, ids)
        z_rows.append(tape.z)
        if tape.v is not None:
            v_rows.append(tape.v)
    z = np.concatenate(z_rows, axis=0)
    v = np.concatenate(v_rows, axis=0) if v_rows else None
    return z, v


def export_hypothesis(model: CfModel) -> Hypothesis:
    """Freeze the model into representation tables plus the fusion head."""
    if model.variant == "mf":
        # Fold the biases into augmented factors so a plain dot product
        # reproduces factors + user bias + item bias + global offset.
        m, n = model.matrix.m, model.matrix.n
        one_m = np.ones((m, 1), dtype=model.dtype)
        one_n = np.ones((n, 1), dtype=model.dtype)
        z_user = np.concatenate([model.mf_user, model.mf_user_bias[:, None], one_m], axis=1)
        z_item = np.concatenate(
            [model.mf_item, one_n, model.mf_item_bias[:, None] + model.mf_global], axis=1)
        return Hypothesis(fusion="dot", z_user=z_user, z_item=z_item)

    if model.variant == "ncf-id":
        return Hypothesis(fusion="concat", z_user=model.e_user.copy(),
                          z_item=model.e_item.copy(),
                          head_spec=model.fusion_spec, head=_copy_mlp(model.fusion))

    z_user, v_user = _branch_representations(model, "user")
    z_item, v_item = _branch_representations(model, "item")
    if model.variant in CFNET_VARIANTS:
        return Hypothesis(fusion="cfnet", z_user=z_user, z_item=z_item,
                          head_spec=model.fusion_spec, head=_copy_mlp(model.fusion),
                          v_user=v_user, v_item=v_item,
                          h_spec=model.h_spec, h_params=_copy_mlp(model.h_params))
    return Hypothesis(fusion="concat", z_user=z_user, z_item=z_item,
                      head_spec=model.fusion_spec, head=_copy_mlp(model.fusion))


def score_hypothesis_pairs(hyp: Hypothesis, users, items) -> np.ndarray:
    """Score (user, item) pairs through the exported artifact."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    zu, zi = hyp.z_user[users], hyp.z_item[items]
    if hyp.fusion == "dot":
        return (zu * zi).sum(axis=1)
    if hyp.fusion == "concat":
        out, _ = mlp_forward_batch(hyp.head, hyp.head_spec,
                                   np.concatenate([zu, zi], axis=1))
        return out[:, 0]
    if hyp.fusion == "cfnet":
        z1 = zu * zi
        h_in = np.concatenate([hyp.v_user[users], hyp.v_item[items]], axis=1)
        z2, _ = mlp_forward_batch(hyp.h_params, hyp.h_spec, h_in)
        out, _ = mlp_forward_batch(hyp.head, hyp.head_spec,
                                   np.concatenate([z1, z2], axis=1))
        return out[:, 0]
    raise ValueError(f"unknown fusion kind {hyp.fusion!r}")


def score_hypothesis(hyp: Hypothesis, j: int, k: int) -> float:
    return float(score_hypothesis_pairs(hyp, np.array([j]), np.array([k]))[0])


def score_all_items(hyp: Hypothesis, j: int) -> np.ndarray:
    """Scores of every item for one user, via the representation tables."""
    items = np.arange(hyp.z_item.shape[0], dtype=np.int64)
    users = np.full(items.size, j, dtype=np.int64)
    return score_hypothesis_pairs(hyp, users, items)
