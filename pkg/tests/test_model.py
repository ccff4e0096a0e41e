import numpy as np
import pytest

from inputcf.data import InteractionMatrix, init_inputs
from inputcf.model import (
    CFNET_VARIANTS,
    VARIANTS,
    ModelConfig,
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
from inputcf.rng import STREAM_INIT, stream

from oracles import act_scalar, central_fd
from synthetic import random_matrix


def small_config(variant, precision="f32", activation="tanh", **kw):
    base = dict(
        variant=variant,
        user_layers=(4,),
        item_layers=(4,),
        fusion_layers=(5, 1),
        activation=activation,
        output_activation="identity",
        precision=precision,
        embed_dim=4,
        cfnet_embed_dim=3,
        cfnet_h_layers=(4,),
    )
    base.update(kw)
    return ModelConfig(**base)


def build_small(variant, seed=0, m=5, n=6, **kw):
    mat = random_matrix(m, n, density=0.5, seed=seed)
    cfg = small_config(variant, **kw)
    model = build_model(cfg, mat, stream(seed, STREAM_INIT))
    return model, mat


# ---------------------------------------------------------------- first layer


def test_first_layer_unit_basis_rows():
    embed = np.array([[1.0, 0.0], [9.0, 9.0], [0.0, 1.0]])
    out = first_layer([0, 2], [1.0, 2.0], embed, "identity")
    assert out.tolist() == [1.0, 2.0]


def test_first_layer_cold_entity():
    embed = np.random.default_rng(0).standard_normal((4, 3))
    out = first_layer([], [], embed, "sigmoid")
    assert out.tolist() == [0.5, 0.5, 0.5]
    assert first_layer([], [], embed, "identity").tolist() == [0.0, 0.0, 0.0]


def test_first_layer_matches_dense_matvec():
    rng = np.random.default_rng(1)
    embed = rng.standard_normal((12, 7))
    idx = np.array([2, 5, 9])
    w = rng.standard_normal(3)
    dense_row = np.zeros(12)
    dense_row[idx] = w
    expected = np.tanh(dense_row @ embed)
    got = first_layer(idx, w, embed, "tanh")
    rel = np.abs(got - expected) / np.maximum(np.abs(expected), 1e-12)
    assert rel.max() < 1e-12


def test_first_layer_index_range_checked():
    embed = np.zeros((3, 2))
    with pytest.raises(ValueError, match="range"):
        first_layer([3], [1.0], embed, "identity")
    with pytest.raises(ValueError, match="range"):
        first_layer([-1], [1.0], embed, "identity")


def test_first_layer_permutation_invariance():
    rng = np.random.default_rng(2)
    embed = rng.standard_normal((10, 6))
    idx = np.arange(8)
    w = rng.standard_normal(8)
    base = first_layer(idx, w, embed, "identity")
    perm = rng.permutation(8)
    swapped = first_layer(idx[perm], w[perm], embed, "identity")
    rel = np.abs(swapped - base) / np.maximum(np.abs(base), 1e-12)
    assert rel.max() < 1e-6


def test_first_layer_linear_scaling():
    rng = np.random.default_rng(3)
    embed = rng.standard_normal((8, 4))
    idx = np.array([1, 3, 6])
    w = rng.standard_normal(3)
    assert np.array_equal(
        first_layer(idx, 2.0 * w, embed, "identity"),
        2.0 * first_layer(idx, w, embed, "identity"),
    )


# --------------------------------------------------------------- equivalence


@pytest.mark.parametrize("pair", [("ncf", "inp-ncf"), ("cfnet", "inp-cfnet")])
def test_frozen_inputs_reduce_to_fixed_variant(pair):
    """Same seed, inputs left at initialization: scores are bit-identical."""
    fixed_name, learnable_name = pair
    mat = random_matrix(8, 11, density=0.4, seed=7)
    fixed = build_model(small_config(fixed_name), mat, stream(3, STREAM_INIT))
    learnable = build_model(small_config(learnable_name), mat, stream(3, STREAM_INIT))
    rng = np.random.default_rng(0)
    users = rng.integers(0, 8, size=1000)
    items = rng.integers(0, 11, size=1000)
    a, _ = forward_pairs(fixed, users, items)
    b, _ = forward_pairs(learnable, users, items)
    assert np.array_equal(a, b)


def test_zero_parameters_score_zero():
    model, _ = build_small("inp-ncf", activation="identity")
    for tensor in model.parameters().values():
        tensor[...] = 0
    scores, _ = forward_pairs(model, np.arange(5), np.arange(5))
    assert scores.tolist() == [0.0] * 5


# ------------------------------------------------------- straight-line oracle


def naive_branch(model, weights, rows, table, trunk_spec, trunk):
    d = table.shape[1]
    y = []
    for t in range(d):
        s = 0.0
        for w, r in zip(weights, rows):
            s += float(w) * float(table[r, t])
        y.append(act_scalar(model.first_act, s))
    if trunk is None:
        return y
    h = y
    for l, (W, b) in enumerate(zip(trunk.weights, trunk.biases)):
        nxt = []
        for col in range(W.shape[1]):
            s = float(b[col])
            for row in range(W.shape[0]):
                s += h[row] * float(W[row, col])
            nxt.append(act_scalar(trunk_spec.activation_for_layer(l), s))
        h = nxt
    return h


def naive_mlp(spec, params, x):
    h = list(x)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        nxt = []
        for col in range(W.shape[1]):
            s = float(b[col])
            for row in range(W.shape[0]):
                s += h[row] * float(W[row, col])
            nxt.append(act_scalar(spec.activation_for_layer(l), s))
        h = nxt
    return h


def naive_score(model, j, k):
    mat = model.matrix
    items_row, upos = mat.user_slice(j)
    users_col, vpos = mat.item_slice(k)
    zu = naive_branch(model, model.inputs.u_values[upos], items_row,
                      model.p_user, model.user_trunk_spec, model.user_trunk)
    zi = naive_branch(model, model.inputs.v_values[vpos], users_col,
                      model.p_item, model.item_trunk_spec, model.item_trunk)
    if model.variant in CFNET_VARIANTS:
        z1 = [a * b for a, b in zip(zu, zi)]
        vu = naive_branch(model, model.inputs.u_values[upos], items_row,
                          model.a_user, None, None)
        vi = naive_branch(model, model.inputs.v_values[vpos], users_col,
                          model.a_item, None, None)
        z2 = naive_mlp(model.h_spec, model.h_params, vu + vi)
        fusion_in = z1 + z2
    else:
        fusion_in = zu + zi
    return naive_mlp(model.fusion_spec, model.fusion, fusion_in)[0]


@pytest.mark.parametrize("variant", ["inp-ncf", "inp-cfnet"])
def test_forward_matches_naive_scalar_evaluation(variant):
    model, mat = build_small(
        variant, precision="f64", user_layers=(4, 3), item_layers=(5, 3)
    )
    for j, k in ((0, 0), (2, 5), (4, 1), (3, 3)):
        got, _ = forward_pair(model, j, k)
        assert got == pytest.approx(naive_score(model, j, k), rel=1e-12)


# ------------------------------------------------------------------ backward


def test_backward_frozen_variant_has_no_input_grads():
    model, _ = build_small("ncf")
    scores, tape = forward_pairs(model, np.array([0, 1]), np.array([2, 3]))
    grads = backward_pairs(model, tape, np.ones(2, dtype=model.dtype))
    assert grads.input_u_grad is None and grads.input_v_grad is None
    assert grads.input_u_touched is None and grads.input_v_touched is None


def test_backward_input_grads_on_explicit_request():
    # A schedule may train the inputs of a fixed-input variant; asking for
    # the gradients explicitly must produce the same values the trainable
    # twin would see, since the forward math is identical.
    frozen, _ = build_small("ncf", precision="f64")
    twin, _ = build_small("inp-ncf", precision="f64")
    users, items = np.array([0, 1, 3]), np.array([2, 0, 4])
    d = np.array([1.0, -0.5, 2.0])
    _, tape_f = forward_pairs(frozen, users, items)
    g_f = backward_pairs(frozen, tape_f, d, want_input_grads=True)
    _, tape_t = forward_pairs(twin, users, items)
    g_t = backward_pairs(twin, tape_t, d)
    assert np.array_equal(g_f.input_u_grad, g_t.input_u_grad)
    assert np.array_equal(g_f.input_v_grad, g_t.input_v_grad)
    assert g_f.input_u_grad.any()


def test_backward_one_unit_linear_chain():
    mat = InteractionMatrix(1, 1, [0], [0], [5.0])
    cfg = ModelConfig(
        variant="inp-ncf", user_layers=(1,), item_layers=(1,),
        fusion_layers=(1,), activation="identity", use_biases=False,
        precision="f64",
    )
    model = build_model(cfg, mat, stream(0, STREAM_INIT))
    a = float(model.p_user[0, 0])
    b = float(model.p_item[0, 0])
    f1, f2 = (float(v) for v in model.fusion.weights[0][:, 0])
    u = float(model.inputs.u_values[0])  # 5 / value_max = 1.0
    v = float(model.inputs.v_values[0])
    score, tape = forward_pair(model, 0, 0)
    assert score == pytest.approx(f1 * u * a + f2 * v * b, rel=1e-15)
    grads = backward_pairs(model, tape, np.array([1.0]))
    assert grads.input_u_grad[0] == pytest.approx(f1 * a, rel=1e-15)
    assert grads.input_v_grad[0] == pytest.approx(f2 * b, rel=1e-15)
    assert grads.network["user.first_layer"][0, 0] == pytest.approx(f1 * u, rel=1e-15)
    assert grads.network["fusion.w0"][0, 0] == pytest.approx(u * a, rel=1e-15)


def _fd_check_model(model, users, items, rtol=1e-4):
    rng = np.random.default_rng(5)
    c = rng.standard_normal(users.size)

    def loss():
        scores, _ = forward_pairs(model, users, items)
        return float(scores @ c)

    scores, tape = forward_pairs(model, users, items)
    grads = backward_pairs(model, tape, c.astype(model.dtype))
    named = dict(grads.network)
    tensors = dict(model.parameters())
    if grads.input_u_grad is not None:
        named["inputs!user"] = grads.input_u_grad
        named["inputs!item"] = grads.input_v_grad
        tensors["inputs!user"] = model.inputs.u_values
        tensors["inputs!item"] = model.inputs.v_values
    for name, tensor in tensors.items():
        fd = central_fd(loss, [tensor], eps=1e-5)[0]
        analytic = named[name]
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
        worst = (np.abs(analytic - fd) / denom).max()
        assert worst < rtol, f"{name}: rel err {worst}"


def test_gradients_match_finite_differences_tanh():
    model, _ = build_small(
        "inp-ncf", precision="f64", user_layers=(3, 3), m=4, n=5
    )
    _fd_check_model(model, np.array([0, 1, 3, 3]), np.array([0, 2, 4, 1]))


def test_gradients_match_finite_differences_cfnet():
    model, _ = build_small("inp-cfnet", precision="f64", m=4, n=5)
    _fd_check_model(model, np.array([0, 2, 3]), np.array([1, 4, 0]))


def test_gradients_match_finite_differences_mf():
    model, _ = build_small("mf", precision="f64", m=4, n=5)
    _fd_check_model(model, np.array([0, 1, 2]), np.array([2, 3, 0]))


def test_tape_single_use():
    model, _ = build_small("inp-ncf")
    _, tape = forward_pairs(model, np.array([0]), np.array([0]))
    backward_pairs(model, tape, np.ones(1, dtype=model.dtype))
    with pytest.raises(ValueError, match="consumed"):
        backward_pairs(model, tape, np.ones(1, dtype=model.dtype))


def test_structural_zero_positions_never_touched():
    model, mat = build_small("inp-ncf", m=6, n=7)
    users = np.array([0, 2, 2])
    items = np.array([1, 3, 6])
    _, tape = forward_pairs(model, users, items)
    grads = backward_pairs(model, tape, np.ones(3, dtype=model.dtype))
    legal_u = set()
    for j in set(users.tolist()):
        lo, hi = mat.csr_indptr[j], mat.csr_indptr[j + 1]
        legal_u.update(range(lo, hi))
    assert set(grads.input_u_touched.tolist()) <= legal_u
    outside = np.setdiff1d(np.arange(mat.nnz), grads.input_u_touched)
    assert not grads.input_u_grad[outside].any()


# ---------------------------------------------------------------- hypothesis


@pytest.mark.parametrize("variant", VARIANTS)
def test_hypothesis_fidelity_all_pairs(variant):
    model, mat = build_small(variant, m=5, n=6)
    hyp = export_hypothesis(model)
    users, items = np.divmod(np.arange(5 * 6), 6)
    direct, _ = forward_pairs(model, users, items)
    via_hyp = score_hypothesis_pairs(hyp, users, items)
    assert np.array_equal(direct, via_hyp)


def test_hypothesis_degenerate_single_cell():
    mat = InteractionMatrix(1, 1, [0], [0], [2.0])
    model = build_model(small_config("inp-ncf"), mat, stream(0, STREAM_INIT))
    hyp = export_hypothesis(model)
    assert hyp.z_user.shape[0] == 1 and hyp.z_item.shape[0] == 1
    direct, _ = forward_pair(model, 0, 0)
    assert score_hypothesis(hyp, 0, 0) == direct


def test_score_all_items_matches_pair_loop():
    # Batched and one-at-a-time scoring take different BLAS paths, so bit
    # equality is not guaranteed; at f64 they must agree to ~1e-12.
    model, mat = build_small("cfnet", m=4, n=9, precision="f64")
    hyp = export_hypothesis(model)
    for j in range(4):
        row = score_all_items(hyp, j)
        per_pair = np.array([score_hypothesis(hyp, j, k) for k in range(9)])
        np.testing.assert_allclose(row, per_pair, rtol=1e-12, atol=1e-12)


# ----------------------------------------------------------------- baselines


def test_mf_zero_factors_constant_global_bias():
    model, _ = build_small("mf", m=3, n=4)
    model.mf_user[...] = 0
    model.mf_item[...] = 0
    model.mf_global[...] = 3.5
    scores, _ = forward_pairs(model, np.array([0, 1, 2]), np.array([3, 0, 2]))
    assert scores.tolist() == pytest.approx([3.5, 3.5, 3.5])


def test_ncf_id_uses_embedding_rows():
    model, _ = build_small("ncf-id", m=4, n=5)
    _, tape = forward_pairs(model, np.array([2]), np.array([3]))
    expected = np.concatenate([model.e_user[2], model.e_item[3]])
    assert np.array_equal(tape.fusion_in[0], expected)


# -------------------------------------------------------------------- counts


def test_summation_fusion_parameter_formula():
    assert summation_fusion_param_count(m=3, n=4, p=2, d=8, num_f_layers=2) == 136


def test_input_count_is_twice_nnz():
    mat = random_matrix(5, 8, density=0.4, seed=1)
    assert input_count(mat) == 2 * mat.nnz
    empty = InteractionMatrix(3, 3, [], [], [])
    assert input_count(empty) == 0


def test_network_param_count_hand_tally():
    mat = random_matrix(3, 4, density=0.6, seed=2)
    cfg = ModelConfig(
        variant="inp-ncf", user_layers=(5,), item_layers=(5,),
        fusion_layers=(6, 1), activation="tanh",
    )
    model = build_model(cfg, mat, stream(0, STREAM_INIT))
    # P_u (4x5) + P_i (3x5) + fusion 10->6 (+6 bias) -> 1 (+1 bias)
    assert model.network_param_count() == 20 + 15 + 60 + 6 + 6 + 1


def test_config_validation():
    with pytest.raises(ValueError, match="output width"):
        small_config("ncf", fusion_layers=(4, 2))
    with pytest.raises(ValueError, match="equal branch"):
        small_config("cfnet", user_layers=(4,), item_layers=(3,))
    with pytest.raises(ValueError, match="variant"):
        small_config("autoencoder")


def test_matched_variants_share_initial_weights():
    mat = random_matrix(6, 7, density=0.4, seed=9)
    a = build_model(small_config("ncf"), mat, stream(11, STREAM_INIT))
    b = build_model(small_config("inp-ncf"), mat, stream(11, STREAM_INIT))
    for name, tensor in a.parameters().items():
        assert np.array_equal(tensor, b.parameters()[name]), name
