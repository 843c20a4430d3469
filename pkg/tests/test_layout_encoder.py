"""Layout encoder: message passing, equivariance, and gradients.

The oracle here is a deliberately naive float64 reimplementation that loops
over edges one at a time; the production code is batched float32.
"""

import numpy as np
import pytest

from scenescout import layout_encoder as le
from scenescout import nn
from scenescout import scenegraph as sg
from scenescout.errors import ShapeError
from scenescout.rng import generator

# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def mlp64(net: nn.Mlp, v: np.ndarray) -> np.ndarray:
    h = np.asarray(v, dtype=np.float64)
    for layer in net.layers:
        z = layer.weight.astype(np.float64) @ h + layer.bias.astype(np.float64)
        if layer.activation == "relu":
            h = np.maximum(z, 0.0)
        elif layer.activation == "silu":
            h = z / (1.0 + np.exp(-z))
        else:
            h = z
    return h


def oracle_encode(model: le.LayoutEncoder, g: sg.SceneGraph):
    """Unbatched float64 message-sum reference for the whole encoder."""
    n = len(g)
    if n == 0:
        return np.zeros(model.d), np.zeros((0, 3))
    h = [mlp64(model.input_proj, node.semantic_feature) for node in g.nodes]
    x = [node.position.astype(np.float64).copy() for node in g.nodes]
    table = model.relation_table.astype(np.float64)

    def edge_vec(edge):
        k = sg.EDGE_KINDS.index(edge.kind)
        lab = sg.RELATION_LABELS.index(edge.relation)
        onehot = np.zeros(len(sg.EDGE_KINDS))
        onehot[k] = 1.0
        return np.concatenate([table[k, lab], onehot])

    for layer in model.layers:
        h_new = [v.copy() for v in h]
        for edge in g.edges:
            i, j = g.node_index(edge.dst), g.node_index(edge.src)
            d2 = float(((x[i] - x[j]) ** 2).sum())
            u = np.concatenate([[d2], h[i], h[j], edge_vec(edge)])
            h_new[i] = h_new[i] + mlp64(layer.f_h, u)
        deg = {i: 0 for i in range(n)}
        for edge in g.edges:
            deg[g.node_index(edge.dst)] += 1
        x_new = [v.copy() for v in x]
        for edge in g.edges:
            i, j = g.node_index(edge.dst), g.node_index(edge.src)
            d2 = float(((x[i] - x[j]) ** 2).sum())
            v = np.concatenate([[d2], h_new[i], h_new[j], edge_vec(edge)])
            s = float(np.tanh(mlp64(layer.f_x, v)[0]))
            x_new[i] = x_new[i] + (x[i] - x[j]) * s / (deg[i] + 1)
        h, x = h_new, x_new
    return np.mean(h, axis=0), np.stack(x)


def small_model(seed=0, d_sem=4, d=5, e_rel=3, n_layers=2, hidden=6):
    return le.new_layout_encoder(seed, d_sem=d_sem, d=d, e_rel=e_rel, n_layers=n_layers, hidden=hidden)


def random_graph(seed, n_nodes, d_sem=4, span=3.0):
    rng = generator(seed, "legraph")
    nodes = [
        sg.SceneNode(
            node_id=f"n{i}",
            position=rng.uniform(-span, span, 3),
            semantic_feature=rng.standard_normal(d_sem).astype(np.float32),
        )
        for i in range(n_nodes)
    ]
    physical, semantic = [], []
    labels_p = ["on", "adjacent", "supports", "facing"]
    labels_s = ["same-style", "same-function"]
    for i in range(n_nodes):
        for j in range(n_nodes):
            if i == j:
                continue
            if rng.random() < 0.4:
                physical.append((f"n{i}", f"n{j}", labels_p[int(rng.integers(len(labels_p)))]))
            if rng.random() < 0.25:
                semantic.append((f"n{i}", f"n{j}", labels_s[int(rng.integers(len(labels_s)))]))
    return sg.build_graph(nodes, physical, semantic)


# ---------------------------------------------------------------------------
# init_node_features
# ---------------------------------------------------------------------------


def test_h0_zero_feature_zero_bias_projection():
    model = small_model()
    g = sg.build_graph([sg.SceneNode("a", np.ones(3), np.zeros(4, np.float32))])
    h0 = le.init_node_features(model, g)
    assert np.array_equal(h0[0], np.zeros(model.d, np.float32))


def test_h0_ignores_positions():
    model = small_model()
    feat = generator(2).standard_normal(4).astype(np.float32)
    g = sg.build_graph([
        sg.SceneNode("a", [0.0, 0, 0], feat),
        sg.SceneNode("b", [9.0, -4, 2], feat),
    ])
    h0 = le.init_node_features(model, g)
    assert np.array_equal(h0[0], h0[1])


def test_h0_equals_direct_projection():
    model = small_model()
    feat = generator(3).standard_normal(4).astype(np.float32)
    g = sg.build_graph([sg.SceneNode("a", [1.0, 2, 3], feat)])
    h0 = le.init_node_features(model, g)
    assert np.allclose(h0[0], nn.mlp_forward(model.input_proj, feat), atol=1e-7)


def test_h0_dim_mismatch():
    model = small_model(d_sem=4)
    g = sg.build_graph([sg.SceneNode("a", [0.0, 0, 0], np.zeros(7, np.float32))])
    with pytest.raises(ShapeError):
        le.init_node_features(model, g)


# ---------------------------------------------------------------------------
# egcl_forward
# ---------------------------------------------------------------------------


def test_isolated_node_is_fixed_point():
    model = small_model()
    g = random_graph(1, 1)
    h = generator(4).standard_normal((1, model.d)).astype(np.float32)
    x = g.positions()
    h2, x2 = le.egcl_forward(model.layers[0], h, x, g, model)
    assert np.array_equal(h2, h) and np.array_equal(x2, x)


def test_coincident_nodes_have_zero_position_update():
    model = small_model()
    feat = generator(5).standard_normal(4).astype(np.float32)
    g = sg.build_graph(
        [sg.SceneNode("a", [1.0, 1, 1], feat), sg.SceneNode("b", [1.0, 1, 1], feat)],
        physical_relations=[("a", "b", "adjacent"), ("b", "a", "adjacent")],
    )
    h = generator(6).standard_normal((2, model.d)).astype(np.float32)
    _, x2 = le.egcl_forward(model.layers[0], h, g.positions(), g, model)
    assert np.array_equal(x2, g.positions())


def test_layer_matches_per_edge_oracle():
    model = small_model(seed=8, n_layers=1)
    g = sg.build_graph(
        [
            sg.SceneNode("a", [0.0, 0, 0], generator(7, "a").standard_normal(4).astype(np.float32)),
            sg.SceneNode("b", [1.0, 0, 0], generator(7, "b").standard_normal(4).astype(np.float32)),
            sg.SceneNode("c", [2.0, 0.5, 0], generator(7, "c").standard_normal(4).astype(np.float32)),
        ],
        physical_relations=[("a", "b", "on"), ("b", "c", "adjacent")],
        semantic_relations=[("c", "a", "same-style")],
    )
    vec, pos = le.encode_layout(model, g)
    ovec, opos = oracle_encode(model, g)
    assert np.allclose(vec, ovec, atol=1e-5)
    assert np.allclose(pos, opos, atol=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_full_encoder_matches_oracle(seed):
    model = small_model(seed=seed)
    g = random_graph(seed, int(generator(seed, "n").integers(2, 7)))
    vec, pos = le.encode_layout(model, g)
    ovec, opos = oracle_encode(model, g)
    assert np.allclose(vec, ovec, atol=1e-4)
    assert np.allclose(pos, opos, atol=1e-5)


def test_residual_identity_with_zero_weights():
    model = small_model()
    for layer in model.layers:
        for net in (layer.f_h, layer.f_x):
            for lay in net.layers:
                lay.weight[:] = 0
                lay.bias[:] = 0
    g = random_graph(9, 5)
    h = generator(10).standard_normal((5, model.d)).astype(np.float32)
    x = g.positions()
    h2, x2 = le.egcl_forward(model.layers[0], h, x, g, model)
    assert np.array_equal(h2, h) and np.array_equal(x2, x)


# ---------------------------------------------------------------------------
# encode_layout
# ---------------------------------------------------------------------------


def test_empty_graph_encodes_to_zero():
    model = small_model()
    vec, pos = le.encode_layout(model, sg.empty_graph(4))
    assert np.array_equal(vec, np.zeros(model.d, np.float32))
    assert pos.shape == (0, 3)


def test_single_node_passes_through_residual_layers():
    model = small_model()
    feat = generator(11).standard_normal(4).astype(np.float32)
    g = sg.build_graph([sg.SceneNode("a", [2.0, -1, 0.5], feat)])
    vec, pos = le.encode_layout(model, g)
    # no edges: every layer is the identity, so e_layout = h0
    assert np.allclose(vec, nn.mlp_forward(model.input_proj, feat), atol=1e-7)
    assert np.allclose(pos[0], g.nodes[0].position)


def test_feature_invariance_and_position_equivariance():
    model = small_model(seed=12)
    for seed in range(20):
        g = random_graph(seed, int(generator(seed, "nn").integers(2, 11)))
        t = sg.random_rigid_transform(generator(seed, "t"), max_translation=100.0)
        vec, pos = le.encode_layout(model, g)
        vec_t, pos_t = le.encode_layout(model, sg.apply_rigid_transform(g, t))
        assert np.abs(vec_t - vec).max() <= 1e-5
        assert np.abs(pos_t - t.apply(pos)).max() <= 1e-4


def test_permutation_invariance():
    model = small_model(seed=13)
    g = random_graph(14, 6)
    perm = generator(15).permutation(6)
    nodes = [g.nodes[i] for i in perm]
    g_perm = sg.SceneGraph(nodes=tuple(nodes), edges=g.edges, d_sem=g.d_sem)
    vec, _ = le.encode_layout(model, g)
    vec_p, _ = le.encode_layout(model, g_perm)
    assert np.abs(vec - vec_p).max() <= 1e-6


def test_edge_message_inputs_invariant_under_transform():
    model = small_model(seed=16)
    g = random_graph(17, 5)
    t = sg.random_rigid_transform(generator(18), max_translation=100.0)
    _, _, cache = le.encode_layout_cached(model, g)
    _, _, cache_t = le.encode_layout_cached(model, sg.apply_rigid_transform(g, t))
    for lc, lc_t in zip(cache.layer_caches, cache_t.layer_caches):
        assert np.allclose(lc.u, lc_t.u, atol=1e-5)
        assert np.allclose(lc.v, lc_t.v, atol=1e-5)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_zero_upstream_gives_zero_grads():
    model = small_model()
    g = random_graph(19, 4)
    _, _, cache = le.encode_layout_cached(model, g)
    grads = le.layout_backward(model, cache, np.zeros(model.d, np.float32))
    assert all(np.all(v == 0) for v in grads.values())


def test_empty_graph_backward_gives_zero_grads():
    model = small_model()
    _, _, cache = le.encode_layout_cached(model, sg.empty_graph(4))
    grads = le.layout_backward(model, cache, np.ones(model.d, np.float32))
    assert all(np.all(v == 0) for v in grads.values())


def fd_check_model(model: le.LayoutEncoder, g: sg.SceneGraph, n_probe_coords=60, seed=0):
    probe = generator(seed, "probe").standard_normal(model.d).astype(np.float32)
    _, _, cache = le.encode_layout_cached(model, g)
    grads = le.layout_backward(model, cache, probe)
    params = le.named_parameters(model)

    def loss():
        vec, _ = oracle_encode(model, g)
        return float(np.dot(vec, probe.astype(np.float64)))

    rng = generator(seed, "coords")
    names = sorted(params)
    eps = 1e-3
    checked = 0
    while checked < n_probe_coords:
        name = names[int(rng.integers(len(names)))]
        arr = params[name]
        idx = tuple(int(v) for v in rng.integers(0, arr.shape)) if arr.ndim else ()
        analytic = float(grads[name][idx])
        orig = arr[idx]
        arr[idx] = orig + eps
        up = loss()
        arr[idx] = orig - eps
        down = loss()
        arr[idx] = orig
        numeric = (up - down) / (2 * eps)
        checked += 1
        if abs(numeric - analytic) <= 1e-6:
            continue
        denom = max(abs(numeric), abs(analytic), 1e-6)
        assert abs(numeric - analytic) / denom <= 1e-3, (
            f"{name}{idx}: analytic={analytic} numeric={numeric}"
        )


def test_single_node_gradients_match_fd():
    model = small_model(seed=20)
    g = random_graph(21, 1)
    fd_check_model(model, g, n_probe_coords=40, seed=1)


def test_multi_node_gradients_match_fd():
    model = small_model(seed=22)
    g = random_graph(23, 4)
    fd_check_model(model, g, n_probe_coords=80, seed=2)


def test_relation_embedding_gradients_match_fd():
    model = small_model(seed=24)
    g = random_graph(25, 4)
    probe = generator(26).standard_normal(model.d).astype(np.float32)
    _, _, cache = le.encode_layout_cached(model, g)
    grads = le.layout_backward(model, cache, probe)["layout.relations"]

    def loss():
        vec, _ = oracle_encode(model, g)
        return float(np.dot(vec, probe.astype(np.float64)))

    eps = 1e-3
    used = {(sg.EDGE_KINDS.index(e.kind), sg.RELATION_LABELS.index(e.relation)) for e in g.edges}
    assert used, "graph should have edges"
    for k, lab in used:
        for col in range(model.e_rel):
            analytic = float(grads[k, lab, col])
            orig = model.relation_table[k, lab, col]
            model.relation_table[k, lab, col] = orig + eps
            up = loss()
            model.relation_table[k, lab, col] = orig - eps
            down = loss()
            model.relation_table[k, lab, col] = orig
            numeric = (up - down) / (2 * eps)
            if abs(numeric - analytic) <= 1e-6:
                continue
            denom = max(abs(numeric), abs(analytic), 1e-6)
            assert abs(numeric - analytic) / denom <= 1e-3


def test_unused_relation_rows_get_zero_gradient():
    model = small_model(seed=27)
    g = random_graph(28, 3)
    _, _, cache = le.encode_layout_cached(model, g)
    grads = le.layout_backward(model, cache, np.ones(model.d, np.float32))["layout.relations"]
    used = {(sg.EDGE_KINDS.index(e.kind), sg.RELATION_LABELS.index(e.relation)) for e in g.edges}
    for k in range(len(sg.EDGE_KINDS)):
        for lab in range(len(sg.RELATION_LABELS)):
            if (k, lab) not in used:
                assert np.all(grads[k, lab] == 0)
