import numpy as np
import pytest

from gridlift import engine, oracles
from gridlift.engine import make_rng
from gridlift.gridconv import (
    DGridConvLayer,
    attention_forward,
    dgridconv_backward,
    dgridconv_forward,
    extract_patch,
    gridconv_forward,
)
from gridlift.sgt import GridSpec
from gridlift.verify import random_layer

GRID = GridSpec(5, 5)


def make_layer(c_in=3, c_out=4, k=3, dynamic=True, seed=0, **kw):
    return DGridConvLayer(c_in, c_out, k, GRID, make_rng(seed), dynamic=dynamic, **kw)


def saturate(layer, value):
    head = layer.attention
    head.fc2_w.value[:] = 0.0
    head.fc2_b.value[:] = value


# -- static convolution ------------------------------------------------------


def test_zero_kernels_give_bias_sum_everywhere(rng):
    layer = make_layer(dynamic=False)
    for br, b in zip(layer.branches, ([1.0, 2.0, 3.0, 4.0], [0.5, -1.0, 0.0, 2.0])):
        br.kernel.value[:] = 0.0
        br.bias.value[:] = b
    out = gridconv_forward(layer, rng.normal(size=(5, 5, 3)))
    assert np.array_equal(out, np.broadcast_to([1.5, 1.0, 3.0, 6.0], (5, 5, 4)))


def test_unit_kernels_double_the_input(rng):
    layer = make_layer(c_in=3, c_out=3, k=1, dynamic=False)
    for br in layer.branches:
        br.kernel.value[:] = np.eye(3)[None, None]
        br.bias.value[:] = 0.0
    x = rng.normal(size=(5, 5, 3))
    assert np.array_equal(gridconv_forward(layer, x), 2 * x)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_static_matches_padded_conv_composition(rng, k):
    layer = make_layer(k=k, dynamic=False, seed=k)
    x = rng.normal(size=(7, 5, 5, 3))
    expected = sum(engine.conv2d(engine.pad_grid(x, layer.pad, br.pad_mode), br.kernel.value, br.bias.value)
                   for br in layer.branches)
    assert np.max(np.abs(gridconv_forward(layer, x) - expected)) <= 1e-12


def test_zero_input_gives_bias_only_for_any_padding():
    for branches in [("circular",), ("replicate",), ("circular", "replicate")]:
        layer = make_layer(dynamic=False, branches=branches)
        out = gridconv_forward(layer, np.zeros((5, 5, 3)))
        bias = sum(br.bias.value for br in layer.branches)
        assert np.allclose(out, bias, atol=1e-15, rtol=0)


def test_circular_branch_commutes_with_cyclic_shift(rng):
    layer = make_layer(dynamic=False, branches=("circular",))
    x = rng.normal(size=(5, 5, 3))
    shifted = np.roll(x, (2, -1), axis=(0, 1))
    assert np.allclose(gridconv_forward(layer, shifted), np.roll(gridconv_forward(layer, x), (2, -1), axis=(0, 1)),
                       atol=1e-13, rtol=0)


def test_spatial_size_is_preserved(rng):
    for k in (1, 3, 5):
        grid = GridSpec(6, 4)
        layer = DGridConvLayer(2, 3, k, grid, make_rng(k), branches=("replicate",))
        assert layer.forward(rng.normal(size=(2, 6, 4, 2))).shape == (2, 6, 4, 3)


def test_shape_mismatch_rejected(rng):
    layer = make_layer()
    with pytest.raises(ValueError):
        layer.forward(rng.normal(size=(1, 5, 4, 3)))
    with pytest.raises(ValueError):
        layer.forward(rng.normal(size=(1, 5, 5, 2)))
    layer.forward(rng.normal(size=(2, 5, 5, 3)))
    with pytest.raises(ValueError):
        layer.backward(np.zeros((2, 5, 5, 3)))


def test_constructor_validation():
    with pytest.raises(ValueError):
        make_layer(k=2)
    with pytest.raises(ValueError):
        make_layer(branches=())
    with pytest.raises(ValueError):
        make_layer(branches=("reflect",))


def test_static_layer_has_no_attention(rng):
    layer = make_layer(dynamic=False)
    assert not any(name.startswith("attention") for name in layer.parameters())
    with pytest.raises(ValueError):
        dgridconv_forward(layer, rng.normal(size=(5, 5, 3)))


def test_parameter_names():
    names = set(make_layer().parameters())
    assert {"branch0.kernel", "branch0.bias", "branch1.kernel", "branch1.bias"} <= names
    assert {f"attention.{n}" for n in ("bn_gamma", "bn_beta", "fc1_w", "fc1_b", "fc2_w", "fc2_b")} <= names


def test_branch_kernels_are_independent():
    layer = make_layer()
    assert not np.array_equal(layer.branches[0].kernel.value, layer.branches[1].kernel.value)


# -- attention -------------------------------------------------------------


def test_zero_second_affine_gives_half(rng):
    layer = make_layer()
    saturate(layer, 0.0)
    alpha = attention_forward(layer.attention, rng.normal(size=(5, 5, 3)))
    assert alpha.shape == (5, 5, 3, 3)
    assert np.all(alpha == 0.5)


def test_attention_strictly_inside_unit_interval(rng):
    layer = make_layer(seed=3)
    for _ in range(20):
        alpha = attention_forward(layer.attention, 5 * rng.normal(size=(4, 5, 5, 3)), training=True)
        assert np.all((alpha > 0) & (alpha < 1))


def test_attention_matches_loop_composition(rng):
    layer = random_layer(rng)
    while layer.attention is None:
        layer = random_layer(rng)
    head, st = layer.attention, layer.attention.bn_state
    x = rng.normal(size=(layer.grid.h, layer.grid.p, layer.c_in))
    expected = oracles.attention_loop(x, head.bn_gamma.value, head.bn_beta.value, st.running_mean,
                                      st.running_var, st.eps, head.fc1_w.value, head.fc1_b.value,
                                      head.fc2_w.value, head.fc2_b.value, layer.k)
    assert np.max(np.abs(attention_forward(head, x) - expected)) <= 1e-12


# -- dynamic convolution -------------------------------------------------


def test_dynamic_matches_per_patch_oracle(rng):
    for _ in range(25):
        layer = random_layer(rng)
        x = rng.normal(size=(layer.grid.h, layer.grid.p, layer.c_in))
        assert np.max(np.abs(layer.forward(x[None])[0] - oracles.layer_loop(layer, x))) <= 1e-10


def test_saturated_attention_reproduces_static(rng):
    layer = make_layer()
    saturate(layer, 50.0)
    x = rng.normal(size=(3, 5, 5, 3))
    assert np.max(np.abs(dgridconv_forward(layer, x) - gridconv_forward(layer, x))) <= 1e-6


def test_closed_attention_leaves_bias(rng):
    layer = make_layer()
    saturate(layer, -50.0)
    out = dgridconv_forward(layer, rng.normal(size=(3, 5, 5, 3)))
    bias = sum(br.bias.value for br in layer.branches)
    assert np.max(np.abs(out - bias)) <= 1e-6


def test_chunked_batch_matches_single_samples(rng, monkeypatch):
    import gridlift.gridconv as gc

    layer = make_layer()
    x = rng.normal(size=(9, 5, 5, 3))
    full = layer.forward(x)
    monkeypatch.setattr(gc, "CHUNK_BYTES", 1)
    assert layer._chunk(9) == 1
    chunked = layer.forward(x)
    assert np.allclose(full, chunked, atol=1e-13, rtol=0)
    g = rng.normal(size=full.shape)
    gx_chunked = layer.backward(g)
    grads_chunked = {n: p.grad.copy() for n, p in layer.parameters().items()}
    monkeypatch.setattr(gc, "CHUNK_BYTES", 4 << 20)
    layer.forward(x)
    gx = layer.backward(g)
    assert np.allclose(gx, gx_chunked, atol=1e-12, rtol=0)
    for name, p in layer.parameters().items():
        assert np.allclose(p.grad, grads_chunked[name], atol=1e-12, rtol=0)


def test_per_axis_branch_matches_oracle(rng):
    layer = make_layer(branches=("circular:replicate", ("circular", "replicate")), seed=5)
    x = rng.normal(size=(5, 5, 3))
    assert np.max(np.abs(layer.forward(x[None])[0] - oracles.layer_loop(layer, x))) <= 1e-10


# -- patches --------------------------------------------------------------


def test_patch_of_unit_kernel_is_the_cell(rng):
    x = rng.normal(size=(4, 5, 2))
    assert np.array_equal(extract_patch(x, 2, 3, 1)[0, 0], x[2, 3])


def test_corner_patch_under_edge_copy(rng):
    x = rng.normal(size=(4, 5, 2))
    patch = extract_patch(engine.pad_grid(x, 1, "replicate"), 0, 0, 3)
    for a, b in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        assert np.array_equal(patch[a, b], x[0, 0])


def test_patches_tile_the_padded_grid(rng):
    x = rng.normal(size=(4, 5, 2))
    padded = engine.pad_grid(x, 2, "circular")
    rebuilt = np.full(padded.shape, np.nan)
    for i in range(4):
        for j in range(5):
            window = extract_patch(padded, i, j, 5)
            region = rebuilt[i : i + 5, j : j + 5]
            seen = ~np.isnan(region)
            assert np.array_equal(region[seen], window[seen])
            region[...] = window
    assert np.array_equal(rebuilt, padded)


@pytest.mark.parametrize("cell", [(-1, 0), (0, 5), (4, 0)])
def test_patch_centre_out_of_bounds(cell):
    with pytest.raises(ValueError):
        extract_patch(np.zeros((6, 7, 1)), *cell, 3)


# -- gradients --------------------------------------------------------------


def test_zero_upstream_gives_zero_gradients(rng):
    layer = make_layer()
    gx, grads = dgridconv_backward(layer, rng.normal(size=(2, 5, 5, 3)), np.zeros((2, 5, 5, 4)), training=True)
    assert not np.any(gx)
    for g in grads.values():
        assert not np.any(g)


def test_static_backward_matches_conv_composition(rng):
    layer = make_layer(dynamic=False)
    x = rng.normal(size=(3, 5, 5, 3))
    g = rng.normal(size=(3, 5, 5, 4))
    gx, grads = dgridconv_backward(layer, x, g)
    expected_gx = 0.0
    for i, br in enumerate(layer.branches):
        padded = engine.pad_grid(x, layer.pad, br.pad_mode)
        gp, gk, gb = engine.conv2d_backward(g, padded, br.kernel.value)
        expected_gx = expected_gx + engine.pad_grid_backward(gp, 5, 5, layer.pad, br.pad_mode)
        assert np.allclose(grads[f"branch{i}.kernel"], gk, atol=1e-12, rtol=0)
        assert np.allclose(grads[f"branch{i}.bias"], gb, atol=1e-12, rtol=0)
    assert np.allclose(gx, expected_gx, atol=1e-12, rtol=0)


def test_saturated_backward_matches_static(rng):
    dyn = make_layer(seed=2)
    static = make_layer(seed=2, dynamic=False)
    for a, b in zip(dyn.branches, static.branches):
        b.kernel.value[:] = a.kernel.value
        b.bias.value[:] = a.bias.value
    saturate(dyn, 50.0)
    x = rng.normal(size=(2, 5, 5, 3))
    g = rng.normal(size=(2, 5, 5, 4))
    gx_dyn, grads_dyn = dgridconv_backward(dyn, x, g)
    gx_static, grads_static = dgridconv_backward(static, x, g)
    assert np.max(np.abs(gx_dyn - gx_static)) <= 1e-10
    for name, grad in grads_static.items():
        assert np.max(np.abs(grads_dyn[name] - grad)) <= 1e-10


@pytest.mark.parametrize("training", [False, True])
def test_dynamic_backward_matches_finite_differences(fd, training):
    rng = make_rng(7)
    layer = make_layer(c_in=2, c_out=2, seed=7)
    layer.attention.bn_state.running_var[:] = rng.uniform(0.5, 2.0, size=2)
    x = rng.normal(size=(3, 5, 5, 2))
    weights = rng.normal(size=(3, 5, 5, 2))

    def loss():
        return float(np.sum(weights * layer.forward(x, training=training)))

    loss()
    gx = layer.backward(weights)
    grads = {n: p.grad.copy() for n, p in layer.parameters().items()}
    assert fd(loss, x, gx) <= 1e-4
    for name, p in layer.parameters().items():
        assert fd(loss, p.value, grads[name]) <= 1e-4, name
