import math

import numpy as np
import pytest

from bitquant.data_io import Dataset, load_checkpoint, synth_blobs
from bitquant.errors import NumericError, ParameterError, ShapeError, StateError
from bitquant.lqw import WeightQuantParams
from bitquant.quantizer_core import ActQuantState, BitConfig
from bitquant.tinynet import (
    LayerSpec,
    ablate,
    accuracy,
    backward,
    build_state,
    col2im,
    default_opt,
    default_specs,
    export_packed,
    forward,
    frozen_offsets,
    im2col,
    log_to_csv,
    make_cell_state,
    softmax_xent,
    train,
)

from oracles import central_diff, rel_err


def ref_conv3x3(x, W, b):
    """Direct zero-padded 3x3 convolution, one kernel offset at a time."""
    bsz, c, h, w = x.shape
    Wk = W.reshape(W.shape[0], c, 3, 3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros((bsz, W.shape[0], h, w))
    for kh in range(3):
        for kw in range(3):
            patch = xp[:, :, kh:kh + h, kw:kw + w]
            y += np.einsum("bchw,oc->bohw", patch, Wk[:, :, kh, kw])
    return y + b[None, :, None, None]


def ref_forward_fp(state, x):
    for i, spec in enumerate(state.specs):
        W, b = state.params[i]["W"], state.params[i]["b"]
        if spec.kind == "conv3x3":
            y = ref_conv3x3(x, W, b)
        else:
            y = x.reshape(x.shape[0], -1) @ W.T + b
        if i == state.n_layers - 1:
            return y
        g, be = state.affine[i]["gamma"], state.affine[i]["beta"]
        shape = (1, -1) + (1,) * (y.ndim - 2)
        x = np.maximum(g.reshape(shape) * y + be.reshape(shape), 0.0)


def small_fp_state(seed=0, size=4, classes=3, in_channels=2):
    specs = default_specs(quantize_weights=False, quantize_acts=False, in_channels=in_channels,
                          image_size=size, classes=classes)
    state = build_state(specs, (in_channels, size, size), default_opt(), seed, scale_range=(0.5, 2.0))
    state.params[-1]["W"] = np.random.default_rng(seed + 100).normal(0, 0.1, state.params[-1]["W"].shape)
    return state


def test_im2col_col2im_adjoint():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 4))
    d = rng.normal(size=(2 * 5 * 4, 27))
    assert np.sum(im2col(x) * d) == pytest.approx(np.sum(x * col2im(d, x.shape)), rel=1e-12)


def test_quantization_off_matches_reference():
    state = small_fp_state()
    x = np.random.default_rng(1).normal(size=(5, 2, 4, 4))
    logits, _ = forward(state, x)
    assert rel_err(logits, ref_forward_fp(state, x)) <= 1e-6


def test_fp_gradients_match_finite_differences():
    state = small_fp_state(seed=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 2, 4, 4))
    y = rng.integers(0, 3, size=4)

    def loss():
        return softmax_xent(forward(state, x)[0], y)[0]

    logits, cache = forward(state, x)
    grads = backward(state, cache, softmax_xent(logits, y)[1])
    for i in range(state.n_layers):
        for name in ("W", "b"):
            fd = central_diff(loss, state.params[i][name])
            assert rel_err(grads[("L", i, name)], fd) <= 1e-5, (i, name)
    for i in range(state.n_layers - 1):
        for name in ("gamma", "beta"):
            fd = central_diff(loss, state.affine[i][name])
            assert rel_err(grads[("S", i, name)], fd) <= 1e-5, (i, name)


def test_basis_gradients_with_frozen_structure():
    ds = synth_blobs(0, 4, classes=3, size=4)
    state = make_cell_state("lqw", "caq", 2, 2, 0, default_opt(), image_size=4, classes=3)
    state.params[-1]["W"] = np.random.default_rng(5).normal(0, 0.1, state.params[-1]["W"].shape)
    # discrete inputs times +-v weights cancel to ~1e-16; shift away from the ReLU kink
    state.affine[1]["beta"] = np.random.default_rng(6).uniform(0.05, 0.3, 16)
    x = ds.normalized()
    forward(state, x, train=True)
    frozen = frozen_offsets(state, x)
    y = ds.labels
    wq = state.params[1]["wq"]

    def loss():
        return softmax_xent(forward(state, x, frozen=frozen)[0], y)[0]

    logits, cache = forward(state, x, frozen=frozen)
    np.testing.assert_allclose(logits, forward(state, x)[0], atol=1e-12)
    assert min(np.abs(e["z"]).min() for e in cache[:-1]) > 1e-4
    grads = backward(state, cache, softmax_xent(logits, y)[1])
    fd = central_diff(loss, wq.basis)
    assert rel_err(grads[("L", 1, "wq")][1], fd) <= 1e-4


def test_zero_grad_logits_give_zero_grads():
    state = small_fp_state()
    x = np.random.default_rng(0).normal(size=(3, 2, 4, 4))
    _, cache = forward(state, x)
    grads = backward(state, cache, np.zeros((3, 3)))
    assert all(not np.any(g) for g in grads.values())


def test_backward_without_cache():
    state = small_fp_state()
    with pytest.raises(StateError):
        backward(state, [], np.zeros((1, 3)))


def test_edge_layers_must_stay_fp():
    bc = BitConfig()
    specs = [LayerSpec("dense", 4, 3, quantize_weights=True, bit_config=bc), LayerSpec("dense", 3, 2)]
    with pytest.raises(ParameterError):
        build_state(specs, (4, 1, 1))
    specs = [LayerSpec("dense", 4, 3), LayerSpec("dense", 3, 2, quantize_acts=True)]
    with pytest.raises(ParameterError):
        build_state(specs, (4, 1, 1))


def test_chain_shape_errors():
    with pytest.raises(ShapeError):
        build_state([LayerSpec("conv3x3", 2, 4), LayerSpec("dense", 10, 2)], (2, 3, 3))
    with pytest.raises(ShapeError):
        build_state([LayerSpec("dense", 9, 4), LayerSpec("conv3x3", 4, 2)], (1, 3, 3))
    state = small_fp_state()
    with pytest.raises(ShapeError):
        forward(state, np.zeros((1, 1, 4, 4)))


def test_hand_traced_quantized_dense_forward():
    bc = BitConfig(k_w=1, k_a=2)
    specs = [LayerSpec("dense", 2, 2, quantize_acts=True, bit_config=bc),
             LayerSpec("dense", 2, 1, quantize_weights=True, quantize_acts=True, bit_config=bc)]
    state = build_state(specs, (2, 1, 1), default_opt(), 0, allow_edge_quantization=True)
    state.params[0]["W"] = np.eye(2)
    state.affine[0]["gamma"] = np.ones(2)
    state.act_states[0] = ActQuantState(2, 2, channel_bases=np.array([[0.25, 0.5], [0.25, 0.5]]))
    state.params[1]["wq"] = WeightQuantParams(np.array([[[0.2], [-0.4]]]), np.array([[0.5]]))
    x = np.array([[[[0.3]], [[0.8]]]])
    # relu -> (0.3, 0.8); levels 0, .25, .5, .75 -> (0.25, 0.75); weights (+0.5, -0.5)
    logits, cache = forward(state, x)
    np.testing.assert_allclose(cache[0]["q"], [[0.25, 0.75]])
    assert logits[0, 0] == pytest.approx(0.25 * 0.5 - 0.75 * 0.5, abs=1e-15)
    packed = export_packed(state)
    assert list(packed) == [1]
    assert forward(state, x, packed=packed)[0][0, 0] == pytest.approx(-0.25, abs=1e-12)


def test_eval_forward_deterministic_and_stateless():
    ds = synth_blobs(1, 6, size=8)
    state = make_cell_state("lqw", "caq", 2, 2, 1, default_opt())
    train(state, ds, 1, batch_size=8)
    before = state.act_states[0].channel_bases.copy()
    x = ds.normalized()
    a, _ = forward(state, x)
    b, _ = forward(state, x)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(state.act_states[0].channel_bases, before)


def test_packed_export_matches_float_path():
    ds = synth_blobs(2, 10)
    state = make_cell_state("lqw", "caq", 2, 2, 2, default_opt())
    train(state, ds, 2, batch_size=16)
    packed = export_packed(state)
    assert list(packed) == [1]
    x = ds.normalized()
    assert rel_err(forward(state, x, packed=packed)[0], forward(state, x)[0]) <= 1e-4


def test_export_requires_trained_quantizer():
    state = make_cell_state("lqw", "caq", 2, 2, 0, default_opt())
    with pytest.raises(StateError):
        export_packed(state)


def test_training_log_deterministic():
    ds = synth_blobs(3, 10)
    logs = []
    for _ in range(2):
        state = make_cell_state("lqw", "global", 2, 2, 7, default_opt())
        logs.append(log_to_csv(train(state, ds, 3, batch_size=16, eval_set=ds)))
    assert logs[0] == logs[1]
    lines = logs[0].splitlines()
    assert lines[0] == "epoch,lr,loss,train_acc,eval_acc"
    assert len(lines) == 4


def test_training_reduces_loss():
    ds = synth_blobs(4, 25)
    state = make_cell_state("fp", "fp", 2, 2, 1, default_opt())
    first = softmax_xent(forward(state, ds.normalized())[0], ds.labels)[0]
    assert first == pytest.approx(math.log(4), abs=1e-12)
    hist = train(state, ds, 8, batch_size=32)
    assert hist[-1].loss < hist[0].loss
    assert accuracy(state, ds.normalized(), ds.labels) > 0.8


def test_zero_epochs():
    ds = synth_blobs(0, 3)
    state = make_cell_state("fp", "fp", 2, 2, 0, default_opt())
    assert train(state, ds, 0) == []
    assert state.epoch == 0


def test_nan_input_raises_with_last_good():
    ds = synth_blobs(0, 4)
    images = ds.images.copy()
    images[0, 0, 0, 0] = np.nan
    bad = Dataset(images, ds.labels, {"classes": 4})
    state = make_cell_state("lqw", "caq", 2, 2, 0, default_opt())
    train(state, ds, 1, batch_size=4)
    with pytest.raises((NumericError, FloatingPointError)) as info:
        with np.errstate(invalid="ignore"):
            train(state, bad, 1, batch_size=len(bad))
    restored = load_checkpoint(info.value.last_good)
    assert restored.epoch == 1


def test_single_cell_ablation():
    ds = synth_blobs(0, 5)
    table = ablate(ds, weights=("fp",), acts=("fp",), seeds=(1,), epochs=1, batch_size=10)
    assert len(table.cells) == 1
    rows = table.to_csv().strip().splitlines()
    assert len(rows) == 2
    cell = table.cell("fp", "fp")
    assert 0.0 <= cell.mean_train <= 1.0
    assert "fp" in table.to_markdown()
