import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradcheck import check
from labelreg.core import (
    AdamState,
    ParamStore,
    Tape,
    Tensor,
    adam_step,
    add,
    concat_channels,
    conv2d,
    mse_loss,
    mul,
    pool2d,
    relu,
    scale,
    slice_channels,
    softmax_ce_loss,
    total,
    upsample,
    upsample_bilinear,
    upsample_nearest2x,
)
from labelreg.errors import ConfigError, EmptyLossSupportError, UsageError

GRAD_TOL = 1e-5


def weighted(out, rng_seed=0):
    """Scalar probe: sum(out * r) for fixed random r."""
    r = np.random.default_rng(rng_seed).normal(size=out.shape)
    return total(mul(out, Tensor(r)))


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# --- forward oracles -------------------------------------------------------

def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    y = conv2d(t(x), t(w), t(np.zeros(3)))
    assert np.array_equal(y.data, x)


def test_conv_ones_kernel_sums_receptive_field():
    y = conv2d(t(np.ones((1, 1, 4, 4))), t(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert y[1, 1] == 9.0 and y[2, 2] == 9.0
    assert y[0, 0] == 4.0 and y[3, 3] == 4.0
    assert y[0, 1] == 6.0


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)]:
        y = conv2d(t(x), t(w), t(b), stride=stride, padding=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (7 + 2 * pad - 3) // stride + 1
        wo = (6 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
        np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_conv_stem_shape():
    x = Tensor(np.zeros((1, 3, 256, 256), np.float32))
    w = Tensor(np.zeros((8, 3, 7, 7), np.float32))
    assert conv2d(x, w, stride=2, padding=3).shape == (1, 8, 128, 128)


def test_conv_errors_name_layer():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ConfigError, match="backbone.stage1"):
        conv2d(x, Tensor(np.zeros((2, 5, 3, 3))), name="backbone.stage1")
    with pytest.raises(ConfigError, match="empty"):
        conv2d(x, Tensor(np.zeros((2, 3, 7, 7))))


def test_pool_examples():
    x = t([[[[1, 2], [3, 4]]]])
    assert pool2d(x, "max", 2).data.item() == 4
    assert pool2d(x, "avg", 2).data.item() == 2.5
    const = t(np.full((1, 2, 6, 6), 3.5))
    y = pool2d(const, "max", 2)
    assert y.shape == (1, 2, 3, 3) and np.all(y.data == 3.5)
    with pytest.raises(ConfigError):
        pool2d(x, "max", 0)
    with pytest.raises(ConfigError):
        pool2d(x, "max", 2, stride=0)


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = total(pool2d(x, "max", 2))
    tape.backward(loss)
    assert np.array_equal(tape.grad(x)[0, 0], [[1, 0], [0, 0]])
    # general (overlapping) path follows the same rule
    with Tape() as tape:
        loss = total(pool2d(x, "max", 2, stride=1, padding=0))
    tape.backward(loss)
    assert np.array_equal(tape.grad(x)[0, 0], [[1, 0], [0, 0]])


def test_pool_general_matches_loops():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 7, 7))
    for kind, fn in [("max", np.max), ("avg", np.mean)]:
        y = pool2d(t(x), kind, 3, stride=2, padding=1).data
        fill = -np.inf if kind == "max" else 0.0
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=fill)
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    assert y[0, c, i, j] == pytest.approx(fn(xp[0, c, 2 * i:2 * i + 3, 2 * j:2 * j + 3]))


def test_upsample_examples():
    x = t([[[[1, 2], [3, 4]]]])
    assert np.array_equal(upsample_nearest2x(x).data[0, 0],
                          [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    assert np.array_equal(upsample(x, "bilinear", (2, 2)).data, x.data)
    c = upsample_bilinear(t(np.full((1, 1, 2, 2), 0.7)), (4, 4)).data
    np.testing.assert_allclose(c, 0.7, rtol=0, atol=1e-15)
    with pytest.raises(ConfigError):
        upsample_bilinear(x, (1, 4))


def test_bilinear_half_pixel_convention():
    # 2 -> 4 with half-pixel centres: source coords -0.25(clamped), 0.25, 0.75, 1.25
    y = upsample_bilinear(t([[[[0.0, 4.0]]]]), (1, 4)).data[0, 0, 0]
    np.testing.assert_allclose(y, [0.0, 1.0, 3.0, 4.0])


def test_relu_and_concat():
    assert np.array_equal(relu(t([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = Tensor(np.array([2.0, -1.0, 0.0]), requires_grad=True)
    with Tape() as tape:
        loss = total(relu(x))
    tape.backward(loss)
    assert np.array_equal(tape.grad(x), [1, 0, 0])
    a, b = t(np.zeros((1, 3, 2, 2))), t(np.ones((1, 5, 2, 2)))
    assert concat_channels([a, b]).shape == (1, 8, 2, 2)
    with pytest.raises(ConfigError):
        concat_channels([a, t(np.zeros((1, 2, 3, 2)))])


def test_ce_examples():
    assert softmax_ce_loss(t(np.zeros((1, 2, 3, 3))), np.zeros((1, 3, 3), int)).item() == pytest.approx(np.log(2))
    big = np.zeros((1, 3, 1, 1))
    big[0, 1] = 50.0
    assert softmax_ce_loss(t(big), np.array([[[1]]])).item() < 1e-20
    logits = np.array([[[[0.3, 1.0]], [[-0.2, 2.0]]]])  # (1, 2, 1, 2)
    both = softmax_ce_loss(t(logits), np.array([[[1, 255]]])).item()
    z = logits[0, :, 0, 0]
    assert both == pytest.approx(-(z[1] - np.log(np.exp(z).sum())), rel=1e-14)
    with pytest.raises(EmptyLossSupportError):
        softmax_ce_loss(t(logits), np.full((1, 1, 2), 255))


def test_mse_examples():
    x = np.random.default_rng(3).normal(size=(1, 2, 3, 4))
    assert mse_loss(t(x), t(x)).item() == 0
    assert mse_loss(t(x + 1), t(x)).item() == pytest.approx(1.0)
    d = np.zeros_like(x)
    d[:, :, :, :2] = 2.0
    d[:, :, :, 2:] = 10.0
    mask = np.zeros((1, 3, 4), bool)
    mask[:, :, :2] = True
    assert mse_loss(t(x + d), t(x), mask).item() == pytest.approx(4.0)
    with pytest.raises(EmptyLossSupportError):
        mse_loss(t(x), t(x), np.zeros((1, 3, 4), bool))


# --- gradients -------------------------------------------------------------

RNG = np.random.default_rng(7)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (1, 0, 3), (2, 1, 3), (2, 3, 7), (1, 0, 1), (2, 0, 1)])
def test_conv_grad(stride, pad, k):
    x = RNG.normal(size=(2, 3, 9, 8))
    w = RNG.normal(size=(4, 3, k, k))
    b = RNG.normal(size=4)
    err = check(lambda x, w, b: weighted(conv2d(x, w, b, stride=stride, padding=pad)), [x, w, b])
    assert err < GRAD_TOL


@pytest.mark.parametrize("kind,k,s,p", [("max", 2, 2, 0), ("avg", 2, 2, 0), ("max", 3, 2, 1), ("avg", 3, 2, 1)])
def test_pool_grad(kind, k, s, p):
    # well-separated values keep max-pool away from kinks
    x = RNG.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) * 0.01
    assert check(lambda x: weighted(pool2d(x, kind, k, s, p)), [x]) < GRAD_TOL


def test_upsample_grads():
    x = RNG.normal(size=(2, 3, 3, 4))
    assert check(lambda x: weighted(upsample_nearest2x(x)), [x]) < GRAD_TOL
    assert check(lambda x: weighted(upsample_bilinear(x, (7, 9))), [x]) < GRAD_TOL


def test_elementwise_grads():
    a = RNG.normal(size=(2, 3, 4, 4))
    a[np.abs(a) < 0.05] = 0.3
    b = RNG.normal(size=(2, 2, 4, 4))
    assert check(lambda a: weighted(relu(a)), [a]) < GRAD_TOL
    assert check(lambda a, b: weighted(concat_channels([a, b])), [a, b]) < GRAD_TOL
    assert check(lambda a: weighted(slice_channels(a, 1, 3)), [a]) < GRAD_TOL
    assert check(lambda a, c: weighted(add(a, scale(c, 0.7))), [a, a[::-1].copy()]) < GRAD_TOL


def test_loss_grads():
    logits = RNG.normal(size=(2, 4, 3, 3))
    target = RNG.integers(0, 4, size=(2, 3, 3))
    target[0, 0, 0] = 255
    assert check(lambda z: softmax_ce_loss(z, target), [logits]) < GRAD_TOL
    pred, ref = RNG.normal(size=(2, 4, 3, 3)), RNG.normal(size=(2, 4, 3, 3))
    mask = RNG.random((2, 3, 3)) < 0.6
    assert check(lambda p, r: mse_loss(p, r, mask), [pred, ref]) < GRAD_TOL


def test_composite_conv_relu_ce_grad():
    # pick data whose ReLU inputs sit well away from the kink at 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, 6, 6))
        w1 = rng.normal(size=(5, 3, 3, 3)) * 0.5
        if np.abs(conv2d(t(x), t(w1), padding=1).data).min() > 0.01:
            break
    w2 = rng.normal(size=(3, 5, 1, 1))
    target = rng.integers(0, 3, size=(2, 6, 6))

    def net(x, w1, w2):
        h = relu(conv2d(x, w1, padding=1))
        return softmax_ce_loss(conv2d(h, w2), target)

    assert check(net, [x, w1, w2]) < GRAD_TOL


def test_backward_linear_and_errors():
    x = np.arange(6.0).reshape(1, 6, 1, 1)
    w = Tensor(np.ones((1, 6, 1, 1)), requires_grad=True, name="w")
    with Tape() as tape:
        loss = total(conv2d(Tensor(x), w))
    grads = tape.backward(loss)
    assert np.array_equal(grads["w"], x.reshape(1, 6, 1, 1))
    with pytest.raises(UsageError):
        tape.backward(Tensor(np.array(1.0)))
    with Tape() as tape:
        y = scale(w, 2.0)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_no_recording_without_tape():
    w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    y = relu(w)
    assert not y.requires_grad
    with Tape() as tape:
        y = relu(Tensor(np.ones((1, 1, 2, 2))))
    assert not y.requires_grad and tape.nodes == []


def test_frozen_param_still_gets_gradient():
    store = ParamStore(np.float64)
    store.add("a", np.ones(3))
    store.freeze(["a"])
    with Tape() as tape:
        loss = total(scale(store["a"], 3.0))
    assert np.array_equal(tape.backward(loss)["a"], [3.0, 3.0, 3.0])


# --- adam ------------------------------------------------------------------

def test_adam_first_step_scalar():
    store = ParamStore(np.float64)
    store.add("p", np.array([0.0]))
    adam_step(store, {"p": np.array([1.0])}, AdamState(), lr=1e-4)
    assert store["p"].data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_grad_and_missing():
    store = ParamStore(np.float64)
    store.add("p", np.array([0.5, -2.0]))
    store.add("q", np.array([1.0]))
    state = AdamState()
    adam_step(store, {"p": np.zeros(2), "q": np.zeros(1)}, state, 1e-3)
    assert np.array_equal(store["p"].data, [0.5, -2.0]) and state.t == 1
    with pytest.raises(UsageError):
        adam_step(store, {"p": np.zeros(2)}, state, 1e-3)
    store.freeze(["q"])
    adam_step(store, {"p": np.zeros(2)}, state, 1e-3)
    assert state.t == 2


@settings(max_examples=30, deadline=None)
@given(st.lists(st.booleans(), min_size=4, max_size=4), st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_adam_never_touches_frozen(mask, seed, steps):
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float32)
    for i in range(4):
        store.add(f"p{i}", rng.normal(size=(3, 2)))
    frozen = [f"p{i}" for i in range(4) if mask[i]]
    store.freeze(frozen)
    before = {n: store[n].data.tobytes() for n in frozen}
    state = AdamState()
    for _ in range(steps):
        adam_step(store, {n: rng.normal(size=(3, 2)).astype(np.float32) for n in store}, state, 1e-2)
    assert all(store[n].data.tobytes() == before[n] for n in frozen)
    assert all((v >= 0).all() for v in state.v.values())


def test_load_state_dict_shape_error_names_param():
    store = ParamStore()
    store.add("decoder.conv1.weight", np.zeros((2, 2, 3, 3)))
    with pytest.raises(ConfigError, match="decoder.conv1.weight"):
        store.load_state_dict({"decoder.conv1.weight": np.zeros((2, 3, 3, 3))})


# --- properties ------------------------------------------------------------

shapes = st.tuples(st.integers(1, 2), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_concat_then_slice_roundtrip(shape, extra, seed):
    rng = np.random.default_rng(seed)
    a = t(rng.normal(size=shape))
    b = t(rng.normal(size=(shape[0], extra) + shape[2:]))
    cat = concat_channels([a, b])
    assert np.array_equal(slice_channels(cat, 0, shape[1]).data, a.data)
    assert np.array_equal(slice_channels(cat, shape[1], shape[1] + extra).data, b.data)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 3, 3), elements=st.floats(-5, 5)), st.integers(0, 2**32 - 1))
def test_ce_ignores_void_logits(logits, seed):
    rng = np.random.default_rng(seed)
    target = rng.integers(0, 3, size=(2, 3, 3))
    target[rng.random((2, 3, 3)) < 0.4] = 255
    target[0, 0, 0] = 1
    void = target == 255
    garbage = logits.copy()
    garbage[np.broadcast_to(void[:, None], logits.shape)] = rng.normal(size=3 * void.sum()) * 100

    def run(z):
        x = Tensor(z, requires_grad=True)
        with Tape() as tape:
            loss = softmax_ce_loss(x, target)
        tape.backward(loss)
        return loss.item(), tape.grad(x)

    (l1, g1), (l2, g2) = run(logits), run(garbage)
    assert l1 == l2
    assert np.array_equal(g1, g2)
    assert not g1[np.broadcast_to(void[:, None], g1.shape)].any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mse_ignores_masked_values(seed):
    rng = np.random.default_rng(seed)
    pred, ref = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 4, 4))
    mask = rng.random((1, 4, 4)) < 0.5
    mask[0, 0, 0] = True
    other = pred.copy()
    other[np.broadcast_to(~mask[:, None], pred.shape)] = 1e3
    assert mse_loss(t(pred), t(ref), mask).item() == mse_loss(t(other), t(ref), mask).item()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_backward_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)

    def run():
        wt = Tensor(w, requires_grad=True, name="w")
        with Tape() as tape:
            loss = weighted(pool2d(relu(conv2d(Tensor(x), wt, padding=1)), "max", 2), 1)
        return loss.data.tobytes(), tape.backward(loss)["w"].tobytes()

    assert run() == run()
