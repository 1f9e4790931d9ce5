import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kanrecon.ndtensor import nn
from kanrecon.ndtensor import tensor as F
from kanrecon.ndtensor.checkpoint import (
    MAGIC,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from kanrecon.ndtensor.optim import AdamState, adam_step
from kanrecon.ndtensor.tensor import GradTape, NonFiniteError, ShapeError, TapeError, Tensor

finite = st.floats(-10, 10, allow_nan=False, width=64)


# -- forward examples -------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(F.matmul(Tensor(a), Tensor(np.eye(2))).data, a)


def test_relu_definition():
    assert np.array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_conv2d_ones_interior_and_corner():
    out = F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    # direct summation oracle: count of in-bounds neighbours
    expect = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            expect[i, j] = sum(1 for di in (-1, 0, 1) for dj in (-1, 0, 1)
                               if 0 <= i + di < 4 and 0 <= j + dj < 4)
    assert np.array_equal(out, expect)
    assert out[1, 1] == 9 and out[0, 0] == 4


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 6))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(6):
                    ref[n, o, i, j] = np.sum(pad[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    assert np.allclose(F.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        F.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        F.div(Tensor([1.0]), Tensor([0.0]))


def test_tensor_rejects_non_finite_data():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


# -- backward ---------------------------------------------------------------

def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    grads = F.backward(F.sum_(F.mul(x, x)))
    assert np.array_equal(grads[x], [2.0, 4.0, 6.0])
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_matmul_sum(rng):
    A = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    B = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    grads = F.backward(F.sum_(F.matmul(A, B)))
    assert np.allclose(grads[A], np.ones((3, 2)) @ B.data.T)
    assert np.allclose(grads[B], A.data.T @ np.ones((3, 2)))


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(TapeError):
        F.backward(F.mul(x, x))
    root = F.sum_(F.mul(x, x))
    F.backward(root)
    with pytest.raises(TapeError):
        F.backward(root)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with F.no_grad():
        y = F.mul(x, x)
    assert y._node is None and not y.requires_grad


def test_tape_visits_each_node_once_in_topological_order():
    x = Tensor([1.5], requires_grad=True)
    a = F.mul(x, x)
    b = F.add(a, x)
    c = F.mul(a, b)  # a is shared: diamond
    root = F.sum_(c)
    tape = GradTape.from_root(root)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        if n._node is not None:
            for p in n._node.parents:
                assert pos[id(p)] < pos[id(n)]
    g = F.backward(root)[x]
    # d/dx of x^2 (x^2 + x) = 4x^3 + 3x^2
    assert np.allclose(g, 4 * 1.5 ** 3 + 3 * 1.5 ** 2)


def test_gradients_bit_identical_across_runs():
    def run():
        r = np.random.default_rng(0)
        w = Tensor(r.standard_normal((3, 3, 3, 3)), requires_grad=True)
        x = Tensor(r.standard_normal((2, 3, 4, 4)))
        loss = F.mean(F.square(F.silu(F.conv2d(x, w))))
        ops = GradTape.from_root(loss).ops()
        return ops, F.backward(loss)[w]

    (o1, g1), (o2, g2) = run(), run()
    assert o1 == o2 and np.array_equal(g1, g2)


# -- normalization invariants -------------------------------------------------

@given(hnp.arrays(np.float64, (6, 3, 2, 2), elements=finite))
def test_batchnorm_normalizes_per_channel(x):
    x = x + np.arange(3).reshape(1, 3, 1, 1) * 0.5
    spread = x.var(axis=(0, 2, 3))
    out = F.batchnorm(Tensor(x), None, None, np.zeros(3), np.ones(3), training=True).data
    mu = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    assert np.all(np.abs(mu) <= 1e-6)
    for c in range(3):
        # eps=1e-5 shrinks the variance of nearly constant channels
        expect = spread[c] / (spread[c] + 1e-5)
        assert abs(var[c] - expect) <= 1e-9
        if spread[c] > 1.0:
            assert abs(var[c] - 1.0) <= 1e-5


def test_batchnorm_eval_uses_running_stats(rng):
    bn = nn.BatchNorm(2)
    x = rng.standard_normal((8, 2, 3, 3)) * 3 + 1
    bn(Tensor(x))
    assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    bn.eval()
    out = bn(Tensor(x)).data
    expect = (x - bn.running_mean.reshape(1, 2, 1, 1)) / np.sqrt(bn.running_var.reshape(1, 2, 1, 1) + 1e-5)
    assert np.allclose(out, expect)


@given(hnp.arrays(np.float64, (4, 7), elements=finite))
def test_layernorm_rows_have_zero_mean(x):
    out = F.layernorm(Tensor(x)).data
    assert np.all(np.abs(out.mean(axis=-1)) <= 1e-6)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2 ** 32 - 1))
def test_concat_then_slice_is_exact(channels, seed):
    r = np.random.default_rng(seed)
    parts = [r.standard_normal((2, c, 3, 3)) for c in channels]
    cat = F.concat_channels([Tensor(p) for p in parts])
    start = 0
    for p in parts:
        stop = start + p.shape[1]
        assert np.array_equal(F.slice_channels(cat, start, stop).data, p)
        start = stop


def test_amax_ties_share_gradient():
    x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
    g = F.backward(F.sum_(F.amax(x, axis=1)))[x]
    assert np.array_equal(g, [[0.0, 0.5, 0.5]])


# -- optimizer --------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = adam_step([p], {p: np.zeros(2)}, AdamState(), 0.1)
    assert np.array_equal(p.data, [1.0, -2.0]) and state.step == 1


def test_adam_positive_gradient_decreases_param():
    p = Tensor(np.array([0.5]), requires_grad=True)
    adam_step([p], {p: np.array([2.0])}, AdamState(), 0.01)
    assert p.data[0] < 0.5


def test_adam_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState()
    for _ in range(10):
        loss = F.sum_(F.square(F.sub(w, Tensor([3.0]))))
        grads = F.backward(loss)
        state = adam_step([w], grads, state, 0.1)
        w.grad = None
    assert abs(w.data[0] - 3.0) < 3.0
    assert state.step == 10


def test_adam_matches_reference_update():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState()
    m = v = 0.0
    x = 1.0
    for step, g in enumerate([0.5, -1.0, 2.0], start=1):
        state = adam_step([p], {p: np.array([g])}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
    assert p.data[0] == pytest.approx(x, abs=1e-15)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step([p], {p: np.zeros(2)}, AdamState(), 0.1)
    with pytest.raises(ValueError):
        adam_step([p], {}, AdamState(), 0.0)


# -- modules and checkpoints ------------------------------------------------

class _Net(nn.Module):
    def __init__(self, seed):
        r = np.random.default_rng(seed)
        self.conv = nn.Conv2d(2, 3, r)
        self.bn = nn.BatchNorm(3)
        self.blocks = [nn.Linear(4, 5, r), nn.LayerNorm(5)]


def test_state_dict_includes_buffers_and_roundtrips(tmp_path):
    net = _Net(0)
    net.bn(Tensor(np.random.default_rng(1).standard_normal((4, 3, 2, 2))))
    state = net.state_dict()
    assert "bn.running_mean" in state and "bn.running_var" in state
    assert any(k.startswith("blocks.0.") for k in state)
    save_checkpoint(tmp_path / "net.kckpt", state)
    other = _Net(99)
    other.load_state_dict(load_checkpoint(tmp_path / "net.kckpt"))
    for k, v in other.state_dict().items():
        assert np.array_equal(v, state[k])


def test_load_state_dict_rejects_mismatch():
    net = _Net(0)
    state = net.state_dict()
    bad = dict(state)
    bad["conv.weight"] = np.zeros((1, 1, 3, 3))
    with pytest.raises(ShapeError):
        net.load_state_dict(bad)
    missing = dict(state)
    missing.pop("bn.running_var")
    with pytest.raises(ShapeError):
        net.load_state_dict(missing)
    extra = dict(state, bogus=np.zeros(1))
    with pytest.raises(ShapeError):
        net.load_state_dict(extra)


@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                  elements=st.floats(allow_nan=True, allow_infinity=True, width=64)),
                       max_size=4))
def test_checkpoint_roundtrip_bit_exact(tensors):
    decoded = decode_checkpoint(encode_checkpoint(tensors))
    assert list(decoded) == list(tensors)
    for k, v in tensors.items():
        assert decoded[k].shape == v.shape
        assert decoded[k].tobytes() == np.ascontiguousarray(v, dtype="<f8").tobytes()


def test_checkpoint_layout_by_hand():
    buf = encode_checkpoint({"w": np.array([[1.0, 2.0]])})
    import struct

    expect = MAGIC + struct.pack("<I", 1) + struct.pack("<H", 1) + b"w" + struct.pack("<B", 2)
    expect += struct.pack("<II", 1, 2) + struct.pack("<dd", 1.0, 2.0)
    assert buf == expect


def test_checkpoint_corruption_errors():
    buf = encode_checkpoint({"a": np.arange(4.0)})
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XCKPT\x01" + buf[6:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf[:-3])
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf + b"\x00")
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf[:4])
