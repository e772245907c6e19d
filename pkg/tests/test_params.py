"""ParamStore, Adam, and gradient-checker tests."""

import numpy as np
import pytest

from skillvla import tensor as T
from skillvla.errors import ContractError, VersionError
from skillvla.gradcheck import grad_check
from skillvla.params import Adam, ParamStore, param_checksum
from skillvla.tensor import DenseArray, backward


def make_store(rng=None):
    rng = rng or np.random.default_rng(0)
    store = ParamStore()
    store.add("w.a", DenseArray(rng.standard_normal((3, 3))), trainable=True)
    store.add("w.b", DenseArray(rng.standard_normal((3,))), trainable=True)
    store.add("frozen.c", DenseArray(rng.standard_normal((2, 2))), trainable=False)
    return store


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = make_store()
        with pytest.raises(ContractError):
            store.add("w.a", DenseArray([1.0]), trainable=True)

    def test_iteration_order_is_insertion_order(self):
        store = make_store()
        assert store.names() == ["w.a", "w.b", "frozen.c"]

    def test_checksum_identical_stores(self):
        a, b = make_store(np.random.default_rng(3)), make_store(np.random.default_rng(3))
        assert param_checksum(a) == param_checksum(b)

    def test_checksum_detects_single_flip(self):
        a, b = make_store(np.random.default_rng(3)), make_store(np.random.default_rng(3))
        b["w.b"].data[1] += 1e-12
        assert param_checksum(a) != param_checksum(b)

    def test_checksum_empty_prefix_match_rejected(self):
        with pytest.raises(ContractError):
            make_store().checksum("nope.")

    def test_roundtrip_lossless(self, tmp_path):
        store = make_store(np.random.default_rng(9))
        path = tmp_path / "params.bin"
        store.save(path)
        loaded = ParamStore.load(path)
        assert loaded.names() == store.names()
        for name, arr, trainable in store.items():
            assert np.array_equal(loaded[name].data, arr.data)
            assert loaded.is_trainable(name) == trainable
        assert param_checksum(loaded) == param_checksum(store)

    def test_corrupt_blob_rejected(self):
        blob = bytearray(make_store().to_bytes())
        blob[len(blob) // 2] ^= 0xFF
        with pytest.raises(VersionError):
            ParamStore.from_bytes(bytes(blob))


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        store = ParamStore()
        w = store.add("w", DenseArray([1.0]), trainable=True)
        w.grad = np.array([0.37])
        opt = Adam(store, lr=0.01)
        opt.step()
        assert abs(abs(1.0 - w.data[0]) - 0.01) < 1e-6

    def test_non_trainable_bitwise_unchanged(self):
        store = make_store()
        before = store["frozen.c"].data.copy()
        store.reset_grads()
        loss = T.sum_all(T.mul(store["w.a"], store["w.a"]))
        backward(loss)
        Adam(store, lr=0.1).step()
        assert store["frozen.c"].data.tobytes() == before.tobytes()

    def test_missing_gradient_raises(self):
        store = make_store()
        with pytest.raises(ContractError):
            Adam(store).step()

    def test_converges_on_quadratic(self):
        # descent oracle: 500 steps on f(w) = ||w - c||^2 must land near c
        store = ParamStore()
        w = store.add("w", DenseArray(np.zeros(4)), trainable=True)
        c = DenseArray(np.array([0.5, -0.3, 0.8, -0.9]))
        opt = Adam(store, lr=0.02)
        for _ in range(500):
            store.reset_grads()
            diff = T.sub(w, c)
            backward(T.sum_all(T.mul(diff, diff)))
            opt.step()
        assert np.linalg.norm(w.data - c.data) < 1e-2

    def test_state_roundtrip(self):
        store = make_store()
        store.reset_grads()
        backward(T.sum_all(T.mul(store["w.a"], store["w.a"])))
        opt = Adam(store, lr=0.05)
        opt.step()
        blob = opt.state_bytes()
        opt2 = Adam(store, lr=0.05)
        opt2.load_state_bytes(blob)
        assert opt2.t == opt.t
        for name in opt._m:
            assert np.array_equal(opt2._m[name], opt._m[name])
            assert np.array_equal(opt2._v[name], opt._v[name])


class TestGradCheck:
    def test_matmul_chain_tight(self):
        rng = np.random.default_rng(4)
        store = ParamStore()
        store.add("a", DenseArray(rng.standard_normal((3, 4))), trainable=True)
        store.add("b", DenseArray(rng.standard_normal((4, 2))), trainable=True)
        w = DenseArray(rng.standard_normal((3, 2)))

        def f():
            return T.sum_all(T.mul(T.matmul(store["a"], store["b"]), w))

        report = grad_check(f, store, h=1e-5)
        assert report.max_rel_err < 1e-8
        assert report.passed

    def test_softmax_sigmoid_model(self):
        rng = np.random.default_rng(5)
        store = ParamStore()
        store.add("w1", DenseArray(rng.standard_normal((4, 4))), trainable=True)
        store.add("w2", DenseArray(rng.standard_normal((4, 4))), trainable=True)
        x = DenseArray(rng.standard_normal((3, 4)))

        def f():
            h = T.softmax_rows(T.matmul(x, store["w1"]))
            return T.sum_all(T.sigmoid(T.matmul(h, store["w2"])))

        report = grad_check(f, store, h=1e-5, tol=1e-4)
        assert report.max_rel_err < 1e-4
        assert report.passed

    def test_corrupted_rule_is_reported(self):
        # negative control: a deliberately wrong backward rule must fail
        from skillvla.tensor import _result
        store = ParamStore()
        store.add("w", DenseArray(np.array([0.5, -0.2, 0.8])), trainable=True)

        def bad_square(x):
            out = x.data * x.data
            return _result(out, (x,), lambda g: (g * 3.0 * x.data,))

        def f():
            return T.sum_all(bad_square(store["w"]))

        report = grad_check(f, store, h=1e-5, tol=1e-4)
        assert not report.passed
        assert "w" in report.failures
