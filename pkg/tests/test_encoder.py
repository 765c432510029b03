import struct

import numpy as np
import pytest

from conftest import central_diff, rel_err
from ifmlab.encoder import (
    CKPT_VERSION,
    MAGIC,
    Adam,
    Encoder,
    Layer,
    adam_step,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from ifmlab.errors import DegenerateInputError, FormatError, UsageError
from ifmlab.numerics import make_rng


def identity_encoder(d=2):
    return Encoder([Layer(np.eye(d), np.zeros(d), "identity")])


class TestForward:
    def test_identity_layer_normalizes(self):
        u, _ = forward(identity_encoder(), [3.0, 4.0])
        np.testing.assert_allclose(u, [0.6, 0.8], atol=1e-15)

    def test_zero_weights(self):
        enc = Encoder([Layer(np.zeros((3, 2)), np.zeros(2), "identity")])
        with pytest.raises(DegenerateInputError):
            enc.forward([1.0, 2.0, 3.0])

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            identity_encoder().forward([1.0, 2.0, 3.0])

    def test_layers_must_chain(self):
        with pytest.raises(UsageError):
            Encoder([Layer(np.ones((2, 3)), np.zeros(3)), Layer(np.ones((4, 2)), np.zeros(2))])

    def test_deterministic(self):
        enc = Encoder.init([10, 64, 64, 8], make_rng(3))
        X = make_rng(4).normal(size=(5, 10))
        a = enc.embed(X)
        b = enc.embed(X)
        assert a.tobytes() == b.tobytes()
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)

    def test_same_seed_same_init(self):
        a = Encoder.init([6, 5, 3], make_rng(9))
        b = Encoder.init([6, 5, 3], make_rng(9))
        assert save_checkpoint(a) == save_checkpoint(b)


class TestBackward:
    def test_normalization_jacobian_annihilates_output(self):
        enc = identity_encoder(3)
        u, tape = enc.forward([1.0, 2.0, 2.0])
        _, dx = enc.backward(tape, u)  # gradient along u itself
        np.testing.assert_allclose(dx, 0.0, atol=1e-15)
        _, dx = enc.backward(tape, [0.3, -1.0, 0.5])
        assert abs(dx @ u) <= 1e-15

    def test_zero_gradient(self):
        enc = Encoder.init([4, 6, 3], make_rng(0))
        _, tape = enc.forward(make_rng(1).normal(size=(3, 4)))
        grads, dx = enc.backward(tape, np.zeros((3, 3)))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(dx == 0)

    def test_stale_tape(self):
        enc = Encoder.init([4, 6, 3], make_rng(0))
        _, tape = enc.forward(np.ones(4))
        grads, _ = enc.backward(tape, np.ones(3))
        adam_step(Adam(), enc, grads)
        with pytest.raises(UsageError):
            enc.backward(tape, np.ones(3))

    def test_needs_exactly_one_seed_gradient(self):
        enc = Encoder.init([4, 3], make_rng(0))
        _, tape = enc.forward(np.ones(4))
        with pytest.raises(UsageError):
            enc.backward(tape)
        with pytest.raises(UsageError):
            enc.backward(tape, np.ones(3), d_raw=np.ones(3))

    def test_finite_differences_over_random_nets(self):
        rng = make_rng(5)
        worst = 0.0
        checked = 0
        while checked < 25:
            depth = int(rng.integers(1, 4))
            dims = [int(rng.integers(2, 9))] + [int(rng.integers(4, 12)) for _ in range(depth - 1)]
            dims.append(int(rng.integers(2, 7)))
            enc = Encoder.init(dims, rng)
            X = rng.normal(size=(3, dims[0]))
            try:
                if np.any(np.linalg.norm(enc.raw(X)[0], axis=1) < 1e-3):
                    continue
            except DegenerateInputError:
                continue  # dead ReLU net: normalization undefined
            checked += 1
            T = rng.normal(size=(3, dims[-1]))
            # a loss that is nonlinear in the embedding
            loss = lambda U: float(np.sum(np.sin(U * T)))  # noqa: E731
            U, tape = enc.forward(X)
            grads, dX = backward(enc, tape, T * np.cos(U * T))
            for p, g in zip(enc.params(), grads):
                def f(x, p=p):
                    saved = p.copy()
                    p[...] = x.reshape(p.shape)
                    try:
                        return loss(enc.embed(X))
                    finally:
                        p[...] = saved

                worst = max(worst, rel_err(g.ravel(), central_diff(f, p.ravel())))
            num_dx = central_diff(lambda x: loss(enc.embed(x.reshape(X.shape))), X.ravel())
            worst = max(worst, rel_err(dX.ravel(), num_dx))
        assert worst <= 1e-5

    def test_raw_gradient_path(self):
        rng = make_rng(6)
        enc = Encoder.init([4, 5, 3], rng)
        X = rng.normal(size=(2, 4))
        T = rng.normal(size=(2, 3))
        _, tape = enc.forward(X)
        grads, _ = enc.backward(tape, d_raw=T)
        W = enc.layers[0].weights

        def f(x):
            saved = W.copy()
            W[...] = x.reshape(W.shape)
            try:
                return float(np.sum(enc.raw(X)[0] * T))
            finally:
                W[...] = saved

        assert rel_err(grads[0].ravel(), central_diff(f, W.ravel())) <= 1e-6


class TestAdam:
    def test_zero_gradient_no_decay(self):
        p = [np.array([1.0, -2.0])]
        Adam(weight_decay=0.0).step(p, [np.zeros(2)])
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_lr_zero(self):
        p = [np.array([1.0, -2.0])]
        Adam(lr=0.0).step(p, [np.array([0.5, 0.5])])
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_constant_gradient_step_tends_to_lr(self):
        p = [np.array([0.0])]
        opt = Adam(lr=1e-3, weight_decay=0.0)
        prev = 0.0
        for _ in range(200):
            opt.step(p, [np.array([0.37])])
            step, prev = prev - p[0][0], p[0][0]
        assert step == pytest.approx(1e-3, rel=1e-4)

    def test_first_step_is_lr_sign(self):
        p = [np.array([0.0, 0.0])]
        Adam(lr=0.01, weight_decay=0.0).step(p, [np.array([3.0, -0.2])])
        np.testing.assert_allclose(p[0], [-0.01, 0.01], rtol=1e-6)

    def test_decoupled_decay_is_multiplicative(self):
        p = [np.array([2.0])]
        Adam(lr=0.1, weight_decay=0.5).step(p, [np.zeros(1)])
        assert p[0][0] == pytest.approx(2.0 * (1 - 0.05))

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            Adam().step([np.zeros(2)], [np.zeros(3)])


class TestCheckpoint:
    def enc(self):
        return Encoder.init([5, 7, 3], make_rng(2))

    def test_round_trip_bit_exact(self):
        data = save_checkpoint(self.enc())
        again = save_checkpoint(load_checkpoint(data))
        assert data == again
        assert data.startswith(MAGIC)

    def test_round_trip_preserves_outputs(self):
        enc = self.enc()
        X = make_rng(3).normal(size=(4, 5))
        assert load_checkpoint(save_checkpoint(enc)).embed(X).tobytes() == enc.embed(X).tobytes()

    def test_truncated(self):
        data = save_checkpoint(self.enc())
        for cut in (3, len(MAGIC) + 4, len(data) // 2, len(data) - 1):
            with pytest.raises(FormatError):
                load_checkpoint(data[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            load_checkpoint(save_checkpoint(self.enc()) + b"\x00")

    def test_bad_magic(self):
        data = bytearray(save_checkpoint(self.enc()))
        data[0] ^= 0xFF
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(bytes(data))

    def test_version_mismatch(self):
        data = bytearray(save_checkpoint(self.enc()))
        struct.pack_into("<I", data, len(MAGIC), CKPT_VERSION + 1)
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(bytes(data))

    def test_layer_dims_must_chain(self):
        enc = self.enc()
        bad = Encoder.__new__(Encoder)
        bad.layers = [enc.layers[0], Layer(np.ones((3, 2)), np.zeros(2))]
        with pytest.raises(FormatError):
            load_checkpoint(save_checkpoint(bad))
