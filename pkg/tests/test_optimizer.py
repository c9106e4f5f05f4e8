"""
Adam 优化器与检查点测试
"""
from collections import OrderedDict

import numpy as np
import pytest

from services import autodiff as ad
from services.autodiff import Tape, backward, parameter
from services.optimizer import (
    AdamState,
    adam_step,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from utils.errors import ContractError, FormatError, OptimizerError


class TestAdamStep:

    def test_first_step_moves_by_learning_rate(self):
        params = {"w": parameter([1.0, -2.0])}
        state = adam_step(params, {"w": np.array([0.5, -3.0])}, AdamState(lr=0.1))
        assert state.step_count == 1
        assert np.allclose(params["w"].data, [0.9, -1.9], atol=1e-6)

    def test_zero_gradient_leaves_parameters(self):
        params = {"w": parameter([1.0, 2.0])}
        state = AdamState(lr=0.1)
        adam_step(params, {"w": np.zeros(2)}, state)
        assert params["w"].data.tolist() == [1.0, 2.0]
        assert state.step_count == 1

    def test_missing_gradient_counts_as_zero(self):
        params = {"w": parameter([1.0])}
        adam_step(params, {}, AdamState(lr=0.1))
        assert params["w"].data.tolist() == [1.0]

    def test_minimises_quadratic(self):
        x = parameter([3.0], name="x")
        state = AdamState(lr=0.05)
        for _ in range(500):
            with Tape():
                grads = backward(ad.sum_(ad.mul(x, x)))
            adam_step({"x": x}, grads, state)
        assert abs(x.data[0]) < 0.05

    def test_non_finite_gradient_raises_before_update(self):
        params = {"a": parameter([1.0]), "b": parameter([1.0])}
        with pytest.raises(OptimizerError) as err:
            adam_step(params, {"a": np.array([0.1]), "b": np.array([np.nan])}, AdamState(lr=0.1))
        assert err.value.param_name == "b"
        assert params["a"].data.tolist() == [1.0]

    def test_gradient_shape_checked(self):
        with pytest.raises(ContractError):
            adam_step({"w": parameter(np.ones(3))}, {"w": np.ones(2)}, AdamState(lr=0.1))


class TestCheckpoint:

    def test_preserves_names_order_and_values(self, rng):
        tensors = OrderedDict([("b", rng.standard_normal((2, 3))), ("a", np.array(1.5)), ("c", np.zeros((0, 4)))])
        decoded = decode_checkpoint(encode_checkpoint(tensors))
        assert list(decoded) == ["b", "a", "c"]
        assert np.array_equal(decoded["b"], tensors["b"])
        assert decoded["a"].shape == ()
        assert decoded["c"].shape == (0, 4)

    def test_bad_magic(self):
        with pytest.raises(FormatError) as err:
            decode_checkpoint(b"NOPE\x01\x00\x00\x00\x00")
        assert err.value.offset == 0

    def test_truncated_payload(self, rng):
        data = encode_checkpoint({"w": rng.standard_normal(5)})
        with pytest.raises(FormatError):
            decode_checkpoint(data[:-3])

    def test_file_round_trip_accepts_tensors(self, tmp_path):
        path = str(tmp_path / "w.ckpt")
        save_checkpoint(path, {"w": parameter([1.0, 2.0]), "raw": np.array([3.0])})
        loaded = load_checkpoint(path)
        assert loaded["w"].tolist() == [1.0, 2.0]
        assert loaded["raw"].tolist() == [3.0]
