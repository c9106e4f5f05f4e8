"""
梯度校验服务测试
"""
import numpy as np
import pytest

from operations.base import OP_KINDS
from services import autodiff as ad
from services.gradcheck import (
    all_cases,
    ensure_passed,
    results_table,
    run_gradcheck,
    select_cases,
)
from utils.errors import GradcheckError, InputError


class TestSelection:

    def test_every_primitive_operation_and_component_listed(self):
        names = set(all_cases())
        assert {k.value for k in OP_KINDS} <= names
        assert {"conv3d", "softmax", "log_softmax", "max", "mixed_op", "gem_pool", "batch_all_triplet"} <= names

    def test_comma_list(self):
        assert [c.name for c in select_cases("add, Zero")] == ["add", "Zero"]

    def test_unknown_name(self):
        with pytest.raises(InputError):
            select_cases("add,Conv9")

    def test_trials_must_be_positive(self):
        with pytest.raises(InputError):
            run_gradcheck("add", trials=0)


class TestRun:

    @pytest.mark.parametrize("name", ["SkipConnect", "ChannelAttention", "gem_pool", "batch_all_triplet"])
    def test_cases_pass(self, name):
        result = run_gradcheck(name, trials=2, seed=1)[0]
        assert result.passed, result

    def test_deterministic(self):
        a = run_gradcheck("sigmoid,matmul", trials=2, seed=4)
        b = run_gradcheck("sigmoid,matmul", trials=2, seed=4)
        assert [r.max_error for r in a] == [r.max_error for r in b]

    def test_broken_backward_is_reported(self, monkeypatch):
        monkeypatch.setattr(ad.Sigmoid, "backward", lambda self, grad: (np.zeros_like(grad),))
        results = run_gradcheck("sigmoid", trials=1)
        assert not results[0].passed
        with pytest.raises(GradcheckError) as err:
            ensure_passed(results)
        assert err.value.exit_code == 5

    def test_results_table(self):
        table = results_table(run_gradcheck("add", trials=1))
        assert list(table.columns) == ["name", "max_rel_error", "max_coord_rel_error", "trials", "status"]
        assert table["status"].tolist() == ["ok"]

    def test_coordinate_error_reported(self):
        result = run_gradcheck("multiply", trials=2, seed=2)[0]
        assert 0.0 <= result.coordinate_error < 1e-4

    def test_coordinate_error_flags_single_wrong_entry(self, monkeypatch):
        original = ad.Sigmoid.backward

        def off_by_one_entry(self, grad):
            (g,) = original(self, grad)
            g = g.copy()
            g.reshape(-1)[0] *= 2.0
            return (g,)

        monkeypatch.setattr(ad.Sigmoid, "backward", off_by_one_entry)
        result = run_gradcheck("sigmoid", trials=1, seed=0)[0]
        assert result.coordinate_error > result.max_error


@pytest.mark.slow
def test_full_gradcheck_twenty_trials():
    results = run_gradcheck("all", trials=20, seed=0)
    ensure_passed(results)
