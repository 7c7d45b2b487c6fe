import time

import pytest
import torch

from craniopy.errors import ConfigError
from craniopy.gradcheck import (
    TOLERANCE,
    check_pipeline,
    finite_difference_check,
    tiny_batches,
    tiny_config,
)


class TestFiniteDifferenceCheck:
    def test_quadratic(self):
        w = torch.tensor([0.3, -1.2, 2.5, 0.7], dtype=torch.float64, requires_grad=True)
        result = finite_difference_check(lambda: (w ** 2).sum(), [("w", w)], probe_count=4)
        assert result.max_rel_error < 1e-8
        assert result.probes == 4
        assert result.passed

    def test_detects_wrong_gradient(self):
        w = torch.tensor([0.5, 1.5], dtype=torch.float64, requires_grad=True)

        class Broken(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x ** 2).sum()

            @staticmethod
            def backward(ctx, grad):
                return grad * torch.ones(2, dtype=torch.float64)

        result = finite_difference_check(lambda: Broken.apply(w), [("w", w)], probe_count=2)
        assert not result.passed
        assert result.worst_param == "w"

    def test_parameters_restored(self):
        w = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64, requires_grad=True)
        finite_difference_check(lambda: (w ** 3).sum(), [("w", w)], probe_count=3)
        assert w.tolist() == [1.0, 2.0, 3.0]

    def test_probe_count_is_capped(self):
        w = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        assert finite_difference_check(lambda: (w - 1).pow(2).sum(), [("w", w)], probe_count=64).probes == 3

    @pytest.mark.parametrize("h", [0.0, -1e-5])
    def test_step_must_be_positive(self, h):
        w = torch.zeros(2, dtype=torch.float64, requires_grad=True)
        with pytest.raises(ValueError, match="positive"):
            finite_difference_check(lambda: w.sum(), [("w", w)], h=h)

    def test_needs_double_precision(self):
        w = torch.zeros(2, dtype=torch.float32, requires_grad=True)
        with pytest.raises(ValueError, match="64-bit"):
            finite_difference_check(lambda: w.sum(), [("w", w)])


class TestPipelineCheck:
    def test_tiny_instance(self):
        config = tiny_config()
        skull, face = tiny_batches(config)
        assert tuple(skull.X.shape) == (2, 4, 2 + config.d_feat)
        assert tuple(face.f_global.shape) == (2, config.d_g)
        assert skull.ids == face.ids

    def test_tiny_graph_stays_sparse(self):
        # a near-complete graph smooths the tokens together and starves the attention gradients
        skull, face = tiny_batches(tiny_config())
        for batch in (skull, face):
            off_diagonal = batch.adjacency * (1 - torch.eye(4, dtype=batch.adjacency.dtype))
            assert int((off_diagonal != 0).sum(dim=(-2, -1)).max()) <= 8

    def test_full_pipeline(self):
        start = time.perf_counter()
        result = check_pipeline(tiny_config())
        assert result.max_rel_error <= TOLERANCE, result.worst_param
        assert time.perf_counter() - start < 60

    def test_without_attention(self):
        assert check_pipeline(tiny_config(use_ca=False), probe_count=32).passed

    def test_envelope_refused(self):
        with pytest.raises(ConfigError, match="envelope"):
            check_pipeline(tiny_config(envelope=True))
