import numpy as np
import pytest

from sknet.core import ops
from sknet.core.autograd import GradTape, KinkMonitor, current_tape, grad_check, record, relative_error
from sknet.core.errors import ShapeError, TapeError
from sknet.core.tensor import ConvGeometry, Parameter, Tensor
from sknet.services.gradcheck import check_primitives


class TestGradTape:
    def test_records_only_inside_context(self):
        x = Parameter(np.ones(3))
        ops.relu(x)
        assert current_tape() is None
        with GradTape() as tape:
            ops.relu(x)
        assert len(tape) == 1

    def test_no_record_without_grad_inputs(self):
        with GradTape() as tape:
            ops.relu(Tensor(np.ones(3)))
        assert len(tape) == 0

    def test_sum_product_gradient(self, rng):
        x = Parameter(rng.standard_normal((2, 3)))
        w = rng.standard_normal((2, 3))
        with GradTape() as tape:
            loss = ops.sum_product(x, w)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[x], w)
        np.testing.assert_array_equal(x.grad, w)

    def test_fan_out_accumulates(self):
        x = Parameter(np.array([2.0, -3.0]))
        with GradTape() as tape:
            loss = ops.sum_product(ops.add(x, x), np.ones(2))
        np.testing.assert_array_equal(tape.backward(loss)[x], [2.0, 2.0])

    def test_second_backward_needs_reset(self):
        x = Parameter(np.ones(2))
        with GradTape() as tape:
            loss = ops.sum_product(x, np.ones(2))
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)
        tape.reset()
        assert len(tape) == 0

    def test_untouched_parameter_gets_zero_gradient(self):
        x, unused = Parameter(np.ones(2)), Parameter(np.ones((3, 3)))
        with GradTape() as tape:
            loss = ops.sum_product(x, np.ones(2))
        grads = tape.backward(loss, params=[x, unused])
        np.testing.assert_array_equal(grads[unused], np.zeros((3, 3)))

    def test_non_scalar_output_needs_seed(self):
        x = Parameter(np.ones((2, 2)))
        with GradTape() as tape:
            out = ops.relu(x)
        with pytest.raises(ShapeError):
            tape.backward(out)

    def test_explicit_seed(self):
        x = Parameter(np.array([1.0, -1.0]))
        with GradTape() as tape:
            out = ops.relu(x)
        np.testing.assert_array_equal(tape.backward(out, np.array([5.0, 5.0]))[x], [5.0, 0.0])

    def test_relu_backward_masks_negative_inputs(self):
        x = Parameter(np.array([-1.0, 2.0]))
        with GradTape() as tape:
            out = ops.relu(x)
        np.testing.assert_array_equal(tape.backward(out, np.ones(2))[x], [0.0, 1.0])

    def test_global_avg_pool_backward_spreads_evenly(self):
        x = Parameter(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        with GradTape() as tape:
            loss = ops.sum_product(ops.global_avg_pool(x), np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(tape.backward(loss)[x], np.full((1, 1, 2, 2), 0.25))

    def test_conv_weight_gradient_matches_correlation(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 4, 4)))
        w = Parameter(rng.standard_normal((1, 1, 1, 1)))
        with GradTape() as tape:
            loss = ops.sum_product(ops.conv2d(x, w, ConvGeometry(1, 1, kernel=1)), np.ones((2, 1, 4, 4)))
        assert tape.backward(loss)[w].item() == pytest.approx(x.data.sum(), rel=1e-13)


class TestKinks:
    def test_monitor_sees_relu_masks(self):
        with KinkMonitor() as a:
            ops.relu(Tensor(np.array([1.0, -1.0])))
        with KinkMonitor() as b:
            ops.relu(Tensor(np.array([1.0, 1.0])))
        assert not a.same_as(b)

    def test_grad_check_redraws_across_a_kink(self):
        # first ReLU input lies within one step of zero
        x = Parameter(np.array([8e-6, 1.0, -2.0]))
        report = grad_check(lambda: ops.sum_product(ops.relu(x), np.ones(3)), {"x": x}, probes=4, seed=3)
        assert report.passed()


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(0.1)


def test_zero_upstream_gradient_gives_zero_parameter_gradients(toy_net, images):
    params = toy_net.parameters()
    with GradTape() as tape:
        logits = toy_net(Tensor(images), training=True)
    grads = tape.backward(logits, np.zeros(logits.shape), params=params.values())
    for name, param in params.items():
        assert not np.any(grads[param]), name


def test_grad_check_catches_a_wrong_backward():
    x = Parameter(np.array([0.3, -0.7]))

    def broken():
        out = Tensor(x.data * 2.0)
        return ops.sum_product(record("double", (x,), out, lambda g: (g * 3.0,)), np.ones(2))

    assert not grad_check(broken, {"x": x}).passed()


@pytest.mark.slow
def test_every_primitive_passes_gradient_check():
    reports = check_primitives(seed=11)
    assert set(reports) >= {"conv2d", "max_pool2d", "batch_norm", "softmax_weighted_sum", "cross_entropy"}
    for name, report in reports.items():
        assert report.passed(1e-5), (name, report.max_rel_error)
