import json

import numpy as np
import pytest
import torch

from dcucnet import cli, gradcheck
from dcucnet.complex_nn import ComplexTensor, prelu
from dcucnet.errors import NondeterminismError
from dcucnet.gradcheck import Check, check_gradients, run_checks


def leaf(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape))


def test_square_has_derivative_2x(rng):
    x = leaf(rng, 20)
    x.requires_grad_(True)
    (g,) = torch.autograd.grad((x**2).sum(), [x])
    assert torch.allclose(g, 2 * x, atol=1e-8, rtol=0)
    rep = check_gradients(lambda: x**2, {"x": x}, reducer=lambda y: y.sum(), name="square")
    assert rep.passed and rep.max_rel_error <= 1e-8


def test_prelu_away_from_kink(rng):
    xr, xi = leaf(rng, 1, 3, 4, 2), leaf(rng, 1, 3, 4, 2)
    for t in (xr, xi):
        t.data = torch.where(t.abs() < 0.05, t.sign() * 0.05 + t, t)
    slope = torch.tensor([0.25, -0.1, 0.7], dtype=torch.float64)
    rep = check_gradients(lambda: prelu(ComplexTensor(xr, xi), slope),
                          {"xr": xr, "xi": xi, "slope": slope}, name="prelu")
    assert rep.passed


def test_small_conv_shape(rng):
    x, w, b = leaf(rng, 1, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    op = lambda: torch.nn.functional.conv2d(x, w, b, padding=1)
    rep = check_gradients(op, {"x": x, "w": w, "b": b}, name="conv")
    assert rep.passed and rep.coords >= 50


class _FlipSign(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x**3

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return -3 * x**2 * g


def test_wrong_gradient_is_caught(rng):
    x = leaf(rng, 10)
    rep = check_gradients(lambda: _FlipSign.apply(x), {"x": x}, name="flip")
    assert not rep.passed and rep.max_rel_error > 1.0


def test_nondeterministic_forward_raises(rng):
    x = leaf(rng, 5)
    counter = iter(range(1000))
    with pytest.raises(NondeterminismError):
        check_gradients(lambda: x * (1 + 1e-3 * next(counter)), {"x": x})


def test_injected_failure_exits_5(monkeypatch, capsys, rng):
    def build():
        x = leaf(rng, 6)
        return dict(op=lambda: _FlipSign.apply(x), inputs={"x": x})

    fake = [Check("flip_sign", "kernel", build), Check("square", "kernel", _square_build(rng))]
    monkeypatch.setattr(gradcheck, "REGISTRY", fake)
    assert cli.main(["gradcheck", "--scope", "kernel"]) == cli.EXIT_GRADCHECK
    out = capsys.readouterr()
    lines = [json.loads(line) for line in out.out.splitlines()]
    assert [r["op"] for r in lines] == ["flip_sign", "square"]
    assert [r["passed"] for r in lines] == [False, True]
    assert "flip_sign" in out.err


def _square_build(rng):
    def build():
        x = leaf(rng, 6)
        return dict(op=lambda: x**2, inputs={"x": x})
    return build


def test_registry_covers_model_ops():
    names = {c.name for c in gradcheck.REGISTRY}
    for required in ("complex_conv2d", "complex_conv_transpose2d", "complex_batch_norm.train", "prelu",
                     "apply_mask", "conformer_block", "conv_stft", "conv_istft", "si_snr_loss", "dcucnet.micro"):
        assert required in names
    model = [c for c in gradcheck.REGISTRY if c.scope == "model"]
    assert len(model) == 1 and model[0].tol == 1e-3


def test_kernel_suite_passes_and_reports_every_check(capsys):
    assert cli.main(["gradcheck", "--scope", "kernel"]) == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    kernel = [c for c in gradcheck.REGISTRY if c.scope == "kernel"]
    assert len(lines) == len(kernel)
    for line in lines:
        r = json.loads(line)
        assert r["passed"] and r["max_rel_error"] <= r["tol"] <= 1e-4 and r["eps"] == 1e-5


def test_micro_model_check():
    (rep,) = run_checks("model")
    assert rep.passed, rep
    assert rep.tol == 1e-3
