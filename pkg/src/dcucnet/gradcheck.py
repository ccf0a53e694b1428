"""Central finite-difference verification of autograd gradients.

Every differentiable operation in the package is registered in
:data:`REGISTRY` under a scope (``kernel`` or ``model``).  A check builds
float64 inputs, reduces the op output to a scalar with fixed random weights,
and compares autograd gradients with ``(f(x + eps) - f(x - eps)) / (2 eps)``
on a seeded sample of coordinates.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import NondeterminismError

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
MODEL_TOL = 1e-3
MIN_COORDS = 50
REL_FLOOR = 1e-8
KINK_MARGIN = 1e-3


@dataclass
class GradReport:
    op: str
    parameter: str
    max_rel_error: float
    tol: float
    passed: bool
    eps: float
    coords: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


def weighted_sum(seed: int = 1234):
    """Reducer sum(w * y) with w fixed per output shape, so no gradient is trivially zero."""
    cache = {}

    def reduce(y):
        if isinstance(y, tuple):
            return sum(reduce(t) for t in y)
        key = tuple(y.shape)
        if key not in cache:
            g = torch.Generator().manual_seed(seed + len(cache))
            cache[key] = torch.randn(key, generator=g, dtype=torch.float64)
        return (cache[key] * y).sum()

    return reduce


def resolution(f0: float, eps: float) -> float:
    """Smallest derivative a central difference can resolve at loss value f0.

    Two evaluations of f each carry a few ulps of summation round-off, so
    derivatives below ~8 * machine_eps * |f| / eps are indistinguishable from 0.
    """
    return 8.0 * np.finfo(np.float64).eps * max(abs(f0), 1.0) / eps


def _sample_coords(numel: int, k: int, rng) -> np.ndarray:
    if numel <= k:
        return np.arange(numel)
    return np.sort(rng.choice(numel, size=k, replace=False))


def check_gradients(op: Callable, inputs: dict, reducer: Callable | None = None,
                    eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL, name: str = "op",
                    max_coords: int = 64, groups: dict | None = None, seed: int = 0) -> GradReport:
    """Compare autograd and central-difference gradients of ``reducer(op())``.

    ``inputs`` maps names to float64 leaf tensors that ``op`` reads (it is
    called with no arguments; perturbations are applied to the tensors in
    place).  ``groups`` optionally pools several inputs under one name, and
    the coordinate budget is then spent across the whole group.
    """
    reducer = reducer or weighted_sum()
    tensors = dict(inputs)
    for t in tensors.values():
        t.requires_grad_(True)
        t.grad = None

    def f():
        with torch.no_grad():
            return float(reducer(op()))

    base_a, base_b = f(), f()
    if base_a != base_b:
        raise NondeterminismError(f"{name}: two forward passes disagree ({base_a!r} vs {base_b!r})")
    floor = max(REL_FLOOR, resolution(base_a, eps) / tol)

    loss = reducer(op())
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    analytic = {
        k: (g if g is not None else torch.zeros_like(t)).detach().reshape(-1)
        for (k, t), g in zip(tensors.items(), grads)
    }

    groups = groups or {k: [k] for k in tensors}
    rng = np.random.default_rng(seed)
    worst, worst_name, total = 0.0, "", 0
    for gname, members in groups.items():
        sizes = [tensors[m].numel() for m in members]
        flat = _sample_coords(sum(sizes), max(max_coords, MIN_COORDS), rng)
        offsets = np.cumsum([0] + sizes)
        for c in flat:
            j = int(np.searchsorted(offsets, c, side="right") - 1)
            member, idx = members[j], int(c - offsets[j])
            t = tensors[member]
            view = t.data.view(-1)
            orig = view[idx].item()
            view[idx] = orig + eps
            fp = f()
            view[idx] = orig - eps
            fm = f()
            view[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[member][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            total += 1
            if err >= worst:
                worst = err
                worst_name = f"{gname}[{member}:{idx}]" if len(members) > 1 else f"{gname}[{idx}]"
    return GradReport(name, worst_name, worst, tol, bool(worst <= tol), eps, total)


# -- registry -------------------------------------------------------------------

@dataclass
class Check:
    name: str
    scope: str
    build: Callable  # () -> dict(op=..., inputs=..., [groups=..., tol=..., max_coords=...])
    tol: float = DEFAULT_TOL


REGISTRY: list[Check] = []


def register(name, scope="kernel", tol=DEFAULT_TOL):
    def deco(fn):
        REGISTRY.append(Check(name, scope, fn, tol))
        return fn
    return deco


def _rand(gen, *shape, scale=1.0):
    return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale)


def _away_from_zero(t, margin=1e-2):
    # keep piecewise-linear kinks out of the +-eps stencil
    return torch.where(t.abs() < margin, torch.sign(t) * margin + (t == 0) * margin, t)


def kink_margin(module, run) -> float:
    """Smallest |input| seen by any ReLU or complex PReLU inside ``module`` during ``run()``."""
    from .complex_nn import ComplexPReLU

    seen = []

    def hook(_mod, args):
        x = args[0]
        parts = (x.real, x.imag) if isinstance(x, tuple) else (x,)
        seen.extend(float(p.detach().abs().min()) for p in parts)

    handles = [m.register_forward_pre_hook(hook) for m in module.modules()
               if isinstance(m, (torch.nn.ReLU, ComplexPReLU))]
    try:
        with torch.no_grad():
            run()
    finally:
        for h in handles:
            h.remove()
    return min(seen) if seen else float("inf")


def _module_inputs(module, prefix=""):
    return {prefix + k: p for k, p in module.named_parameters()}


@register("complex_conv2d")
def _check_cconv():
    from .complex_nn import ComplexConvParams, ComplexTensor, complex_conv2d

    g = torch.Generator().manual_seed(1)
    t = dict(xr=_rand(g, 1, 2, 5, 6), xi=_rand(g, 1, 2, 5, 6), wr=_rand(g, 3, 2, 3, 2),
             wi=_rand(g, 3, 2, 3, 2), br=_rand(g, 3), bi=_rand(g, 3))
    op = lambda: complex_conv2d(ComplexTensor(t["xr"], t["xi"]),
                                ComplexConvParams(t["wr"], t["wi"], t["br"], t["bi"], (2, 1), (1, 1)))
    return dict(op=op, inputs=t)


@register("complex_conv_transpose2d")
def _check_cconvT():
    from .complex_nn import ComplexConvParams, ComplexTensor, complex_conv_transpose2d

    g = torch.Generator().manual_seed(2)
    t = dict(xr=_rand(g, 1, 3, 4, 5), xi=_rand(g, 1, 3, 4, 5), wr=_rand(g, 3, 2, 5, 2),
             wi=_rand(g, 3, 2, 5, 2), br=_rand(g, 2), bi=_rand(g, 2))
    op = lambda: complex_conv_transpose2d(ComplexTensor(t["xr"], t["xi"]),
                                          ComplexConvParams(t["wr"], t["wi"], t["br"], t["bi"], (2, 1), (2, 0)))
    return dict(op=op, inputs=t)


def _bn_params(g, c):
    from .complex_nn import ComplexBatchNormParams

    a = torch.rand(c, generator=g, dtype=torch.float64) + 0.5
    b = torch.rand(c, generator=g, dtype=torch.float64) + 0.5
    return ComplexBatchNormParams(
        _rand(g, c, scale=0.1), _rand(g, c, scale=0.1), a, b, 0.3 * torch.sqrt(a * b),
        _rand(g, c), _rand(g, c), _rand(g, c, scale=0.3), _rand(g, c), _rand(g, c),
    )


@register("complex_batch_norm.train")
def _check_cbn_train():
    from .complex_nn import ComplexTensor, complex_batch_norm

    g = torch.Generator().manual_seed(3)
    p = _bn_params(g, 2)
    t = dict(xr=_rand(g, 2, 2, 3, 4), xi=_rand(g, 2, 2, 3, 4) + 0.5 * _rand(g, 2, 2, 3, 4),
             gamma_rr=p.gamma_rr, gamma_ii=p.gamma_ii, gamma_ri=p.gamma_ri, beta_r=p.beta_r, beta_i=p.beta_i)

    def op():
        q = dataclasses.replace(p, gamma_rr=t["gamma_rr"], gamma_ii=t["gamma_ii"], gamma_ri=t["gamma_ri"],
                                beta_r=t["beta_r"], beta_i=t["beta_i"],
                                running_mean_r=p.running_mean_r.clone(), running_mean_i=p.running_mean_i.clone(),
                                running_vrr=p.running_vrr.clone(), running_vii=p.running_vii.clone(),
                                running_vri=p.running_vri.clone())
        return complex_batch_norm(ComplexTensor(t["xr"], t["xi"]), q, "train")

    return dict(op=op, inputs=t)


@register("complex_batch_norm.eval")
def _check_cbn_eval():
    from .complex_nn import ComplexTensor, complex_batch_norm

    g = torch.Generator().manual_seed(4)
    p = _bn_params(g, 3)
    t = dict(xr=_rand(g, 1, 3, 2, 4), xi=_rand(g, 1, 3, 2, 4), vrr=p.running_vrr, vii=p.running_vii,
             vri=p.running_vri, mean_r=p.running_mean_r, gamma_ri=p.gamma_ri, beta_i=p.beta_i)

    def op():
        q = dataclasses.replace(p, running_vrr=t["vrr"], running_vii=t["vii"], running_vri=t["vri"],
                                running_mean_r=t["mean_r"], gamma_ri=t["gamma_ri"], beta_i=t["beta_i"])
        return complex_batch_norm(ComplexTensor(t["xr"], t["xi"]), q, "eval")

    return dict(op=op, inputs=t)


@register("prelu")
def _check_prelu():
    from .complex_nn import ComplexTensor, prelu

    g = torch.Generator().manual_seed(5)
    t = dict(xr=_away_from_zero(_rand(g, 2, 3, 4, 4)), xi=_away_from_zero(_rand(g, 2, 3, 4, 4)),
             slope=torch.rand(3, generator=g, dtype=torch.float64))
    return dict(op=lambda: prelu(ComplexTensor(t["xr"], t["xi"]), t["slope"]), inputs=t)


@register("apply_mask")
def _check_apply_mask():
    from .complex_nn import ComplexTensor
    from .model import apply_mask

    g = torch.Generator().manual_seed(6)
    t = {k: _rand(g, 1, 1, 9, 5) for k in ("xr", "xi", "mr", "mi")}
    return dict(op=lambda: apply_mask(ComplexTensor(t["xr"], t["xi"]), ComplexTensor(t["mr"], t["mi"])), inputs=t)


@register("bound_mask")
def _check_bound_mask():
    from .complex_nn import ComplexTensor
    from .model import bound_mask

    g = torch.Generator().manual_seed(7)
    t = {k: _rand(g, 1, 1, 9, 5) for k in ("mr", "mi")}
    return dict(op=lambda: bound_mask(ComplexTensor(t["mr"], t["mi"]), 1.0), inputs=t)


def _conformer_cfg():
    from .conformer import ConformerConfig

    return ConformerConfig(model_dim=8, num_heads=2, ffn_expansion=2, conv_kernel=3, num_blocks=1)


def _randomize(module, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(_rand(g, *p.shape, scale=0.5))
    return module.double()


def _seq_check(module_fn, seed):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    module = _randomize(module_fn(), seed).train()
    x = _rand(g, 2, 5, 8)
    t = {"x": x, **_module_inputs(module)}
    return dict(op=lambda: module(t["x"]), inputs=t)


@register("ffn_half")
def _check_ffn():
    from .conformer import HalfStepFFN

    return _seq_check(lambda: HalfStepFFN(8, 2), 8)


@register("mhsa")
def _check_mhsa():
    from .conformer import MultiHeadSelfAttention

    return _seq_check(lambda: MultiHeadSelfAttention(8, 2), 9)


@register("conv_module")
def _check_conv_module():
    from .conformer import ConvModule

    return _seq_check(lambda: ConvModule(8, 3), 10)


@register("conformer_block")
def _check_conformer_block():
    from .conformer import ConformerBlock

    return _seq_check(lambda: ConformerBlock(_conformer_cfg()), 11)


@register("encode_frames")
def _check_visual():
    from .visual import VisualFrontend

    for seed in range(12, 112):
        torch.manual_seed(seed)
        g = torch.Generator().manual_seed(seed)
        net = VisualFrontend(4, (2,), (6, 6)).double().train()
        frames = torch.rand(3, 6, 6, generator=g, dtype=torch.float64) * 255.0
        if kink_margin(net, lambda: net(frames)) > KINK_MARGIN:
            break
    t = {"frames": frames, **_module_inputs(net)}
    return dict(op=lambda: net(t["frames"]), inputs=t)


@register("temporal_upsample.linear")
def _check_upsample():
    from .visual import temporal_upsample

    g = torch.Generator().manual_seed(13)
    t = {"e": _rand(g, 3, 4)}
    return dict(op=lambda: temporal_upsample(t["e"], 7, "linear"), inputs=t)


@register("conv_stft")
def _check_stft():
    from .dsp.stft import ConvSTFT, StftConfig

    g = torch.Generator().manual_seed(14)
    stft = ConvSTFT(StftConfig(12, 4, 16))
    t = {"x": _rand(g, 1, 40)}
    return dict(op=lambda: stft(t["x"]), inputs=t)


@register("conv_istft")
def _check_istft():
    from .dsp.stft import ConvISTFT, StftConfig

    g = torch.Generator().manual_seed(15)
    istft = ConvISTFT(StftConfig(12, 4, 16))
    t = {"re": _rand(g, 1, 9, 11), "im": _rand(g, 1, 9, 11)}
    return dict(op=lambda: istft(t["re"], t["im"], 40), inputs=t)


@register("si_snr_loss", tol=1e-5)
def _check_si_snr():
    from .train import si_snr_loss

    g = torch.Generator().manual_seed(16)
    target = _rand(g, 2, 64)
    t = {"estimate": target + 0.5 * _rand(g, 2, 64)}
    return dict(op=lambda: si_snr_loss(t["estimate"], target), inputs=t, reducer=lambda y: y)


@register("plain_snr_loss", tol=1e-5)
def _check_plain_snr():
    from .train import si_snr_loss

    g = torch.Generator().manual_seed(17)
    target = _rand(g, 2, 64)
    t = {"estimate": target + 0.5 * _rand(g, 2, 64)}
    return dict(op=lambda: si_snr_loss(t["estimate"], target, "plain_snr"), inputs=t, reducer=lambda y: y)


PARAM_GROUPS = ("encoder", "fuse", "conformer", "decoder", "visual")


@register("dcucnet.micro", scope="model", tol=MODEL_TOL)
def _check_model():
    from .model import DCUCNet, micro_config

    for seed in range(18, 118):
        g = torch.Generator().manual_seed(seed)
        model = DCUCNet(micro_config(seed=seed)).double().train()
        noisy = _rand(g, 2, 40, scale=0.5)
        frames = (torch.rand(2, 2, 8, 8, generator=g) * 255).to(torch.uint8)
        if kink_margin(model, lambda: model(noisy, frames)) > KINK_MARGIN:
            break
    params = _module_inputs(model)
    groups = {grp: [k for k in params if k.split(".")[0].startswith(grp)] for grp in PARAM_GROUPS}
    groups["input"] = ["noisy"]
    t = {"noisy": noisy, **params}
    return dict(op=lambda: model(t["noisy"], frames), inputs=t, groups=groups, max_coords=MIN_COORDS)


def run_checks(scope: str = "kernel", registry=None, eps: float = DEFAULT_EPS) -> list[GradReport]:
    registry = REGISTRY if registry is None else registry
    reports = []
    for check in registry:
        if scope != "all" and check.scope != scope:
            continue
        spec = check.build()
        reports.append(check_gradients(
            spec["op"], spec["inputs"], spec.get("reducer"), eps=eps, tol=check.tol, name=check.name,
            max_coords=spec.get("max_coords", 64), groups=spec.get("groups"),
        ))
    return reports
