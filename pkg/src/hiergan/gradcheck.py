"""Finite-difference verification of the differentiable pipeline.

Each check compares autograd gradients against central finite differences on
a handful of sampled coordinates and reports the worst relative error. The
routing checks verify that generator/fusion losses reach the segmentation
parameters while the global branch contributes exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from . import partops, segmentation
from .toyfaces import render_sample


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


def finite_diff(
    f: Callable[[], torch.Tensor],
    param: torch.Tensor,
    flat_index: int,
    eps: float,
) -> float:
    """Central finite difference of scalar ``f()`` w.r.t. one coordinate."""
    flat = param.data.view(-1)
    orig = flat[flat_index].item()
    flat[flat_index] = orig + eps
    plus = f().item()
    flat[flat_index] = orig - eps
    minus = f().item()
    flat[flat_index] = orig
    return (plus - minus) / (2 * eps)


def compare_grad(
    f: Callable[[], torch.Tensor],
    param: torch.Tensor,
    n_coords: int = 10,
    eps: float = 1e-5,
    rel_tol: float = 0.02,
    seed: int = 0,
    min_grad: float = 1e-12,
) -> tuple[float, bool]:
    """Autodiff vs finite differences on ``n_coords`` sampled coordinates of
    ``param``; returns (worst relative error, nonzero gradient seen)."""
    loss = f()
    (grad,) = torch.autograd.grad(loss, param, retain_graph=False)
    gflat = grad.view(-1)
    gen = torch.Generator().manual_seed(seed)
    # prefer coordinates with non-negligible gradient so the relative error
    # is meaningful; fall back to random ones
    big = (gflat.abs() > gflat.abs().max() * 1e-3).nonzero(as_tuple=True)[0]
    if big.numel() >= n_coords:
        pick = big[torch.randperm(big.numel(), generator=gen)[:n_coords]]
    else:
        pick = torch.randperm(gflat.numel(), generator=gen)[:n_coords]
    worst = 0.0
    for idx in pick.tolist():
        fd = finite_diff(f, param, idx, eps)
        ad = gflat[idx].item()
        denom = max(abs(fd), abs(ad), min_grad)
        worst = max(worst, abs(fd - ad) / denom)
    nonzero = bool(gflat.abs().max() > 0)
    return worst, nonzero


def _double_inputs(seed: int, canvas: int = 64):
    sample = render_sample(seed, canvas)
    image = sample.image.double().unsqueeze(0)
    net = segmentation.build_segnet(seed=seed).double()
    return net, image


def check_mask_gradient(seed: int = 0) -> CheckResult:
    """d(mask value)/d(theta_s) matches finite differences within 2%."""
    net, image = _double_inputs(seed)
    weights = torch.randn(1, 4, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    param = net.mid.weight

    def f():
        soft = segmentation.tempered_softmax(segmentation.seg_forward(net, image), 10.0)
        return (segmentation.group_masks(soft).masks * weights).sum()

    worst, nonzero = compare_grad(f, param, n_coords=10, eps=1e-5, rel_tol=0.02)
    ok = nonzero and worst <= 0.02
    return CheckResult("mask_gradient", ok, f"max rel err {worst:.2e}, nonzero={nonzero}")


def check_bilinear_backward(seed: int = 0) -> CheckResult:
    """Gradient of resized-output sum w.r.t. every source pixel vs FD, 1e-4 abs."""
    gen = torch.Generator().manual_seed(seed)
    src = torch.randn(1, 1, 5, 7, dtype=torch.float64, generator=gen, requires_grad=True)
    out = partops.bilinear_resize(src, 9, 4)
    (grad,) = torch.autograd.grad(out.sum(), src)
    worst = 0.0
    for idx in range(src.numel()):
        fd = finite_diff(lambda: partops.bilinear_resize(src, 9, 4).sum(), src, idx, 1e-6)
        worst = max(worst, abs(fd - grad.view(-1)[idx].item()))
    ok = worst <= 1e-4
    return CheckResult("bilinear_backward", ok, f"max abs err {worst:.2e}")


def check_stitch_gradient(seed: int = 0) -> CheckResult:
    """d(stitched canvas)/d(segmentation parameters) nonzero and FD-correct."""
    net, image = _double_inputs(seed)
    weights = torch.randn(1, 3, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    param = net.mid.weight

    def f():
        soft = segmentation.tempered_softmax(segmentation.seg_forward(net, image), 10.0)
        masks = segmentation.group_masks(soft)
        hard = segmentation.hard_labels(soft)
        bundle = partops.extract_parts(image, masks, hard, 32)
        stitched = partops.stitch_parts(bundle.parts, bundle.boxes, masks, (64, 64))
        return (stitched * weights).sum()

    worst, nonzero = compare_grad(f, param, n_coords=10, eps=1e-5)
    ok = nonzero and worst <= 0.02
    return CheckResult("stitch_gradient", ok, f"max rel err {worst:.2e}, nonzero={nonzero}")


def check_routing(seed: int = 0, n_coords: int = 10, eps: float = 1e-6) -> list[CheckResult]:
    """Verify how the three generator-side losses reach the segmentation
    parameters: the local and fusion losses must produce nonzero gradients
    matching finite differences within 2%, while the global loss has no path
    to them at all."""
    from . import losses as L
    from . import networks as N
    from . import training

    torch.manual_seed(seed)
    net, image = _double_inputs(seed)
    nets = N.build_networks(N.NetworkConfig(seed=seed))
    for m in nets.all_modules().values():
        m.double()
    target = torch.tensor([1])
    param = net.mid.weight

    def all_losses() -> dict[str, torch.Tensor]:
        out = training.forward_pipeline(net, nets, image, target, 10.0, 32)
        per = {}
        for key in ("global", "fusion", *segmentation.REGIONS):
            img = {"global": out.x_global, "fusion": out.x_t}.get(key)
            if img is None:
                img = out.translated[key]
            realness, cls = N.disc_forward(nets.discriminators[key], img)
            per[key] = L.adv_loss_g({key: realness}) + L.cls_loss(cls, target)
        return {
            "global": per["global"],
            "fusion": per["fusion"],
            "local": sum(per[r] for r in segmentation.REGIONS),
        }

    losses = all_losses()
    grads = {}
    for name in ("fusion", "local"):
        (grads[name],) = torch.autograd.grad(losses[name], param, retain_graph=True)
    (g_global,) = torch.autograd.grad(losses["global"], param, allow_unused=True)
    global_zero = g_global is None or bool((g_global == 0).all())

    results = [
        CheckResult(
            "routing_global_zero",
            global_zero,
            "no gradient path from global loss to segmentation parameters"
            if global_zero
            else f"unexpected gradient, max |g| = {g_global.abs().max():.2e}",
        )
    ]

    gen = torch.Generator().manual_seed(seed)
    for name in ("fusion", "local"):
        gflat = grads[name].view(-1)
        big = (gflat.abs() > gflat.abs().max() * 1e-3).nonzero(as_tuple=True)[0]
        pick = big[torch.randperm(big.numel(), generator=gen)[:n_coords]]
        worst = 0.0
        flat = param.data.view(-1)
        for idx in pick.tolist():
            orig = flat[idx].item()
            flat[idx] = orig + eps
            plus = all_losses()[name].item()
            flat[idx] = orig - eps
            minus = all_losses()[name].item()
            flat[idx] = orig
            fd = (plus - minus) / (2 * eps)
            ad = gflat[idx].item()
            worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), 1e-12))
        nonzero = bool(gflat.abs().max() > 0)
        ok = nonzero and worst <= 0.02
        results.append(
            CheckResult(
                f"routing_{name}", ok,
                f"max rel err {worst:.2e} over {pick.numel()} coords, nonzero={nonzero}",
            )
        )
    return results


def basic_checks(seed: int = 0) -> list[CheckResult]:
    return [
        check_mask_gradient(seed),
        check_bilinear_backward(seed),
        check_stitch_gradient(seed),
    ]


def all_checks(seed: int = 0) -> list[CheckResult]:
    return basic_checks(seed) + check_routing(seed)
