"""Differentiable operator contract and a finite-difference gradient checker.

The operators themselves come from PyTorch; this module pins down the
pieces the rest of the package relies on: output-shape arithmetic, closed
form parameter counts, a numerically stable softmax, batch-norm defaults,
deterministic execution and :func:`grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class TensorSpec:
    shape: tuple[int, int, int, int]
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if len(self.shape) != 4 or any(int(d) < 1 for d in self.shape):
            raise ValueError(f"invalid tensor shape {self.shape}")

    @property
    def batch(self) -> int:
        return self.shape[0]

    @property
    def channels(self) -> int:
        return self.shape[1]


def conv2d_output_shape(inp: TensorSpec, out_channels: int, kernel: int, stride: int = 1, pad: int = 0) -> TensorSpec:
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be >= 1")
    b, _, h, w = inp.shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    if ho < 1 or wo < 1 or out_channels < 1:
        raise ValueError(f"non-positive output shape {(b, out_channels, ho, wo)}")
    return TensorSpec((b, out_channels, ho, wo))


def conv_transpose2d_output_shape(
    inp: TensorSpec, out_channels: int, kernel: int, stride: int = 1, pad: int = 0
) -> TensorSpec:
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be >= 1")
    b, _, h, w = inp.shape
    ho = (h - 1) * stride - 2 * pad + kernel
    wo = (w - 1) * stride - 2 * pad + kernel
    if ho < 1 or wo < 1 or out_channels < 1:
        raise ValueError(f"non-positive output shape {(b, out_channels, ho, wo)}")
    return TensorSpec((b, out_channels, ho, wo))


# closed-form learnable-parameter counts

def conv2d_params(in_ch: int, out_ch: int, kernel: int, bias: bool) -> int:
    return in_ch * out_ch * kernel * kernel + (out_ch if bias else 0)


def conv_transpose2d_params(in_ch: int, out_ch: int, kernel: int, bias: bool) -> int:
    return in_ch * out_ch * kernel * kernel + (out_ch if bias else 0)


def batchnorm_params(channels: int) -> int:
    return 2 * channels


def softmax_axis(x, axis: int = -1):
    """Max-shifted softmax along ``axis``; accepts tensors or arrays."""
    if isinstance(x, torch.Tensor):
        z = x - x.amax(dim=axis, keepdim=True).detach()
        e = torch.exp(z)
        return e / e.sum(dim=axis, keepdim=True)
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def batch_norm(channels: int) -> torch.nn.BatchNorm2d:
    return torch.nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(-2, -1))


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(pred, target)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int = 0) -> torch.Tensor:
    if not (labels != ignore_index).any():
        raise ValueError("every pixel carries the ignore label")
    return F.cross_entropy(logits, labels.long(), ignore_index=ignore_index)


def set_deterministic(seed: int | None = None) -> None:
    """Single-threaded, deterministic kernels; optionally reseed the global RNG."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    if seed is not None:
        torch.manual_seed(seed)


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    worst_index: tuple[int, ...] | None = None
    message: str = ""
    n_skipped: int = 0  # coordinates whose stencil straddled a kink

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-3,
    tol: float = 2e-2,
    n_coords: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    The error at coordinate i is ``|fd_i - ad_i| / max|ad|``, the max taken over
    all of ``x`` (a normwise relative error). Componentwise ratios are
    meaningless for near-zero entries once float32 round-off in ``f`` is
    ~1e-7 of its magnitude.

    A coordinate whose one-sided slopes ``(f(x+e)-f(x))/e`` and
    ``(f(x)-f(x-e))/e`` differ by more than ``tol * max|ad|`` sits on a kink
    (ReLU, max-pool) that central differences cannot resolve; it is replaced
    by another random coordinate and counted in ``n_skipped``. The test only
    reads values of ``f``, so it cannot hide a wrong analytic gradient. More
    skips than checks is a FAIL.
    """
    x = x.detach().clone()
    xg = x.clone().requires_grad_(True)
    y = f(xg)
    if y.numel() != 1:
        raise ValueError("f must return a scalar")
    if not torch.isfinite(y).all():
        return GradCheckReport(False, float("inf"), 0, None, f"non-finite f(x) = {y.item()}")
    (grad,) = torch.autograd.grad(y, xg)
    grad = grad.detach()
    bad = ~torch.isfinite(grad)
    if bad.any():
        loc = tuple(int(i) for i in torch.nonzero(bad)[0])
        return GradCheckReport(False, float("inf"), 0, loc, f"non-finite gradient at {loc}")

    shape = tuple(x.shape)
    flat = x.view(-1)
    ad_all = grad.reshape(-1).double().numpy()
    scale = float(np.abs(ad_all).max())
    if scale == 0.0:
        scale = 1.0  # all-zero gradient: compare absolutely
    order = np.random.default_rng(seed).permutation(flat.numel())

    idx, fd, skipped = [], [], 0
    with torch.no_grad():
        f0 = f(x).item()
        for i in order:
            if len(idx) == n_coords or skipped > n_coords:
                break
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                loc = tuple(int(j) for j in np.unravel_index(i, shape))
                return GradCheckReport(False, float("inf"), len(idx), loc, f"non-finite f near {loc}")
            if abs((fp - f0) - (f0 - fm)) / eps > tol * scale:
                skipped += 1
                continue
            idx.append(int(i))
            fd.append((fp - fm) / (2 * eps))
    if skipped > n_coords or not idx:
        return GradCheckReport(False, float("inf"), len(idx), None,
                               f"{skipped} of {skipped + len(idx)} coordinates non-smooth at eps={eps}",
                               skipped)
    fd = np.asarray(fd)
    ad = ad_all[idx]
    rel = np.abs(fd - ad) / scale
    worst = int(np.argmax(rel))
    loc = tuple(int(j) for j in np.unravel_index(idx[worst], shape))
    max_rel = float(rel[worst])
    ok = max_rel <= tol
    msg = (f"max rel err {max_rel:.3e} at {loc} (fd={fd[worst]:.6g}, ad={ad[worst]:.6g}); "
           f"{len(idx)} checked, {skipped} skipped")
    return GradCheckReport(ok, max_rel, len(idx), loc, msg, skipped)


def grad_check_param(
    loss: Callable[[nn.Module], torch.Tensor],
    module: nn.Module,
    name: str,
    **kwargs,
) -> GradCheckReport:
    """``grad_check`` of ``loss(module)`` with respect to the parameter ``name``.

    The parameter is swapped in functionally, so ``module`` is left untouched.
    """
    params = dict(module.named_parameters())
    if name not in params:
        raise KeyError(f"{type(module).__name__} has no parameter {name!r}")
    state = {**params, **dict(module.named_buffers())}

    class _Bound(nn.Module):
        def __init__(self):
            super().__init__()
            self.inner = module

        def forward(self):
            return loss(self.inner)

    bound = _Bound()
    prefixed = {f"inner.{k}": v for k, v in state.items()}

    def f(p):
        return torch.func.functional_call(bound, {**prefixed, f"inner.{name}": p}, ())

    return grad_check(f, params[name].detach(), **kwargs)
