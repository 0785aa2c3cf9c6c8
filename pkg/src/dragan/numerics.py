"""Tensor helpers, parameter bookkeeping and gradient checking.

Tensors and the reverse-mode tape are torch's; this module adds the
log-domain primitives the objective relies on, a grouped parameter store,
and a central finite-difference oracle that is independent of autograd.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple

import torch
from torch import nn

from .exceptions import ContractError, NondeterminismError, NumericDomainError

GROUPS = ("generator", "classifier")

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericDomainError(f"non-finite values in {what}")
    return t


def logsumexp(x: torch.Tensor, dim: int = -1, keepdim: bool = False) -> torch.Tensor:
    """Max-shifted log-sum-exp. Rows that are entirely -inf give -inf."""
    m = x.amax(dim=dim, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m)).detach()
    out = (x - m).exp().sum(dim=dim, keepdim=True).log() + m
    return out if keepdim else out.squeeze(dim)


def log_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return logits - logsumexp(logits, dim=dim, keepdim=True)


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if dim >= logits.dim() or dim < -logits.dim():
        raise ContractError(f"axis {dim} out of range for shape {tuple(logits.shape)}")
    check_finite(logits, "softmax input")
    z = logits - logits.amax(dim=dim, keepdim=True).detach()
    e = z.exp()
    return e / e.sum(dim=dim, keepdim=True)


class ParamStore:
    """Named parameters split into the generator and classifier groups.

    Group membership is fixed at construction. Gradients live in each
    parameter's ``.grad`` and always have the parameter's shape.
    """

    def __init__(self, groups: Mapping[str, nn.Module]):
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ContractError(f"unknown parameter groups {sorted(unknown)}")
        self._params: "OrderedDict[str, nn.Parameter]" = OrderedDict()
        self._group_of: Dict[str, str] = {}
        for group in GROUPS:
            module = groups.get(group)
            if module is None:
                continue
            for name, p in module.named_parameters():
                key = f"{group}.{name}"
                self._params[key] = p
                self._group_of[key] = group

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params.items())

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def names(self, group: Optional[str] = None) -> List[str]:
        return [n for n in self._params if group is None or self._group_of[n] == group]

    def group_of(self, name: str) -> str:
        return self._group_of[name]

    def parameters(self, group: Optional[str] = None) -> List[nn.Parameter]:
        return [self._params[n] for n in self.names(group)]

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self._params.values())).dtype

    def zero_grad(self):
        for p in self._params.values():
            p.grad = torch.zeros_like(p)

    def grads(self, group: Optional[str] = None) -> "OrderedDict[str, torch.Tensor]":
        out = OrderedDict()
        for n in self.names(group):
            g = self._params[n].grad
            out[n] = torch.zeros_like(self._params[n]) if g is None else g.detach().clone()
        return out

    def grad_norm(self, group: Optional[str] = None) -> float:
        total = sum(float((g.double() ** 2).sum()) for g in self.grads(group).values())
        return math.sqrt(total)

    def snapshot(self, group: Optional[str] = None) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((n, self._params[n].detach().clone()) for n in self.names(group))


def backward(output: torch.Tensor, params: ParamStore, accumulate: bool = False) -> ParamStore:
    """Write d(output)/d(param) into every parameter's ``.grad``.

    Parameters not on any path from ``output`` receive exact zeros.
    """
    if output.dim() != 0 and output.numel() != 1:
        raise ContractError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    check_finite(output.detach(), "backward output")
    plist = params.parameters()
    if output.requires_grad:
        grads = torch.autograd.grad(output.reshape(()), plist, allow_unused=True)
    else:
        grads = [None] * len(plist)
    for p, g in zip(plist, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if accumulate and p.grad is not None:
            p.grad = p.grad + g
        else:
            p.grad = g.clone()
    return params


@dataclass
class ParamCheck:
    name: str
    rel_err: float
    analytic_norm: float
    numeric_norm: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: Optional[str]
    per_param: List[ParamCheck] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def __str__(self):
        return f"max_rel_err={self.max_rel_err:.3e} worst={self.worst_param}"


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    diff = float(torch.linalg.vector_norm((a - b).double()))
    scale = max(float(torch.linalg.vector_norm(a.double())), float(torch.linalg.vector_norm(b.double())))
    if scale == 0.0:
        return 0.0
    return diff / scale


def grad_check(
    f: Callable[[], torch.Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    names: Optional[Iterable[str]] = None,
) -> GradCheckReport:
    """Compare autograd against central differences for every parameter entry.

    ``f`` takes no arguments and reads the parameters in ``params``; it must
    be deterministic. Errors are per-tensor norm-relative.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    with torch.no_grad():
        v0, v1 = float(f()), float(f())
    if v0 != v1 and not (math.isnan(v0) and math.isnan(v1)):
        raise NondeterminismError(f"f is not deterministic: {v0!r} != {v1!r}")

    backward(f(), params)
    analytic = params.grads()
    selected = list(names) if names is not None else params.names()

    report = GradCheckReport(max_rel_err=0.0, worst_param=None)
    with torch.no_grad():
        for name in selected:
            p = params[name]
            flat = p.data.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(f())
                flat[i] = orig - eps
                down = float(f())
                flat[i] = orig
                numeric[i] = (up - down) / (2 * eps)
            numeric = numeric.view_as(p)
            a = analytic[name]
            err = relative_error(a, numeric)
            report.per_param.append(
                ParamCheck(name, err, float(a.double().norm()), float(numeric.double().norm()))
            )
            if report.worst_param is None or err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_param = name
    return report


def flat_grad(grads: Mapping[str, torch.Tensor]) -> torch.Tensor:
    return torch.cat([g.reshape(-1) for g in grads.values()]) if grads else torch.zeros(0)


def module_grad(scalar: torch.Tensor, params: List[nn.Parameter]) -> Tuple[torch.Tensor, ...]:
    """Gradient of one scalar w.r.t. ``params`` on a retained graph, zeros where unused."""
    gs = torch.autograd.grad(scalar, params, retain_graph=True, allow_unused=True)
    return tuple(torch.zeros_like(p) if g is None else g for p, g in zip(params, gs))
