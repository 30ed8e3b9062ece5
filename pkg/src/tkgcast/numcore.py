"""Dense numerical substrate shared by every model in the package.

All differentiable math runs in double precision on CPU torch tensors.
Parameters live in a :class:`ParamSet`, an insertion-ordered map from name
to tensor, so that flattening, gradient alignment, and checkpointing all
agree on one canonical ordering.

Analytic gradients and Hessian-vector products are obtained through
reverse-mode autodiff (torch.autograd); the finite-difference routines in
this module deliberately avoid autodiff so they stay independent oracles.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import torch

DTYPE = torch.float64


class EvaluationError(RuntimeError):
    """Raised when an objective or one of its derivatives is non-finite."""


def as_f64(data) -> torch.Tensor:
    """Coerce array-like input to a detached float64 CPU tensor."""
    if isinstance(data, torch.Tensor):
        return data.detach().to(dtype=DTYPE, device="cpu")
    return torch.as_tensor(data, dtype=DTYPE, device="cpu")


def check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise EvaluationError(f"non-finite value in '{name}'")


def configure_determinism(num_threads: int = 1) -> None:
    """Pin torch to a fixed thread count so reductions are reproducible."""
    torch.set_num_threads(num_threads)


class ParamSet:
    """Ordered, named collection of float64 tensors.

    Iteration order is insertion order and is the canonical order used by
    :meth:`flatten`, gradients, and checkpoints. Names are unique.
    """

    def __init__(self, entries: Iterable[tuple[str, torch.Tensor]] = ()):
        self._entries: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, tensor in entries:
            self.add(name, tensor)

    def add(self, name: str, tensor) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._entries[name] = as_f64(tensor)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __setitem__(self, name: str, tensor) -> None:
        if name not in self._entries:
            raise KeyError(f"unknown parameter '{name}'")
        new = as_f64(tensor)
        if tuple(new.shape) != tuple(self._entries[name].shape):
            raise ValueError(
                f"shape mismatch for '{name}': {tuple(new.shape)} vs "
                f"{tuple(self._entries[name].shape)}"
            )
        self._entries[name] = new

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self) -> list[torch.Tensor]:
        return list(self._entries.values())

    @property
    def total_dim(self) -> int:
        return sum(t.numel() for t in self._entries.values())

    def flatten(self) -> torch.Tensor:
        """Concatenate all entries, row-major, in insertion order."""
        if not self._entries:
            return torch.zeros(0, dtype=DTYPE)
        return torch.cat([t.reshape(-1) for t in self._entries.values()])

    def unflatten(self, vec) -> "ParamSet":
        """Inverse of :meth:`flatten`; shapes taken from this set."""
        vec = as_f64(vec).reshape(-1)
        if vec.numel() != self.total_dim:
            raise ValueError(
                f"flat vector has {vec.numel()} elements, expected {self.total_dim}"
            )
        out = ParamSet()
        offset = 0
        for name, t in self._entries.items():
            n = t.numel()
            out.add(name, vec[offset : offset + n].reshape(t.shape).clone())
            offset += n
        return out

    def clone(self) -> "ParamSet":
        return ParamSet((n, t.clone()) for n, t in self._entries.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((n, torch.zeros_like(t)) for n, t in self._entries.items())

    def subset(self, names: Iterable[str]) -> "ParamSet":
        return ParamSet((n, self._entries[n]) for n in names)

    def same_shape_as(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(
            tuple(self[n].shape) == tuple(other[n].shape) for n in self.names()
        )

    def dot(self, other: "ParamSet") -> float:
        return float(self.flatten() @ other.flatten())

    def add_scaled(self, other: "ParamSet", scale: float) -> "ParamSet":
        return ParamSet(
            (n, t + scale * other[n]) for n, t in self._entries.items()
        )

    def check_finite(self) -> None:
        for name, t in self._entries.items():
            check_finite(t, name)


@dataclass
class GradResult:
    """Objective value together with gradients aligned name-for-name."""

    value: float
    grads: ParamSet


Objective = Callable[[ParamSet], torch.Tensor]


def _attached_params(params: ParamSet) -> ParamSet:
    out = ParamSet()
    for name, t in params.items():
        leaf = t.clone().requires_grad_(True)
        out.add(name, leaf)
    return out


def _eval_objective(objective: Objective, params: ParamSet) -> torch.Tensor:
    value = objective(params)
    if not isinstance(value, torch.Tensor):
        value = torch.as_tensor(value, dtype=DTYPE)
    if value.numel() != 1:
        raise ValueError("objective must be scalar-valued")
    if not torch.isfinite(value):
        raise EvaluationError("objective evaluated to a non-finite value")
    return value.reshape(())


def grad(objective: Objective, params: ParamSet) -> GradResult:
    """Value and exact reverse-mode gradient of a scalar objective."""
    leafs = _attached_params(params)
    value = _eval_objective(objective, leafs)
    gs = torch.autograd.grad(value, leafs.tensors(), allow_unused=True)
    out = ParamSet()
    for (name, t), g in zip(leafs.items(), gs):
        g = torch.zeros_like(t) if g is None else g
        check_finite(g, f"grad[{name}]")
        out.add(name, g.detach())
    return GradResult(value=float(value.detach()), grads=out)


def fd_grad(objective: Objective, params: ParamSet, h: float = 1e-5) -> ParamSet:
    """Central-difference gradient, (f(x+h e_i) - f(x-h e_i)) / 2h.

    Uses only objective evaluations; independent of autodiff by design.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    base = params.clone()
    out = base.zeros_like()
    with torch.no_grad():
        for name, t in base.items():
            flat = t.reshape(-1)
            gflat = out[name].reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                f_plus = float(_eval_objective(objective, base))
                flat[i] = orig - h
                f_minus = float(_eval_objective(objective, base))
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def hvp(objective: Objective, params: ParamSet, v: ParamSet) -> ParamSet:
    """Hessian-vector product H @ v via gradient-of-(gradient . v).

    The Hessian is never materialized: a first reverse pass builds grad(f)
    with the graph retained, then the directional scalar grad(f) . v is
    differentiated once more. Linear in v.
    """
    if not params.same_shape_as(v):
        raise ValueError("v must have the same names and shapes as params")
    leafs = _attached_params(params)
    value = _eval_objective(objective, leafs)
    gs = torch.autograd.grad(
        value, leafs.tensors(), create_graph=True, allow_unused=True
    )
    dot = None
    for (name, _), g in zip(leafs.items(), gs):
        if g is None:
            continue
        term = (g * v[name]).sum()
        dot = term if dot is None else dot + term
    if dot is None:
        return params.zeros_like()
    hs = torch.autograd.grad(dot, leafs.tensors(), allow_unused=True)
    out = ParamSet()
    for (name, t), hcol in zip(leafs.items(), hs):
        hcol = torch.zeros_like(t) if hcol is None else hcol
        check_finite(hcol, f"hvp[{name}]")
        out.add(name, hcol.detach())
    return out


@dataclass
class CGResult:
    """Solution of (H + damping*I) x = v and convergence diagnostics."""

    x: ParamSet
    converged: bool
    iterations: int
    residual_norm: float


def cg_solve(
    apply_H: Callable[[ParamSet], ParamSet],
    v: ParamSet,
    damping: float = 0.01,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> CGResult:
    """Conjugate gradients for (H + damping*I) x = v.

    ``apply_H`` must be a symmetric linear operator on ParamSets (typically
    an hvp closure). Residual target is tol * ||v||. A result that stops at
    max_iter carries converged=False; it is never silently returned as good.
    """
    if damping < 0:
        raise ValueError("damping must be >= 0")
    template = v.clone()
    b = v.flatten()
    bnorm = float(torch.linalg.vector_norm(b))
    if bnorm == 0.0:
        return CGResult(x=v.zeros_like(), converged=True, iterations=0, residual_norm=0.0)

    def matvec(x_flat: torch.Tensor) -> torch.Tensor:
        hx = apply_H(template.unflatten(x_flat)).flatten()
        return hx + damping * x_flat

    x = torch.zeros_like(b)
    r = b.clone()
    p = r.clone()
    rdotr = float(r @ r)
    target = tol * bnorm
    iterations = 0
    for k in range(max_iter):
        iterations = k + 1
        hp = matvec(p)
        php = float(p @ hp)
        if php <= 0:
            # Direction of non-positive curvature: the damped operator is
            # not PD, CG theory no longer applies. Stop and flag.
            return CGResult(
                x=template.unflatten(x),
                converged=False,
                iterations=iterations,
                residual_norm=float(torch.linalg.vector_norm(r)),
            )
        alpha = rdotr / php
        x = x + alpha * p
        r = r - alpha * hp
        new_rdotr = float(r @ r)
        if new_rdotr**0.5 <= target:
            return CGResult(
                x=template.unflatten(x),
                converged=True,
                iterations=iterations,
                residual_norm=new_rdotr**0.5,
            )
        p = r + (new_rdotr / rdotr) * p
        rdotr = new_rdotr
    return CGResult(
        x=template.unflatten(x),
        converged=False,
        iterations=iterations,
        residual_norm=float(torch.linalg.vector_norm(r)),
    )
