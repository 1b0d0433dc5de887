"""Second-order input jets under a reverse-mode parameter tape.

Subnetwork outputs are propagated together with their first and second
derivatives in the (scalar) input coordinate.  The jet arithmetic is written
out explicitly; torch's autograd records it, so parameter gradients of any loss
built from values, slopes and curvatures come from one reverse sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch

DTYPE = torch.float64


class NumericalError(ArithmeticError):
    pass


@dataclass
class Jet2:
    """Truncated Taylor triple (value, d/dx, d2/dx2).

    Components may be Python floats, numpy arrays or torch tensors.
    """

    v: object
    d1: object
    d2: object

    def __add__(self, other):
        if isinstance(other, Jet2):
            return Jet2(self.v + other.v, self.d1 + other.d1, self.d2 + other.d2)
        return Jet2(self.v + other, self.d1, self.d2)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.v, -self.d1, -self.d2)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet2):
            return Jet2(
                self.v * other.v,
                self.d1 * other.v + self.v * other.d1,
                self.d2 * other.v + 2 * self.d1 * other.d1 + self.v * other.d2,
            )
        return Jet2(self.v * other, self.d1 * other, self.d2 * other)

    __rmul__ = __mul__

    def _compose(self, f0, f1, f2):
        # order-2 Faa di Bruno: (f o g)'' = f''(g) g'^2 + f'(g) g''
        return Jet2(f0, f1 * self.d1, f2 * self.d1 * self.d1 + f1 * self.d2)

    def sin(self):
        s, c = _lib(self.v).sin(self.v), _lib(self.v).cos(self.v)
        return self._compose(s, c, -s)

    def cos(self):
        s, c = _lib(self.v).sin(self.v), _lib(self.v).cos(self.v)
        return self._compose(c, -s, -c)

    def exp(self):
        e = _lib(self.v).exp(self.v)
        return self._compose(e, e, e)


def _lib(v):
    if isinstance(v, torch.Tensor):
        return torch
    if isinstance(v, np.ndarray):
        return np
    return math


def layer_shapes(arch: Sequence[int]) -> list:
    """[(out, in), ...] for a network with the given full layer widths."""
    return [(arch[k + 1], arch[k]) for k in range(len(arch) - 1)]


def param_count(arch: Sequence[int]) -> int:
    return sum(o * i + o for o, i in layer_shapes(arch))


def _unpack(theta: torch.Tensor, arch: Sequence[int]):
    """Split (n_nets, n_params) into per-layer (W, b) batches."""
    layers = []
    pos = 0
    for out, inp in layer_shapes(arch):
        W = theta[:, pos:pos + out * inp].reshape(-1, out, inp)
        pos += out * inp
        b = theta[:, pos:pos + out]
        pos += out
        layers.append((W, b))
    if pos != theta.shape[1]:
        raise ValueError(f"expected {pos} parameters per network, got {theta.shape[1]}")
    return layers


def forward_jets(theta: torch.Tensor, arch: Sequence[int], x: torch.Tensor) -> Jet2:
    """Batched jets for ``n`` networks sharing one architecture.

    theta has shape (n, n_params), x has shape (n, R); the result holds
    tensors of shape (n, R, arch[-1]).  Hidden layers use sine, the output
    layer is affine.
    """
    if theta.ndim != 2 or x.ndim != 2 or theta.shape[0] != x.shape[0]:
        raise ValueError("theta must be (n, n_params) and x must be (n, R)")
    if arch[0] != 1:
        raise ValueError("subnetworks take a scalar input")
    layers = _unpack(theta, arch)
    W0, b0 = layers[0]
    v = x[:, :, None] * W0[:, None, :, 0] + b0[:, None, :]
    # first layer acts on the scalar input: slope is W, curvature vanishes
    z = Jet2(v, W0[:, None, :, 0].expand_as(v), torch.zeros_like(v))
    for W, b in layers[1:]:
        a = z.sin()
        Wt = W.transpose(1, 2)
        z = Jet2(
            torch.baddbmm(b[:, None, :], a.v, Wt),
            torch.bmm(a.d1, Wt),
            torch.bmm(a.d2, Wt),
        )
    return z


def forward_jet(net_params, arch: Sequence[int], x) -> Jet2:
    """Jets of one network at scalar or 1-D array input ``x``.

    Returns a Jet2 whose components have shape (len(x), p) (or (p,) for a
    scalar x); they stay attached to any graph ``net_params`` belongs to.
    """
    theta = torch.as_tensor(net_params, dtype=DTYPE)
    if theta.ndim != 1 or theta.numel() != param_count(arch):
        raise ValueError(
            f"architecture {list(arch)} needs {param_count(arch)} parameters, "
            f"got {theta.numel()}"
        )
    xs = torch.as_tensor(x, dtype=DTYPE)
    scalar = xs.ndim == 0
    xs = xs.reshape(1, -1)
    jet = forward_jets(theta[None, :], arch, xs)
    shape = (arch[-1],) if scalar else (xs.shape[1], arch[-1])
    return Jet2(jet.v.reshape(shape), jet.d1.reshape(shape), jet.d2.reshape(shape))


class Tape:
    """Records parameter leaves for one loss evaluation.

    A fresh Tape per evaluation keeps memory bounded; ``gradient`` runs the
    reverse sweep and flattens leaf gradients in registration order.
    """

    def __init__(self):
        self.leaves: list = []

    def watch(self, array) -> torch.Tensor:
        t = torch.tensor(np.asarray(array, dtype=np.float64), dtype=DTYPE, requires_grad=True)
        self.leaves.append(t)
        return t

    def gradient(self, loss: torch.Tensor) -> np.ndarray:
        return backward(loss, self.leaves)


def backward(loss: torch.Tensor, leaves) -> np.ndarray:
    """Reverse-mode gradient of a scalar with respect to ``leaves``, flattened."""
    if loss.ndim != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NumericalError(f"loss is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, list(leaves), allow_unused=True)
    parts = [
        np.zeros(leaf.numel()) if g is None else g.detach().reshape(-1).numpy()
        for leaf, g in zip(leaves, grads)
    ]
    return np.concatenate(parts) if parts else np.zeros(0)


def fd_check(
    loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    params,
    h: float = 1e-4,
    blocks: Optional[Dict[str, slice]] = None,
    floor: float = 1e-3,
) -> dict:
    """Compare ``loss_fn``'s gradient against central differences.

    The relative error of component k is ``|g_k - fd_k| / max(|fd_k|, floor *
    max|fd|)``; the floor keeps near-zero components from dominating.
    Returns ``{"max": worst, "blocks": {name: worst}, "grad": g, "fd": fd}``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    params = np.array(params, dtype=np.float64)
    _, grad = loss_fn(params)
    grad = np.asarray(grad, dtype=np.float64)
    fd = np.empty_like(params)
    for k in range(params.size):
        step = np.zeros_like(params)
        step[k] = h
        fp, _ = loss_fn(params + step)
        fm, _ = loss_fn(params - step)
        fd[k] = (fp - fm) / (2 * h)
    scale = np.max(np.abs(fd)) if fd.size else 0.0
    if scale == 0.0 and np.max(np.abs(grad), initial=0.0) == 0.0:
        rel = np.zeros_like(fd)
    else:
        denom = np.maximum(np.abs(fd), floor * max(scale, np.finfo(float).tiny))
        rel = np.abs(grad - fd) / denom
    blocks = blocks or {"all": slice(0, params.size)}
    per_block = {name: float(np.max(rel[s], initial=0.0)) for name, s in blocks.items()}
    return {"max": float(np.max(rel, initial=0.0)), "blocks": per_block, "grad": grad, "fd": fd}
