"""Learned quantized weights: binary encodings times a learnable basis.

Each filter owns a shadow matrix ``S`` (``N_w x K_w``, clipped to [-1, 1])
and a basis ``v`` (``K_w``). The forward weight is ``sign(S) @ v``; the
shadow is trained through ``sign`` with a straight-through estimator.
Arrays may carry a leading filter axis, in which case every filter is
handled independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericError, ParameterError, ShapeError


def sign(x: np.ndarray) -> np.ndarray:
    """Sign with ``sign(0) = +1``."""
    return np.where(x >= 0, 1.0, -1.0)


@dataclass
class OptimConfig:
    lr: float = 0.02
    gamma_v: float = 1.0 / 50
    gamma_s: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4  # full-precision parameters
    weight_decay_q: float = 1e-5  # quantization basis vectors
    power: float = 2.0
    final_lr: float = 1e-6
    epochs: int = 120

    def __post_init__(self):
        if self.lr <= 0 or self.gamma_v <= 0 or self.gamma_s <= 0:
            raise ParameterError("lr, gamma_v and gamma_s must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ParameterError("epochs must be non-negative")


def poly_lr(epoch: int, opt: OptimConfig) -> float:
    """Polynomial decay from ``opt.lr`` to ``opt.final_lr`` over ``opt.epochs``."""
    if opt.epochs == 0 or epoch >= opt.epochs:
        return opt.final_lr
    frac = 1.0 - max(epoch, 0) / opt.epochs
    return opt.final_lr + (opt.lr - opt.final_lr) * frac ** opt.power


def nesterov_step(param: np.ndarray, grad: np.ndarray, buf: np.ndarray, lr: float,
                  momentum: float, weight_decay: float = 0.0) -> None:
    """In-place Nesterov SGD step; ``buf`` holds the momentum buffer."""
    g = grad + weight_decay * param if weight_decay else grad
    if momentum:
        buf *= momentum
        buf += g
        g = g + momentum * buf
    param -= lr * g


@dataclass
class WeightQuantParams:
    shadow: np.ndarray  # (..., N_w, K_w)
    basis: np.ndarray  # (..., K_w)
    filter_id: Optional[int] = None
    shadow_buf: Optional[np.ndarray] = None
    basis_buf: Optional[np.ndarray] = None

    def __post_init__(self):
        self.shadow = np.asarray(self.shadow, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.shadow.ndim < 2 or self.shadow.shape[:-2] + self.shadow.shape[-1:] != self.basis.shape:
            raise ShapeError(f"shadow {self.shadow.shape} does not match basis {self.basis.shape}")
        if np.any(np.abs(self.shadow) > 1.0):
            raise ParameterError("shadow entries must lie in [-1, 1]")
        if self.shadow_buf is None:
            self.shadow_buf = np.zeros_like(self.shadow)
        if self.basis_buf is None:
            self.basis_buf = np.zeros_like(self.basis)

    @property
    def n(self) -> int:
        return self.shadow.shape[-2]

    @property
    def k(self) -> int:
        return self.shadow.shape[-1]

    @property
    def binary(self) -> np.ndarray:
        return sign(self.shadow)

    def filter(self, i: int) -> "WeightQuantParams":
        """A view of one filter of a stacked parameter set."""
        return WeightQuantParams(self.shadow[i], self.basis[i], filter_id=i,
                                 shadow_buf=self.shadow_buf[i], basis_buf=self.basis_buf[i])

    @classmethod
    def init(cls, n_filters: int, n: int, k: int, scale: float, rng: np.random.Generator):
        """Uniform(-1, 1) shadow; basis ``[scale/2, scale/4, ..., scale/2**k]``."""
        shadow = rng.uniform(-1.0, 1.0, size=(n_filters, n, k))
        basis = np.tile(scale / 2.0 ** np.arange(1, k + 1), (n_filters, 1))
        return cls(shadow, basis)


def lqw_forward(params: WeightQuantParams) -> np.ndarray:
    return np.einsum("...nk,...k->...n", params.binary, params.basis)


def lqw_backward(grad_wq, params: WeightQuantParams):
    """Chain rule through ``W_q = sign(S) v``. Returns ``(grad_Sb, grad_v)``."""
    grad_wq = np.asarray(grad_wq, dtype=np.float64)
    if grad_wq.shape != params.shadow.shape[:-1]:
        raise ShapeError(f"gradient shape {grad_wq.shape} != weight shape {params.shadow.shape[:-1]}")
    grad_sb = grad_wq[..., :, None] * params.basis[..., None, :]
    grad_v = np.einsum("...n,...nk->...k", grad_wq, params.binary)
    return grad_sb, grad_v


def lqw_update(params: WeightQuantParams, grads, opt: OptimConfig, step_lr: float) -> WeightQuantParams:
    """Mutates ``params``: basis at ``gamma_v * lr`` with decay, shadow at
    ``gamma_s * lr`` (gradient w.r.t. ``sign(S)`` used as-is), then clipped."""
    grad_sb, grad_v = grads
    if grad_sb.shape != params.shadow.shape or grad_v.shape != params.basis.shape:
        raise ShapeError("gradient shapes do not match parameters")
    if not (np.all(np.isfinite(grad_sb)) and np.all(np.isfinite(grad_v))):
        raise NumericError("non-finite gradient in quantized weight update")
    nesterov_step(params.basis, grad_v, params.basis_buf, opt.gamma_v * step_lr,
                  opt.momentum, opt.weight_decay_q)
    nesterov_step(params.shadow, grad_sb, params.shadow_buf, opt.gamma_s * step_lr, opt.momentum)
    np.clip(params.shadow, -1.0, 1.0, out=params.shadow)
    return params


def level_set(basis) -> np.ndarray:
    """All ``2**K`` values ``sum_k s_k v_k`` with ``s`` in {-1, +1}^K."""
    v = np.asarray(basis, dtype=np.float64)
    k = v.size
    signs = 1.0 - 2.0 * ((np.arange(1 << k)[:, None] >> np.arange(k)) & 1)
    return signs @ v
