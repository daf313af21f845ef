"""Dense kernels, the Parameter container and a finite-difference gradient checker.

Matrices are float64 numpy arrays. Every kernel validates shapes and
raises :class:`DimensionError` naming both operands on mismatch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


@dataclass
class Parameter:
    """A trainable array paired with its gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow for any finite input."""
    x = np.asarray(x, dtype=DTYPE)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=DTYPE))


def elementwise_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    _check_same(a, b, "elementwise_mul")
    return a * b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    _check_same(a, b, "add")
    return a + b


def concat_rows(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Concatenate along the last axis, ``u`` first. Leading (batch) axes must agree."""
    u, v = np.asarray(u, dtype=DTYPE), np.asarray(v, dtype=DTYPE)
    if u.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"concat_rows: shapes {u.shape} and {v.shape} do not match")
    return np.concatenate([u, v], axis=-1)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax. Entries equal to -inf get probability exactly 0."""
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("log_softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def dropout_mask(rng: np.random.Generator | None, shape: tuple[int, ...],
                 rate: float) -> np.ndarray | None:
    """Scaled inverted-dropout mask, or None when dropout is off."""
    if rate <= 0.0 or rng is None:
        return None
    if rate >= 1.0:
        raise ValueError("drop rate must be < 1")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(
    loss_fn: Callable[[], float],
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
) -> float:
    """Compare the gradients stored in ``params`` against central differences.

    ``loss_fn`` must be deterministic and read the parameters in place; the
    caller is responsible for having run the analytic backward pass so that
    each ``p.grad`` holds d(loss)/d(p.value) at the current point.

    Returns the maximum over all entries of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        if not np.shares_memory(flat, p.value):
            raise ValueError(f"{p.name}: parameter value is not contiguous")
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            plus = float(loss_fn())
            flat[k] = orig - epsilon
            minus = float(loss_fn())
            flat[k] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise FloatingPointError(f"non-finite loss while perturbing {p.name}[{k}]")
            numeric = (plus - minus) / (2.0 * epsilon)
            a = analytic.reshape(-1)[k]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
