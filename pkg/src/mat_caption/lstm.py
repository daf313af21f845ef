"""LSTM cell with an explicit backward pass.

Gate pre-activations for the input, forget, output and modulation gates are
stored stacked in that order, so one matmul serves all four. Named per-gate
blocks (``W_xi``, ``W_hf``, ``b_g`` ...) are exposed as views.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, Parameter, sigmoid

GATES = ("i", "f", "o", "g")


class ModulationMode(str, enum.Enum):
    """Nonlinearity of the input modulation gate.

    ``SIGMOID`` squashes it with a sigmoid (the default), ``TANH`` with the
    usual tanh.
    """

    SIGMOID = "sigmoid"
    TANH = "tanh"


@dataclass
class LstmParams:
    W_x: Parameter  # (4H, E)
    W_h: Parameter  # (4H, H)
    b: Parameter  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.W_h.value.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_x.value.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.W_x, self.W_h, self.b]

    def block(self, name: str) -> np.ndarray:
        """View of one gate's weights, e.g. ``block("W_hf")`` or ``block("b_o")``."""
        H = self.hidden_size
        if name.startswith("b_"):
            src, gate = self.b.value, name[2:]
        elif name.startswith("W_x") or name.startswith("W_h"):
            src = self.W_x.value if name[2] == "x" else self.W_h.value
            gate = name[3:]
        else:
            raise KeyError(name)
        k = GATES.index(gate)
        return src[k * H : (k + 1) * H]

    @classmethod
    def init(cls, prefix: str, input_size: int, hidden_size: int,
             rng: np.random.Generator, scale: float = 0.08) -> "LstmParams":
        H = hidden_size
        return cls(
            W_x=Parameter(f"{prefix}.W_x", rng.uniform(-scale, scale, (4 * H, input_size))),
            W_h=Parameter(f"{prefix}.W_h", rng.uniform(-scale, scale, (4 * H, H))),
            b=Parameter(f"{prefix}.b", np.zeros(4 * H)),
        )


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_size: int, batch: int | None = None) -> "LstmState":
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class LstmCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    tanh_c: np.ndarray
    mode: ModulationMode
    squeeze: bool


def lstm_step(params: LstmParams, x: np.ndarray, prev: LstmState,
              mode: ModulationMode = ModulationMode.SIGMOID
              ) -> tuple[LstmState, LstmCache]:
    """One timestep. ``x`` is ``(E,)`` or ``(B, E)``; the state follows the same rank."""
    mode = ModulationMode(mode)
    squeeze = np.ndim(x) == 1
    x2 = np.atleast_2d(x)
    h_prev = np.atleast_2d(prev.h)
    c_prev = np.atleast_2d(prev.c)
    H = params.hidden_size
    if x2.shape[1] != params.input_size:
        raise DimensionError(f"lstm_step: input {x2.shape} vs W_x {params.W_x.shape}")
    if h_prev.shape != (x2.shape[0], H) or c_prev.shape != h_prev.shape:
        raise DimensionError(f"lstm_step: state {h_prev.shape}/{c_prev.shape} vs hidden {H}")

    z = x2 @ params.W_x.value.T + h_prev @ params.W_h.value.T + params.b.value
    ifo = sigmoid(z[:, : 3 * H])
    i, f, o = ifo[:, :H], ifo[:, H : 2 * H], ifo[:, 2 * H :]
    zg = z[:, 3 * H :]
    g = sigmoid(zg) if mode is ModulationMode.SIGMOID else np.tanh(zg)
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = LstmCache(x2, h_prev, c_prev, i, f, o, g, tanh_c, mode, squeeze)
    if squeeze:
        return LstmState(h[0], c[0]), cache
    return LstmState(h, c), cache


def lstm_step_backward(params: LstmParams, cache: LstmCache | None,
                       dh: np.ndarray, dc: np.ndarray
                       ) -> tuple[np.ndarray, LstmState]:
    """Backpropagate one step. Accumulates into the parameter grads.

    Returns ``(dx, LstmState(dh_prev, dc_prev))``.
    """
    if cache is None:
        raise ValueError("lstm_step_backward: missing forward cache")
    dh = np.atleast_2d(dh)
    dc = np.atleast_2d(dc)
    i, f, o, g = cache.i, cache.f, cache.o, cache.g

    dc_total = dc + dh * o * (1.0 - cache.tanh_c**2)
    d_o = dh * cache.tanh_c
    d_i = dc_total * g
    d_g = dc_total * i
    d_f = dc_total * cache.c_prev
    dc_prev = dc_total * f

    if cache.mode is ModulationMode.SIGMOID:
        dz_g = d_g * g * (1.0 - g)
    else:
        dz_g = d_g * (1.0 - g * g)
    dz = np.concatenate(
        [d_i * i * (1.0 - i), d_f * f * (1.0 - f), d_o * o * (1.0 - o), dz_g], axis=1
    )
    params.W_x.grad += dz.T @ cache.x
    params.W_h.grad += dz.T @ cache.h_prev
    params.b.grad += dz.sum(axis=0)
    dx = dz @ params.W_x.value
    dh_prev = dz @ params.W_h.value
    if cache.squeeze:
        return dx[0], LstmState(dh_prev[0], dc_prev[0])
    return dx, LstmState(dh_prev, dc_prev)
