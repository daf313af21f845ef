"""Finite-difference check of the full model's analytic gradients on a tiny batch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Bucket, Example, batch_from_examples
from .lstm import ModulationMode
from .model import CaptionModel, ModelConfig, Variant
from .numerics import grad_check


@dataclass
class GradCheckSetup:
    hidden_size: int = 8
    vocab_size: int = 12
    feature_dim: int = 5
    max_objects: int = 3  # T_A
    max_tokens: int = 4  # T_B
    # at 0.08 many gradient entries sit near 1e-10 where central differences are all roundoff
    init_scale: float = 1.0
    mode: ModulationMode = ModulationMode.SIGMOID
    variant: Variant = Variant.MAT
    seed: int = 0
    epsilon: float = 1e-5


def tiny_batch(setup: GradCheckSetup, rng: np.random.Generator):
    """Two examples: one fills the bucket, one is shorter in both axes."""
    D, V = setup.feature_dim, setup.vocab_size
    T_A, T_B = setup.max_objects, setup.max_tokens
    words = rng.integers(4, V, size=T_B)
    full = Example(rng.standard_normal((T_A, D)), [1, *words[:T_B - 2].tolist(), 2])
    short = Example(rng.standard_normal((max(1, T_A - 1), D)), [1, int(words[-1]), 2][:max(2, T_B - 1)])
    return batch_from_examples([full, short], Bucket(T_A, T_B))


def run_grad_check(setup: GradCheckSetup = GradCheckSetup()) -> float:
    """Max relative error between backprop and central differences (dropout off)."""
    rng = np.random.default_rng(setup.seed)
    model = CaptionModel(ModelConfig(setup.vocab_size, setup.feature_dim, setup.hidden_size,
                                     setup.variant, setup.mode, setup.init_scale), rng)
    batch = tiny_batch(setup, rng)
    model.zero_grad()
    model.forward(batch)
    model.backward()
    return grad_check(lambda: model.loss(batch), model.parameters(), setup.epsilon)
