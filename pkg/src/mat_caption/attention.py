"""Sequential attention over encoder hidden states and the output softmax layer.

At decode step t the scores use the previous decoder state d_{t-1}:

    u_i = V . tanh(W_H h_i + W_D d_{t-1})
    a   = softmax(u)            (masked positions get weight 0)
    ctx = sum_i a_i h_i

and the word distribution is

    out = concat(d_t, ctx)
    p   = softmax(W_V (W_C out + b_C) + b_V)

Without attention the output layer is ``softmax(W_V d_t + b_V)``.
All functions work on a leading batch axis; single examples use ``B = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, Parameter, log_softmax, softmax


@dataclass
class AttentionParams:
    V: Parameter  # (H, 1)
    W_H: Parameter  # (H, H)
    W_D: Parameter  # (H, H)
    W_C: Parameter  # (H, 2H)
    b_C: Parameter  # (H,)
    W_V: Parameter  # (vocab, H)
    b_V: Parameter  # (vocab,)

    @property
    def hidden_size(self) -> int:
        return self.W_H.value.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.W_V.value.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.V, self.W_H, self.W_D, self.W_C, self.b_C, self.W_V, self.b_V]

    @classmethod
    def init(cls, hidden_size: int, vocab_size: int, rng: np.random.Generator,
             scale: float = 0.08) -> "AttentionParams":
        H = hidden_size
        u = lambda *shape: rng.uniform(-scale, scale, shape)  # noqa: E731
        return cls(
            V=Parameter("attn.V", u(H, 1)),
            W_H=Parameter("attn.W_H", u(H, H)),
            W_D=Parameter("attn.W_D", u(H, H)),
            W_C=Parameter("attn.W_C", u(H, 2 * H)),
            b_C=Parameter("attn.b_C", np.zeros(H)),
            W_V=Parameter("out.W_V", u(vocab_size, H)),
            b_V=Parameter("out.b_V", np.zeros(vocab_size)),
        )


@dataclass
class OutputParams:
    """Output layer of the attention-free variants."""

    W_V: Parameter  # (vocab, H)
    b_V: Parameter  # (vocab,)

    @property
    def vocab_size(self) -> int:
        return self.W_V.value.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.W_V, self.b_V]

    @classmethod
    def init(cls, hidden_size: int, vocab_size: int, rng: np.random.Generator,
             scale: float = 0.08) -> "OutputParams":
        return cls(
            W_V=Parameter("out.W_V", rng.uniform(-scale, scale, (vocab_size, hidden_size))),
            b_V=Parameter("out.b_V", np.zeros(vocab_size)),
        )


@dataclass
class AttentionTrace:
    scores: np.ndarray  # (B, T_A), -inf where masked
    weights: np.ndarray  # (B, T_A)
    context: np.ndarray  # (B, H)


@dataclass
class AttentionCache:
    enc_states: np.ndarray
    d_prev: np.ndarray
    tanh_pre: np.ndarray
    weights: np.ndarray


def project_encoder(params: AttentionParams, enc_states: np.ndarray) -> np.ndarray:
    """``W_H h_i`` for every encoder state; constant across decode steps."""
    return enc_states @ params.W_H.value.T


def project_encoder_backward(params: AttentionParams, enc_states: np.ndarray,
                             d_proj: np.ndarray) -> np.ndarray:
    """Accumulate ``W_H.grad`` and return the gradient w.r.t. ``enc_states``."""
    H = params.hidden_size
    params.W_H.grad += d_proj.reshape(-1, H).T @ enc_states.reshape(-1, H)
    return d_proj @ params.W_H.value


def attend(params: AttentionParams, enc_states: np.ndarray, d_prev: np.ndarray,
           mask: np.ndarray | None = None, enc_proj: np.ndarray | None = None
           ) -> tuple[AttentionTrace, AttentionCache]:
    """Score ``enc_states`` (B, T_A, H) against ``d_prev`` (B, H).

    ``mask`` (B, T_A) marks real positions; at least one per row must be set.
    """
    if enc_states.ndim != 3 or enc_states.shape[1] == 0:
        raise ValueError("attend: encoder sequence must be non-empty (B, T_A, H)")
    B, T, H = enc_states.shape
    if H != params.hidden_size or d_prev.shape != (B, H):
        raise DimensionError(f"attend: enc_states {enc_states.shape}, d_prev {d_prev.shape}, H={params.hidden_size}")
    if enc_proj is None:
        enc_proj = project_encoder(params, enc_states)
    pre = enc_proj + (d_prev @ params.W_D.value.T)[:, None, :]
    tanh_pre = np.tanh(pre)
    scores = (tanh_pre @ params.V.value)[:, :, 0]
    if mask is not None:
        if not np.all(mask.any(axis=1)):
            raise ValueError("attend: every row needs at least one unmasked state")
        scores = np.where(mask, scores, -np.inf)
    weights = softmax(scores, axis=1)
    context = (weights[:, None, :] @ enc_states)[:, 0, :]
    trace = AttentionTrace(scores, weights, context)
    return trace, AttentionCache(enc_states, d_prev, tanh_pre, weights)


def attend_backward(params: AttentionParams, cache: AttentionCache | None,
                    d_context: np.ndarray, through_projection: bool = True
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backpropagate ``d_context`` (B, H).

    Returns ``(d_enc_states, d_enc_proj, d_prev)``. With
    ``through_projection`` the projection gradient is pushed through ``W_H``
    into ``d_enc_states`` (and ``d_enc_proj`` is returned for reference only);
    otherwise the caller must pass the summed ``d_enc_proj`` to
    :func:`project_encoder_backward` itself.
    """
    if cache is None:
        raise ValueError("attend_backward: missing forward cache")
    a = cache.weights
    H = params.hidden_size
    d_enc = a[:, :, None] * d_context[:, None, :]
    da = (cache.enc_states @ d_context[:, :, None])[:, :, 0]
    du = a * (da - np.sum(a * da, axis=1, keepdims=True))
    v = params.V.value[:, 0]
    params.V.grad += (cache.tanh_pre.reshape(-1, H).T @ du.reshape(-1))[:, None]
    d_pre = du[:, :, None] * v * (1.0 - cache.tanh_pre**2)
    d_pre_sum = d_pre.sum(axis=1)
    params.W_D.grad += d_pre_sum.T @ cache.d_prev
    d_prev = d_pre_sum @ params.W_D.value
    if through_projection:
        d_enc = d_enc + project_encoder_backward(params, cache.enc_states, d_pre)
    return d_enc, d_pre, d_prev


@dataclass
class OutputCache:
    out: np.ndarray
    hidden: np.ndarray
    drop_mask: np.ndarray | None
    probs: np.ndarray | None = None


def output_logits(params: AttentionParams | OutputParams, d_t: np.ndarray,
                  context: np.ndarray | None = None,
                  drop_mask: np.ndarray | None = None) -> tuple[np.ndarray, OutputCache]:
    """Vocabulary logits. ``drop_mask`` (already scaled) multiplies the layer input."""
    if isinstance(params, AttentionParams):
        if context is None:
            raise ValueError("output layer with attention needs a context vector")
        if d_t.shape != context.shape:
            raise DimensionError(f"output: d_t {d_t.shape} vs context {context.shape}")
        out = np.concatenate([d_t, context], axis=-1)
        if drop_mask is not None:
            out = out * drop_mask
        hidden = out @ params.W_C.value.T + params.b_C.value
    else:
        out = d_t if drop_mask is None else d_t * drop_mask
        hidden = out
    if hidden.shape[-1] != params.W_V.value.shape[1]:
        raise DimensionError(f"output: hidden {hidden.shape} vs W_V {params.W_V.shape}")
    logits = hidden @ params.W_V.value.T + params.b_V.value
    return logits, OutputCache(out, hidden, drop_mask)


def output_distribution(params: AttentionParams | OutputParams, d_t: np.ndarray,
                        trace: AttentionTrace | None = None) -> np.ndarray:
    """Word distribution at one step; ``trace`` is required for the attention layer."""
    logits, _ = output_logits(params, d_t, None if trace is None else trace.context)
    return softmax(logits, axis=-1)


def output_log_probs(params: AttentionParams | OutputParams, d_t: np.ndarray,
                     context: np.ndarray | None = None,
                     drop_mask: np.ndarray | None = None) -> tuple[np.ndarray, OutputCache]:
    logits, cache = output_logits(params, d_t, context, drop_mask)
    logp = log_softmax(logits, axis=-1)
    cache.probs = np.exp(logp)
    return logp, cache


def output_backward(params: AttentionParams | OutputParams, cache: OutputCache | None,
                    d_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Given d(loss)/d(logits), accumulate grads; return ``(d_d_t, d_context)``."""
    if cache is None:
        raise ValueError("output_backward: missing forward cache")
    params.W_V.grad += d_logits.T @ cache.hidden
    params.b_V.grad += d_logits.sum(axis=0)
    d_hidden = d_logits @ params.W_V.value
    if isinstance(params, AttentionParams):
        params.W_C.grad += d_hidden.T @ cache.out
        params.b_C.grad += d_hidden.sum(axis=0)
        d_out = d_hidden @ params.W_C.value
        if cache.drop_mask is not None:
            d_out = d_out * cache.drop_mask
        H = params.hidden_size
        return d_out[:, :H], d_out[:, H:]
    if cache.drop_mask is not None:
        d_hidden = d_hidden * cache.drop_mask
    return d_hidden, None
