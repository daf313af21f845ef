"""Encoder/decoder captioner over object sequences, with two ablation variants.

``Variant.MAT`` attends over all encoder states; ``NO_ATTENTION`` predicts
from the decoder state alone; ``SINGLE_VECTOR`` additionally feeds the
encoder only the global image feature (the last item of each sequence).

Loss is the summed negative log-likelihood of every real target token
(everything after START, up to and including END), summed over the batch.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    OutputParams,
    attend,
    attend_backward,
    output_backward,
    output_log_probs,
    project_encoder,
    project_encoder_backward,
)
from .data import Batch
from .lstm import LstmParams, LstmState, ModulationMode, lstm_step, lstm_step_backward
from .numerics import DimensionError, Parameter, dropout_mask


class Variant(str, enum.Enum):
    MAT = "mat"
    NO_ATTENTION = "no-attention"
    SINGLE_VECTOR = "single-vector"


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int = 16
    hidden_size: int = 512
    variant: Variant = Variant.MAT
    mode: ModulationMode = ModulationMode.SIGMOID
    init_scale: float = 0.08

    def __post_init__(self) -> None:
        self.variant = Variant(self.variant)
        self.mode = ModulationMode(self.mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["mode"] = self.mode.value
        return d


@dataclass
class EncoderOutput:
    states: np.ndarray  # (B, T_A, H)
    mask: np.ndarray  # (B, T_A) bool
    final: LstmState  # (B, H) each
    proj: np.ndarray | None = None  # W_H-projected states, MAT only

    def real_states(self, b: int = 0) -> np.ndarray:
        """Hidden states of row ``b`` up to its true length (what attention sees)."""
        return self.states[b, : int(self.mask[b].sum())]


@dataclass
class _Cache:
    batch: Batch
    inputs: np.ndarray
    lengths: np.ndarray
    enc: EncoderOutput
    enc_caches: list = field(default_factory=list)
    enc_drop: list = field(default_factory=list)
    dec_caches: list = field(default_factory=list)
    dec_drop: list = field(default_factory=list)
    attn_caches: list = field(default_factory=list)
    out_caches: list = field(default_factory=list)
    step_valid: list = field(default_factory=list)


class CaptionModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        H, s = config.hidden_size, config.init_scale
        self.W_E = Parameter("W_E", rng.uniform(-s, s, (H, config.feature_dim)))
        self.W_S = Parameter("W_S", rng.uniform(-s, s, (H, config.vocab_size)))
        self.encoder = LstmParams.init("encoder", H, H, rng, s)
        self.decoder = LstmParams.init("decoder", H, H, rng, s)
        if config.variant is Variant.MAT:
            self.head: AttentionParams | OutputParams = AttentionParams.init(H, config.vocab_size, rng, s)
        else:
            self.head = OutputParams.init(H, config.vocab_size, rng, s)
        self._cache: _Cache | None = None

    @property
    def variant(self) -> Variant:
        return self.config.variant

    @property
    def attends(self) -> bool:
        return self.config.variant is Variant.MAT

    def parameters(self) -> list[Parameter]:
        return [self.W_E, self.W_S, *self.encoder.parameters(), *self.decoder.parameters(),
                *self.head.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        if set(params) != set(state):
            raise KeyError(f"parameter names differ: {sorted(set(params) ^ set(state))}")
        for name, value in state.items():
            if params[name].value.shape != np.shape(value):
                raise DimensionError(f"{name}: shape {np.shape(value)} vs {params[name].value.shape}")
            params[name].value[...] = value

    # ----------------------------------------------------------------- encoder

    def select_inputs(self, objects: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Encoder inputs for the variant: the single-vector baseline keeps
        only the global feature (last real item) of each sequence."""
        if self.variant is Variant.SINGLE_VECTOR:
            rows = np.arange(objects.shape[0])
            return objects[rows, counts - 1][:, None, :], np.ones_like(counts)
        return objects, counts

    def encode(self, objects: np.ndarray, counts: np.ndarray | None = None,
               dropout: float = 0.0, rng: np.random.Generator | None = None,
               _cache: _Cache | None = None) -> EncoderOutput:
        """Run the encoder over ``objects`` (B, T_A, D_o), or a single (T_A, D_o) sequence.

        Steps past ``counts`` are computed but leave the carried state
        untouched and are masked out of attention.
        """
        if objects.ndim == 2:
            objects = objects[None]
        B, T, D = objects.shape
        if T == 0:
            raise ValueError("object sequence must be non-empty")
        if D != self.config.feature_dim:
            raise DimensionError(f"feature dim {D} != model feature dim {self.config.feature_dim}")
        counts = np.full(B, T, dtype=np.int64) if counts is None else np.asarray(counts)
        if np.any(counts < 1) or np.any(counts > T):
            raise ValueError("object counts must lie in [1, T_A]")
        objects, counts = self.select_inputs(objects, counts)
        T = objects.shape[1]
        H = self.config.hidden_size
        state = LstmState.zeros(H, B)
        states = np.empty((B, T, H))
        mask = np.arange(T)[None, :] < counts[:, None]
        for t in range(T):
            x = objects[:, t] @ self.W_E.value.T
            m = dropout_mask(rng, x.shape, dropout)
            if m is not None:
                x = x * m
            new, cache = lstm_step(self.encoder, x, state, self.config.mode)
            states[:, t] = new.h
            valid = mask[:, t : t + 1]
            state = LstmState(np.where(valid, new.h, state.h), np.where(valid, new.c, state.c))
            if _cache is not None:
                _cache.enc_caches.append(cache)
                _cache.enc_drop.append(m)
        proj = project_encoder(self.head, states) if self.attends else None  # type: ignore[arg-type]
        out = EncoderOutput(states, mask, state, proj)
        if _cache is not None:
            _cache.inputs, _cache.lengths, _cache.enc = objects, counts, out
        return out

    # ----------------------------------------------------------------- decoder

    def decode_step(self, enc: EncoderOutput, prev_tokens: np.ndarray, state: LstmState,
                    rows: np.ndarray | None = None
                    ) -> tuple[np.ndarray, LstmState, np.ndarray | None]:
        """One inference step for N hypotheses.

        ``rows`` maps each hypothesis to its encoder batch row (default: identity).
        Returns ``(log_probs (N, V), new_state, attention_weights (N, T_A) or None)``.
        """
        x = self.W_S.value[:, prev_tokens].T
        new, _ = lstm_step(self.decoder, x, state, self.config.mode)
        weights = None
        if self.attends:
            if rows is None:
                rows = np.arange(len(prev_tokens))
            trace, _ = attend(self.head, enc.states[rows], state.h, enc.mask[rows],  # type: ignore[arg-type]
                              enc.proj[rows])  # type: ignore[index]
            logp, _ = output_log_probs(self.head, new.h, trace.context)
            weights = trace.weights
        else:
            logp, _ = output_log_probs(self.head, new.h)
        return logp, new, weights

    def forward(self, batch: Batch, dropout: float = 0.0,
                rng: np.random.Generator | None = None, keep_cache: bool = True
                ) -> float:
        """Total NLL of the batch; caches activations for :meth:`backward`."""
        V = self.config.vocab_size
        if batch.tokens.size and (batch.tokens.max() >= V or batch.tokens.min() < 0):
            raise ValueError(f"token index outside vocabulary of size {V}")
        if np.any(batch.token_counts < 2):
            raise ValueError("token sequences need START and at least one target")
        cache = _Cache(batch, None, None, None) if keep_cache else None  # type: ignore[arg-type]
        enc = self.encode(batch.objects, batch.object_counts, dropout, rng, cache)
        state = enc.final
        B, T_B = batch.tokens.shape
        rows = np.arange(B)
        total = 0.0
        for t in range(1, T_B):
            x = self.W_S.value[:, batch.tokens[:, t - 1]].T
            m = dropout_mask(rng, x.shape, dropout)
            if m is not None:
                x = x * m
            new, lcache = lstm_step(self.decoder, x, state, self.config.mode)
            if self.attends:
                trace, acache = attend(self.head, enc.states, state.h, enc.mask, enc.proj)  # type: ignore[arg-type]
                om = dropout_mask(rng, (B, 2 * self.config.hidden_size), dropout)
                logp, ocache = output_log_probs(self.head, new.h, trace.context, om)
            else:
                acache = None
                om = dropout_mask(rng, new.h.shape, dropout)
                logp, ocache = output_log_probs(self.head, new.h, None, om)
            valid = t < batch.token_counts
            gold = batch.tokens[:, t]
            total -= float(np.sum(np.where(valid, logp[rows, gold], 0.0)))
            state = new
            if cache is not None:
                cache.dec_caches.append(lcache)
                cache.dec_drop.append(m)
                cache.attn_caches.append(acache)
                cache.out_caches.append(ocache)
                cache.step_valid.append(valid)
        self._cache = cache
        return total

    def loss(self, batch: Batch) -> float:
        """Deterministic loss without dropout or caching."""
        return self.forward(batch, keep_cache=False)

    def backward(self, scale: float = 1.0) -> None:
        """Accumulate ``scale * d(loss)/d(param)`` into every parameter grad.

        Consumes the cache of the last :meth:`forward`.
        """
        cache, self._cache = self._cache, None
        if cache is None:
            raise RuntimeError("backward called without a fresh forward cache")
        batch, enc = cache.batch, cache.enc
        B, T_B = batch.tokens.shape
        H = self.config.hidden_size
        rows = np.arange(B)
        d_enc = np.zeros_like(enc.states)
        d_proj = np.zeros_like(enc.states) if self.attends else None
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        W_S_grad_T = self.W_S.grad.T
        for k in range(T_B - 2, -1, -1):
            t = k + 1
            valid = cache.step_valid[k]
            ocache = cache.out_caches[k]
            d_logits = ocache.probs.copy()
            d_logits[rows, batch.tokens[:, t]] -= 1.0
            d_logits *= (valid * scale)[:, None]
            d_dt, d_ctx = output_backward(self.head, ocache, d_logits)
            dh = dh + d_dt
            d_prev_attn = None
            if self.attends:
                de, dp, d_prev_attn = attend_backward(self.head, cache.attn_caches[k], d_ctx,  # type: ignore[arg-type]
                                                      through_projection=False)
                d_enc += de
                d_proj += dp
            dx, dprev = lstm_step_backward(self.decoder, cache.dec_caches[k], dh, dc)
            dh, dc = dprev.h, dprev.c
            if d_prev_attn is not None:
                dh = dh + d_prev_attn
            if cache.dec_drop[k] is not None:
                dx = dx * cache.dec_drop[k]
            np.add.at(W_S_grad_T, batch.tokens[:, t - 1], dx)
        if self.attends:
            d_enc += project_encoder_backward(self.head, enc.states, d_proj)  # type: ignore[arg-type]

        inputs, mask = cache.inputs, enc.mask
        for t in range(inputs.shape[1] - 1, -1, -1):
            valid = mask[:, t : t + 1]
            dh_new = np.where(valid, dh, 0.0) + d_enc[:, t]
            dc_new = np.where(valid, dc, 0.0)
            dx, dprev = lstm_step_backward(self.encoder, cache.enc_caches[t], dh_new, dc_new)
            dh = dprev.h + np.where(valid, 0.0, dh)
            dc = dprev.c + np.where(valid, 0.0, dc)
            if cache.enc_drop[t] is not None:
                dx = dx * cache.enc_drop[t]
            self.W_E.grad += dx.T @ inputs[:, t]
