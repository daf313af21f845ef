"""Beam search, greedy decoding and caption rendering."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import END, PAD, START, Example, FeatureRecord, Vocabulary, batch_from_examples
from .lstm import LstmState
from .model import CaptionModel

DEFAULT_MAX_LEN = 30
BANNED = (PAD, START)


@dataclass
class Hypothesis:
    tokens: list[int]  # generated ids, START excluded
    logprob: float
    state: LstmState | None = None
    attention: list[np.ndarray] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == END


def _rank_key(h: Hypothesis, length_norm: bool) -> tuple:
    score = h.logprob / len(h.tokens) if length_norm and h.tokens else h.logprob
    return (-score, h.tokens, len(h.tokens))


def beam_search(model: CaptionModel, objects: np.ndarray, beam_size: int = 20,
                max_len: int = DEFAULT_MAX_LEN, length_norm: bool = False) -> Hypothesis:
    """Best caption for one object sequence (T_A, D_o).

    ``max_len`` bounds the number of decode steps, END included. Hypotheses
    that emit END retire to a completed pool; search ends when no live
    hypothesis can still beat the best completed one. Falls back to the best
    unfinished hypothesis if nothing completed.
    """
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")
    objects = np.asarray(objects, dtype=np.float64)
    if objects.ndim != 2 or objects.shape[0] == 0:
        raise ValueError("beam_search needs a non-empty (T_A, D_o) object sequence")
    enc = model.encode(objects)
    V = model.config.vocab_size
    live = [Hypothesis([], 0.0, None)]
    state = enc.final
    completed: list[Hypothesis] = []
    for _ in range(max_len):
        prev = np.array([h.tokens[-1] if h.tokens else START for h in live])
        logp, new_state, weights = model.decode_step(enc, prev, state, np.zeros(len(live), dtype=np.int64))
        logp[:, list(BANNED)] = -np.inf
        scores = np.array([h.logprob for h in live])[:, None] + logp
        parent = np.repeat(np.arange(len(live)), V)
        token = np.tile(np.arange(V), len(live))
        flat = scores.reshape(-1)
        order = np.lexsort((parent, token, -flat))
        order = order[np.isfinite(flat[order])][:beam_size]
        next_live, keep = [], []
        for k in order:
            p, tok = int(parent[k]), int(token[k])
            att = live[p].attention + ([weights[p]] if weights is not None else [])
            hyp = Hypothesis(live[p].tokens + [tok], float(flat[k]), None, att)
            if tok == END:
                completed.append(hyp)
            else:
                next_live.append(hyp)
                keep.append(p)
        if not next_live:
            live = []
            break
        idx = np.array(keep)
        state = LstmState(new_state.h[idx], new_state.c[idx])
        live = next_live
        if completed and not length_norm:
            if max(h.logprob for h in completed) >= max(h.logprob for h in live):
                break
    pool = completed if completed else live
    return min(pool, key=lambda h: _rank_key(h, length_norm))


def greedy_decode(model: CaptionModel, objects: np.ndarray, max_len: int = DEFAULT_MAX_LEN) -> Hypothesis:
    """Argmax decoding, one example."""
    enc = model.encode(np.asarray(objects, dtype=np.float64))
    state, prev = enc.final, np.array([START])
    hyp = Hypothesis([], 0.0)
    for _ in range(max_len):
        logp, state, weights = model.decode_step(enc, prev, state)
        logp[:, list(BANNED)] = -np.inf
        tok = int(np.argmax(logp[0]))
        hyp.tokens.append(tok)
        hyp.logprob += float(logp[0, tok])
        if weights is not None:
            hyp.attention.append(weights[0])
        if tok == END:
            break
        prev = np.array([tok])
    return hyp


def greedy_decode_batch(model: CaptionModel, objects: np.ndarray, counts: np.ndarray,
                        max_len: int = DEFAULT_MAX_LEN) -> list[list[int]]:
    """Greedy decoding of a padded batch; each result ends with END unless cut at ``max_len``."""
    enc = model.encode(objects, counts)
    B = objects.shape[0]
    state, prev = enc.final, np.full(B, START)
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        logp, state, _ = model.decode_step(enc, prev, state)
        logp[:, list(BANNED)] = -np.inf
        prev = np.argmax(logp, axis=1)
        for b in np.flatnonzero(~done):
            out[b].append(int(prev[b]))
        done |= prev == END
        if done.all():
            break
    return out


def score_sequence(model: CaptionModel, objects: np.ndarray, tokens: Sequence[int]) -> float:
    """Teacher-forced log-probability of ``tokens`` (generated ids, START excluded)."""
    batch = batch_from_examples([Example(np.asarray(objects, dtype=np.float64), [START, *tokens])])
    return -model.loss(batch)


@dataclass
class CaptionResult:
    text: str
    tokens: list[int]
    logprob: float
    attention: list[list[float]] | None = None


def caption(model: CaptionModel, vocab: Vocabulary, objects: np.ndarray, beam_size: int = 20,
            max_len: int = DEFAULT_MAX_LEN, with_attention: bool = False,
            unk: str = "<unk>") -> CaptionResult:
    hyp = beam_search(model, objects, beam_size, max_len)
    att = [[float(v) for v in row] for row in hyp.attention] if with_attention and hyp.attention else None
    return CaptionResult(" ".join(vocab.decode(hyp.tokens, unk=unk)), hyp.tokens, hyp.logprob, att)


def caption_records(model: CaptionModel, vocab: Vocabulary, records: Iterable[FeatureRecord],
                    beam_size: int = 20, max_len: int = DEFAULT_MAX_LEN,
                    with_attention: bool = False) -> list[dict]:
    """Caption every feature record; rows follow the batch-captioning JSON-lines schema."""
    rows = []
    for rec in records:
        res = caption(model, vocab, rec.sequence, beam_size, max_len, with_attention)
        row = {"id": rec.id, "caption": res.text, "logprob": res.logprob}
        if res.attention is not None:
            row["attention"] = res.attention
        rows.append(row)
    return rows
