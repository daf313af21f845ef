"""Vocabulary, bucketing and padding, the synthetic corpus, and JSON-lines I/O."""
from __future__ import annotations

import json
import logging
import math
import os
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, START, END, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")


class Vocabulary:
    """Bijective token/index map with PAD=0, START=1, END=2, UNK=3."""

    def __init__(self, tokens: Sequence[str], min_count: int = 1):
        self.itos: list[str] = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.min_count = min_count

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, words: Sequence[str]) -> list[int]:
        """Words to indices framed by START and END."""
        return [START] + [self.index(w) for w in words] + [END]

    def decode(self, ids: Iterable[int], unk: str = "<unk>") -> list[str]:
        """Indices to words, dropping PAD/START and stopping at END."""
        out = []
        for i in ids:
            i = int(i)
            if i == END:
                break
            if i in (PAD, START):
                continue
            out.append(unk if i == UNK else self.itos[i])
        return out

    def to_dict(self) -> dict:
        return {"tokens": self.itos[len(SPECIAL_TOKENS):], "min_count": self.min_count}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d.get("min_count", 1))


def tokenize(caption: str) -> list[str]:
    return caption.lower().split()


def build_vocabulary(captions: Iterable[Sequence[str] | str], min_count: int = 5) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times.

    Order is by descending frequency, ties broken lexicographically, so the
    result does not depend on corpus order.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    n = 0
    for cap in captions:
        counts.update(tokenize(cap) if isinstance(cap, str) else cap)
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIAL_TOKENS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_count)


# --------------------------------------------------------------------- buckets

@dataclass(frozen=True)
class Bucket:
    max_objects: int
    max_tokens: int


DEFAULT_BUCKETS: tuple[Bucket, ...] = (Bucket(2, 10), Bucket(4, 15), Bucket(6, 20), Bucket(8, 30))


def validate_buckets(buckets: Sequence[Bucket]) -> None:
    if not buckets:
        raise ValueError("at least one bucket is required")
    for a, b in zip(buckets, buckets[1:]):
        if not (b.max_objects > a.max_objects and b.max_tokens > a.max_tokens):
            raise ValueError(f"buckets must strictly increase in both dims: {a} then {b}")


def assign_bucket(buckets: Sequence[Bucket], object_count: int, token_count: int) -> Bucket:
    """First bucket that holds ``object_count`` objects and ``token_count`` tokens.

    ``token_count`` includes START and END. Oversize inputs get the largest
    bucket with a warning; :func:`truncate_example` makes them fit.
    """
    if object_count < 1 or token_count < 1:
        raise ValueError("counts must be positive")
    for b in buckets:
        if b.max_objects >= object_count and b.max_tokens >= token_count:
            return b
    largest = buckets[-1]
    warnings.warn(
        f"sequence ({object_count} objects, {token_count} tokens) exceeds largest bucket "
        f"({largest.max_objects}, {largest.max_tokens}); truncating",
        stacklevel=2,
    )
    return largest


@dataclass
class Example:
    """Object sequence (global feature last) and its caption as token ids incl. START/END."""

    objects: np.ndarray  # (T_A, D_o)
    tokens: list[int]
    id: str = ""

    @property
    def object_count(self) -> int:
        return self.objects.shape[0]

    @property
    def token_count(self) -> int:
        return len(self.tokens)


@dataclass
class PaddedExample:
    objects: np.ndarray  # (max_objects, D_o)
    tokens: np.ndarray  # (max_tokens,)
    object_count: int
    token_count: int
    id: str = ""

    @property
    def bucket(self) -> Bucket:
        return Bucket(self.objects.shape[0], self.tokens.shape[0])


def truncate_example(example: Example, bucket: Bucket) -> Example:
    """Clip to ``bucket``: keep the highest-ranked objects plus the global
    feature, and a token prefix re-terminated with END."""
    objects, tokens = example.objects, list(example.tokens)
    if objects.shape[0] > bucket.max_objects:
        keep = bucket.max_objects - 1
        objects = np.concatenate([objects[:keep], objects[-1:]], axis=0)
    if len(tokens) > bucket.max_tokens:
        tokens = tokens[: bucket.max_tokens - 1] + [END]
    return Example(objects, tokens, example.id)


def pad_example(example: Example, bucket: Bucket) -> PaddedExample:
    """Zero-pad objects and PAD-pad tokens to the bucket's dimensions."""
    if example.object_count > bucket.max_objects or example.token_count > bucket.max_tokens:
        example = truncate_example(example, bucket)
    n_obj, dim = example.objects.shape
    objects = np.zeros((bucket.max_objects, dim))
    objects[:n_obj] = example.objects
    tokens = np.full(bucket.max_tokens, PAD, dtype=np.int64)
    tokens[: example.token_count] = example.tokens
    return PaddedExample(objects, tokens, n_obj, example.token_count, example.id)


def unpad(padded: PaddedExample) -> Example:
    return Example(padded.objects[: padded.object_count].copy(),
                   [int(t) for t in padded.tokens[: padded.token_count]], padded.id)


@dataclass
class Batch:
    objects: np.ndarray  # (B, T_A, D_o)
    object_counts: np.ndarray  # (B,)
    tokens: np.ndarray  # (B, T_B)
    token_counts: np.ndarray  # (B,)
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.objects.shape[0]

    @property
    def num_targets(self) -> int:
        """Number of predicted tokens (everything after START)."""
        return int(np.sum(self.token_counts - 1))


def collate(padded: Sequence[PaddedExample]) -> Batch:
    shapes = {(p.objects.shape, p.tokens.shape) for p in padded}
    if len(shapes) != 1:
        raise ValueError(f"cannot collate examples of different bucket shapes: {shapes}")
    return Batch(
        objects=np.stack([p.objects for p in padded]),
        object_counts=np.array([p.object_count for p in padded], dtype=np.int64),
        tokens=np.stack([p.tokens for p in padded]),
        token_counts=np.array([p.token_count for p in padded], dtype=np.int64),
        ids=[p.id for p in padded],
    )


def batch_from_examples(examples: Sequence[Example], bucket: Bucket | None = None) -> Batch:
    """Collate arbitrary examples, padding to ``bucket`` or to the batch maxima."""
    if bucket is None:
        bucket = Bucket(max(e.object_count for e in examples), max(e.token_count for e in examples))
    return collate([pad_example(e, bucket) for e in examples])


def bucketize(examples: Sequence[Example], buckets: Sequence[Bucket]) -> dict[Bucket, list[PaddedExample]]:
    validate_buckets(buckets)
    groups: dict[Bucket, list[PaddedExample]] = {b: [] for b in buckets}
    for ex in examples:
        b = assign_bucket(buckets, ex.object_count, ex.token_count)
        groups[b].append(pad_example(ex, b))
    return {b: g for b, g in groups.items() if g}


def make_batches(groups: dict[Bucket, list[PaddedExample]], batch_size: int,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    """Split each bucket into batches; shuffles within buckets and batch order if ``rng``."""
    batches = []
    for bucket in sorted(groups, key=lambda b: (b.max_objects, b.max_tokens)):
        items = groups[bucket]
        order = rng.permutation(len(items)) if rng is not None else np.arange(len(items))
        for s in range(0, len(items), batch_size):
            batches.append(collate([items[k] for k in order[s : s + batch_size]]))
    if rng is not None:
        batches = [batches[k] for k in rng.permutation(len(batches))]
    return batches


# ------------------------------------------------------------------- synthetic

CLASS_NAMES = ("dog", "cat", "bird", "horse", "cow", "car", "boat", "train",
               "chair", "cup", "kite", "truck", "bear", "plane", "bike", "clock")
COUNT_WORDS = {2: "two", 3: "three", 4: "four", 5: "five", 6: "six", 7: "seven", 8: "eight", 9: "nine"}


@dataclass
class SyntheticSpec:
    num_classes: int = 12
    feature_dim: int = 16
    noise_std: float = 0.1
    max_objects: int = 5
    num_examples: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.feature_dim < 1 or self.max_objects < 1 or self.num_examples < 0:
            raise ValueError("feature_dim and max_objects must be >= 1, num_examples >= 0")

    def class_names(self) -> list[str]:
        names = list(CLASS_NAMES[: self.num_classes])
        names += [f"thing{k}" for k in range(len(names), self.num_classes)]
        return names


@dataclass
class SyntheticExample:
    id: str
    objects: np.ndarray  # (k, D) detected objects in ranking order
    global_feature: np.ndarray  # (D,)
    classes: list[int]
    caption: str

    @property
    def sequence(self) -> np.ndarray:
        """Encoder input: objects then the global feature."""
        return np.vstack([self.objects, self.global_feature[None, :]])


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """Unit-RMS class vectors, mutually orthogonal when ``num_classes <= feature_dim``."""
    rng = np.random.default_rng([spec.seed, 0])
    g = rng.standard_normal((max(spec.num_classes, spec.feature_dim), spec.feature_dim))
    if spec.num_classes <= spec.feature_dim:
        q, _ = np.linalg.qr(g.T)
        protos = q.T[: spec.num_classes]
    else:
        protos = g[: spec.num_classes]
        protos = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    return protos * math.sqrt(spec.feature_dim)


def describe(classes: Sequence[int], names: Sequence[str]) -> str:
    """Caption for a ranked list of classes: distinct classes in order of first
    appearance, each as "a <name>" or "<count> <name>s", joined by "and"."""
    counts = Counter(classes)
    parts = []
    for c in dict.fromkeys(classes):
        n = counts[c]
        parts.append(f"a {names[c]}" if n == 1 else f"{COUNT_WORDS.get(n, str(n))} {names[c]}s")
    return " and ".join(parts)


def class_confidences(spec: SyntheticSpec) -> np.ndarray:
    """Distinct per-class detector confidences in (0.5, 1)."""
    rng = np.random.default_rng([spec.seed, 2])
    return 0.5 + 0.5 * (rng.permutation(spec.num_classes) + 0.5) / spec.num_classes


def generate_synthetic(spec: SyntheticSpec) -> list[SyntheticExample]:
    """Draw examples; objects are ranked by a simulated detection score.

    Each class has a fixed detector confidence, so objects of one class are
    adjacent in the sequence and the caption reads the sequence group by group.
    """
    spec.validate()
    protos = class_prototypes(spec)
    names = spec.class_names()
    confidence = class_confidences(spec)
    rng = np.random.default_rng([spec.seed, 1])
    out = []
    for n in range(spec.num_examples):
        k = int(rng.integers(1, spec.max_objects + 1))
        drawn = rng.integers(0, spec.num_classes, size=k)
        classes = [int(c) for c in sorted(drawn, key=lambda c: -confidence[c])]
        feats = protos[classes] + spec.noise_std * rng.standard_normal((k, spec.feature_dim))
        out.append(SyntheticExample(f"syn{spec.seed}-{n:06d}", feats, feats.mean(axis=0),
                                    classes, describe(classes, names)))
    return out


def synthetic_to_examples(data: Sequence[SyntheticExample], vocab: Vocabulary) -> list[Example]:
    return [Example(d.sequence, vocab.encode(tokenize(d.caption)), d.id) for d in data]


# ------------------------------------------------------------------------ I/O

@dataclass
class FeatureRecord:
    id: str
    objects: np.ndarray  # (k, D), may have k = 0
    global_feature: np.ndarray  # (D,)

    @property
    def sequence(self) -> np.ndarray:
        return np.vstack([self.objects.reshape(-1, self.global_feature.shape[0]),
                          self.global_feature[None, :]])


def _atomic_write_lines(path: str | os.PathLike, lines: Iterable[str]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for line in lines:
            fh.write(line + "\n")
    os.replace(tmp, path)


def save_features(path: str | os.PathLike, records: Iterable[FeatureRecord]) -> None:
    _atomic_write_lines(path, (json.dumps({
        "id": r.id,
        "dim": int(r.global_feature.shape[0]),
        "objects": [[float(v) for v in row] for row in r.objects],
        "global": [float(v) for v in r.global_feature],
    }) for r in records))


def load_features(path: str | os.PathLike) -> list[FeatureRecord]:
    """Parse a feature JSON-lines file, preserving file order."""
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dim = int(rec["dim"])
                glob = np.asarray(rec["global"], dtype=np.float64)
                objs = np.asarray(rec["objects"], dtype=np.float64).reshape(-1, dim) \
                    if rec["objects"] else np.zeros((0, dim))
                if glob.shape != (dim,) or any(len(o) != dim for o in rec["objects"]):
                    raise ValueError(f"feature vectors must have dim {dim}")
                records.append(FeatureRecord(str(rec["id"]), objs, glob))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed feature record {n}: {exc}") from exc
    return records


def save_captions(path: str | os.PathLike, pairs: Iterable[tuple[str, str]]) -> None:
    _atomic_write_lines(path, (json.dumps({"id": i, "caption": c}) for i, c in pairs))


def load_captions(path: str | os.PathLike) -> list[tuple[str, str]]:
    pairs = []
    with open(path) as fh:
        for n, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append((str(rec["id"]), str(rec["caption"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed caption record {n}: {exc}") from exc
    return pairs


def write_dataset(directory: str | os.PathLike, data: Sequence[SyntheticExample]) -> None:
    """Write ``features.jsonl`` and ``captions.jsonl`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_features(d / "features.jsonl",
                  (FeatureRecord(e.id, e.objects, e.global_feature) for e in data))
    save_captions(d / "captions.jsonl", ((e.id, e.caption) for e in data))


def read_dataset(directory: str | os.PathLike) -> tuple[list[FeatureRecord], list[tuple[str, str]]]:
    d = Path(directory)
    return load_features(d / "features.jsonl"), load_captions(d / "captions.jsonl")


def pair_examples(features: Sequence[FeatureRecord], captions: Sequence[tuple[str, str]],
                  vocab: Vocabulary) -> list[Example]:
    """One example per (image, caption) pair; images without captions are skipped."""
    by_id = {r.id: r for r in features}
    out = []
    for image_id, cap in captions:
        if image_id not in by_id:
            raise ValueError(f"caption for unknown image id {image_id!r}")
        out.append(Example(by_id[image_id].sequence, vocab.encode(tokenize(cap)), image_id))
    return out
