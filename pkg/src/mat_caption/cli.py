"""Command-line entry point: ``mat-caption <command> ...``.

Commands read an optional ``key = value`` run config. Every key is optional;
unset keys take the library defaults. The effective config is echoed into
the output directory as ``config.txt`` so a run can be repeated from it.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import (
    SyntheticSpec,
    build_vocabulary,
    generate_synthetic,
    load_captions,
    load_features,
    pair_examples,
    read_dataset,
    write_dataset,
    Bucket,
    tokenize,
)
from .experiments import ablation_csv, ordering_holds, run_ablation, score_model
from .inference import caption_records
from .metrics import evaluate
from .model import Variant
from .training import TrainConfig, load_checkpoint, train, write_history

log = logging.getLogger("mat_caption")

THREADS_ENV = "MAT_NUM_THREADS"


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------- run config

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
# the synthetic seed is spelled data_seed so it does not collide with the training seed
_SPEC_KEYS = {f.name: f.name for f in fields(SyntheticSpec) if f.name not in ("seed", "num_examples")}
_SPEC_KEYS["data_seed"] = "seed"


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    num_train: int = 4000
    num_val: int = 500
    min_count: int = 5
    beam_size: int = 20
    max_len: int = 30
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data: str | None = None
    val: str | None = None
    out: str | None = None
    explicit: frozenset = frozenset()

    def items(self) -> list[tuple[str, object]]:
        rows: list[tuple[str, object]] = []
        for f in fields(TrainConfig):
            rows.append((f.name, getattr(self.train, f.name)))
        for key, attr in _SPEC_KEYS.items():
            rows.append((key, getattr(self.synthetic, attr)))
        for key in _RUN_KEYS:
            rows.append((key, getattr(self, key)))
        return rows

    def dumps(self) -> str:
        lines = []
        for key, value in self.items():
            if value is None:
                continue
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


_RUN_KEYS = ("num_train", "num_val", "min_count", "beam_size", "max_len", "seeds", "data", "val", "out")
_RUN_TYPES = {"num_train": int, "num_val": int, "min_count": int, "beam_size": int, "max_len": int,
              "seeds": "ints", "data": str, "val": str, "out": str}


def _format(value) -> str:
    if hasattr(value, "value"):  # enums
        return str(value.value)
    if isinstance(value, tuple) and value and isinstance(value[0], Bucket):
        return ",".join(f"{b.max_objects}x{b.max_tokens}" for b in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_buckets(text: str) -> tuple[Bucket, ...]:
    out = []
    for part in text.split(","):
        a, sep, b = part.strip().partition("x")
        if not sep:
            raise ValueError(f"bucket {part.strip()!r} is not of the form OBJECTSxTOKENS")
        out.append(Bucket(int(a), int(b)))
    return tuple(out)


def _coerce(key: str, text: str, default):
    if key == "buckets":
        return _parse_buckets(text)
    if key in _RUN_TYPES:
        kind = _RUN_TYPES[key]
        if kind == "ints":
            return tuple(int(v) for v in text.split(",") if v.strip())
        return kind(text)
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1")
    if hasattr(default, "value"):
        return type(default)(text)
    return type(default)(text)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Errors name the source and line number.
    """
    train_kw: dict = {}
    spec_kw: dict = {}
    run_kw: dict = {}
    defaults_train, defaults_spec = TrainConfig(), SyntheticSpec()
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        try:
            if key in _TRAIN_KEYS:
                train_kw[key] = _coerce(key, value, getattr(defaults_train, key))
            elif key in _SPEC_KEYS:
                spec_kw[_SPEC_KEYS[key]] = _coerce(key, value, getattr(defaults_spec, _SPEC_KEYS[key]))
            elif key in _RUN_TYPES:
                run_kw[key] = _coerce(key, value, None)
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    try:
        cfg = RunConfig(TrainConfig(**train_kw), SyntheticSpec(**spec_kw), **run_kw,
                        explicit=frozenset(seen))
        cfg.synthetic.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_run_config(text, str(path))


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.dumps())


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ------------------------------------------------------------------- commands

def cmd_generate_data(args, cfg: RunConfig) -> int:
    spec = cfg.synthetic
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
        cfg = replace(cfg, synthetic=spec)
    data = generate_synthetic(replace(spec, num_examples=cfg.num_train + cfg.num_val))
    out = Path(args.out)
    write_dataset(out / "train", data[:cfg.num_train])
    write_dataset(out / "val", data[cfg.num_train:])
    echo_config(cfg, out)
    print(f"wrote {cfg.num_train} train and {cfg.num_val} val examples to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    data_dir = args.data or cfg.data
    val_dir = args.val or cfg.val
    out = Path(args.out or cfg.out or "")
    if not data_dir or not val_dir or not str(out):
        raise ConfigError("train needs --data, --val and --out (or data/val/out config keys)")
    cfg = replace(cfg, data=str(data_dir), val=str(val_dir), out=str(out))
    tr_feats, tr_caps = read_dataset(data_dir)
    va_feats, va_caps = read_dataset(val_dir)
    vocab = build_vocabulary([tokenize(c) for _, c in tr_caps], cfg.min_count)
    train_ex = pair_examples(tr_feats, tr_caps, vocab)
    val_ex = pair_examples(va_feats, va_caps, vocab)
    echo_config(cfg, out)
    t0 = time.perf_counter()
    result = train(cfg.train, train_ex, val_ex, len(vocab), train_ex[0].objects.shape[1], vocab,
                   out / "checkpoints",
                   on_epoch=lambda r: print(f"epoch {r['epoch']:3d}  train {r['train_loss']:.5f}  "
                                            f"val {r['val_loss']:.5f}  lr {r['lr']:g}", flush=True))
    write_history(out / "history.csv", result.history)
    report = score_model(result.model, vocab, val_ex, cfg.beam_size, cfg.max_len, cfg.train.buckets)
    report.update(best_epoch=result.best_epoch, epochs=len(result.history),
                  vocab_size=len(vocab), seconds=time.perf_counter() - t0)
    _write_json(out / "report.json", report)
    print(f"best epoch {result.best_epoch}: val loss {result.best_val_loss:.5f}, "
          f"exact match {report['exact_match']:.3f}")
    return 0


def cmd_caption(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.vocab is None:
        raise ConfigError(f"{args.checkpoint} carries no vocabulary")
    records = load_features(args.features)
    dim = ckpt.model.config.feature_dim
    for r in records:
        if r.global_feature.shape[0] != dim:
            raise ValueError(f"record {r.id!r} has feature dim {r.global_feature.shape[0]}, model expects {dim}")
    rows = caption_records(ckpt.model, ckpt.vocab, records, args.beam, args.max_len, args.attention)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text("".join(json.dumps(r) + "\n" for r in rows))
    os.replace(tmp, out)
    print(f"captioned {len(rows)} images -> {out}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    cands = dict(load_captions(args.candidates))
    refs: dict[str, list[str]] = {}
    for image_id, cap in load_captions(args.references):
        refs.setdefault(image_id, []).append(cap)
    missing = sorted(set(cands) - set(refs))
    if missing:
        raise ValueError(f"{len(missing)} candidate ids have no references (first: {missing[0]!r})")
    report = evaluate(cands, {k: refs[k] for k in cands})
    report["images"] = len(cands)
    _write_json(Path(args.out), report)
    print(" ".join(f"{k}={report[k]:.4f}" for k in ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider")))
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    from .gradcheck import GradCheckSetup, run_grad_check

    setup = GradCheckSetup()
    # only keys set explicitly override the tiny defaults
    overrides = {k: getattr(cfg.train, k) for k in ("hidden_size", "init_scale", "mode", "variant", "seed")
                 if k in cfg.explicit}
    setup = replace(setup, **overrides)
    t0 = time.perf_counter()
    err = run_grad_check(setup)
    ok = err < args.tolerance
    print(f"max_rel_err {err:.3e} ({'ok' if ok else 'FAIL'}, tol {args.tolerance:g}, "
          f"{time.perf_counter() - t0:.1f}s)")
    return 0 if ok else 1


def cmd_ablation(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    echo_config(replace(cfg, out=str(out)), out)
    rows = run_ablation(cfg.seeds, cfg.train, cfg.synthetic, cfg.num_train, cfg.num_val,
                        cfg.min_count, cfg.beam_size, cfg.max_len)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    held = ordering_holds(rows)
    print(ablation_csv(rows), end="")
    print(f"ordering mat < no-attention < single-vector held in {sum(held.values())}/{len(held)} seeds")
    return 0


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mat-caption", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic train/val corpus")
    g.add_argument("--spec", help="run config with synthetic-corpus keys")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate_data, config_arg="spec")

    t = sub.add_parser("train", help="train a model; writes checkpoints/, history.csv, report.json")
    t.add_argument("--config")
    t.add_argument("--data", help="training dataset directory")
    t.add_argument("--val", help="validation dataset directory")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("caption", help="caption a feature file with beam search")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--features", required=True)
    c.add_argument("--beam", type=int, default=20)
    c.add_argument("--max-len", type=int, default=30)
    c.add_argument("--attention", action="store_true", help="include per-step attention weights")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_caption, config_arg=None)

    e = sub.add_parser("evaluate", help="BLEU-1..4, ROUGE-L and CIDEr of candidates against references")
    e.add_argument("--candidates", required=True)
    e.add_argument("--references", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate, config_arg=None)

    k = sub.add_parser("grad-check", help="finite-difference check of the analytic gradients")
    k.add_argument("--config")
    k.add_argument("--tolerance", type=float, default=1e-4)
    k.set_defaults(func=cmd_grad_check)

    a = sub.add_parser("ablation", help="train all three variants per seed and compare")
    a.add_argument("--config")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_ablation)
    return p


def _limit_threads() -> None:
    n = os.environ.get(THREADS_ENV)
    if not n:
        return
    from threadpoolctl import threadpool_limits

    try:
        threadpool_limits(int(n))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {n!r}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        _limit_threads()
        config_arg = getattr(args, "config_arg", "config")
        cfg = load_run_config(getattr(args, config_arg) if config_arg else None)
        return args.func(args, cfg)
    except (ConfigError, ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"mat-caption {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
