"""Print where a trained checkpoint attends while it captions a few images.

    mat-caption train --config configs/desk.cfg --data data/train --val data/val --out runs/desk
    python3 scripts/show_attention.py runs/desk/checkpoints/best.npz data/val/features.jsonl
"""
import argparse

import numpy as np

from mat_caption.data import load_features
from mat_caption.inference import caption
from mat_caption.training import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("features")
    ap.add_argument("-n", type=int, default=3)
    ap.add_argument("--beam", type=int, default=3)
    args = ap.parse_args()

    ck = load_checkpoint(args.checkpoint)
    np.set_printoptions(precision=2, suppress=True)
    for rec in load_features(args.features)[:args.n]:
        res = caption(ck.model, ck.vocab, rec.sequence, args.beam, with_attention=True)
        print(f"{rec.id}: {res.text}  (log p {res.logprob:.3f})")
        if res.attention is None:
            print("  (variant has no attention)")
            continue
        words = res.text.split() + ["<end>"]
        cols = [f"obj{i}" for i in range(len(rec.objects))] + ["global"]
        print("  " + " " * 10 + " ".join(f"{c:>6s}" for c in cols))
        for w, row in zip(words, res.attention):
            print(f"  {w:>10s}" + " ".join(f"{v:6.2f}" for v in row))


if __name__ == "__main__":
    main()
