"""Train one variant on the desk-scale synthetic corpus and show a few captions.

    python3 scripts/train_synthetic.py --variant mat --seed 0 --beam 3
"""
import argparse
import json
import logging
from dataclasses import replace

from mat_caption.experiments import DESK_SPEC, DESK_TRAIN, make_split, run_synthetic
from mat_caption.inference import caption
from mat_caption.model import Variant


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variant", default="mat", choices=[v.value for v in Variant])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--beam", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=DESK_TRAIN.max_epochs)
    ap.add_argument("--checkpoints", help="directory for best.npz")
    ap.add_argument("--show", type=int, default=8, help="validation captions to print")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    split = make_split(replace(DESK_SPEC, seed=args.seed))
    cfg = replace(DESK_TRAIN, variant=args.variant, seed=args.seed, max_epochs=args.epochs)
    out = run_synthetic(cfg, split, beam_size=args.beam, checkpoint_dir=args.checkpoints)
    print(json.dumps(out.report, indent=2, sort_keys=True))
    print(f"trained in {out.seconds:.0f}s")

    _, val = split.examples()
    for ex in val[:args.show]:
        res = caption(out.result.model, split.vocab, ex.objects, beam_size=max(args.beam, 1))
        gold = " ".join(split.vocab.decode(ex.tokens))
        mark = "==" if res.text == gold else "!="
        print(f"{res.text:45s} {mark} {gold}")


if __name__ == "__main__":
    main()
