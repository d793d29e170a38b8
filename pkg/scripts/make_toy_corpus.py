#!/usr/bin/env python3
"""Write a corpus of random grammatically valid toy models as JSON."""

import argparse
from pathlib import Path

from caddiff.cadseq import sequences_to_json
from caddiff.synthetic import random_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, required=True)
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--min-commands", type=int, default=4)
    ap.add_argument("--max-commands", type=int, default=8)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    corpus = random_corpus(args.seed, args.n, args.min_commands, args.max_commands)
    Path(args.out).write_text(sequences_to_json(corpus))
    print(f"wrote {len(corpus)} sequences to {args.out}")


if __name__ == "__main__":
    main()
