#!/usr/bin/env python3
"""Loss ablation on the synthetic street corpus, averaged over seeds.

    python scripts/ablation.py --seeds 5 --regimes full naive
    python scripts/ablation.py --config configs/synthetic.ini --set finetune.shots=10
"""

import argparse
import json
import logging
import os
import time

from bgfss.config import load_config
from bgfss.experiments import REGIMES, run_seed, summarize
from bgfss.synth import write_corpus

HERE = os.path.dirname(os.path.abspath(__file__))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=os.path.join(HERE, os.pardir, "configs", "synthetic.ini"))
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--corpus", default="runs/corpus", help="generated here if missing")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--regimes", nargs="+", default=list(REGIMES), choices=list(REGIMES))
    ap.add_argument("--json", help="write the summary table here")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = load_config(args.config, args.set)
    if not os.path.exists(os.path.join(args.corpus, "corpus.json")):
        write_corpus(args.corpus, cfg.synth)
    t0 = time.time()
    results = []
    for seed in range(args.seeds):
        results.append(run_seed(args.corpus, cfg, seed, {r: REGIMES[r] for r in args.regimes}))
        print(f"seed {seed} done ({time.time() - t0:.0f}s)", flush=True)
    table = summarize(results)

    print(f"\n{'regime':<16} {'mIoU_b':>7} {'mIoU_n':>7} {'mIoU':>7} {'drop_b':>7}")
    print(f"{'base model':<16} {table['base']['miou_base']:>7.1f}")
    for name in args.regimes:
        row = table[name]
        print(f"{name:<16} {row['miou_base']:>7.1f} {row['miou_novel']:>7.1f} {row['miou']:>7.1f} {row['base_drop']:>7.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
