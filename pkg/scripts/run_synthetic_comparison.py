"""Paired-seed comparison on the synthetic texture/shape task.

    python3 scripts/run_synthetic_comparison.py --data data/ --seeds 0 1 2 3 4 --out results.json

Generates the dataset if ``--data`` has none, then for each seed trains the
shared stage-1 network of each family and fine-tunes the adaptive head and
its baseline from it.  Prints one line per pair and a win count per model.
"""
import argparse
import json
import logging
from pathlib import Path

from moespnet.config import TrainConfig
from moespnet.data import SceneSpec, generate_dataset, load_split
from moespnet.experiment import PAIRS, run_comparison, wins


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default="data")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--stage1-iter", type=int, default=2000)
    p.add_argument("--stage2-iter", type=int, default=1000)
    p.add_argument("--out", default="results.json")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if not (Path(args.data) / "dataset.json").exists():
        generate_dataset(args.data, SceneSpec(seed=0), n_train=512, n_val=64)
    train, val = load_split(args.data, "train"), load_split(args.data, "val")
    tc = TrainConfig(max_iter=args.stage1_iter, stage2_iter=args.stage2_iter)
    results = run_comparison(train, val, args.seeds, train_config=tc, out=args.out)
    for model, _ in PAIRS:
        won, total = wins(results, model)
        margins = [round(r.margin, 4) for r in results if r.model == model]
        print(json.dumps({"model": model, "wins": won, "seeds": total, "margins": margins}))


if __name__ == "__main__":
    main()
