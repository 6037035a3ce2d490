"""Command-line entry point.

    moespnet generate-data --out data/
    moespnet train --config run.json --stage both --out runs/moe
    moespnet eval --checkpoint runs/moe/stage2 --data data/
    moespnet infer --checkpoint runs/moe/stage2 --image data/val/0.sptn --out pred/
    moespnet dump-gates --checkpoint runs/moe/stage2 --image data/val/0.sptn --out gates/
    moespnet gradcheck --op all

Failures exit non-zero with a single ``error: <Kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from moespnet import formats, gradcheck
from moespnet.config import MODEL_KINDS, RunConfig
from moespnet.data import SceneSpec, generate_dataset, load_split
from moespnet.metrics import all_metrics
from moespnet.tensor import Tensor
from moespnet.train import UsageError, evaluate, load_model, run_training


def _load_image(path: str) -> np.ndarray:
    arr = formats.read_sptn(path)
    if arr.shape[1] != 3:
        raise UsageError(f"{path}: expected a (N, 3, H, W) image, got {arr.shape}")
    return arr


def cmd_generate(args) -> int:
    spec = SceneSpec(canvas=args.canvas, seed=args.seed)
    root = generate_dataset(args.out, spec, args.train, args.val)
    print(json.dumps({"dataset": str(root), "train": args.train, "val": args.val}))
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(model=args.model, seed=args.seed, out=args.out, data=args.data)
    if cfg.data is None:
        raise UsageError("no dataset given (--data or paths.data in the config)")
    if cfg.out is None:
        raise UsageError("no output directory given (--out or paths.out in the config)")
    if not (Path(cfg.data) / "dataset.json").exists():
        raise UsageError(f"no dataset at {cfg.data}; run generate-data first")
    ds = load_split(cfg.data, "train")
    results = run_training(cfg, ds, cfg.out, args.stage, log_every=args.log_every)
    summary = {f"stage{k}": {"final_loss": r.final_loss, "steps": len(r.losses),
                             "checkpoint": str(Path(cfg.out) / f"stage{k}")} for k, r in results.items()}
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = load_model(args.checkpoint)
    data = args.data or cfg.data
    if data is None:
        raise UsageError("no dataset given (--data)")
    ds = load_split(data, args.split)
    cm = evaluate(model, ds)
    text = json.dumps(all_metrics(cm, args.zero_division))
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_infer(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    image = _load_image(args.image)
    probs = model.predict_proba(Tensor(image))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    written = []
    for i, lab in enumerate(probs.argmax(axis=1)):
        p = out / (f"{stem}.splb" if len(probs) == 1 else f"{stem}_{i}.splb")
        formats.write_splb(p, lab)
        written.append(str(p))
    if args.probs:
        p = out / f"{stem}_probs.sptn"
        formats.write_sptn(p, probs.astype(np.float32))
        written.append(str(p))
    print(json.dumps({"written": written}))
    return 0


def cmd_dump_gates(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    image = _load_image(args.image)
    maps = model.gate_maps(Tensor(image[:1]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, m in maps.items():
        p = out / f"{name}.pgm"
        formats.write_pgm(p, m[0])
        written.append(str(p))
    print(json.dumps({"written": written}))
    return 0


def cmd_gradcheck(args) -> int:
    ops = None if args.op == "all" else args.op.split(",")
    reports = gradcheck.run(ops, seed=args.seed)
    ok = True
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status} {r.op} max_rel_err={r.max_rel_error:.3e} frac_below_tol={r.frac_below_tol:.4f}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moespnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write the synthetic texture/shape dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=512)
    g.add_argument("--val", type=int, default=64)
    g.add_argument("--canvas", type=int, default=64)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--config")
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--data")
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="val")
    e.add_argument("--out")
    e.add_argument("--zero-division", choices=("exclude", "zero"), default="exclude")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="label map (and optional probabilities) for an SPTN image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--probs", action="store_true")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("dump-gates", help="export gate / AHFA weight maps as PGM")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_gates)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--op", default="all", help="op name, comma-separated names, or 'all'")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: UsageError: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
