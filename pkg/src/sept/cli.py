"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

OLS_HEADER = ("det_l", "det_t", "top_ll", "top_lt")
OLUS_HEADER = ("det_ls", "det_a", "det_te", "top_lsls", "top_lste")

log = logging.getLogger("sept")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; we reserve 2 for validation errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path):
    from .model import RunConfig

    return RunConfig.load(path)


def cmd_gen(args) -> int:
    from .harness import generate_dataset

    overrides = {}
    if args.occlusion is not None:
        overrides["occlusion_fraction"] = args.occlusion
    if args.drop_sd is not None:
        overrides["drop_sd_edge_prob"] = args.drop_sd
    if args.scenes < 1:
        raise ValueError("--scenes must be >= 1")
    manifest = generate_dataset(args.out, args.scenes, args.seed, n_val=args.val, grid=args.grid, **overrides)
    n_val = sum(e["split"] == "val" for e in manifest["scenes"])
    print(f"wrote {len(manifest['scenes'])} scenes ({n_val} val) to {args.out}")
    return EXIT_OK


def cmd_prep(args) -> int:
    from .harness import preprocess

    n = preprocess(args.scenes, args.out)
    print(f"preprocessed {n} scenes into {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness import run_training

    config = _load_config(args.config)
    ckpt, tlog = run_training(config, args.out)
    final = tlog.evals[-1] if tlog.evals else {}
    print(json.dumps({"checkpoint": str(ckpt), "seed": tlog.seed, "config_hash": tlog.config_hash,
                      "final_loss": tlog.steps[-1]["loss"] if tlog.steps else None,
                      "iou": final.get("iou"), "heatmap_ap": final.get("heatmap_ap")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import evaluate_model, load_model, load_samples

    config = _load_config(args.config)
    split = args.split or config.eval_split
    model = load_model(config, args.ckpt)
    metrics = evaluate_model(model, load_samples(config, split), config.eval_radius)
    print(json.dumps({"split": split, "iou": metrics["iou"], "heatmap_ap": metrics["heatmap_ap"],
                      "scenes": metrics["scenes"]}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness import ablate, summarize

    config = _load_config(args.config)

    def progress(row):
        log.info("%s seed=%s iou=%.2f ap=%.2f", row["variant"], row["seed"], row["iou"], row["heatmap_ap"])

    rows = ablate(config, args.out, progress=progress, with_summary=True)
    for label, s in summarize(rows).items():
        print(f"{label:18s} iou {s['iou_mean']:6.2f} +/- {s['iou_spread']:5.2f}   "
              f"ap {s['ap_mean']:6.2f} +/- {s['ap_spread']:5.2f}   (n={s['runs']})")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .metrics import ols, olus

    header = OLUS_HEADER if args.olus else OLS_HEADER
    fn = olus if args.olus else ols
    with open(args.csv, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(h.strip() for h in (reader.fieldnames or ())) != header:
            raise ValueError(f"expected CSV header {','.join(header)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                values = [float(row[h]) for h in header]
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{args.csv}:{lineno}: non-numeric value ({exc})") from exc
            print(f"{fn(*values):.1f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite

    seeds = range(args.seeds)
    worst = run_suite(seeds)
    failed = False
    for name, err in worst.items():
        ok = err < TOLERANCE
        failed |= not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:26s} max rel err {err:.2e}")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sept", description="SD-map prior toolkit: data, training, ablation, metrics.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate synthetic scenes and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--occlusion", type=float, default=None, help="occluded fraction of road length")
    p.add_argument("--drop-sd", type=float, default=None, help="probability of dropping an SD edge")
    p.add_argument("--val", type=int, default=None, help="number of validation scenes (default N/5)")
    p.add_argument("--grid", choices=("desk", "full"), default="desk")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("prep", help="rasterize, tokenize and render heatmaps for a scene directory")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val"), default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the variant matrix and write a CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="compute OLS (or OLUS) per CSV row")
    p.add_argument("--csv", required=True)
    p.add_argument("--olus", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)

    from .harness import NumericError
    from .tensor import GradError

    try:
        return args.func(args)
    except (NumericError, GradError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
