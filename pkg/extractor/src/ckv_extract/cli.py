"""Command line for trace extraction and stratified selection."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .extract import ExtractionJob, extract
from .models import RANDOM_GPT2
from .stratify import stratify


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ckv-extract",
        description="Dump prefill traces from a causal LM into CKVT files.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="extract one trace per prompt")
    run.add_argument("--model", default=RANDOM_GPT2,
                     help=f"model name or path (default: built-in {RANDOM_GPT2})")
    run.add_argument("--prompts", type=Path, required=True,
                     help="text file (one prompt per line) or JSONL with 'text'")
    run.add_argument("--w-obs", type=int, default=8)
    run.add_argument("--max-prompts", type=int, default=0)
    run.add_argument("--max-tokens", type=int, default=512)
    run.add_argument("--device", default="cpu")
    run.add_argument("--seed", type=int, default=0,
                     help="init seed for the built-in random model")
    run.add_argument("--out", type=Path, required=True, help="output directory")

    strat = sub.add_parser("stratify",
                           help="pick traces per (entropy, perplexity) cell")
    strat.add_argument("--traces", type=Path, required=True)
    strat.add_argument("--bins", type=Path, required=True,
                       help="fitted bin-edges JSON")
    strat.add_argument("--per-cell", type=int, required=True)
    strat.add_argument("--out", type=Path, required=True,
                       help="manifest JSON path")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        job = ExtractionJob(model=args.model, prompts=args.prompts,
                            out_dir=args.out, w_obs=args.w_obs,
                            max_prompts=args.max_prompts,
                            max_tokens=args.max_tokens, device=args.device,
                            seed=args.seed)
        written = extract(job)
        print(f"wrote {len(written)} traces to {args.out} "
              f"({len(job.skipped)} prompts skipped)")
        return 0 if written else 1
    manifest = stratify(args.traces, args.bins, args.per_cell)
    args.out.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"selected {len(manifest['selected'])} traces, "
          f"{len(manifest['empty_cells'])} empty cells")
    return 0


if __name__ == "__main__":
    sys.exit(main())
