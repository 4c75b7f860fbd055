"""Single `ckv` entry point with one subcommand per pipeline stage.

Every run that writes outputs also writes a ``<out>.manifest.json`` next to
them, recording the resolved parameters, seeds, and package version so the
run can be reproduced bit-identically.  Outputs are write-once: pass
``--force`` to overwrite.

Configuration file format: flat ``key = value`` lines grouped by
``[section]`` headers.  Values from the file act as defaults; command-line
flags win.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bandit import CQLParams
from .bound import bound_report
from .errors import CkvError
from .evaluation import CKV_METHOD, evaluate_run
from .headtable import (DEFAULT_ACTION_SET, EXACT, SURROGATE, HeadTable,
                        collect_head_experience, compile_head_table)
from .pipeline import Selection, baseline_select, compress
from .riskgate import (DEFAULT_BETA, DEFAULT_N_ENT, DEFAULT_N_PPL,
                       DEFAULT_TAU_GRID, BinEdges, GateTable,
                       collect_gate_experience, compile_gate_table, risk_coords)
from .tinylm import (TinyLMConfig, init_weights, load_weights, prefill,
                     sample_tokens, save_weights)
from .trace import (FULL, WINDOW_ROWS, BudgetConfig, SyntheticSpec,
                    gen_synthetic, load_trace, save_trace, validate_trace)
from .utility import compute_utility
from .headtable import pooled_importance

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def load_config(path: str | None) -> dict:
    """Parse the flat sectioned key=value config format."""
    if not path:
        return {}
    cfg, section = {}, ""
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg[f"{section}.{key}" if section else key] = value
    return cfg


def _cfg(cfg: dict, key: str, cast, fallback):
    return cast(cfg[key]) if key in cfg else fallback


def _check_out(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CkvError(f"refusing to overwrite {path} (use --force)")


def _write_manifest(out: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    params = {k: v for k, v in sorted(vars(args).items())
              if k != "func" and not callable(v)}
    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()}
    payload = {
        "schema_version": 1,
        "tool_version": __version__,
        "subcommand": args.subcommand,
        "params": params,
    }
    if extra:
        payload.update(extra)
    payload["config_hash"] = hashlib.sha256(
        json.dumps(params, sort_keys=True).encode()).hexdigest()
    manifest = out.with_name(out.name + ".manifest.json")
    manifest.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _load_traces(pattern: str):
    paths = sorted(glob.glob(pattern)) if any(c in pattern for c in "*?[") \
        else sorted(str(p) for p in Path(pattern).glob("*.ckvt")) \
        if Path(pattern).is_dir() else [pattern]
    if not paths:
        raise CkvError(f"no traces match {pattern!r}")
    return [load_trace(p) for p in paths], paths


def _budgets(value: str, num_layers: int) -> BudgetConfig:
    parts = [int(p) for p in value.replace(",", " ").split()]
    if len(parts) == 1:
        return BudgetConfig.uniform(parts[0], num_layers)
    if len(parts) != num_layers:
        raise CkvError(f"budget list has {len(parts)} entries for {num_layers} layers")
    return BudgetConfig(parts)


def _read_tokens(args, cfg) -> np.ndarray:
    if args.tokens:
        return np.asarray([int(t) for t in args.tokens.replace(",", " ").split()])
    if args.tokens_file:
        return np.asarray([int(t) for t in Path(args.tokens_file).read_text().split()])
    if args.random_tokens:
        rng = np.random.Generator(np.random.Philox(key=args.seed))
        return rng.integers(0, args.vocab_size, size=args.random_tokens)
    raise CkvError("one of --tokens/--tokens-file/--random-tokens is required")


# ---------------------------------------------------------------- subcommands

def cmd_gen(args, cfg):
    spec = SyntheticSpec(
        L=args.L, H=args.H, T=args.T,
        w_obs=min(args.w_obs, args.T),
        regime=args.regime.upper(), seed=args.seed, peak=args.peak,
        attention_mode=FULL if args.full else WINDOW_ROWS,
    )
    trace = gen_synthetic(spec)
    out = Path(args.out)
    _check_out(out, args.force)
    save_trace(trace, out, meta={"source": "gen_synthetic", "regime": spec.regime,
                                 "seed": spec.seed})
    _write_manifest(out, args)
    return EXIT_OK


def cmd_validate(args, cfg):
    trace = load_trace(args.trace, validate=False)
    report = validate_trace(trace)
    print(report)
    return EXIT_OK if report.ok else EXIT_FAILURE


def cmd_lm_init(args, cfg):
    config = TinyLMConfig(num_layers=args.L, num_heads=args.H, head_dim=args.d_head,
                          vocab_size=args.vocab_size, max_seq_len=args.max_seq_len,
                          seed=args.seed)
    out = Path(args.out)
    _check_out(out, args.force)
    save_weights(init_weights(config), out)
    _write_manifest(out, args)
    return EXIT_OK


def cmd_lm_prefill(args, cfg):
    weights = load_weights(args.weights)
    if args.sample_len:
        tokens = sample_tokens(weights, args.sample_len, seed=args.seed,
                               temperature=args.temperature)
    else:
        args.vocab_size = weights.config.vocab_size
        tokens = _read_tokens(args, cfg)
    trace = prefill(weights, tokens, include_kv=args.include_kv)
    trace.window_size = min(args.w_obs, trace.seq_len)
    out = Path(args.out)
    _check_out(out, args.force)
    save_trace(trace, out, meta={"source": "tinylm.prefill",
                                 "weights": str(args.weights)})
    _write_manifest(out, args)
    return EXIT_OK


def cmd_compile_head(args, cfg):
    traces, paths = _load_traces(args.traces)
    lm = load_weights(args.weights) if args.mode == EXACT else None
    actions = [float(a) for a in args.actions.replace(",", " ").split()] \
        if args.actions else list(DEFAULT_ACTION_SET)
    budgets = _budgets(args.budget, traces[0].num_layers)
    exp = collect_head_experience(
        traces, lm, action_set=actions, budgets=budgets,
        sampler_seed=args.seed, mode=args.mode,
        samples_per_state=args.samples_per_state)
    params = CQLParams(alpha_cql=args.alpha_cql, lr=args.lr, iters=args.iters,
                       seed=args.seed)
    table = compile_head_table(exp, params)
    out = Path(args.out)
    _check_out(out, args.force)
    table.save(out)
    _write_manifest(out, args, {"num_traces": len(paths)})
    return EXIT_OK


def cmd_compile_gate(args, cfg):
    traces, paths = _load_traces(args.traces)
    lm = load_weights(args.weights) if args.mode == EXACT else None
    head_table = HeadTable.load(args.head_table)
    budgets = _budgets(args.budget, traces[0].num_layers)

    from .utility import mean_attention
    from .riskgate import fit_bins, semantic_risk, structural_risk
    risks = [(structural_risk(mean_attention(t)),
              semantic_risk(t.logprobs, t.window_positions)) for t in traces]
    edges = fit_bins(risks, n_ent=args.n_ent, n_ppl=args.n_ppl)

    u_hats = [pooled_importance(compute_utility(t).u, head_table) for t in traces]
    taus = [float(t) for t in args.tau_grid.replace(",", " ").split()] \
        if args.tau_grid else list(DEFAULT_TAU_GRID)
    data = collect_gate_experience(
        traces, u_hats, edges, tau_grid=taus, budgets=budgets, beta=args.beta,
        lm=lm, mode=args.mode, seed=args.seed,
        samples_per_layer=args.samples_per_layer)
    params = CQLParams(alpha_cql=args.alpha_cql, lr=args.lr, iters=args.iters,
                       seed=args.seed)
    table = compile_gate_table(data, edges, traces[0].num_layers, budgets,
                               params, beta=args.beta)
    out = Path(args.out)
    bins_out = Path(args.bins_out)
    _check_out(out, args.force)
    _check_out(bins_out, args.force)
    table.save(out)
    edges.save(bins_out)
    _write_manifest(out, args, {"num_traces": len(paths)})
    return EXIT_OK


def cmd_compress(args, cfg):
    trace = load_trace(args.trace)
    budgets = _budgets(args.budget, trace.num_layers)
    if args.baseline != "none":
        sel = baseline_select(trace, args.baseline.upper(), budgets)
    else:
        head_table = HeadTable.load(args.head_table)
        gate_table = GateTable.load(args.gate_table)
        edges = BinEdges.load(args.bins)
        sel = compress(trace, head_table, gate_table, edges, budgets)
    out = Path(args.out)
    _check_out(out, args.force)
    sel.save(out)
    _write_manifest(out, args)
    return EXIT_OK


def cmd_eval(args, cfg):
    traces, paths = _load_traces(args.traces)
    lm = load_weights(args.weights)
    methods = [m.strip() for m in args.methods.split(",")]
    head_table = HeadTable.load(args.head_table) if args.head_table else None
    gate_table = GateTable.load(args.gate_table) if args.gate_table else None
    edges = BinEdges.load(args.bins) if args.bins else None
    budgets_sweep = [int(b) for b in args.budgets.replace(",", " ").split()]
    report = evaluate_run(traces, lm, methods, budgets_sweep,
                          head_table=head_table, gate_table=gate_table,
                          bin_edges=edges, jobs=args.jobs)
    out = Path(args.out)
    _check_out(out, args.force)
    report.save(out)
    if args.csv:
        csv_path = Path(args.csv)
        _check_out(csv_path, args.force)
        report.save_csv(csv_path)
    _write_manifest(out, args, {"num_traces": len(paths)})
    return EXIT_OK


def cmd_bound_check(args, cfg):
    trace = load_trace(args.trace)
    selection = Selection.load(args.selection)
    head_table = HeadTable.load(args.head_table)
    report = bound_report(trace, selection, head_table, delta=args.delta)
    out = Path(args.out)
    _check_out(out, args.force)
    report.save(out)
    _write_manifest(out, args)
    return EXIT_OK


def cmd_export_tables(args, cfg):
    wrote = []
    if args.head_table:
        table = HeadTable.load(args.head_table)
        out = Path(args.head_csv or (args.head_table + ".csv"))
        _check_out(out, args.force)
        table.save_csv(out)
        wrote.append(out)
    if args.gate_table:
        table = GateTable.load(args.gate_table)
        out = Path(args.gate_csv or (args.gate_table + ".csv"))
        _check_out(out, args.force)
        table.save_csv(out)
        wrote.append(out)
    if not wrote:
        raise CkvError("nothing to export: pass --head-table and/or --gate-table")
    _write_manifest(wrote[0], args)
    return EXIT_OK


def cmd_utility_dump(args, cfg):
    trace = load_trace(args.trace)
    field = compute_utility(trace)
    out = Path(args.out)
    _check_out(out, args.force)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "head", "position", "alpha", "rho", "u"])
        L, H, T = field.u.shape
        for l in range(L):
            for h in range(H):
                for t in range(T):
                    writer.writerow([l, h, t + 1, f"{field.alpha[t]:.8g}",
                                     f"{field.rho[l, h, t]:.8g}",
                                     f"{field.u[l, h, t]:.8g}"])
    _write_manifest(out, args)
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ckv", description="Prefill-only KV-cache compression toolkit")
    parser.add_argument("--config", default=None, help="flat key=value config file")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--force", action="store_true",
                       help="allow overwriting existing outputs")

    p = sub.add_parser("gen", help="generate a synthetic trace")
    common(p)
    p.add_argument("--regime", default="mixed",
                   choices=["concentrated", "diffuse", "mixed"])
    p.add_argument("--T", type=int, default=64)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--H", type=int, default=4)
    p.add_argument("--w-obs", type=int, default=32)
    p.add_argument("--peak", type=float, default=0.9)
    p.add_argument("--full", action="store_true", help="store full T x T attention")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("validate", help="validate a CKVT trace file")
    common(p)
    p.add_argument("trace")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("lm-init", help="initialize tiny LM weights")
    common(p)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--H", type=int, default=4)
    p.add_argument("--d-head", type=int, default=16)
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--max-seq-len", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lm_init)

    p = sub.add_parser("lm-prefill", help="run prefill and dump a trace")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--tokens", default=None, help="inline whitespace-separated ids")
    p.add_argument("--tokens-file", default=None)
    p.add_argument("--random-tokens", type=int, default=0,
                   help="generate N uniform-random token ids")
    p.add_argument("--sample-len", type=int, default=0,
                   help="sample N tokens autoregressively from the model")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--w-obs", type=int, default=32)
    p.add_argument("--include-kv", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lm_prefill)

    def cql_flags(p):
        p.add_argument("--alpha-cql", type=float, default=1.0)
        p.add_argument("--lr", type=float, default=0.1)
        p.add_argument("--iters", type=int, default=2000)

    p = sub.add_parser("compile-head", help="compile the head reliability table")
    common(p)
    cql_flags(p)
    p.add_argument("--traces", required=True, help="directory or glob of CKVT files")
    p.add_argument("--weights", default=None)
    p.add_argument("--mode", choices=[EXACT, SURROGATE], default=EXACT)
    p.add_argument("--actions", default=None, help="weight action set")
    p.add_argument("--budget", default="16")
    p.add_argument("--samples-per-state", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compile_head)

    p = sub.add_parser("compile-gate", help="fit risk bins and compile the gate table")
    common(p)
    cql_flags(p)
    p.add_argument("--traces", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--head-table", required=True)
    p.add_argument("--mode", choices=[EXACT, SURROGATE], default=EXACT)
    p.add_argument("--budget", default="16")
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--tau-grid", default=None)
    p.add_argument("--n-ent", type=int, default=DEFAULT_N_ENT)
    p.add_argument("--n-ppl", type=int, default=DEFAULT_N_PPL)
    p.add_argument("--samples-per-layer", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--bins-out", required=True)
    p.set_defaults(func=cmd_compile_gate)

    p = sub.add_parser("compress", help="select retained indices for a trace")
    common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--head-table", default=None)
    p.add_argument("--gate-table", default=None)
    p.add_argument("--bins", default=None)
    p.add_argument("--budget", default="16", help="int or per-layer list")
    p.add_argument("--baseline", default="none",
                   choices=["none", "sink_recent", "topk_accum", "full"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("eval", help="score methods over a budget sweep")
    common(p)
    p.add_argument("--traces", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--methods", default=f"{CKV_METHOD},TOPK_ACCUM,SINK_RECENT")
    p.add_argument("--budgets", default="8 16 32 64")
    p.add_argument("--head-table", default=None)
    p.add_argument("--gate-table", default=None)
    p.add_argument("--bins", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bound-check", help="attention-truncation error report")
    common(p)
    p.add_argument("--trace", required=True, help="FULL-mode CKVT file")
    p.add_argument("--selection", required=True)
    p.add_argument("--head-table", required=True)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bound_check)

    p = sub.add_parser("export-tables", help="dump compiled tables as CSV grids")
    common(p)
    p.add_argument("--head-table", default=None)
    p.add_argument("--gate-table", default=None)
    p.add_argument("--head-csv", default=None)
    p.add_argument("--gate-csv", default=None)
    p.set_defaults(func=cmd_export_tables)

    p = sub.add_parser("utility-dump", help="emit per-token utility as CSV")
    common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_utility_dump)

    return parser


# Config keys that act as flag defaults (flags win over the file).
_CONFIG_KEYS = {
    "pipeline.w_obs": ("w_obs", int),
    "pipeline.budget": ("budget", str),
    "pipeline.beta": ("beta", float),
    "pipeline.actions": ("actions", str),
    "pipeline.tau_grid": ("tau_grid", str),
    "pipeline.n_ent": ("n_ent", int),
    "pipeline.n_ppl": ("n_ppl", int),
    "cql.alpha_cql": ("alpha_cql", float),
    "cql.lr": ("lr", float),
    "cql.iters": ("iters", int),
    "seeds.seed": ("seed", int),
}


_FLAG_DEFAULTS = {
    "w_obs": 32, "budget": "16", "beta": DEFAULT_BETA, "actions": None,
    "tau_grid": None, "n_ent": DEFAULT_N_ENT, "n_ppl": DEFAULT_N_PPL,
    "alpha_cql": 1.0, "lr": 0.1, "iters": 2000, "seed": 0,
}


def _apply_config(args: argparse.Namespace, cfg: dict) -> None:
    for key, (attr, cast) in _CONFIG_KEYS.items():
        if key in cfg and hasattr(args, attr):
            if getattr(args, attr) == _FLAG_DEFAULTS.get(attr):
                setattr(args, attr, cast(cfg[key]))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config)
        _apply_config(args, cfg)
        return args.func(args, cfg)
    except CkvError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
