"""Experiment runner: ``kvbudget {profile,compare,needle,gen-trace,validate-trace}``.

Every option can also come from a JSON file passed with ``--config``; keys are
the option names with dashes replaced by underscores. Command-line flags win.
``ZIGZAG_THREADS`` bounds the worker pool used for seed sweeps.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .budget import AllocationError
from .metrics import (
    MetricsReport,
    attention_loss,
    attention_mass_loss,
    lmba_profile,
    lmbo_profile,
    needle_retention,
    output_loss,
)
from .model import ConfigError, InputError, ModelConfig, build_model, prefill
from .policies import PolicyConfig, decide
from .traceio import (
    SynthSpec,
    TraceError,
    emit_report,
    generate_synth,
    load_trace,
    save_trace,
    trace_from_prefill,
)

log = logging.getLogger("kvbudget")


class CapabilityError(RuntimeError):
    """The requested metric needs a model but the source is a trace."""


@dataclass
class ExperimentConfig:
    policies: list[str] = field(default_factory=lambda: ["zigzag"])
    budgets: list[int] = field(default_factory=lambda: [16])
    b_bound: int | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    window: int = 8
    pool_kernel: int = 7
    eps: float = 0.1
    trace: str | None = None
    kappa: list[float] | None = None
    layers: int = 4
    heads: int = 4
    head_dim: int = 8
    vocab: int = 64
    seq_len: int = 64
    lmbo: bool = False
    output_loss: bool = True
    out: str = "runs"

    def __post_init__(self):
        if not self.policies or not self.budgets or not self.seeds:
            raise ConfigError("need at least one policy, one budget and one seed")

    def policy_configs(self) -> list[PolicyConfig]:
        defaults = {"window": self.window, "pool_kernel": self.pool_kernel, "eps": self.eps}
        if self.b_bound is not None:
            defaults["b_bound"] = self.b_bound
        configs = [PolicyConfig.parse(p, **defaults) for p in self.policies]
        names = [c.name for c in configs]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ConfigError(f"policies {sorted(dupes)} share a name; add label=... to tell them apart")
        return configs


@dataclass
class Source:
    states: list
    model: object = None
    result: object = None

    @property
    def n(self) -> int:
        return self.states[0].n


def _load_source(cfg: ExperimentConfig, seed: int) -> Source:
    if cfg.trace:
        trace = load_trace(cfg.trace)
        return Source(trace.to_states())
    if cfg.kappa:
        spec = SynthSpec(len(cfg.kappa), cfg.heads, cfg.seq_len, cfg.window, cfg.kappa, seed=seed)
        return Source(generate_synth(spec).to_states())
    model = build_model(
        ModelConfig(cfg.layers, cfg.heads, cfg.head_dim, cfg.vocab, seed=seed)
    )
    tokens = np.random.default_rng(seed).integers(cfg.vocab, size=cfg.seq_len)
    result = prefill(model, tokens, cfg.window)
    return Source(result.states, model, result)


def _threads() -> int:
    return max(1, int(os.environ.get("ZIGZAG_THREADS", "1")))


def _write_manifest(out: Path, command: str, cfg) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": asdict(cfg) if hasattr(cfg, "__dataclass_fields__") else cfg,
        "seeds": getattr(cfg, "seeds", None),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- profile


def profile_reports(cfg: ExperimentConfig) -> list[MetricsReport]:
    if cfg.lmbo and (cfg.trace or cfg.kappa):
        raise CapabilityError("LMBO needs the toy model; it cannot be computed from a trace")

    def one(seed: int) -> MetricsReport:
        src = _load_source(cfg, seed)
        report = MetricsReport(policy="profile", seed=seed, extra={"n": src.n, "window": cfg.window})
        report.lmba = lmba_profile(src.states, cfg.window, cfg.eps)
        if cfg.lmbo:
            report.lmbo = lmbo_profile(src.model, src.result, cfg.window, cfg.pool_kernel, cfg.eps)
        return report

    with ThreadPoolExecutor(_threads()) as pool:
        return list(pool.map(one, cfg.seeds))


def cmd_profile(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for report in profile_reports(cfg):
        emit_report(report, "json", out / f"profile_seed{report.seed}.json")
        emit_report(report, "csv", out / f"profile_seed{report.seed}.csv")
    _write_manifest(out, "profile", cfg)
    return 0


# ---------------------------------------------------------------- compare


def compare_cells(cfg: ExperimentConfig) -> tuple[list[MetricsReport], list[dict]]:
    """Run every (policy, budget, seed) cell; infeasible cells come back as skip records."""
    policies = cfg.policy_configs()

    def one(seed: int):
        src = _load_source(cfg, seed)
        lmba = lmba_profile(src.states, cfg.window, cfg.eps)
        lmbo = None
        if cfg.lmbo:
            if src.model is None:
                raise CapabilityError("LMBO needs the toy model; it cannot be computed from a trace")
            lmbo = lmbo_profile(src.model, src.result, cfg.window, cfg.pool_kernel, cfg.eps)
        reports, skipped = [], []
        for policy in policies:
            for budget in cfg.budgets:
                try:
                    decisions, plan = decide(src.states, policy, budget)
                except (ConfigError, AllocationError) as exc:
                    skipped.append({"policy": policy.name, "B": budget, "seed": seed, "reason": str(exc)})
                    continue
                report = MetricsReport(
                    policy=policy.name,
                    budget=budget,
                    b_bound=policy.bound_for(budget) if policy.kind.value == "zigzag" else None,
                    seed=seed,
                    extra={"n": src.n, "window": policy.window, "pool_kernel": policy.pool_kernel},
                )
                report.layer_budgets = list(plan.capped(src.n))
                report.lmba = lmba
                report.lmbo = lmbo
                report.attn_loss = attention_loss(src.states, decisions, policy.window).tolist()
                report.attn_loss_mass = attention_mass_loss(src.states, decisions, policy.window).tolist()
                if cfg.output_loss and src.model is not None:
                    report.out_loss = output_loss(src.model, src.result, decisions).tolist()
                reports.append(report)
        return reports, skipped

    with ThreadPoolExecutor(_threads()) as pool:
        results = list(pool.map(one, cfg.seeds))
    reports = [r for rs, _ in results for r in rs]
    skipped = [s for _, ss in results for s in ss]
    return reports, skipped


def _cell_name(report: MetricsReport) -> str:
    return f"{report.policy}_B{report.budget}_seed{report.seed}"


def summary_rows(reports: list[MetricsReport]) -> list[dict]:
    rows = []
    for r in reports:
        agg = r.aggregate()
        rows.append(
            {
                "policy": r.policy,
                "B": r.budget,
                "B_bound": "" if r.b_bound is None else r.b_bound,
                "seed": r.seed,
                "mean_attn_loss": agg.get("attn_loss_mean", ""),
                "mean_attn_loss_mass": agg.get("attn_loss_mass_mean", ""),
                "mean_out_loss": agg.get("out_loss_mean", ""),
                "report": _cell_name(r) + ".json",
            }
        )
    key = lambda row: (  # noqa: E731
        row["mean_attn_loss"],
        row["mean_out_loss"] if row["mean_out_loss"] != "" else 0.0,
        row["policy"],
        row["B"],
        row["seed"],
    )
    rows.sort(key=key)
    for rank, row in enumerate(rows, start=1):
        row["rank"] = rank
    return rows


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_compare(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, skipped = compare_cells(cfg)
    for report in reports:
        emit_report(report, "json", out / f"{_cell_name(report)}.json")
    columns = ["rank", "policy", "B", "B_bound", "seed", "mean_attn_loss",
               "mean_attn_loss_mass", "mean_out_loss", "report"]
    _write_csv(out / "summary.csv", summary_rows(reports), columns)
    _write_csv(out / "skipped.csv", skipped, ["policy", "B", "seed", "reason"])
    for s in skipped:
        log.warning("skipped %s B=%s seed=%s: %s", s["policy"], s["B"], s["seed"], s["reason"])
    _write_manifest(out, "compare", cfg)
    return 0


# ---------------------------------------------------------------- needle


@dataclass
class NeedleConfig(ExperimentConfig):
    lengths: list[int] = field(default_factory=lambda: [64, 128, 256])
    depths: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    positions: list[int] | None = None
    needle_mass: float = 0.5


def _default_kappa(layers: int, n: int) -> list[float]:
    return np.geomspace(1, n, layers).tolist()


def needle_table(cfg: NeedleConfig) -> list[dict]:
    """Long-form retention rows: one per (policy, length, needle position, budget)."""
    policies = cfg.policy_configs()
    cells = []
    for n in cfg.lengths:
        if cfg.positions is not None:
            bad = [p for p in cfg.positions if not 0 <= p < n]
            if bad:
                raise InputError(f"needle positions {bad} fall outside a length-{n} context")
            placements = [(p / max(n - 1, 1), p) for p in cfg.positions]
        else:
            placements = [(d, int(round(d * (n - 1)))) for d in cfg.depths]
        for depth, pos in placements:
            cells.append((n, depth, pos))

    def one(cell):
        n, depth, pos = cell
        rows = []
        kappa = cfg.kappa or _default_kappa(cfg.layers, n)
        per_seed = {}
        for seed in cfg.seeds:
            spec = SynthSpec(len(kappa), cfg.heads, n, cfg.window, kappa, seed=seed,
                             needles=(pos,), needle_mass=cfg.needle_mass)
            states = generate_synth(spec).to_states()
            for policy in policies:
                for budget in cfg.budgets:
                    try:
                        decisions, _ = decide(states, policy, budget)
                    except (ConfigError, AllocationError):
                        continue
                    per_seed.setdefault((policy.name, budget), []).append(
                        needle_retention(decisions, [pos])
                    )
        for (name, budget), values in per_seed.items():
            rows.append({"policy": name, "B": budget, "length": n, "depth": depth,
                         "position": pos, "retention": float(np.mean(values))})
        return rows

    with ThreadPoolExecutor(_threads()) as pool:
        return [row for rows in pool.map(one, cells) for row in rows]


def cmd_needle(cfg: NeedleConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = needle_table(cfg)
    _write_csv(out / "needle.csv", rows, ["policy", "B", "length", "depth", "position", "retention"])
    for policy in sorted({(r["policy"], r["B"]) for r in rows}):
        sub = [r for r in rows if (r["policy"], r["B"]) == policy]
        depths = sorted({r["depth"] for r in sub})
        lengths = sorted({r["length"] for r in sub})
        lookup = {(r["depth"], r["length"]): r["retention"] for r in sub}
        matrix = [
            {"depth": d, **{str(n): lookup.get((d, n), "") for n in lengths}} for d in depths
        ]
        _write_csv(out / f"needle_{policy[0]}_B{policy[1]}.csv", matrix,
                   ["depth"] + [str(n) for n in lengths])
    _write_manifest(out, "needle", cfg)
    return 0


# ---------------------------------------------------------------- traces


def cmd_gen_trace(cfg: ExperimentConfig, path: str, from_model: bool) -> int:
    seed = cfg.seeds[0]
    if from_model or not cfg.kappa:
        model = build_model(ModelConfig(cfg.layers, cfg.heads, cfg.head_dim, cfg.vocab, seed=seed))
        tokens = np.random.default_rng(seed).integers(cfg.vocab, size=cfg.seq_len)
        trace = trace_from_prefill(prefill(model, tokens, cfg.window))
    else:
        spec = SynthSpec(len(cfg.kappa), cfg.heads, cfg.seq_len, cfg.window, cfg.kappa, seed=seed)
        trace = generate_synth(spec)
    save_trace(trace, path)
    print(f"wrote {path} L={trace.num_layers} h={trace.num_heads} n={trace.n} w={trace.window} "
          f"sha256={trace.checksum()}")
    return 0


def cmd_validate_trace(path: str) -> int:
    try:
        trace = load_trace(path)
    except TraceError as exc:
        for line in exc.diagnostics:
            print(line, file=sys.stderr)
        return 1
    print(f"ok L={trace.num_layers} h={trace.num_heads} n={trace.n} w={trace.window}")
    return 0


# ---------------------------------------------------------------- argparse


def _csv_list(kind):
    def parse(text: str):
        return [kind(x) for x in text.replace(" ", "").split(",") if x]
    return parse


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--policy", dest="policies", action="append",
                   help="policy spec, e.g. snapkv or zigzag:b_bound=0,label=zz0 (repeatable)")
    p.add_argument("--budget", dest="budgets", type=_csv_list(int), help="mean budgets, comma-separated")
    p.add_argument("--b-bound", type=int, help="ZigZag per-layer floor (default B/2)")
    p.add_argument("--seed", dest="seeds", type=_csv_list(int), help="seeds, comma-separated")
    p.add_argument("--window", type=int)
    p.add_argument("--pool-kernel", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--trace", help="NDJSON attention trace instead of the toy model")
    p.add_argument("--kappa", type=_csv_list(float), help="synthetic per-layer concentrations")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--head-dim", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--lmbo", action="store_true", default=None, help="also compute LMBO (toy model only)")
    p.add_argument("--no-output-loss", dest="output_loss", action="store_false", default=None)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvbudget", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("profile", help="per-layer LMBA (and LMBO) curves"))
    _add_common(sub.add_parser("compare", help="sweep policies x budgets x seeds"))
    needle = sub.add_parser("needle", help="needle retention over positions x lengths")
    _add_common(needle)
    needle.add_argument("--lengths", type=_csv_list(int))
    needle.add_argument("--depths", type=_csv_list(float))
    needle.add_argument("--positions", type=_csv_list(int), help="absolute needle positions")
    needle.add_argument("--needle-mass", type=float)
    gen = sub.add_parser("gen-trace", help="write a synthetic or toy-model trace")
    _add_common(gen)
    gen.add_argument("path")
    gen.add_argument("--from-model", action="store_true")
    val = sub.add_parser("validate-trace", help="check a trace file")
    val.add_argument("path")
    return parser


def _resolve(args: argparse.Namespace, cls):
    values = {}
    if getattr(args, "config", None):
        values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    for name in cls.__dataclass_fields__:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    unknown = set(values) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cls(**values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "validate-trace":
            return cmd_validate_trace(args.path)
        if args.command == "needle":
            return cmd_needle(_resolve(args, NeedleConfig))
        cfg = _resolve(args, ExperimentConfig)
        if args.command == "profile":
            return cmd_profile(cfg)
        if args.command == "compare":
            return cmd_compare(cfg)
        return cmd_gen_trace(cfg, args.path, args.from_model)
    except (ConfigError, InputError, AllocationError, CapabilityError, TraceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
