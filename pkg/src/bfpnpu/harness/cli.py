"""Command-line entry point: ``bfpnpu <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from ..errors import BfpError, UnknownSite
from ..fault_injection import InjectionPlan
from ..protection import classify_events
from . import acceptance, studies
from .campaign import relative_error, run_campaign
from .config import TARGETS, CampaignConfig
from .targets import build_target


def _csv_list(cast):
    def parse(text: str):
        return tuple(cast(x) for x in text.split(",") if x)
    return parse


def _target_args(p: argparse.ArgumentParser):
    p.add_argument("--target", choices=TARGETS, default="system")
    p.add_argument("--size", type=int, default=4, help="array side / block length")
    p.add_argument("--dataflow", choices=("WS", "OS"), type=str.upper, default="WS")
    p.add_argument("--protection", choices=("bfp", "none", "full_dmr"), default="bfp")
    p.add_argument("--man-width", type=int, default=8)
    p.add_argument("--acc-width", type=int, default=None)
    p.add_argument("--converter-check", choices=("dmr", "fuzzy"), default="dmr")


def _build(args):
    return build_target(args.target, args.size, args.dataflow, args.man_width, args.acc_width,
                        args.protection, args.converter_check,
                        f"file:{args.inputs}" if getattr(args, "inputs", None) else "gaussian")


def _out_dir(args) -> Path:
    d = Path(args.out_dir) if args.out_dir else CampaignConfig().out_path
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_rows(rows: list[dict], path: Path):
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _emit_study(args, stem: str, rows: list[dict], summary: dict | None = None):
    d = _out_dir(args)
    _write_rows(rows, d / f"{stem}.csv")
    doc = {"study": stem, "rows": rows}
    if summary is not None:
        doc["summary"] = summary
    (d / f"{stem}.json").write_text(json.dumps(doc, indent=2, default=float) + "\n")
    for r in rows:
        print("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in r.items()))
    if summary:
        print(json.dumps(summary, default=float))
    print(f"wrote {d / stem}.csv and .json")


# -- subcommands ---------------------------------------------------------------------------


def cmd_sites(args):
    m = _build(args).manifest()
    text = m.dumps()
    if args.out:
        Path(args.out).write_text(text)
        print(f"{m.total_bits} sites -> {args.out}")
    else:
        sys.stdout.write(text)
    if args.summary:
        print(json.dumps(m.by_unit(), sort_keys=True), file=sys.stderr)


def _event(e) -> str:
    cls = f" ({e.classification.value})" if e.classification is not None else ""
    return f"{e.checker.value}:{e.hint}@{e.cycle}{cls}"


def _load_plan(path):
    return InjectionPlan.loads(Path(path).read_text()) if path else InjectionPlan()


def cmd_gemm(args):
    args.target = "system"
    t = _build(args)
    wl = t.workload(np.random.default_rng(args.seed))
    plan = _load_plan(args.plan)
    run = t.execute(wl, list(plan.specs))
    ref = t.execute(wl, []) if plan.specs else run
    summary = {"outputs_shape": list(np.shape(run.outputs)), "cycles": run.end_cycle,
               "faults": len(plan), "events": [_event(e) for e in run.events],
               "rel_err_vs_clean": relative_error(ref.outputs, run.outputs)}
    print(json.dumps(summary, indent=2))
    if args.out:
        np.savez(args.out, a=wl[0], b=wl[1], c=run.outputs)


def cmd_replay(args):
    t = _build(args)
    plan = _load_plan(args.plan)
    wl = t.workload(np.random.default_rng(args.seed))
    clean = t.execute(wl, [])
    faulty = t.execute(wl, list(plan.specs))
    res = classify_events(clean.outputs, faulty.outputs, faulty.events, list(plan.specs),
                          clean.start_cycle, clean.events)
    print(f"target {t.name}  faults {len(plan)}  outcome {res.outcome.value}  "
          f"latency {res.latency}  rel_err {relative_error(clean.outputs, faulty.outputs):.4g}")
    for e in res.events:
        print(f"{e.cycle}\t{_event(e)}")


def _campaign_config(args) -> CampaignConfig:
    cfg = CampaignConfig.load(args.config) if args.config else CampaignConfig()
    return cfg.override(target=args.target, mode=args.mode, sizes=args.sizes,
                        dataflows=args.dataflows, man_width=args.man_width,
                        acc_width=args.acc_width, kinds=args.kinds, rates=args.rates,
                        runs_per_point=args.runs, seed=args.seed, workload=args.workload,
                        protections=args.protections, units=args.units,
                        converter_check=args.converter_check, workers=args.workers,
                        output_dir=args.out_dir)


def cmd_campaign(args):
    cfg = _campaign_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.dumps())
        return
    report = run_campaign(cfg)
    for p in report.write(stem=args.stem):
        print(f"wrote {p}")
    for row in report.rows():
        cov = row["coverage_effective"]
        print(f"{row['target']} {row['dataflow']} {row['size']} {row['protection']} "
              f"{row['kinds']} rate={row['rate']}: injected {row['injected']} "
              f"effective {row['effective']} coverage "
              f"{'n/a' if cov is None else f'{cov:.4f}'} fp_runs {row['false_positive_runs']}")


def cmd_study_blocking(args):
    st = studies.study_blocking_error(args.trials, args.size, args.segment, args.man_width,
                                      args.seed)
    _emit_study(args, "study_blocking", st.rows(),
                {"ordering_trials": int(st.ordering_holds().sum()), "trials": args.trials})


def cmd_study_lzc(args):
    st = studies.study_leading_zeros(args.trials, args.size, args.man_width, args.seed)
    _emit_study(args, "study_lzc", st.rows(), st.summary())


def cmd_study_segments(args):
    st = studies.study_segment_sensitivity(args.size, args.flips, args.man_width,
                                           args.dataflow, args.seed)
    _emit_study(args, "study_segments", st.rows(), st.medians())


def cmd_study_fp_baseline(args):
    st = studies.study_fp_baseline(args.lengths, args.runs, seed=args.seed)
    _emit_study(args, "study_fp_baseline", st.rows(),
                {"qualifying_eps_max_abs": st.qualifying("max_abs")})


def cmd_study_latency(args):
    st = studies.study_latency(args.sizes, args.samples, seed=args.seed)
    _emit_study(args, "study_latency", st.rows())


def cmd_acceptance(args):
    nums = args.criteria or sorted(acceptance.CRITERIA)
    results = []
    for n in nums:
        r = acceptance.run_criterion(n)
        results.append(r)
        print(r.line(), flush=True)
    if args.json:
        Path(args.json).write_text(json.dumps(
            [{"number": r.number, "name": r.name, "passed": r.passed, "detail": r.detail,
              "seconds": r.seconds, "data": r.data} for r in results],
            indent=2, default=_jsonable) + "\n")
    return 0 if all(r.passed for r in results) else 1


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    return str(o)


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bfpnpu", description="BFP NPU reliability simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sites", help="emit the fault-site manifest")
    _target_args(p)
    p.add_argument("--out", help="write the manifest here instead of stdout")
    p.add_argument("--summary", action="store_true", help="print per-unit counts to stderr")
    p.set_defaults(func=cmd_sites)

    p = sub.add_parser("gemm", help="one GEMM on the NPU, optionally under a fault plan")
    _target_args(p)
    p.add_argument("--plan", help="injection plan file")
    p.add_argument("--inputs", help=".npz with arrays a and b")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="save a, b and outputs as .npz")
    p.set_defaults(func=cmd_gemm)

    p = sub.add_parser("replay", help="re-execute one plan and classify it against a clean run")
    _target_args(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--inputs", help=".npz with arrays a and b (system target)")
    p.add_argument("--seed", type=int, default=0, help="workload seed")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("campaign", help="run a fault-injection campaign")
    p.add_argument("--config", help="JSON campaign config; flags below override it")
    p.add_argument("--target", choices=TARGETS)
    p.add_argument("--mode", choices=("rate", "exhaustive"))
    p.add_argument("--sizes", type=_csv_list(int))
    p.add_argument("--dataflows", type=_csv_list(str.upper))
    p.add_argument("--man-width", type=int)
    p.add_argument("--acc-width", type=int)
    p.add_argument("--kinds", type=_csv_list(str))
    p.add_argument("--rates", type=_csv_list(float))
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workload")
    p.add_argument("--protections", type=_csv_list(str))
    p.add_argument("--units", type=_csv_list(str))
    p.add_argument("--converter-check", choices=("dmr", "fuzzy"))
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--stem", default="campaign")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    p.set_defaults(func=cmd_campaign)

    def study(name, fn, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out-dir")
        q.set_defaults(func=fn)
        return q

    q = study("study-blocking", cmd_study_blocking, "quantization MSE by blocking strategy")
    q.add_argument("--trials", type=int, default=100)
    q.add_argument("--size", type=int, default=128)
    q.add_argument("--segment", type=int, default=4)
    q.add_argument("--man-width", type=int, default=8)

    q = study("study-lzc", cmd_study_lzc, "leading zeros of BFP vs FP partial sums")
    q.add_argument("--trials", type=int, default=32)
    q.add_argument("--size", type=int, default=16)
    q.add_argument("--man-width", type=int, default=8)

    q = study("study-segments", cmd_study_segments, "output error by accumulator segment")
    q.add_argument("--size", type=int, default=8)
    q.add_argument("--flips", type=int, default=60, help="effective flips per bit")
    q.add_argument("--man-width", type=int, default=8)
    q.add_argument("--dataflow", choices=("WS", "OS"), type=str.upper, default="WS")

    q = study("study-fp-baseline", cmd_study_fp_baseline,
              "false positives of an FP-domain checksum check")
    q.add_argument("--lengths", type=_csv_list(int), default=(16, 64, 128))
    q.add_argument("--runs", type=int, default=40)

    q = study("study-latency", cmd_study_latency, "worst detection latency per component")
    q.add_argument("--sizes", type=_csv_list(int), default=(4, 8, 16))
    q.add_argument("--samples", type=int, default=300)

    p = sub.add_parser("acceptance", help="run acceptance criteria (all by default)")
    p.add_argument("criteria", nargs="*", type=int)
    p.add_argument("--json", help="write full results here")
    p.set_defaults(func=cmd_acceptance)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except UnknownSite as e:
        print(f"bfpnpu: error: no such fault site in this target: {e.args[0]}", file=sys.stderr)
        return 2
    except (BfpError, OSError, ValueError) as e:
        print(f"bfpnpu: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
