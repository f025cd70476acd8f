"""Campaign orchestration: clean/faulty run pairs, aggregation and reports.

Every run draws its workload and fault plan from a generator seeded by
``(seed, point index, run index)``, so results do not depend on execution
order or on how runs are split across worker processes.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import BfpError
from ..fault_injection import FaultKind, FaultSpec, Manifest, sample_plan
from ..protection import CoverageRecord, InjectionResult, Outcome, classify_events
from .config import CampaignConfig
from .targets import build_target

Q_SEGMENTS = {"Q1": (0, 6), "Q2": (6, 12), "Q3": (12, 17), "Q4": (17, 22)}
ERROR_QUANTILES = (0.5, 0.9, 0.99, 1.0)


def q_segment(bit: int) -> str:
    for name, (lo, hi) in Q_SEGMENTS.items():
        if lo <= bit < hi:
            return name
    return "guard"


def relative_error(clean, faulty) -> float:
    """Largest absolute deviation scaled by the clean output's largest magnitude."""
    c = np.asarray(clean, dtype=np.float64)
    f = np.asarray(faulty, dtype=np.float64)
    if c.shape != f.shape:
        return float("inf")
    scale = np.max(np.abs(c)) if c.size else 0.0
    with np.errstate(invalid="ignore", over="ignore"):
        d = np.abs(f - c)
    d = np.where(np.isnan(d), np.inf, d)
    if not d.size:
        return 0.0
    worst = float(np.max(d))
    if worst == 0:
        return 0.0
    return worst / scale if scale > 0 else float("inf")


@dataclass(frozen=True)
class Point:
    index: int
    target: str
    dataflow: str
    size: int
    protection: str
    rate: float | None
    kinds: tuple[str, ...]

    @property
    def key(self) -> dict:
        return {"target": self.target, "dataflow": self.dataflow, "size": self.size,
                "protection": self.protection,
                "rate": self.rate, "kinds": "+".join(self.kinds)}


@dataclass
class PointResult:
    point: Point
    coverage: CoverageRecord = field(default_factory=CoverageRecord)
    runs: int = 0
    no_injection: int = 0
    false_positive_runs: int = 0
    false_positive_events: int = 0
    errors: list[float] = field(default_factory=list)
    by_unit: dict[str, CoverageRecord] = field(default_factory=dict)
    by_segment: dict[str, CoverageRecord] = field(default_factory=dict)
    manifest_bits: int = 0
    escapes: list[str] = field(default_factory=list)

    def merge(self, other: "PointResult") -> "PointResult":
        out = PointResult(self.point, self.coverage.merge(other.coverage),
                          self.runs + other.runs, self.no_injection + other.no_injection,
                          self.false_positive_runs + other.false_positive_runs,
                          self.false_positive_events + other.false_positive_events,
                          sorted(self.errors + other.errors),
                          manifest_bits=max(self.manifest_bits, other.manifest_bits),
                          escapes=sorted(self.escapes + other.escapes))
        for name in ("by_unit", "by_segment"):
            mine, theirs = getattr(self, name), getattr(other, name)
            merged = {}
            for k in sorted(set(mine) | set(theirs)):
                merged[k] = mine.get(k, CoverageRecord()).merge(theirs.get(k, CoverageRecord()))
            setattr(out, name, merged)
        return out

    def record(self, specs, result: InjectionResult, err: float | None):
        self.coverage.add(result)
        units = {s.site.site_class for s in specs}
        unit = units.pop() if len(units) == 1 else "mixed"
        self.by_unit.setdefault(unit, CoverageRecord()).add(result)
        if len(specs) == 1 and specs[0].site.reg in ("acc", "h_pass", "v_pass"):
            seg = q_segment(specs[0].site.bit)
            self.by_segment.setdefault(seg, CoverageRecord()).add(result)
        if err is not None and result.effective:
            self.errors.append(err)
        if result.outcome is Outcome.SILENT and len(specs) == 1:
            self.escapes.append(str(specs[0]))

    def summary(self) -> dict:
        cov = self.coverage.as_dict()
        errs = np.asarray(self.errors, dtype=np.float64)
        out = dict(self.point.key)
        out.update({
            "manifest_bits": self.manifest_bits,
            "runs": self.runs,
            "no_injection": self.no_injection,
            **cov,
            "false_positive_runs": self.false_positive_runs,
            "false_positive_rate": self.false_positive_runs / self.runs if self.runs else 0.0,
        })
        for q in ERROR_QUANTILES:
            out[f"rel_err_q{int(q * 100)}"] = (float(np.quantile(errs, q, method="lower"))
                                                if errs.size else None)
        return out


def _effective_rng(seed: int, point: int, run: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, point, run]))


def _point_target(cfg: CampaignConfig, p: Point):
    return build_target(p.target, p.size, p.dataflow, cfg.man_width, cfg.acc_width,
                        p.protection, cfg.converter_check, cfg.workload)


def _filter_manifest(m: Manifest, units) -> Manifest:
    if units is None:
        return m
    return Manifest(tuple(s for s in m.sites if s.unit in units))


def _classify(target, wl, clean, specs):
    faulty = target.execute(wl, specs)
    res = classify_events(clean.outputs, faulty.outputs, faulty.events, specs,
                          clean.start_cycle, clean.events)
    return res, relative_error(clean.outputs, faulty.outputs)


def _run_rate_chunk(cfg: CampaignConfig, p: Point, runs: range) -> PointResult:
    target = _point_target(cfg, p)
    manifest = _filter_manifest(target.manifest(), cfg.units)
    out = PointResult(p, manifest_bits=len(manifest))
    lo, hi = target.window()
    for r in runs:
        rng = _effective_rng(cfg.seed, p.index, r)
        try:
            wl = target.workload(rng)
            clean = target.execute(wl, [])
            out.runs += 1
            if clean.events:
                out.false_positive_runs += 1
                out.false_positive_events += len(clean.events)
            plan = sample_plan(manifest, p.rate, int(rng.integers(2**63)), (lo, hi),
                               [FaultKind(k) for k in p.kinds])
            if not plan.specs:
                out.no_injection += 1
                continue
            res, err = _classify(target, wl, clean, list(plan.specs))
        except BfpError as e:
            raise type(e)(f"run {r} of point {p.index}: {e}") from e
        out.record(plan.specs, res, err)
    return out


def _exhaustive_specs(manifest: Manifest, kinds, window, rng) -> list[FaultSpec]:
    lo, hi = window
    specs = []
    for site in manifest.sites:
        for k in kinds:
            kind = FaultKind(k)
            cyc = int(rng.integers(lo, hi)) if kind is FaultKind.TRANSIENT else None
            specs.append(FaultSpec(site, kind, cyc))
    return specs


def _run_exhaustive_chunk(cfg: CampaignConfig, p: Point, idx: range) -> PointResult:
    target = _point_target(cfg, p)
    manifest = _filter_manifest(target.manifest(), cfg.units)
    rng = _effective_rng(cfg.seed, p.index, 0)
    wl = target.workload(rng)
    specs = _exhaustive_specs(manifest, p.kinds, target.window(), rng)
    clean = target.execute(wl, [])
    out = PointResult(p, manifest_bits=len(manifest))
    if idx.start == 0:
        out.runs = 1
        out.false_positive_runs = int(bool(clean.events))
        out.false_positive_events = len(clean.events)
    for i in idx:
        try:
            res, err = _classify(target, wl, clean, [specs[i]])
        except BfpError as e:
            raise type(e)(f"injection {i} of point {p.index}: {e}") from e
        out.record([specs[i]], res, err)
    return out


def enumerate_points(cfg: CampaignConfig) -> list[Point]:
    kind_groups = [(k,) for k in cfg.kinds] if cfg.separate_kinds else [tuple(cfg.kinds)]
    rates = cfg.rates if cfg.mode == "rate" else (None,)
    dataflows = cfg.dataflows if cfg.target in ("array", "system") else ("-",)
    points, i = [], 0
    for prot in cfg.protections:
        for df in dataflows:
            for size in cfg.sizes:
                for rate in rates:
                    for kinds in kind_groups:
                        points.append(Point(i, cfg.target, df if df != "-" else "WS", size,
                                            prot, rate, kinds))
                        i += 1
    return points


def _tasks(cfg: CampaignConfig, points: list[Point], chunk: int):
    for p in points:
        if cfg.mode == "rate":
            n = cfg.runs_per_point
            fn = _run_rate_chunk
        else:
            t = _point_target(cfg, p)
            n = len(_filter_manifest(t.manifest(), cfg.units)) * len(p.kinds)
            fn = _run_exhaustive_chunk
        for lo in range(0, max(n, 1), chunk):
            yield fn, p, range(lo, min(lo + chunk, n))


def _call(task_and_cfg):
    cfg, (fn, p, r) = task_and_cfg
    return fn(cfg, p, r)


@dataclass
class CampaignReport:
    config: CampaignConfig
    points: list[PointResult]

    def rows(self) -> list[dict]:
        return [p.summary() for p in self.points]

    def check_reconciliation(self):
        for row in self.rows():
            if row["covered"] + row["uncovered"] != row["injected"] or \
                    row["effective"] + row["masked"] != row["injected"]:
                raise ValueError(f"report counters do not reconcile: {row}")

    def to_json(self) -> str:
        doc = {
            "schema": "bfpnpu-report v1",
            "rate_basis": "faults per modeled storage bit per run",
            "config": self.config.to_dict(),
            "points": [],
        }
        for p in self.points:
            entry = p.summary()
            entry["by_unit"] = {k: v.as_dict() for k, v in sorted(p.by_unit.items())}
            entry["by_segment"] = {k: v.as_dict() for k, v in sorted(p.by_segment.items())}
            entry["escapes"] = p.escapes
            doc["points"].append(entry)
        return json.dumps(doc, indent=2, sort_keys=False, default=_json_default) + "\n"

    def to_csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        if not rows:
            return ""
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_cell(v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, out_dir: str | Path | None = None, stem: str = "campaign") -> list[Path]:
        d = Path(out_dir) if out_dir is not None else self.config.out_path
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / f"{stem}.csv", d / f"{stem}.json"]
        paths[0].write_text(self.to_csv())
        paths[1].write_text(self.to_json())
        return paths


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def run_campaign(cfg: CampaignConfig, chunk: int = 256) -> CampaignReport:
    """Execute every campaign point; deterministic for a given config."""
    points = enumerate_points(cfg)
    tasks = list(_tasks(cfg, points, chunk))
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            partials = list(ex.map(_call, [(cfg, t) for t in tasks]))
    else:
        partials = [fn(cfg, p, r) for fn, p, r in tasks]
    merged: dict[int, PointResult] = {}
    for part in partials:
        i = part.point.index
        merged[i] = merged[i].merge(part) if i in merged else part
    report = CampaignReport(cfg, [merged[p.index] for p in points])
    report.check_reconciliation()
    return report


__all__ = ["CampaignReport", "PointResult", "Point", "run_campaign", "enumerate_points",
           "relative_error", "q_segment", "Q_SEGMENTS"]
