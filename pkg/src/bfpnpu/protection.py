"""Detection events, ABFT checker state, the FP-domain baseline check and
post-hoc classification of injections.

The ABFT checkers only own their registers and comparison logic; the
systolic array drives them from its clock so their timing stays aligned with
the dataflow they verify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .fault_injection import FaultSpec, RegisterFile


class Checker(str, Enum):
    ABFT_WS = "abft_ws"
    ABFT_OS = "abft_os"
    EU_REDUNDANCY = "eu_redundancy"
    CONVERTER_DMR = "converter_dmr"
    FP_E2E_BASELINE = "fp_e2e_baseline"
    FULL_DMR = "full_dmr"


FIXED_POINT_CHECKERS = (Checker.ABFT_WS, Checker.ABFT_OS, Checker.EU_REDUNDANCY,
                        Checker.CONVERTER_DMR)


class Classification(str, Enum):
    TRUE_DETECT = "true_detect"
    FALSE_POSITIVE = "false_positive"


@dataclass(frozen=True)
class DetectionEvent:
    checker: Checker
    cycle: int
    hint: str = ""
    classification: Classification | None = None

    def __post_init__(self):
        object.__setattr__(self, "checker", Checker(self.checker))
        if self.classification is not None:
            object.__setattr__(self, "classification", Classification(self.classification))

    def classified(self, c: Classification) -> "DetectionEvent":
        return DetectionEvent(self.checker, self.cycle, self.hint, c)

    def to_record(self) -> str:
        cls = self.classification.value if self.classification else "-"
        return f"{self.checker.value} {self.cycle} {self.hint or '-'} {cls}"

    @classmethod
    def from_record(cls, line: str) -> "DetectionEvent":
        checker, cycle, hint, c = line.split()
        return cls(Checker(checker), int(cycle), "" if hint == "-" else hint,
                   None if c == "-" else Classification(c))


def clog2(n: int) -> int:
    return max(0, math.ceil(math.log2(n))) if n > 1 else 0


# -- ABFT checker state --------------------------------------------------------


class AbftWsChecker:
    """Ingress adder column, bottom column accumulators and comparators.

    The ingress registers integrate each streamed column of A; their totals
    form the check-vector that follows the data rows through the array. The
    bottom accumulators sum drained results per column; ``check_out`` latches
    the array's product of the check-vector so both sides meet at the
    comparator one cycle later.
    """

    def __init__(self, rows: int, cols: int, in_width: int, check_width: int,
                 ignore_low_bits: int = 0):
        self.rows, self.cols = rows, cols
        self.check_width = check_width
        self.ingress = RegisterFile("ingress", "sum", [f"k{r}" for r in range(rows)], in_width)
        self.col_sum = RegisterFile("checker", "col_sum", [f"c{j}" for j in range(cols)],
                                    check_width)
        self.check_out = RegisterFile("checker", "check_out", [f"c{j}" for j in range(cols)],
                                      check_width)
        self.tolerance = np.int64(1) << ignore_low_bits

    @property
    def files(self) -> list[RegisterFile]:
        return [self.ingress, self.col_sum, self.check_out]

    def compare(self, cycle: int, cols: np.ndarray) -> list[DetectionEvent]:
        ref = self.col_sum.read(cycle)[cols]
        got = self.check_out.read(cycle)[cols]
        bad = np.abs(ref - got) >= self.tolerance
        return [DetectionEvent(Checker.ABFT_WS, cycle, f"col{int(j)}") for j in cols[bad]]


class AbftOsChecker:
    """Left-edge accumulation chain plus a bottom row of check-PEs.

    The chain depth equals the array height, so column sums of A reach the
    check-PE row in the same cycle as the matching B elements leave the last
    PE row.
    """

    def __init__(self, rows: int, cols: int, chain_width: int, check_width: int,
                 ignore_low_bits: int = 0):
        self.rows, self.cols = rows, cols
        self.check_width = check_width
        self.chain = RegisterFile("chain", "sum", [f"r{i}" for i in range(rows)], chain_width)
        self.h_pass = RegisterFile("check_pe", "h_pass", [f"c{j}" for j in range(cols)],
                                   chain_width)
        self.acc = RegisterFile("check_pe", "acc", [f"c{j}" for j in range(cols)], check_width)
        self.drain_sum = RegisterFile("check_pe", "drain_sum", [f"c{j}" for j in range(cols)],
                                      check_width)
        self.tolerance = np.int64(1) << ignore_low_bits

    @property
    def files(self) -> list[RegisterFile]:
        return [self.chain, self.h_pass, self.acc, self.drain_sum]

    def compare(self, cycle: int) -> list[DetectionEvent]:
        ref = self.drain_sum.read(cycle)
        got = self.acc.read(cycle)
        bad = np.nonzero(np.abs(ref - got) >= self.tolerance)[0]
        return [DetectionEvent(Checker.ABFT_OS, cycle, f"col{int(j)}") for j in bad]


# -- FP-domain end-to-end baseline ------------------------------------------------


BASELINE_SCALES = ("max_abs", "abs_sum", "checksum")


def fp_e2e_baseline_check(fp_outputs, fp_checksum_row, eps: float, cycle: int = 0,
                          scale: str = "max_abs") -> list[DetectionEvent]:
    """Conventional ABFT on reconstructed FP outputs.

    Column ``j`` is flagged when ``|sum_i C[i, j] - checksum[j]|`` exceeds
    ``eps`` times a per-column reference magnitude: the largest ``|C[i, j]|``
    (``max_abs``, an element-level rounding scale), ``sum_i |C[i, j]|``
    (``abs_sum``) or ``|checksum[j]|`` (``checksum``).
    """
    c = np.asarray(fp_outputs, dtype=np.float64)
    ref = np.asarray(fp_checksum_row, dtype=np.float64)
    if not math.isfinite(eps):
        return []
    if scale == "max_abs":
        mag = np.abs(c).max(axis=0)
    elif scale == "abs_sum":
        mag = np.abs(c).sum(axis=0)
    elif scale == "checksum":
        mag = np.abs(ref)
    else:
        raise ValueError(f"scale must be one of {BASELINE_SCALES}")
    with np.errstate(invalid="ignore"):
        delta = np.abs(c.sum(axis=0) - ref)
        bad = np.nonzero(~(delta <= eps * mag))[0]
    return [DetectionEvent(Checker.FP_E2E_BASELINE, cycle, f"col{int(j)}") for j in bad]


# -- classification -----------------------------------------------------------------


class Outcome(str, Enum):
    DETECTED = "detected"                # event fired, outputs differ
    SILENT = "silent"                    # no event, outputs differ
    MASKED = "masked"                    # no event, outputs identical
    CHECKER_ONLY = "checker_only"        # event fired, outputs identical


@dataclass
class InjectionResult:
    outcome: Outcome
    first_event_cycle: int | None
    latency: int | None
    events: list[DetectionEvent]

    @property
    def covered(self) -> bool:
        return self.outcome in (Outcome.DETECTED, Outcome.CHECKER_ONLY)

    @property
    def effective(self) -> bool:
        return self.outcome in (Outcome.DETECTED, Outcome.SILENT)


def outputs_differ(clean, faulty) -> bool:
    if isinstance(clean, (list, tuple)):
        return len(clean) != len(faulty) or any(outputs_differ(a, b) for a, b in zip(clean, faulty))
    a, b = np.asarray(clean), np.asarray(faulty)
    if a.shape != b.shape:
        return True
    if a.dtype.kind == "f" or b.dtype.kind == "f":
        # bitwise: distinguishes -0.0 and matches NaN with NaN
        return not np.array_equal(a.astype(np.float64).view(np.int64),
                                  b.astype(np.float64).view(np.int64))
    return not np.array_equal(a, b)


def classify_events(clean_outputs, faulty_outputs, events: Sequence[DetectionEvent],
                    specs: Sequence[FaultSpec] = (), run_start: int = 0,
                    clean_events: Iterable[DetectionEvent] = ()) -> InjectionResult:
    """Label one faulty run against its clean twin.

    Events that the clean run also raised (same checker and hint), or any
    event when nothing was injected, are false positives and do not count as
    detection. Latency runs from the earliest transient injection cycle, or
    from ``run_start`` when a permanent fault is present.
    """
    clean_keys = {(e.checker, e.hint) for e in clean_events}
    labeled = []
    for e in events:
        fp = not specs or (e.checker, e.hint) in clean_keys
        labeled.append(e.classified(Classification.FALSE_POSITIVE if fp
                                    else Classification.TRUE_DETECT))
    true = [e for e in labeled if e.classification is Classification.TRUE_DETECT]
    effective = outputs_differ(clean_outputs, faulty_outputs)
    if true:
        outcome = Outcome.DETECTED if effective else Outcome.CHECKER_ONLY
    else:
        outcome = Outcome.SILENT if effective else Outcome.MASKED
    first = min((e.cycle for e in true), default=None)
    latency = None
    if first is not None:
        if any(s.kind.permanent for s in specs):
            origin = run_start
        else:
            origin = min(s.cycle for s in specs)
        latency = first - origin
    return InjectionResult(outcome, first, latency, labeled)


@dataclass
class CoverageRecord:
    """Commutative tally of injection outcomes."""

    counts: dict[str, int] = field(default_factory=lambda: {o.value: 0 for o in Outcome})
    latencies: list[int] = field(default_factory=list)
    first_event_cycles: list[int] = field(default_factory=list)

    def add(self, r: InjectionResult):
        self.counts[r.outcome.value] += 1
        if r.latency is not None:
            self.latencies.append(r.latency)
        if r.first_event_cycle is not None:
            self.first_event_cycles.append(r.first_event_cycle)

    def merge(self, other: "CoverageRecord") -> "CoverageRecord":
        out = CoverageRecord()
        for k in out.counts:
            out.counts[k] = self.counts[k] + other.counts[k]
        out.latencies = sorted(self.latencies + other.latencies)
        out.first_event_cycles = sorted(self.first_event_cycles + other.first_event_cycles)
        return out

    @property
    def injected(self) -> int:
        return sum(self.counts.values())

    @property
    def effective(self) -> int:
        return self.counts["detected"] + self.counts["silent"]

    @property
    def covered(self) -> int:
        return self.counts["detected"] + self.counts["checker_only"]

    @property
    def masked(self) -> int:
        return self.counts["masked"] + self.counts["checker_only"]

    @property
    def coverage_effective(self) -> float | None:
        return self.counts["detected"] / self.effective if self.effective else None

    @property
    def coverage_all(self) -> float | None:
        return self.covered / self.injected if self.injected else None

    def as_dict(self) -> dict:
        return {
            "injected": self.injected,
            "effective": self.effective,
            "masked": self.masked,
            "covered": self.covered,
            "uncovered": self.injected - self.covered,
            **{f"n_{k}": v for k, v in self.counts.items()},
            "coverage_effective": self.coverage_effective,
            "coverage_all": self.coverage_all,
            "latency_max": max(self.latencies) if self.latencies else None,
            "latency_mean": float(np.mean(self.latencies)) if self.latencies else None,
        }
