"""Exponent-unit (EU) array: shared-exponent outer add with time redundancy.

One EU per output column. Each EU holds a B-side exponent register, a latch
for the broadcast row exponent of A, an adder output register and a 1-bit
ring-shift select. Rows are streamed twice: in pass 1 adder ``j`` produces
``e_a[i] + e_b[j]``; between passes the B registers rotate one position
around the ring, so in pass 2 adder ``j`` produces ``e_a[i] + e_b[j+1]`` and
is compared against what adder ``j+1`` produced in pass 1.

Local timeline for ``M`` rows (cycle 0 loads the B registers):

* row ``i`` is broadcast at cycle ``1 + i`` (pass 1) and ``M + 1 + i`` (pass 2)
* pass-1 results are captured at ``3 + i``; pass-2 compares happen at
  ``M + 3 + i``
* the ring rotates on the edge of cycle ``M + 1``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ExponentOverflow
from .fault_injection import FaultSpec, Manifest, RegisterBank, RegisterFile
from .protection import Checker, DetectionEvent

DEFAULT_EXP_WIDTH = 10


@dataclass(frozen=True)
class ExponentVectors:
    e_a: tuple[int, ...]
    e_b: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "e_a", tuple(int(x) for x in self.e_a))
        object.__setattr__(self, "e_b", tuple(int(x) for x in self.e_b))
        if not self.e_a or not self.e_b:
            raise ValueError("exponent vectors must be nonempty")


def _range(width: int) -> tuple[int, int]:
    return -(1 << (width - 1)), (1 << (width - 1)) - 1


def compute_exponent_matrix(v: ExponentVectors, width: int = DEFAULT_EXP_WIDTH) -> np.ndarray:
    """Outer add ``E_c[i, j] = e_a[i] + e_b[j]`` with a range check."""
    ea = np.asarray(v.e_a, dtype=np.int64)
    eb = np.asarray(v.e_b, dtype=np.int64)
    lo, hi = _range(width)
    for name, vec in (("e_a", ea), ("e_b", eb)):
        if vec.min() < lo or vec.max() > hi:
            raise ExponentOverflow(f"{name} outside {width}-bit exponent range")
    ec = ea[:, None] + eb[None, :]
    if ec.min() < lo or ec.max() > hi:
        raise ExponentOverflow(f"exponent sum outside {width}-bit range")
    return ec


@dataclass
class EuRun:
    exponents: np.ndarray
    events: list[DetectionEvent]
    start_cycle: int
    completion_cycle: int
    checked: bool = True

    @property
    def cycles(self) -> int:
        return self.completion_cycle - self.start_cycle + 1


def eu_cycles(rows: int, redundant: bool = True) -> int:
    return 2 * rows + 3 if redundant else rows + 3


class EuArray:
    def __init__(self, n: int, exp_width: int = DEFAULT_EXP_WIDTH):
        if n < 1:
            raise ValueError("EU array needs at least one unit")
        self.n, self.exp_width = n, exp_width
        ids = [f"eu{j}" for j in range(n)]
        self.bank = RegisterBank()
        self.b_exp = self.bank.add(RegisterFile("eu", "b_exp", ids, exp_width))
        self.a_exp = self.bank.add(RegisterFile("eu", "a_exp", ids, exp_width))
        self.adder_out = self.bank.add(RegisterFile("eu", "adder_out", ids, exp_width))
        self.mux_select = self.bank.add(RegisterFile("eu", "mux_select", ids, 1, signed=False))
        self.cycle = 0

    def manifest(self) -> Manifest:
        return self.bank.manifest()

    def inject(self, specs: Iterable[FaultSpec], cycle_offset: int = 0):
        self.bank.apply(specs, cycle_offset)

    def run_redundant(self, v: ExponentVectors, redundant: bool = True,
                      start_cycle: int | None = None, strict: bool = True) -> EuRun:
        """Compute ``E_c`` and, when ``redundant``, re-evaluate on the rotated ring.

        ``start_cycle`` pins the first cycle on the caller's clock; transient
        fault cycles are interpreted on that same clock. With ``strict`` an
        out-of-range operand or sum raises; otherwise the registers wrap as
        the hardware would (used when upstream faults may corrupt operands).
        """
        n = self.n
        if len(v.e_b) != n:
            raise ValueError(f"EU array has {n} units but e_b has {len(v.e_b)} entries")
        if strict:
            compute_exponent_matrix(v, self.exp_width)
        ea = np.asarray(v.e_a, dtype=np.int64)
        eb = np.asarray(v.e_b, dtype=np.int64)
        m = len(ea)
        total = eu_cycles(m, redundant)
        ec = np.zeros((m, n), np.int64)
        events: list[DetectionEvent] = []
        if start_cycle is not None:
            self.cycle = start_cycle
        start = self.cycle
        self.bank.reset()
        nxt = (np.arange(n) + 1) % n
        for t_local in range(total):
            t = self.cycle
            b = self.b_exp.read(t)
            a = self.a_exp.read(t)
            out = self.adder_out.read(t)
            sel = self.mux_select.read(t)

            i1 = t_local - 3
            i2 = t_local - (m + 3)
            if 0 <= i1 < m:
                ec[i1] = out
            elif redundant and 0 <= i2 < m:
                bad = np.nonzero(out != ec[i2][nxt])[0]
                events.extend(DetectionEvent(Checker.EU_REDUNDANCY, t, f"eu{int(j)}")
                              for j in bad)

            self.adder_out.write(a + b)
            row = t_local - 1 if t_local <= m else t_local - (m + 1)
            if 0 <= row < m and (t_local <= m or redundant):
                self.a_exp.write(np.full(n, ea[row]))
            if t_local == 0:
                self.b_exp.write(eb)
            else:
                self.b_exp.write(np.where(sel == 1, b[nxt], b))
            self.mux_select.write(np.full(n, 1 if (redundant and t_local == m) else 0))
            self.cycle += 1
        return EuRun(ec, events, start, self.cycle - 1, redundant)


def run_redundant(v: ExponentVectors, plan=None, exp_width: int = DEFAULT_EXP_WIDTH,
                  start_cycle: int = 0) -> tuple[np.ndarray, list[DetectionEvent], int]:
    """One-shot helper: fresh EU array, optional plan, ``(E_c, events, completion_cycle)``."""
    eu = EuArray(len(v.e_b), exp_width)
    if plan is not None:
        eu.inject(getattr(plan, "specs", plan))
    run = eu.run_redundant(v, start_cycle=start_cycle)
    return run.exponents, run.events, run.completion_cycle
