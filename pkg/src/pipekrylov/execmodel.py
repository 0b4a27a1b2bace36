"""Launch/transfer accounting and a device cost model.

Solvers in this library run on the CPU, but every kernel-sized operation
reports what it would cost on an accelerator: one kernel launch per fused
operation, one host-device transfer per reduction result that the host
consumes.  An :class:`ExecutionTrace` collects those counts per phase, and
:func:`predict_iteration_time` turns a phase record into seconds under a
:class:`DeviceProfile`.

The cost model is additive and deliberately pessimistic: launches, transfers
and byte movement are summed with no overlap of any kind.  It is meant for
comparing solver formulations against each other in the launch-latency
regime, not for predicting absolute wall-clock times of real hardware.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import TraceUsageError

__all__ = [
    "DeviceProfile",
    "LatencyBarrier",
    "PhaseRecord",
    "ExecutionTrace",
    "ExecutionContext",
    "latency_barrier",
    "predict_iteration_time",
    "speedup_curve",
]

SETUP = "setup"
ITERATION = "iteration"
FINISH = "finish"


@dataclass(frozen=True)
class DeviceProfile:
    """Latency and bandwidth figures for the modeled device.

    Defaults describe a generic discrete accelerator: 8 microseconds to get
    a kernel or a transfer going, 200 GB/s of on-device memory bandwidth and
    8 GB/s across the host link.
    """

    launch_latency: float = 8e-6
    transfer_latency: float = 8e-6
    bandwidth: float = 200e9
    transfer_bandwidth: float = 8e9

    def __post_init__(self):
        for name in ("launch_latency", "transfer_latency", "bandwidth", "transfer_bandwidth"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a finite positive number, got {value!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "DeviceProfile":
        """Load a profile from a ``key = value`` text file.

        Blank lines and ``#`` comments are ignored; keys not matching a
        profile field are rejected.
        """
        values: dict[str, float] = {}
        fields = {"launch_latency", "transfer_latency", "bandwidth", "transfer_bandwidth"}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected 'key = value', got {raw!r}")
            key, _, text = line.partition("=")
            key = key.strip()
            if key not in fields:
                raise ValueError(
                    f"{path}: line {lineno}: unknown profile key {key!r} "
                    f"(expected one of: {', '.join(sorted(fields))})"
                )
            try:
                values[key] = float(text.strip())
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: bad number {text.strip()!r}") from None
        return cls(**values)


@dataclass(frozen=True)
class LatencyBarrier:
    """Data volume whose streaming time equals one launch latency."""

    nbytes: float
    real64_count: float


def latency_barrier(profile: DeviceProfile | None = None) -> LatencyBarrier:
    """Bytes (and float64 values) movable in the time one launch costs.

    Kernels touching less data than this are dominated by launch latency
    rather than bandwidth, which is the regime where fusing kernels pays off.
    """
    profile = profile or DeviceProfile()
    nbytes = profile.launch_latency * profile.bandwidth
    return LatencyBarrier(nbytes=nbytes, real64_count=nbytes / 8)


@dataclass
class PhaseRecord:
    """Counters for one phase (setup, a single iteration, or finish)."""

    label: str
    launches: int = 0
    transfers: int = 0
    bytes_kernel: int = 0
    bytes_transfer: int = 0


class ExecutionTrace:
    """Append-only log of launches and transfers, grouped into phases.

    Solvers open one ``setup`` phase, one ``iteration`` phase per iteration
    and a ``finish`` phase for end-of-run work; every traced operation must
    fall inside an open phase.
    """

    def __init__(self):
        self.phases: list[PhaseRecord] = []
        self._current: PhaseRecord | None = None

    def begin_phase(self, label: str) -> PhaseRecord:
        if self._current is not None:
            raise TraceUsageError(f"phase {self._current.label!r} is still open")
        record = PhaseRecord(label=label)
        self.phases.append(record)
        self._current = record
        return record

    def end_phase(self) -> None:
        if self._current is None:
            raise TraceUsageError("no phase is open")
        self._current = None

    @contextmanager
    def phase(self, label: str):
        self.begin_phase(label)
        try:
            yield
        finally:
            self.end_phase()

    def record_launch(self, nbytes: int = 0) -> None:
        if self._current is None:
            raise TraceUsageError("record_launch outside an open phase")
        self._current.launches += 1
        self._current.bytes_kernel += int(nbytes)

    def record_transfer(self, nbytes: int = 0) -> None:
        if self._current is None:
            raise TraceUsageError("record_transfer outside an open phase")
        self._current.transfers += 1
        self._current.bytes_transfer += int(nbytes)

    @property
    def iterations(self) -> list[PhaseRecord]:
        """Records of the per-iteration phases only, in order."""
        return [p for p in self.phases if p.label == ITERATION]

    def totals(self) -> PhaseRecord:
        total = PhaseRecord(label="total")
        for p in self.phases:
            total.launches += p.launches
            total.transfers += p.transfers
            total.bytes_kernel += p.bytes_kernel
            total.bytes_transfer += p.bytes_transfer
        return total

    def steady_state(self) -> PhaseRecord:
        """The record all iterations settle into (second iteration onward)."""
        iterations = self.iterations
        if not iterations:
            raise ValueError("trace has no iteration phases")
        return iterations[1] if len(iterations) > 1 else iterations[0]


@dataclass
class ExecutionContext:
    """Workgroup geometry plus an optional trace to record against.

    ``n_groups`` is the number of workgroups every reduction-style kernel
    uses for its first stage; ``group_size`` (a power of two) is the number
    of lanes per workgroup.  Both are fixed for the lifetime of the context
    so that reduction order, and therefore every rounded result, is a pure
    function of the input.
    """

    n_groups: int = 128
    group_size: int = 256
    trace: ExecutionTrace | None = None

    def __post_init__(self):
        if self.n_groups < 1:
            raise ValueError(f"n_groups must be >= 1, got {self.n_groups}")
        if self.group_size < 1 or (self.group_size & (self.group_size - 1)) != 0:
            raise ValueError(f"group_size must be a positive power of two, got {self.group_size}")

    def record_launch(self, nbytes: int = 0) -> None:
        if self.trace is not None:
            self.trace.record_launch(nbytes)

    def record_transfer(self, nbytes: int = 0) -> None:
        if self.trace is not None:
            self.trace.record_transfer(nbytes)

    def with_trace(self, trace: ExecutionTrace) -> "ExecutionContext":
        """A copy of this context recording into ``trace``."""
        return replace(self, trace=trace)


# Shared geometry for calls that do not pass a context.  It never carries a
# trace, so using it concurrently is safe.
DEFAULT_CONTEXT = ExecutionContext()


def predict_iteration_time(record: PhaseRecord, profile: DeviceProfile | None = None) -> float:
    """Modeled seconds for one phase record under ``profile``.

    Sums launch latencies, transfer latencies and streaming time for kernel
    and transfer bytes; no term overlaps any other.
    """
    profile = profile or DeviceProfile()
    return (
        record.launches * profile.launch_latency
        + record.transfers * profile.transfer_latency
        + record.bytes_kernel / profile.bandwidth
        + record.bytes_transfer / profile.transfer_bandwidth
    )


def speedup_curve(
    solver_pair: tuple[Callable, Callable],
    systems: Iterable[tuple[str, object, object]],
    profile: DeviceProfile | None = None,
    iterations: int = 30,
    context: ExecutionContext | None = None,
) -> list[dict]:
    """Predicted per-iteration times of two solver variants across systems.

    ``solver_pair`` is ``(classical, pipelined)``; each entry is a solver
    driver accepting ``(A, b, config=..., context=...)``.  ``systems`` yields
    ``(label, A, b)`` triples.  Every system is run for a fixed number of
    iterations, the steady-state iteration record is priced under
    ``profile`` and the ratio classical/pipelined is reported.
    """
    from .solvers import SolverConfig

    profile = profile or DeviceProfile()
    base = context or DEFAULT_CONTEXT
    config = SolverConfig(fixed_iterations=iterations, max_iterations=max(iterations, 1))
    classical, pipelined = solver_pair
    rows = []
    for label, A, b in systems:
        times = []
        for solver in (classical, pipelined):
            result = solver(A, b, config=config, context=base)
            times.append(predict_iteration_time(result.trace.steady_state(), profile))
        rows.append(
            {
                "label": label,
                "size": A.n_rows,
                "classical_s": times[0],
                "pipelined_s": times[1],
                "ratio": times[0] / times[1],
            }
        )
    return rows
