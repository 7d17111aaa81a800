"""Simulated persistent memory.

An :class:`Arena` is a fixed-size, offset-addressed byte region with explicit
store / flush / fence semantics.  Every store marks 64-byte cache lines dirty,
a flush schedules dirty lines for write-back and a fence makes scheduled
lines part of the durable image.  Counters replace latencies as the metric.

Arena layout::

    [0, root_size)                 application root records
    [root_size, root_size+log)     undo log of the transaction facility
    [heap_start, size-64)          bump-allocated heap
    [size-64, size)                arena header (cursor, tx marker, ...)

The header lives in the last line so a raw image can be reopened without any
side information.
"""

from __future__ import annotations

import csv
import logging
import random
import struct
from bisect import bisect_left
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

from ._core import ArenaCore, CArenaCore

logger = logging.getLogger(__name__)

LINE_SIZE = 64
WC_BLOCK = 256
WORD = 8
LOG_ENTRY_OVERHEAD = 16
DEFAULT_ROOT_SIZE = 256

MAGIC = 0x414E524145524D50  # b"PMREARNA" little-endian
_U64 = struct.Struct("<Q")
_HEADER = struct.Struct("<8Q")
_LOG_ENTRY = struct.Struct("<QQ")

# header word offsets, relative to the header line
H_MAGIC, H_CURSOR, H_TX, H_LOG_USED, H_ROOT, H_LOG_OFF, H_LOG_CAP, H_HEAP = (
    0, 8, 16, 24, 32, 40, 48, 56)


class ArenaError(Exception):
    """Base class for arena errors."""


class ArenaExhausted(ArenaError):
    pass


class OutOfRange(ArenaError):
    pass


class TxError(ArenaError):
    pass


class UnsnapshottedWrite(TxError):
    pass


class CrashPointError(ArenaError):
    pass


class ArenaCorrupt(ArenaError):
    pass


@dataclass(frozen=True, slots=True)
class PRef:
    """A persistent reference: an offset range inside one arena."""

    offset: int
    length: int

    def sub(self, offset: int, length: int) -> "PRef":
        if offset < 0 or length < 0 or offset + length > self.length:
            raise OutOfRange(f"sub-range {offset}+{length} outside {self}")
        return PRef(self.offset + offset, length)


@dataclass
class WriteStats:
    modified_bytes: int = 0
    written_bytes: int = 0
    flushed_lines: int = 0
    fences: int = 0
    allocations: int = 0
    alloc_bytes: int = 0
    lines_read: int = 0
    log_bytes: int = 0
    wc_blocks: int = 0

    @classmethod
    def from_counters(cls, c, line_size=LINE_SIZE) -> "WriteStats":
        modified, flushed, fences, lines_read, wc, allocs, abytes, log = c
        return cls(modified, flushed * line_size, flushed, fences, allocs,
                   abytes, lines_read, log, wc)

    def __add__(self, other: "WriteStats") -> "WriteStats":
        return WriteStats(*(getattr(self, f.name) + getattr(other, f.name)
                            for f in fields(self)))

    def __sub__(self, other: "WriteStats") -> "WriteStats":
        return WriteStats(*(getattr(self, f.name) - getattr(other, f.name)
                            for f in fields(self)))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class CrashPlan:
    """Where and how to crash.

    ``crash_point`` counts recorded events (stores, flushes, fences) since
    :meth:`Arena.begin_trace`; ``None`` crashes at the current instant.
    """

    crash_point: int | None = None
    mode: str = "deterministic"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("deterministic", "adversarial"):
            raise ValueError(f"unknown crash mode {self.mode!r}")


class _Tx:
    __slots__ = ("starts", "ends", "entries")

    def __init__(self):
        # merged, sorted, disjoint [start, end) intervals that may be written
        self.starts: list[int] = []
        self.ends: list[int] = []
        self.entries: list[tuple[int, int]] = []

    def covers(self, a: int, b: int) -> bool:
        i = bisect_left(self.ends, a + 1)
        return i < len(self.starts) and self.starts[i] <= a and b <= self.ends[i]

    def uncovered(self, a: int, b: int) -> list[tuple[int, int]]:
        out = []
        pos = a
        i = bisect_left(self.ends, a + 1)
        while pos < b and i < len(self.starts):
            s, e = self.starts[i], self.ends[i]
            if s >= b:
                break
            if s > pos:
                out.append((pos, s))
            pos = max(pos, e)
            i += 1
        if pos < b:
            out.append((pos, b))
        return out

    def add(self, a: int, b: int):
        starts, ends = self.starts, self.ends
        i = bisect_left(ends, a)
        j = i
        while j < len(starts) and starts[j] <= b:
            a = min(a, starts[j])
            b = max(b, ends[j])
            j += 1
        starts[i:j] = [a]
        ends[i:j] = [b]


class Arena:
    """Offset-addressed simulated persistent region.

    ``persistent=False`` yields a volatile (DRAM) arena: flushes and fences
    are no-ops and its contents do not survive :meth:`crash`.
    """

    def __init__(self, size: int, *, line_size: int = LINE_SIZE,
                 wc_block: int = WC_BLOCK, log_size: int | None = None,
                 root_size: int = DEFAULT_ROOT_SIZE, persistent: bool = True,
                 log_overhead: int = LOG_ENTRY_OVERHEAD, core_cls=None,
                 _image: bytes | None = None):
        if size % line_size:
            size += line_size - size % line_size
        if log_size is None:
            log_size = min(max(size // 8, 16 * 1024), 1 << 20)
        log_size = -(-log_size // line_size) * line_size
        root_size = -(-root_size // line_size) * line_size
        self.size = size
        self.line_size = line_size
        self.wc_block = wc_block
        self.persistent = persistent
        self.log_overhead = log_overhead
        self._core_cls = core_cls or ArenaCore
        self._core = self._core_cls(size, line_size, wc_block, persistent)
        self._hdr = size - line_size
        self._tx: _Tx | None = None
        self._trace: list | None = None
        self._trace_start = None
        self._trace_marks: list[tuple[int, str]] = []
        self._allocations = 0
        self._alloc_bytes = 0
        self._log_bytes = 0
        if _image is not None:
            self._core.poke(0, _image)
            self._read_header()
        else:
            self.root_size = root_size
            self.log_off = root_size
            self.log_cap = log_size
            self.heap_start = root_size + log_size
            if self.heap_start >= self._hdr:
                raise ArenaExhausted("arena too small for root and log regions")
            self._cursor = self.heap_start
            self._core.poke(self._hdr, _HEADER.pack(
                MAGIC, self._cursor, 0, 0, self.root_size, self.log_off,
                self.log_cap, self.heap_start))

    # -- construction helpers ---------------------------------------------

    @property
    def backend(self) -> str:
        return "cython" if self.kernel_core is not None else "python"

    @property
    def kernel_core(self):
        """The compiled core when node kernels may run on it, else None."""
        if CArenaCore is not None and isinstance(self._core, CArenaCore):
            return self._core
        return None

    @property
    def plain(self) -> bool:
        """True when no transaction or trace needs per-store bookkeeping."""
        return self._tx is None and self._trace is None

    @property
    def root(self) -> PRef:
        return PRef(0, self.root_size)

    @property
    def whole(self) -> PRef:
        return PRef(0, self.size)

    def _read_header(self):
        (magic, cursor, _tx, _used, root, log_off, log_cap,
         heap) = _HEADER.unpack(self._core.peek(self._hdr, _HEADER.size))
        if magic != MAGIC:
            raise ArenaCorrupt("arena header magic mismatch")
        if not (0 < root <= log_off and log_off + log_cap <= heap <= cursor <= self._hdr):
            raise ArenaCorrupt("arena header fields out of range")
        self.root_size, self.log_off, self.log_cap = root, log_off, log_cap
        self.heap_start = heap
        self._cursor = cursor

    @classmethod
    def from_image(cls, image: bytes, **kw) -> "Arena":
        """Reopen a raw durable image and run recovery."""
        arena = cls(len(image), _image=bytes(image), **kw)
        arena.recover()
        arena.reset_stats()
        return arena

    @classmethod
    def load_image(cls, path, **kw) -> "Arena":
        return cls.from_image(Path(path).read_bytes(), **kw)

    def dump_image(self, path):
        """Write the durable image (raw bytes, no header) to ``path``."""
        Path(path).write_bytes(bytes(self._core.durable))

    def durable_image(self) -> bytes:
        return bytes(self._core.durable)

    def image(self) -> bytes:
        """The volatile (CPU-visible) image."""
        return bytes(self._core.data)

    # -- instrumented access -----------------------------------------------

    def _check(self, ref: PRef, offset: int, n: int) -> int:
        if offset < 0 or n < 0 or offset + n > ref.length:
            raise OutOfRange(f"[{offset}, {offset + n}) outside {ref}")
        a = ref.offset + offset
        if a + n > self.size:
            raise OutOfRange(f"{ref} outside arena of {self.size} bytes")
        return a

    def store(self, ref: PRef, offset: int, data) -> None:
        n = len(data)
        a = self._check(ref, offset, n)
        if self._tx is not None and not self._tx.covers(a, a + n):
            raise UnsnapshottedWrite(
                f"store to [{a}, {a + n}) inside a transaction without snapshot")
        if self._trace is not None:
            self._trace.append(("store", a, n, bytes(data)))
        self._core.store(a, data)

    def flush(self, ref: PRef, offset: int, n: int) -> None:
        a = self._check(ref, offset, n)
        if self._trace is not None and self.persistent:
            self._trace.append(("flush", a, n, None))
        self._core.flush(a, n)

    def fence(self) -> None:
        if self._trace is not None and self.persistent:
            self._trace.append(("fence", 0, 0, None))
        self._core.fence()

    def persist(self, ref: PRef, offset: int, n: int) -> None:
        self.flush(ref, offset, n)
        self.fence()

    def load(self, ref: PRef, offset: int, n: int) -> bytes:
        a = self._check(ref, offset, n)
        return self._core.load(a, n)

    def peek(self, ref: PRef, offset: int, n: int) -> bytes:
        """Read without touching any counter."""
        a = self._check(ref, offset, n)
        return self._core.peek(a, n)

    def poke(self, ref: PRef, offset: int, data) -> None:
        """Write straight into the durable image, bypassing instrumentation.

        Meant for benchmark setup and restores; never used by measured code.
        """
        a = self._check(ref, offset, len(data))
        self._core.poke(a, data)

    # internal writes (header, log) skip the transaction discipline check
    def _istore(self, a: int, data) -> None:
        if self._trace is not None:
            self._trace.append(("store", a, len(data), bytes(data)))
        self._core.store(a, data)

    def _iflush(self, a: int, n: int) -> None:
        if self._trace is not None and self.persistent:
            self._trace.append(("flush", a, n, None))
        self._core.flush(a, n)

    def _hword(self, off: int) -> int:
        return _U64.unpack(self._core.peek(self._hdr + off, 8))[0]

    # -- allocation --------------------------------------------------------

    def allocate(self, size: int, align: int = LINE_SIZE) -> PRef:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        if align <= 0 or align & (align - 1) or align > 4096:
            raise ValueError("alignment must be a power of two <= 4096")
        start = (self._cursor + align - 1) & ~(align - 1)
        end = start + size
        if end > self._hdr:
            raise ArenaExhausted(
                f"cannot allocate {size} bytes: {self._hdr - start} remaining")
        a = self._hdr + H_CURSOR
        if self._tx is not None:
            self._snapshot_abs(a, 8)
            self._tx.add(start, end)
            self._istore(a, _U64.pack(end))
        else:
            self._istore(a, _U64.pack(end))
            self._iflush(a, 8)
            self.fence()
        self._cursor = end
        self._allocations += 1
        self._alloc_bytes += size
        return PRef(start, size)

    @property
    def cursor(self) -> int:
        return self._cursor

    @property
    def remaining(self) -> int:
        return self._hdr - self._cursor

    def release_to(self, cursor: int) -> None:
        """Roll the allocation cursor back (benchmark resets only)."""
        if not self.heap_start <= cursor <= self._cursor:
            raise ValueError("cursor outside allocated heap")
        self._cursor = cursor
        self._core.poke(self._hdr + H_CURSOR, _U64.pack(cursor))

    # -- transactions ------------------------------------------------------

    @property
    def in_tx(self) -> bool:
        return self._tx is not None

    def tx_begin(self) -> None:
        if self._tx is not None:
            raise TxError("nested transactions are not supported")
        a = self._hdr + H_TX
        self._istore(a, _LOG_ENTRY.pack(1, 0))
        self._iflush(a, 16)
        self.fence()
        self._tx = _Tx()

    def tx_snapshot(self, ref: PRef, offset: int, n: int) -> None:
        if self._tx is None:
            raise TxError("tx_snapshot outside a transaction")
        a = self._check(ref, offset, n)
        self._snapshot_abs(a, n)

    def _snapshot_abs(self, a: int, n: int) -> None:
        tx = self._tx
        for s, e in tx.uncovered(a, a + n):
            used = self._hword(H_LOG_USED)
            entry = _LOG_ENTRY.pack(s, e - s) + self._core.peek(s, e - s)
            if used + len(entry) > self.log_cap:
                raise TxError("undo log capacity exceeded")
            la = self.log_off + used
            self._istore(la, entry)
            self._iflush(la, len(entry))
            self.fence()
            ua = self._hdr + H_LOG_USED
            self._istore(ua, _U64.pack(used + len(entry)))
            self._iflush(ua, 8)
            self.fence()
            tx.add(s, e)
            tx.entries.append((s, e - s))
            self._log_bytes += (e - s) + self.log_overhead

    def tx_commit(self) -> None:
        tx = self._tx
        if tx is None:
            raise TxError("commit without an active transaction")
        for s, e in zip(tx.starts, tx.ends):
            self._iflush(s, e - s)
        self.fence()
        self._clear_tx_marker()
        self._tx = None
        if self._trace is not None:
            self._trace_marks.append((len(self._trace), "tx_commit"))

    def tx_abort(self) -> None:
        if self._tx is None:
            raise TxError("abort without an active transaction")
        self._tx = None
        self._rollback()

    @contextmanager
    def transaction(self):
        self.tx_begin()
        try:
            yield self
        except BaseException:
            if self._tx is not None:
                self.tx_abort()
            raise
        else:
            self.tx_commit()

    def _clear_tx_marker(self):
        a = self._hdr + H_TX
        self._istore(a, _LOG_ENTRY.pack(0, 0))
        self._iflush(a, 16)
        self.fence()

    def _read_log(self) -> list[tuple[int, bytes]]:
        used = self._hword(H_LOG_USED)
        if used > self.log_cap:
            raise ArenaCorrupt("undo log length out of range")
        entries = []
        pos = 0
        while pos < used:
            off, n = _LOG_ENTRY.unpack(self._core.peek(self.log_off + pos, 16))
            if off + n > self.size or pos + 16 + n > used:
                raise ArenaCorrupt("undo log entry out of range")
            entries.append((off, self._core.peek(self.log_off + pos + 16, n)))
            pos += 16 + n
        return entries

    def _rollback(self) -> None:
        entries = self._read_log()
        for off, pre in reversed(entries):
            self._istore(off, pre)
            self._iflush(off, len(pre))
        self.fence()
        self._clear_tx_marker()
        self._cursor = self._hword(H_CURSOR)

    def recover(self) -> bool:
        """Roll back an interrupted transaction; True if one was found."""
        self._read_header()
        self._tx = None
        if self._hword(H_TX):
            logger.debug("rolling back interrupted transaction")
            self._rollback()
            return True
        return False

    # -- statistics --------------------------------------------------------

    def counters(self) -> tuple:
        return self._core.counters() + (self._allocations, self._alloc_bytes,
                                        self._log_bytes)

    def stats(self) -> WriteStats:
        return WriteStats.from_counters(self.counters(), self.line_size)

    def reset_stats(self) -> WriteStats:
        s = self.stats()
        self._core.reset_counters()
        self._allocations = self._alloc_bytes = self._log_bytes = 0
        return s

    def line_state(self, line: int) -> int:
        return self._core.line_state(line)

    # -- tracing and crashes -----------------------------------------------

    def begin_trace(self) -> None:
        """Start recording stores, flushes and fences for crash injection."""
        self._trace = []
        self._trace_marks = []
        self._trace_start = self._core.get_state()

    def end_trace(self) -> list:
        events, self._trace = self._trace or [], None
        return events

    @property
    def events(self) -> list:
        return list(self._trace or [])

    @property
    def trace_marks(self) -> list[tuple[int, str]]:
        return list(self._trace_marks)

    @property
    def trace_start_image(self) -> tuple[bytes, bytes]:
        """(volatile, durable) images at :meth:`begin_trace`."""
        if self._trace_start is None:
            raise CrashPointError("no trace recorded")
        return self._trace_start[0], self._trace_start[1]

    @property
    def trace_start_lines(self) -> tuple[list[int], dict[int, bytes]]:
        """(unclean lines, pending flush snapshots) at :meth:`begin_trace`."""
        if self._trace_start is None:
            raise CrashPointError("no trace recorded")
        _, _, pend, state, _, snaps = self._trace_start
        ls = self.line_size
        unclean = [i for i, st in enumerate(state) if st]
        return unclean, {line: pend[line * ls:(line + 1) * ls] for line in snaps}

    def export_events(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["event_index", "kind", "offset", "length"])
            for i, (kind, off, n, _) in enumerate(self._trace or []):
                w.writerow([i, kind, off, n])

    def _replay(self, crash_point: int):
        events = self._trace if self._trace is not None else []
        if self._trace_start is None:
            raise CrashPointError("crash_point given but no trace was recorded")
        if crash_point < 0 or crash_point > len(events):
            raise CrashPointError(
                f"crash point {crash_point} outside [0, {len(events)}]")
        core = self._core_cls(self.size, self.line_size, self.wc_block,
                              self.persistent)
        core.set_state(self._trace_start)
        for kind, off, n, payload in events[:crash_point]:
            if kind == "store":
                core.store(off, payload)
            elif kind == "flush":
                core.flush(off, n)
            else:
                core.fence()
        return core

    def crash_image(self, plan: CrashPlan | None = None) -> bytes:
        """The bytes that would survive a crash described by ``plan``."""
        plan = plan or CrashPlan()
        core = self._core if plan.crash_point is None else self._replay(plan.crash_point)
        image = bytearray(core.durable)
        if plan.mode == "adversarial":
            rng = random.Random(plan.seed)
            data = core.data
            ls = self.line_size
            for line in core.unclean_lines():
                for w in range(line * ls, (line + 1) * ls, WORD):
                    if rng.random() < 0.5:
                        image[w:w + WORD] = data[w:w + WORD]
        return bytes(image)

    def crash(self, plan: CrashPlan | None = None) -> "Arena":
        """Simulate power loss and return the recovered arena.

        Volatile arenas lose everything: a fresh, empty arena of the same
        geometry is returned.
        """
        if not self.persistent:
            return Arena(self.size, line_size=self.line_size,
                         wc_block=self.wc_block, log_size=self.log_cap,
                         root_size=self.root_size, persistent=False,
                         core_cls=self._core_cls)
        image = self.crash_image(plan)
        return Arena.from_image(image, line_size=self.line_size,
                                wc_block=self.wc_block,
                                log_overhead=self.log_overhead,
                                core_cls=self._core_cls)

    def __repr__(self):
        return (f"Arena(size={self.size}, persistent={self.persistent}, "
                f"cursor={self._cursor}, backend={self.backend})")
