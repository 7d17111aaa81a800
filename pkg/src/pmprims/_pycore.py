"""Pure-Python cache-line instrumentation kernel.

Semantics shared with the compiled ``_ccore`` module (the two must agree
bit-for-bit on data images and counters):

* ``store`` copies bytes into the volatile image and marks every touched
  line dirty.
* ``flush`` captures the current bytes of every dirty line in range into a
  pending snapshot and moves the line to flush-pending.  Each dirty-to-pending
  transition counts one flushed line.
* ``fence`` copies every pending snapshot into the durable image.  Lines
  that were re-dirtied after their flush stay dirty.
* ``load`` counts lines not yet read since the last counter reset.
"""

CLEAN = 0
DIRTY = 1
PENDING = 2


class ArenaCore:
    def __init__(self, size, line_size=64, wc_block=256, persistent=True):
        if size <= 0 or size % line_size:
            raise ValueError("size must be a positive multiple of line_size")
        self.size = size
        self.line_size = line_size
        self.wc_block = wc_block
        self.persistent = persistent
        self.nlines = size // line_size
        self.data = bytearray(size)
        self.durable = bytearray(size)
        self._pend = bytearray(size)
        self._state = bytearray(self.nlines)
        self._has_snap = bytearray(self.nlines)
        self._snaps = []
        self._epoch = [0] * self.nlines
        self._cur_epoch = 1
        self.modified_bytes = 0
        self.flushed_lines = 0
        self.fences = 0
        self.lines_read = 0
        self.wc_blocks = 0

    # -- instrumented primitives -------------------------------------------

    def store(self, off, data):
        n = len(data)
        if n == 0:
            return
        self.data[off:off + n] = data
        ls = self.line_size
        st = self._state
        for line in range(off // ls, (off + n - 1) // ls + 1):
            st[line] = DIRTY
        self.modified_bytes += n

    def flush(self, off, n):
        if n <= 0 or not self.persistent:
            return 0
        ls = self.line_size
        st = self._state
        per_block = self.wc_block // ls
        newly = 0
        last_block = -1
        for line in range(off // ls, (off + n - 1) // ls + 1):
            if st[line] != DIRTY:
                continue
            base = line * ls
            self._pend[base:base + ls] = self.data[base:base + ls]
            st[line] = PENDING
            if not self._has_snap[line]:
                self._has_snap[line] = 1
                self._snaps.append(line)
            newly += 1
            block = line // per_block
            if block != last_block:
                self.wc_blocks += 1
                last_block = block
        self.flushed_lines += newly
        return newly

    def fence(self):
        if not self.persistent:
            return
        ls = self.line_size
        st = self._state
        for line in self._snaps:
            base = line * ls
            self.durable[base:base + ls] = self._pend[base:base + ls]
            self._has_snap[line] = 0
            if st[line] == PENDING:
                st[line] = CLEAN
        self._snaps.clear()
        self.fences += 1

    def load(self, off, n):
        if n <= 0:
            return b""
        ls = self.line_size
        ep = self._epoch
        cur = self._cur_epoch
        for line in range(off // ls, (off + n - 1) // ls + 1):
            if ep[line] != cur:
                ep[line] = cur
                self.lines_read += 1
        return bytes(self.data[off:off + n])

    # -- uninstrumented access ---------------------------------------------

    def peek(self, off, n):
        return bytes(self.data[off:off + n])

    def poke(self, off, data):
        """Write straight into both images; the touched lines become clean."""
        n = len(data)
        if n == 0:
            return
        self.data[off:off + n] = data
        self.durable[off:off + n] = data
        ls = self.line_size
        for line in range(off // ls, (off + n - 1) // ls + 1):
            if self._state[line] != CLEAN and self._has_snap[line]:
                # a pending snapshot of a poked line is stale
                base = line * ls
                self._pend[base:base + ls] = self.data[base:base + ls]
            if self._state[line] == DIRTY:
                # bytes outside [off, off+n) may still be unflushed
                continue
            self._state[line] = CLEAN

    # -- bookkeeping -------------------------------------------------------

    def counters(self):
        return (self.modified_bytes, self.flushed_lines, self.fences,
                self.lines_read, self.wc_blocks)

    def reset_counters(self):
        self.modified_bytes = 0
        self.flushed_lines = 0
        self.fences = 0
        self.lines_read = 0
        self.wc_blocks = 0
        self._cur_epoch += 1

    def line_state(self, line):
        return self._state[line]

    def unclean_lines(self):
        st = self._state
        return [i for i in range(self.nlines) if st[i] != CLEAN]

    def pending_snapshots(self):
        ls = self.line_size
        return {line: bytes(self._pend[line * ls:(line + 1) * ls])
                for line in self._snaps}

    def get_state(self):
        return (bytes(self.data), bytes(self.durable), bytes(self._pend),
                bytes(self._state), bytes(self._has_snap), list(self._snaps))

    def set_state(self, state):
        data, durable, pend, lstate, has_snap, snaps = state
        self.data[:] = data
        self.durable[:] = durable
        self._pend[:] = pend
        self._state[:] = lstate
        self._has_snap[:] = has_snap
        self._snaps = list(snaps)
