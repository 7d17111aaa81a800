# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled cache-line instrumentation kernel.

Drop-in replacement for ``pmprims._pycore.ArenaCore``; see that module for
the line-state semantics.  Keep the two in lockstep.
"""

from libc.stdlib cimport malloc, calloc, free
from libc.string cimport memcpy, memmove
from libc.stdint cimport uint64_t
from cpython.bytes cimport PyBytes_FromStringAndSize

DEF CLEAN = 0
DEF DIRTY = 1
DEF PENDING = 2

# layout codes shared with pmprims.nodes
DEF K_SORTED = 0
DEF K_UNSORTED = 1
DEF K_BITMAP = 2
DEF K_INDIRECTION = 3
DEF K_HASHING = 4

# search algorithm codes
DEF A_BINARY = 0
DEF A_LINEAR = 1
DEF A_BITMAP_LINEAR = 2
DEF A_INDIRECT_BINARY = 3
DEF A_HASH_PROBE = 4

DEF FULL = -1
DEF LINE = 64
DEF FP_MULT = 0x9E3779B97F4A7C15


cdef class ArenaCore:
    cdef public Py_ssize_t size
    cdef public Py_ssize_t line_size
    cdef public Py_ssize_t wc_block
    cdef public bint persistent
    cdef public Py_ssize_t nlines
    cdef public bytearray data
    cdef public bytearray durable
    cdef bytearray _pend
    cdef unsigned char* _d
    cdef unsigned char* _dur
    cdef unsigned char* _pd
    cdef unsigned char* _state
    cdef unsigned char* _has_snap
    cdef Py_ssize_t* _snaps
    cdef Py_ssize_t _nsnaps
    cdef unsigned int* _epoch
    cdef unsigned int _cur_epoch
    cdef public long long modified_bytes
    cdef public long long flushed_lines
    cdef public long long fences
    cdef public long long lines_read
    cdef public long long wc_blocks

    def __cinit__(self, Py_ssize_t size, Py_ssize_t line_size=64,
                  Py_ssize_t wc_block=256, bint persistent=True):
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
        self._d = <unsigned char*> self.data
        self._dur = <unsigned char*> self.durable
        self._pd = <unsigned char*> self._pend
        self._state = <unsigned char*> calloc(self.nlines, 1)
        self._has_snap = <unsigned char*> calloc(self.nlines, 1)
        self._snaps = <Py_ssize_t*> malloc(self.nlines * sizeof(Py_ssize_t))
        self._epoch = <unsigned int*> calloc(self.nlines, sizeof(unsigned int))
        if (self._state == NULL or self._has_snap == NULL or self._snaps == NULL
                or self._epoch == NULL):
            raise MemoryError()
        self._nsnaps = 0
        self._cur_epoch = 1

    def __dealloc__(self):
        free(self._state)
        free(self._has_snap)
        free(self._snaps)
        free(self._epoch)

    cdef void cstore(self, Py_ssize_t off, const unsigned char* src, Py_ssize_t n):
        cdef Py_ssize_t line, last
        if n <= 0:
            return
        memcpy(self._d + off, src, n)
        last = (off + n - 1) // self.line_size
        for line in range(off // self.line_size, last + 1):
            self._state[line] = DIRTY
        self.modified_bytes += n

    cdef long long cflush(self, Py_ssize_t off, Py_ssize_t n):
        cdef Py_ssize_t ls = self.line_size
        cdef Py_ssize_t per_block = self.wc_block // ls
        cdef Py_ssize_t line, last, base, block
        cdef Py_ssize_t last_block = -1
        cdef long long newly = 0
        if n <= 0 or not self.persistent:
            return 0
        last = (off + n - 1) // ls
        for line in range(off // ls, last + 1):
            if self._state[line] != DIRTY:
                continue
            base = line * ls
            memcpy(self._pd + base, self._d + base, ls)
            self._state[line] = PENDING
            if not self._has_snap[line]:
                self._has_snap[line] = 1
                self._snaps[self._nsnaps] = line
                self._nsnaps += 1
            newly += 1
            block = line // per_block
            if block != last_block:
                self.wc_blocks += 1
                last_block = block
        self.flushed_lines += newly
        return newly

    cdef void cfence(self):
        cdef Py_ssize_t i, line, base
        cdef Py_ssize_t ls = self.line_size
        if not self.persistent:
            return
        for i in range(self._nsnaps):
            line = self._snaps[i]
            base = line * ls
            memcpy(self._dur + base, self._pd + base, ls)
            self._has_snap[line] = 0
            if self._state[line] == PENDING:
                self._state[line] = CLEAN
        self._nsnaps = 0
        self.fences += 1

    cdef void cread(self, Py_ssize_t off, Py_ssize_t n):
        cdef Py_ssize_t line, last
        cdef unsigned int cur = self._cur_epoch
        if n <= 0:
            return
        last = (off + n - 1) // self.line_size
        for line in range(off // self.line_size, last + 1):
            if self._epoch[line] != cur:
                self._epoch[line] = cur
                self.lines_read += 1

    def store(self, Py_ssize_t off, const unsigned char[:] data):
        if data.shape[0]:
            self.cstore(off, &data[0], data.shape[0])

    def flush(self, Py_ssize_t off, Py_ssize_t n):
        return self.cflush(off, n)

    def fence(self):
        self.cfence()

    def load(self, Py_ssize_t off, Py_ssize_t n):
        if n <= 0:
            return b""
        self.cread(off, n)
        return PyBytes_FromStringAndSize(<char*> (self._d + off), n)

    def peek(self, Py_ssize_t off, Py_ssize_t n):
        return PyBytes_FromStringAndSize(<char*> (self._d + off), n)

    def poke(self, Py_ssize_t off, const unsigned char[:] data):
        cdef Py_ssize_t n = data.shape[0]
        cdef Py_ssize_t line, last, base
        cdef Py_ssize_t ls = self.line_size
        if n == 0:
            return
        memcpy(self._d + off, &data[0], n)
        memcpy(self._dur + off, &data[0], n)
        last = (off + n - 1) // ls
        for line in range(off // ls, last + 1):
            if self._state[line] != CLEAN and self._has_snap[line]:
                base = line * ls
                memcpy(self._pd + base, self._d + base, ls)
            if self._state[line] == DIRTY:
                continue
            self._state[line] = CLEAN

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

    def line_state(self, Py_ssize_t line):
        return self._state[line]

    def unclean_lines(self):
        cdef Py_ssize_t i
        return [i for i in range(self.nlines) if self._state[i] != CLEAN]

    def pending_snapshots(self):
        cdef Py_ssize_t i, line
        cdef Py_ssize_t ls = self.line_size
        out = {}
        for i in range(self._nsnaps):
            line = self._snaps[i]
            out[line] = bytes(self._pend[line * ls:(line + 1) * ls])
        return out

    def get_state(self):
        cdef Py_ssize_t i
        return (bytes(self.data), bytes(self.durable), bytes(self._pend),
                PyBytes_FromStringAndSize(<char*> self._state, self.nlines),
                PyBytes_FromStringAndSize(<char*> self._has_snap, self.nlines),
                [self._snaps[i] for i in range(self._nsnaps)])

    def set_state(self, state):
        cdef Py_ssize_t i
        cdef const unsigned char[:] lstate
        cdef const unsigned char[:] has_snap
        data, durable, pend, lstate, has_snap, snaps = state
        self.data[:] = data
        self.durable[:] = durable
        self._pend[:] = pend
        for i in range(self.nlines):
            self._state[i] = lstate[i]
            self._has_snap[i] = has_snap[i]
        self._nsnaps = len(snaps)
        for i in range(self._nsnaps):
            self._snaps[i] = snaps[i]


cdef inline uint64_t _rd64(const unsigned char* p):
    cdef uint64_t v
    memcpy(&v, p, 8)
    return v


cdef inline int _popcount(uint64_t* w, int nw):
    cdef int i, c = 0
    for i in range(nw):
        c += __builtin_popcountll(w[i])
    return c


cdef extern from *:
    int __builtin_popcountll(unsigned long long)
    int __builtin_ctzll(unsigned long long)


cdef class NodeKernel:
    """Search, insert and erase for one node layout, run directly on a core.

    Mirrors the pure-Python node operations event for event (the same
    stores, flushes, fences and loads in the same order), so counters and
    images agree with the fallback bit for bit.
    """
    cdef int kind
    cdef Py_ssize_t cap, koff, voff, aux, nwords

    def __init__(self, int kind, Py_ssize_t cap, Py_ssize_t koff,
                 Py_ssize_t voff, Py_ssize_t aux, Py_ssize_t nwords):
        if nwords > 4:
            raise ValueError("at most 256 entries per bitmap node")
        self.kind = kind
        self.cap = cap
        self.koff = koff
        self.voff = voff
        self.aux = aux
        self.nwords = nwords

    cdef inline uint64_t _ld64(self, ArenaCore c, Py_ssize_t a):
        c.cread(a, 8)
        return _rd64(c._d + a)

    cdef inline void _ld_bits(self, ArenaCore c, Py_ssize_t base, uint64_t* w):
        cdef int i
        c.cread(base, 8 * self.nwords)
        for i in range(self.nwords):
            w[i] = _rd64(c._d + base + 8 * i)

    cdef inline bint _valid(self, uint64_t* w, Py_ssize_t p):
        return (w[p >> 6] >> (p & 63)) & 1

    cdef Py_ssize_t _first_zero(self, uint64_t* w):
        cdef int i
        cdef Py_ssize_t p
        for i in range(self.nwords):
            if w[i] != <uint64_t>0xFFFFFFFFFFFFFFFF:
                p = 64 * i + __builtin_ctzll(~w[i])
                return p if p < self.cap else FULL
        return FULL

    cdef void _store_bits(self, ArenaCore c, Py_ssize_t base, uint64_t* old,
                          uint64_t* new):
        cdef int i
        for i in range(self.nwords):
            if old[i] != new[i]:
                c.cstore(base + 8 * i, <const unsigned char*> &new[i], 8)
                c.cflush(base + 8 * i, 8)

    def peek_size(self, ArenaCore c, Py_ssize_t base):
        """Logical entry count, read without instrumentation."""
        cdef uint64_t w[4]
        cdef int i
        if self.kind == K_SORTED or self.kind == K_UNSORTED:
            return _rd64(c._d + base)
        for i in range(self.nwords):
            w[i] = _rd64(c._d + base + 8 * i)
        return _popcount(w, self.nwords)

    def search(self, ArenaCore c, Py_ssize_t base, uint64_t key, int algo):
        cdef Py_ssize_t n, lo, hi, mid, start, stop, i, p, a, end
        cdef uint64_t k
        cdef uint64_t w[4]
        cdef bint ordered
        cdef unsigned char fp
        cdef const unsigned char* d = c._d
        if algo == A_BINARY:
            n = <Py_ssize_t> self._ld64(c, base)
            lo, hi = 0, n
            while lo < hi:
                mid = (lo + hi) // 2
                k = self._ld64(c, base + self.koff + 8 * mid)
                if k < key:
                    lo = mid + 1
                elif k == key:
                    return True, mid, mid
                else:
                    hi = mid
            return False, -1, lo
        if algo == A_LINEAR:
            ordered = self.kind == K_SORTED
            n = <Py_ssize_t> self._ld64(c, base)
            start = 0
            while start < n:
                stop = min(n, start + 8)
                c.cread(base + self.koff + 8 * start, 8 * (stop - start))
                for i in range(start, stop):
                    k = _rd64(d + base + self.koff + 8 * i)
                    if k == key:
                        return True, i, (i if ordered else -1)
                    if ordered and k > key:
                        return False, -1, i
                start += 8
            return False, -1, (n if ordered else -1)
        if algo == A_BITMAP_LINEAR:
            self._ld_bits(c, base, w)
            start = 0
            while start < self.cap:
                stop = min(self.cap, start + 8)
                for i in range(start, stop):
                    if self._valid(w, i):
                        break
                else:
                    start += 8
                    continue
                c.cread(base + self.koff + 8 * start, 8 * (stop - start))
                for i in range(start, stop):
                    if self._valid(w, i) and _rd64(d + base + self.koff + 8 * i) == key:
                        return True, i, -1
                start += 8
            return False, -1, -1
        if algo == A_INDIRECT_BINARY:
            self._ld_bits(c, base, w)
            n = _popcount(w, self.nwords)
            lo, hi = 0, n
            while lo < hi:
                mid = (lo + hi) // 2
                c.cread(base + self.aux + mid, 1)
                p = d[base + self.aux + mid]
                k = self._ld64(c, base + self.koff + 8 * p)
                if k < key:
                    lo = mid + 1
                elif k == key:
                    return True, p, mid
                else:
                    hi = mid
            return False, -1, lo
        if algo == A_HASH_PROBE:
            self._ld_bits(c, base, w)
            fp = <unsigned char> ((key * <uint64_t> FP_MULT) >> 56)
            a = base + self.aux
            end = a + self.cap
            while a < end:
                stop = min(end, (a // LINE + 1) * LINE)
                c.cread(a, stop - a)
                for i in range(a, stop):
                    if d[i] == fp:
                        p = i - base - self.aux
                        if self._valid(w, p) and self._ld64(
                                c, base + self.koff + 8 * p) == key:
                            return True, p, -1
                a = stop
            return False, -1, -1
        raise ValueError("unknown search algorithm")

    cdef void _move_entries(self, ArenaCore c, Py_ssize_t base, Py_ssize_t dst,
                            Py_ssize_t src, Py_ssize_t n):
        if n <= 0:
            return
        c.cread(base + self.koff + 8 * src, 8 * n)
        c.cread(base + self.voff + 16 * src, 16 * n)
        # stores read their source before writing, as the fallback copies first
        cdef unsigned char* kb = <unsigned char*> malloc(24 * n)
        memcpy(kb, c._d + base + self.koff + 8 * src, 8 * n)
        memcpy(kb + 8 * n, c._d + base + self.voff + 16 * src, 16 * n)
        c.cstore(base + self.koff + 8 * dst, kb, 8 * n)
        c.cstore(base + self.voff + 16 * dst, kb + 8 * n, 16 * n)
        free(kb)

    cdef void _flush_entries(self, ArenaCore c, Py_ssize_t base, Py_ssize_t lo,
                             Py_ssize_t hi):
        if hi > lo:
            c.cflush(base + self.koff + 8 * lo, 8 * (hi - lo))
            c.cflush(base + self.voff + 16 * lo, 16 * (hi - lo))

    cdef void _set_count(self, ArenaCore c, Py_ssize_t base, uint64_t n):
        c.cstore(base, <const unsigned char*> &n, 8)
        c.cflush(base, 8)
        c.cfence()

    cdef void _put_bitmap(self, ArenaCore c, Py_ssize_t base, Py_ssize_t pos,
                          uint64_t key, const unsigned char* value):
        cdef unsigned char fp
        c.cstore(base + self.koff + 8 * pos, <const unsigned char*> &key, 8)
        c.cstore(base + self.voff + 16 * pos, value, 16)
        c.cflush(base + self.koff + 8 * pos, 8)
        c.cflush(base + self.voff + 16 * pos, 16)
        if self.kind == K_HASHING:
            fp = <unsigned char> ((key * <uint64_t> FP_MULT) >> 56)
            c.cstore(base + self.aux + pos, &fp, 1)
            c.cflush(base + self.aux + pos, 1)

    def update(self, ArenaCore c, Py_ssize_t base, Py_ssize_t pos,
               const unsigned char[:] value):
        c.cstore(base + self.voff + 16 * pos, &value[0], 16)
        c.cflush(base + self.voff + 16 * pos, 16)
        c.cfence()

    def insert(self, ArenaCore c, Py_ssize_t base, uint64_t key,
               const unsigned char[:] value, Py_ssize_t rank):
        """Insert an absent key; returns 0, or -1 when the node is full."""
        cdef Py_ssize_t n, pos
        cdef uint64_t old[4]
        cdef uint64_t new[4]
        cdef unsigned char* buf
        cdef int i
        if self.kind == K_SORTED or self.kind == K_UNSORTED:
            n = <Py_ssize_t> _rd64(c._d + base)
            if n >= self.cap:
                return FULL
            pos = rank if self.kind == K_SORTED else n
            if self.kind == K_SORTED:
                self._move_entries(c, base, pos + 1, pos, n - pos)
            c.cstore(base + self.koff + 8 * pos, <const unsigned char*> &key, 8)
            c.cstore(base + self.voff + 16 * pos, &value[0], 16)
            self._flush_entries(c, base, pos, n + 1)
            c.cfence()
            self._set_count(c, base, n + 1)
            return 0
        self._ld_bits(c, base, old)
        pos = self._first_zero(old)
        if pos == FULL:
            return FULL
        for i in range(self.nwords):
            new[i] = old[i]
        new[pos >> 6] |= (<uint64_t> 1) << (pos & 63)
        self._put_bitmap(c, base, pos, key, &value[0])
        c.cfence()
        if self.kind == K_INDIRECTION:
            n = _popcount(old, self.nwords)
            c.cread(base + self.aux + rank, n - rank)
            buf = <unsigned char*> malloc(n - rank + 1)
            buf[0] = <unsigned char> pos
            memcpy(buf + 1, c._d + base + self.aux + rank, n - rank)
            c.cstore(base + self.aux + rank, buf, n - rank + 1)
            free(buf)
            c.cflush(base + self.aux + rank, n - rank + 1)
        self._store_bits(c, base, old, new)
        c.cfence()
        return 0

    def erase(self, ArenaCore c, Py_ssize_t base, Py_ssize_t pos, Py_ssize_t rank):
        cdef Py_ssize_t n
        cdef uint64_t old[4]
        cdef uint64_t new[4]
        cdef unsigned char zero = 0
        cdef unsigned char* buf
        cdef int i
        if self.kind == K_SORTED:
            n = <Py_ssize_t> _rd64(c._d + base)
            self._move_entries(c, base, pos, pos + 1, n - pos - 1)
            self._flush_entries(c, base, pos, n - 1)
            if pos < n - 1:
                c.cfence()
            self._set_count(c, base, n - 1)
            return 0
        if self.kind == K_UNSORTED:
            n = <Py_ssize_t> _rd64(c._d + base)
            if pos != n - 1:
                self._move_entries(c, base, pos, n - 1, 1)
                self._flush_entries(c, base, pos, pos + 1)
                c.cfence()
            self._set_count(c, base, n - 1)
            return 0
        self._ld_bits(c, base, old)
        for i in range(self.nwords):
            new[i] = old[i]
        new[pos >> 6] &= ~((<uint64_t> 1) << (pos & 63))
        if self.kind == K_HASHING:
            c.cstore(base + self.aux + pos, &zero, 1)
            c.cflush(base + self.aux + pos, 1)
        elif self.kind == K_INDIRECTION:
            n = _popcount(old, self.nwords)
            if rank < 0:
                for i in range(n):
                    if c._d[base + self.aux + i] == pos:
                        rank = i
                        break
            if rank < n - 1:
                c.cread(base + self.aux + rank + 1, n - rank - 1)
                buf = <unsigned char*> malloc(n - rank - 1)
                memcpy(buf, c._d + base + self.aux + rank + 1, n - rank - 1)
                c.cstore(base + self.aux + rank, buf, n - rank - 1)
                free(buf)
                c.cflush(base + self.aux + rank, n - rank - 1)
        self._store_bits(c, base, old, new)
        c.cfence()
        return 0
