"""Host memory, per-sandbox extended page tables and the physical layout.

Each sandbox owns one :class:`EptTable`. Tables translate 4KB guest-physical
pages to host-physical frames through four levels of 512-entry arrays, and
only the holder of the table's :class:`MonitorToken` may change them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum, IntFlag

from .errors import AddressError, CapabilityError, HostMemoryExhausted

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
PAGE_MASK = PAGE_SIZE - 1
ENTRIES = 512
GPA_LIMIT = 1 << 48

KB = 1024
MB = 1024 * KB
GB = 1024 * MB


class Perm(IntFlag):
    R = 1
    W = 2
    X = 4
    RW = 3
    RX = 5
    RWX = 7


# Spelled-out alias used by callers that prefer the long name.
Permissions = Perm


class Access(str, Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"


_NEEDS = {Access.READ: Perm.R, Access.WRITE: Perm.W, Access.EXECUTE: Perm.X}
_NEED_BITS = {a: int(p) for a, p in _NEEDS.items()}


class ViolationReason(str, Enum):
    UNMAPPED = "unmapped"
    PERMISSION_DENIED = "permission-denied"


@dataclass(frozen=True)
class EptViolation:
    sandbox: int
    gpa: int
    access: Access
    reason: ViolationReason


def ept_index(gpa: int) -> tuple[int, int, int, int, int]:
    """Split a guest-physical address into (pml4, pdpt, pd, pt, offset)."""
    if not 0 <= gpa < GPA_LIMIT:
        raise AddressError(f"gpa {gpa:#x} outside 48-bit range")
    return (
        (gpa >> 39) & 0x1FF,
        (gpa >> 30) & 0x1FF,
        (gpa >> 21) & 0x1FF,
        (gpa >> 12) & 0x1FF,
        gpa & PAGE_MASK,
    )


class MonitorToken:
    """Opaque capability. Identity is the only thing that matters."""

    __slots__ = ("sandbox",)

    def __init__(self, sandbox):
        self.sandbox = sandbox

    def __repr__(self):
        return f"MonitorToken(sandbox={self.sandbox})"


class EptTable:
    """Four-level GPA to HPA table. Leaves are ``(hpa_frame, perms)`` tuples."""

    def __init__(self, sandbox: int, token: MonitorToken, host_size: int):
        self.sandbox = sandbox
        self.host_size = host_size
        self.root: list = [None] * ENTRIES
        self._token = token

    @classmethod
    def create(cls, sandbox: int, host_size: int) -> tuple["EptTable", MonitorToken]:
        token = MonitorToken(sandbox)
        return cls(sandbox, token, host_size), token

    def _check_token(self, token):
        if token is None or token is not self._token:
            raise CapabilityError(
                f"EPT of sandbox {self.sandbox} is mutable only by its monitor")

    def map(self, gpa: int, hpa: int, perms: Perm, n_pages: int = 1, token=None) -> None:
        self._check_token(token)
        if gpa & PAGE_MASK or hpa & PAGE_MASK:
            raise AddressError("gpa and hpa must be page aligned")
        perms = Perm(perms)
        if not perms:
            raise ValueError("empty permission set; unmap the page instead")
        if n_pages < 1:
            raise ValueError("n_pages must be positive")
        if hpa + n_pages * PAGE_SIZE > self.host_size:
            raise AddressError(f"hpa range {hpa:#x}+{n_pages} pages exceeds host memory")
        if gpa + n_pages * PAGE_SIZE > GPA_LIMIT:
            raise AddressError("gpa range exceeds 48 bits")
        for i in range(n_pages):
            g = gpa + i * PAGE_SIZE
            node = self.root
            for shift in (39, 30, 21):
                idx = (g >> shift) & 0x1FF
                nxt = node[idx]
                if nxt is None:
                    nxt = node[idx] = [None] * ENTRIES
                node = nxt
            node[(g >> 12) & 0x1FF] = (hpa + i * PAGE_SIZE, perms)

    def unmap(self, gpa: int, n_pages: int = 1, token=None) -> None:
        self._check_token(token)
        if gpa & PAGE_MASK:
            raise AddressError("gpa must be page aligned")
        for i in range(n_pages):
            leaf = self._leaf_table(gpa + i * PAGE_SIZE)
            if leaf is not None:
                leaf[((gpa + i * PAGE_SIZE) >> 12) & 0x1FF] = None

    def set_perms(self, gpa: int, perms: Perm, n_pages: int = 1, token=None) -> None:
        self._check_token(token)
        perms = Perm(perms)
        if not perms:
            raise ValueError("empty permission set; unmap the page instead")
        for i in range(n_pages):
            g = gpa + i * PAGE_SIZE
            leaf = self._leaf_table(g)
            entry = None if leaf is None else leaf[(g >> 12) & 0x1FF]
            if entry is None:
                raise AddressError(f"gpa {g:#x} is not mapped")
            leaf[(g >> 12) & 0x1FF] = (entry[0], perms)

    def _leaf_table(self, gpa: int):
        node = self.root
        for shift in (39, 30, 21):
            node = node[(gpa >> shift) & 0x1FF]
            if node is None:
                return None
        return node

    def lookup(self, gpa: int):
        """Return ``(hpa_frame, perms)`` for the page holding ``gpa``, or None."""
        if not 0 <= gpa < GPA_LIMIT:
            return None
        leaf = self._leaf_table(gpa)
        return None if leaf is None else leaf[(gpa >> 12) & 0x1FF]

    def walk(self, gpa: int, access: Access = Access.READ):
        """Translate ``gpa``. Returns an int HPA or an :class:`EptViolation`."""
        entry = None
        if 0 <= gpa < GPA_LIMIT:
            node = self.root
            for shift in (39, 30, 21):
                node = node[(gpa >> shift) & 0x1FF]
                if node is None:
                    break
            else:
                entry = node[(gpa >> 12) & 0x1FF]
        if entry is None:
            return EptViolation(self.sandbox, gpa, access, ViolationReason.UNMAPPED)
        frame, perms = entry
        if not perms._value_ & _NEED_BITS[access]:
            return EptViolation(self.sandbox, gpa, access, ViolationReason.PERMISSION_DENIED)
        return frame | (gpa & PAGE_MASK)

    def mappings(self):
        """Yield ``(gpa_page, hpa_frame, perms)`` in ascending GPA order."""
        for i4, l3 in enumerate(self.root):
            if l3 is None:
                continue
            for i3, l2 in enumerate(l3):
                if l2 is None:
                    continue
                for i2, l1 in enumerate(l2):
                    if l1 is None:
                        continue
                    for i1, entry in enumerate(l1):
                        if entry is not None:
                            gpa = (i4 << 39) | (i3 << 30) | (i2 << 21) | (i1 << 12)
                            yield gpa, entry[0], entry[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for gpa, hpa, perms in self.mappings():
            h.update(f"{gpa:x}:{hpa:x}:{int(perms)};".encode())
        return h.hexdigest()


class HostMemory:
    """Sparse byte store; frames materialize on first write."""

    def __init__(self, size: int):
        if size <= 0 or size & PAGE_MASK:
            raise ValueError("host size must be a positive multiple of the page size")
        self.size = size
        self.frames: dict[int, bytearray] = {}

    def _check(self, hpa: int, n: int):
        if hpa < 0 or hpa + n > self.size:
            raise AddressError(f"hpa range {hpa:#x}+{n} outside host memory")

    def read(self, hpa: int, n: int) -> bytes:
        self._check(hpa, n)
        off = hpa & PAGE_MASK
        if off + n <= PAGE_SIZE:
            page = self.frames.get(hpa - off)
            return bytes(page[off:off + n]) if page is not None else bytes(n)
        out = bytearray()
        while n > 0:
            frame, off = hpa & ~PAGE_MASK, hpa & PAGE_MASK
            take = min(n, PAGE_SIZE - off)
            page = self.frames.get(frame)
            out += page[off:off + take] if page is not None else bytes(take)
            hpa += take
            n -= take
        return bytes(out)

    def write(self, hpa: int, data: bytes) -> None:
        self._check(hpa, len(data))
        pos = 0
        while pos < len(data):
            frame, off = hpa & ~PAGE_MASK, hpa & PAGE_MASK
            take = min(len(data) - pos, PAGE_SIZE - off)
            page = self.frames.get(frame)
            if page is None:
                page = self.frames[frame] = bytearray(PAGE_SIZE)
            page[off:off + take] = data[pos:pos + take]
            hpa += take
            pos += take

    def region_digest(self, start: int, end: int) -> str:
        """Hash of the non-zero pages in ``[start, end)``; absent pages count as zero."""
        h = hashlib.sha256()
        lo, hi = start & ~PAGE_MASK, end
        for frame in sorted(f for f in self.frames if lo <= f < hi):
            page = self.frames[frame]
            a = max(start, frame) - frame
            b = min(end, frame + PAGE_SIZE) - frame
            chunk = bytes(page[a:b])
            if chunk.count(0) != len(chunk):
                h.update(frame.to_bytes(8, "little"))
                h.update(chunk)
        return h.hexdigest()


@dataclass
class AccessResult:
    data: bytes | None = None
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def guest_access(ept: EptTable, host: HostMemory, gpa: int, access: Access,
                 length: int | None = None, data: bytes | None = None) -> AccessResult:
    """All-or-nothing guest access spanning one or more pages.

    Every covered page is walked first. If any page fails, nothing is read or
    written and one violation per failing page is returned.
    """
    if data is not None:
        length = len(data)
    if not length or length < 1:
        raise ValueError("access length must be at least 1")
    if (gpa & PAGE_MASK) + length <= PAGE_SIZE:
        res = ept.walk(gpa, access)
        if res.__class__ is EptViolation:
            return AccessResult(None, [res])
        if access is Access.WRITE:
            host.write(res, data)
            return AccessResult(None, [])
        return AccessResult(host.read(res, length), [])
    pieces = []
    violations = []
    addr, end = gpa, gpa + length
    while addr < end:
        take = min(end - addr, PAGE_SIZE - (addr & PAGE_MASK))
        res = ept.walk(addr, access)
        if isinstance(res, EptViolation):
            violations.append(res)
        else:
            pieces.append((res, take))
        addr += take
    if violations:
        return AccessResult(None, violations)
    if access is Access.WRITE:
        pos = 0
        for hpa, take in pieces:
            host.write(hpa, data[pos:pos + take])
            pos += take
        return AccessResult(None, [])
    return AccessResult(b"".join(host.read(hpa, take) for hpa, take in pieces), [])


@dataclass(frozen=True)
class Range:
    start: int
    size: int

    @property
    def end(self) -> int:
        return self.start + self.size

    def __contains__(self, addr) -> bool:
        return self.start <= addr < self.end

    def overlaps(self, other: "Range") -> bool:
        return self.start < other.end and other.start < self.end

    def __str__(self):
        return f"[{self.start:#010x}, {self.end:#010x})"


@dataclass(frozen=True)
class LayoutSizes:
    bios: int = 1 * MB
    kernel: int = 16 * MB
    ept_data: int = 1 * MB
    shared: int = 1 * MB
    host: int = 4 * GB

    def validate(self):
        for name in ("bios", "kernel", "ept_data", "shared", "host"):
            v = getattr(self, name)
            if v <= 0 or v & PAGE_MASK:
                raise ValueError(f"{name} size must be a positive multiple of 4KB")


@dataclass
class MemoryLayout:
    n_sandboxes: int
    sizes: LayoutSizes
    bios: Range
    kernel_gpa: Range                  # where each sandbox sees its own kernel
    kernel_host: dict[int, Range]      # private host range per sandbox
    ept_data: dict[int, Range]         # host only, never mapped into a guest
    shared: Range                      # same GPA and HPA in every sandbox

    def kernel_hpa(self, sandbox: int, gpa: int) -> int:
        return self.kernel_host[sandbox].start + (gpa - self.kernel_gpa.start)

    def dump(self, tables: dict[int, EptTable] | None = None) -> str:
        lines = [f"host memory {self.sizes.host:#x} bytes, {self.n_sandboxes} sandbox(es)",
                 f"bios    hpa {self.bios}  gpa {self.bios}  perms R-X (all sandboxes)",
                 f"shared  hpa {self.shared}  gpa {self.shared}  perms RW- (default, all sandboxes)"]
        for sid in sorted(self.kernel_host):
            lines.append(f"sandbox {sid}: kernel hpa {self.kernel_host[sid]} gpa {self.kernel_gpa} perms RWX")
            lines.append(f"sandbox {sid}: ept-data hpa {self.ept_data[sid]} (unmapped)")
        if tables:
            for sid in sorted(tables):
                lines.append(f"ept {sid}:")
                for start, end, hstart, perms in _coalesce(tables[sid].mappings()):
                    lines.append(f"  gpa [{start:#010x}, {end:#010x}) -> hpa {hstart:#010x} {_perm_str(perms)}")
        return "\n".join(lines) + "\n"


def _perm_str(p: Perm) -> str:
    return ("R" if p & Perm.R else "-") + ("W" if p & Perm.W else "-") + ("X" if p & Perm.X else "-")


def _coalesce(mappings):
    run = None
    for gpa, hpa, perms in mappings:
        if run and gpa == run[1] and hpa == run[2] + (run[1] - run[0]) and perms == run[3]:
            run[1] = gpa + PAGE_SIZE
            continue
        if run:
            yield run[0], run[1], run[2], run[3]
        run = [gpa, gpa + PAGE_SIZE, hpa, perms]
    if run:
        yield run[0], run[1], run[2], run[3]


def build_layout(n_sandboxes: int, sizes: LayoutSizes | None = None):
    """Lay out host memory and build one initialized EPT per sandbox.

    Returns ``(layout, tables, tokens)``. BIOS is mapped read/execute into
    every table, each kernel region privately RWX at GPA 1MB, the shared
    region RW at the top of memory, and EPT data regions nowhere.
    """
    sizes = sizes or LayoutSizes()
    sizes.validate()
    if n_sandboxes < 1:
        raise ValueError("need at least one sandbox")
    bios = Range(0, sizes.bios)
    cursor = sizes.bios
    kernels, ept_data = {}, {}
    for sid in range(n_sandboxes):
        kernels[sid] = Range(cursor, sizes.kernel)
        cursor += sizes.kernel
    for sid in range(n_sandboxes):
        ept_data[sid] = Range(cursor, sizes.ept_data)
        cursor += sizes.ept_data
    shared = Range(sizes.host - sizes.shared, sizes.shared)
    if cursor > shared.start:
        raise HostMemoryExhausted(
            f"layout needs {cursor + sizes.shared:#x} bytes, host has {sizes.host:#x}")
    kernel_gpa = Range(sizes.bios, sizes.kernel)
    layout = MemoryLayout(n_sandboxes, sizes, bios, kernel_gpa, kernels, ept_data, shared)

    tables, tokens = {}, {}
    for sid in range(n_sandboxes):
        table, token = EptTable.create(sid, sizes.host)
        table.map(bios.start, bios.start, Perm.RX, bios.size // PAGE_SIZE, token)
        table.map(kernel_gpa.start, kernels[sid].start, Perm.RWX, sizes.kernel // PAGE_SIZE, token)
        table.map(shared.start, shared.start, Perm.RW, sizes.shared // PAGE_SIZE, token)
        tables[sid], tokens[sid] = table, token
    return layout, tables, tokens
