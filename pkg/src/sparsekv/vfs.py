"""Block-structured vector files and the buffer manager in front of them.

One file holds the vectors of a single head in a single layer (one file each
for K and V). Vector payloads and index structure live in different block
types: data blocks hold fixed-width vector slots, index blocks hold the
serialized adjacency chained head-to-tail, and a trailing directory chain
maps every block to its offset and type. Appending vectors adds fresh data
blocks and a new directory chain without touching existing data or index
blocks (only the fixed-size header is rewritten); deletion appends tombstone
records. See docs/file-format.md for the byte-level layout.

The buffer pool serves whole blocks and evicts by block type: data blocks go
first (LRU among them), index blocks only when no unpinned data block is
resident. Pinned blocks are never evicted. Reads of distinct blocks do not
serialize against each other; a block being loaded is loaded exactly once.
"""

from __future__ import annotations

import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

BLOCK_SIZE = 4096
MAGIC = b"AVDB"
VERSION = 1

BLOCK_HEADER = 0
BLOCK_INDEX = 1
BLOCK_DATA = 2
BLOCK_DIRECTORY = 3
BLOCK_TOMBSTONE = 4

_TYPE_NAMES = {
    BLOCK_HEADER: "header",
    BLOCK_INDEX: "index",
    BLOCK_DATA: "data",
    BLOCK_DIRECTORY: "directory",
    BLOCK_TOMBSTONE: "tombstone",
}

# header block: magic, version, dim, n_vectors, element width, block size,
# directory tail offset, index chain head offset
_HEADER = struct.Struct("<4sIIQIIQQ")
# every other block: type byte, payload length, next offset (index chain)
_BLOCK_HEADER = struct.Struct("<B3xIQ")
_PAYLOAD = BLOCK_SIZE - _BLOCK_HEADER.size
# directory payload prefix: previous directory block offset, entry count
_DIR_PREFIX = struct.Struct("<QI4x")
_DIR_ENTRY = struct.Struct("<QB3xI")
_DIR_CAPACITY = (_PAYLOAD - _DIR_PREFIX.size) // _DIR_ENTRY.size
# index chain logical stream prefix
_GRAPH_PREFIX = struct.Struct("<III")


class VectorFileError(Exception):
    """I/O or format failure, annotated with file path and offset."""


def _fail(path, offset: int, why: str) -> VectorFileError:
    return VectorFileError(f"{path} @ {offset}: {why}")


@dataclass(frozen=True)
class FileHeader:
    dim: int
    n_vectors: int
    element_width: int
    directory_offset: int
    index_head_offset: int

    @property
    def slot_size(self) -> int:
        return self.dim * self.element_width // 8

    @property
    def slots_per_block(self) -> int:
        return _PAYLOAD // self.slot_size


@dataclass(frozen=True)
class DirectoryEntry:
    offset: int
    block_type: int
    item_count: int


@dataclass
class VectorFileContents:
    dim: int
    element_width: int
    vectors: np.ndarray
    adjacency: list[np.ndarray] | None
    entry_point: int
    max_degree: int
    tombstones: set[int] = field(default_factory=set)


def _pack_block(block_type: int, payload: bytes, next_offset: int = 0) -> bytes:
    if len(payload) > _PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds block capacity")
    head = _BLOCK_HEADER.pack(block_type, len(payload), next_offset)
    return head + payload + b"\0" * (_PAYLOAD - len(payload))


def _narrow(vectors: np.ndarray, element_width: int) -> np.ndarray:
    if element_width == 32:
        return np.ascontiguousarray(vectors, dtype=np.float32)
    if element_width == 16:
        # round-to-nearest-even narrowing; widening back is exact
        return np.ascontiguousarray(vectors, dtype=np.float16)
    raise ValueError(f"unsupported element width {element_width}")


def _serialize_graph(
    adjacency: list[np.ndarray], entry_point: int, max_degree: int
) -> bytes:
    degrees = np.array([len(a) for a in adjacency], dtype=np.uint32)
    flat = (
        np.concatenate(adjacency).astype(np.uint32)
        if degrees.sum() > 0
        else np.empty(0, dtype=np.uint32)
    )
    return (
        _GRAPH_PREFIX.pack(entry_point, max_degree, len(adjacency))
        + degrees.tobytes()
        + flat.tobytes()
    )


def _deserialize_graph(stream: bytes) -> tuple[list[np.ndarray], int, int]:
    entry_point, max_degree, n_nodes = _GRAPH_PREFIX.unpack_from(stream, 0)
    pos = _GRAPH_PREFIX.size
    degrees = np.frombuffer(stream, dtype=np.uint32, count=n_nodes, offset=pos)
    pos += 4 * n_nodes
    total = int(degrees.sum())
    flat = np.frombuffer(stream, dtype=np.uint32, count=total, offset=pos)
    bounds = np.concatenate([[0], np.cumsum(degrees.astype(np.int64))])
    adjacency = [
        flat[bounds[i] : bounds[i + 1]].astype(np.int32) for i in range(n_nodes)
    ]
    return adjacency, int(entry_point), int(max_degree)


def _data_blocks(vectors: np.ndarray, slot_size: int) -> list[tuple[bytes, int]]:
    """Pack vectors into (payload, count) data-block tuples."""
    per_block = _PAYLOAD // slot_size
    if per_block < 1:
        raise ValueError(f"vector slot of {slot_size} bytes does not fit in a block")
    raw = vectors.tobytes()
    out = []
    n = vectors.shape[0]
    for lo in range(0, n, per_block):
        count = min(per_block, n - lo)
        out.append((raw[lo * slot_size : (lo + count) * slot_size], count))
    return out


def _write_directory(
    fh, entries: list[DirectoryEntry], prev_offset: int, at: int
) -> int:
    """Append directory blocks for ``entries``; returns the tail offset."""
    chunks = [entries[i : i + _DIR_CAPACITY] for i in range(0, len(entries), _DIR_CAPACITY)]
    if not chunks:
        chunks = [[]]
    offset = at
    for chunk in chunks:
        payload = _DIR_PREFIX.pack(prev_offset, len(chunk)) + b"".join(
            _DIR_ENTRY.pack(e.offset, e.block_type, e.item_count) for e in chunk
        )
        fh.write(_pack_block(BLOCK_DIRECTORY, payload))
        prev_offset = offset
        offset += BLOCK_SIZE
    return offset - BLOCK_SIZE


def write_vector_file(
    path,
    vectors: np.ndarray,
    adjacency: list[np.ndarray] | None = None,
    entry_point: int = 0,
    max_degree: int = 0,
    element_width: int = 32,
) -> None:
    """Create a vector file; overwrites any existing file at ``path``.

    ``vectors`` is an (n, d) float32 matrix (n may be 0); ``adjacency``, when
    given, is serialized into the index block chain.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
    n, dim = vectors.shape
    if dim < 1:
        raise ValueError("vectors must have at least one column")
    payload_vectors = _narrow(vectors, element_width)
    slot_size = dim * element_width // 8

    entries: list[DirectoryEntry] = []
    try:
        with open(path, "wb") as fh:
            fh.write(b"\0" * BLOCK_SIZE)  # header placeholder, rewritten below
            offset = BLOCK_SIZE

            index_head = 0
            if adjacency is not None:
                stream = _serialize_graph(adjacency, entry_point, max_degree)
                chunks = [stream[i : i + _PAYLOAD] for i in range(0, len(stream), _PAYLOAD)]
                index_head = offset
                for j, chunk in enumerate(chunks):
                    next_off = offset + BLOCK_SIZE if j + 1 < len(chunks) else 0
                    fh.write(_pack_block(BLOCK_INDEX, chunk, next_off))
                    entries.append(DirectoryEntry(offset, BLOCK_INDEX, 0))
                    offset += BLOCK_SIZE

            for payload, count in _data_blocks(payload_vectors, slot_size) if n else []:
                fh.write(_pack_block(BLOCK_DATA, payload))
                entries.append(DirectoryEntry(offset, BLOCK_DATA, count))
                offset += BLOCK_SIZE

            directory_offset = _write_directory(fh, entries, 0, offset)

            fh.seek(0)
            fh.write(
                _HEADER.pack(
                    MAGIC, VERSION, dim, n, element_width, BLOCK_SIZE,
                    directory_offset, index_head,
                ).ljust(BLOCK_SIZE, b"\0")
            )
    except OSError as exc:
        raise _fail(path, 0, f"write failed: {exc}") from exc


def read_header(path, pool: "BufferPool | None" = None) -> FileHeader:
    block = _read_block_raw(path, 0, pool)
    magic, version, dim, n, width, block_size, dir_off, index_head = _HEADER.unpack_from(
        block, 0
    )
    if magic != MAGIC:
        raise _fail(path, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise _fail(path, 0, f"unsupported version {version}")
    if block_size != BLOCK_SIZE:
        raise _fail(path, 0, f"unsupported block size {block_size}")
    return FileHeader(dim, n, width, dir_off, index_head)


def read_directory(path, pool: "BufferPool | None" = None) -> list[DirectoryEntry]:
    header = read_header(path, pool)
    chains: list[list[DirectoryEntry]] = []
    offset = header.directory_offset
    while True:
        block = _read_block_raw(path, offset, pool)
        btype, payload_len, _ = _BLOCK_HEADER.unpack_from(block, 0)
        if btype != BLOCK_DIRECTORY:
            raise _fail(path, offset, f"expected directory block, found {btype}")
        payload = block[_BLOCK_HEADER.size : _BLOCK_HEADER.size + payload_len]
        prev, count = _DIR_PREFIX.unpack_from(payload, 0)
        entries = [
            DirectoryEntry(*_DIR_ENTRY.unpack_from(payload, _DIR_PREFIX.size + i * _DIR_ENTRY.size))
            for i in range(count)
        ]
        chains.append(entries)
        if prev == 0:
            break
        offset = prev
    out: list[DirectoryEntry] = []
    for chunk in reversed(chains):
        out.extend(chunk)
    return out


def read_vector_file(path, pool: "BufferPool | None" = None) -> VectorFileContents:
    """Load a whole vector file (16-bit payloads widen exactly to float32)."""
    header = read_header(path, pool)
    directory = read_directory(path, pool)

    dtype = np.float32 if header.element_width == 32 else np.float16
    rows: list[np.ndarray] = []
    index_stream = bytearray()
    tombstones: set[int] = set()
    for entry in directory:
        block = _read_block_raw(path, entry.offset, pool)
        btype, payload_len, _ = _BLOCK_HEADER.unpack_from(block, 0)
        if btype != entry.block_type:
            raise _fail(path, entry.offset, "directory/block type mismatch")
        payload = block[_BLOCK_HEADER.size : _BLOCK_HEADER.size + payload_len]
        if btype == BLOCK_DATA:
            got = np.frombuffer(payload, dtype=dtype).reshape(entry.item_count, header.dim)
            rows.append(got)
        elif btype == BLOCK_INDEX:
            index_stream.extend(payload)
        elif btype == BLOCK_TOMBSTONE:
            (count,) = struct.unpack_from("<I", payload, 0)
            tombstones.update(
                np.frombuffer(payload, dtype=np.uint32, count=count, offset=4).tolist()
            )
        else:
            raise _fail(path, entry.offset, f"unexpected block type {btype} in directory")

    vectors = (
        np.concatenate(rows).astype(np.float32)
        if rows
        else np.empty((0, header.dim), dtype=np.float32)
    )
    if vectors.shape[0] != header.n_vectors:
        raise _fail(path, 0, f"expected {header.n_vectors} vectors, found {vectors.shape[0]}")

    adjacency = None
    entry_point = 0
    max_degree = 0
    if index_stream:
        adjacency, entry_point, max_degree = _deserialize_graph(bytes(index_stream))
        for node, nbrs in enumerate(adjacency):
            if nbrs.size and nbrs.max() >= header.n_vectors:
                raise _fail(path, 0, f"node {node} references a missing vector slot")
    return VectorFileContents(
        dim=header.dim,
        element_width=header.element_width,
        vectors=vectors,
        adjacency=adjacency,
        entry_point=entry_point,
        max_degree=max_degree,
        tombstones=tombstones,
    )


def append_vectors(path, new_vectors: np.ndarray) -> None:
    """Extend a file with more vectors.

    New data blocks and a fresh directory chain are appended; existing data,
    index, and directory blocks keep their bytes. Only the header block is
    rewritten (vector count and directory pointer).
    """
    header = read_header(path)
    new_vectors = np.atleast_2d(np.asarray(new_vectors, dtype=np.float32))
    if new_vectors.shape[1] != header.dim:
        raise _fail(path, 0, f"append dim {new_vectors.shape[1]} != file dim {header.dim}")
    payload_vectors = _narrow(new_vectors, header.element_width)
    directory = read_directory(path)
    try:
        with open(path, "r+b") as fh:
            fh.seek(0, 2)
            offset = fh.tell()
            if offset % BLOCK_SIZE != 0:
                raise _fail(path, offset, "file length is not block aligned")
            entries = list(directory)
            for payload, count in _data_blocks(payload_vectors, header.slot_size):
                fh.write(_pack_block(BLOCK_DATA, payload))
                entries.append(DirectoryEntry(offset, BLOCK_DATA, count))
                offset += BLOCK_SIZE
            directory_offset = _write_directory(fh, entries, 0, offset)
            fh.seek(0)
            fh.write(
                _HEADER.pack(
                    MAGIC, VERSION, header.dim,
                    header.n_vectors + new_vectors.shape[0],
                    header.element_width, BLOCK_SIZE,
                    directory_offset, header.index_head_offset,
                ).ljust(BLOCK_SIZE, b"\0")
            )
    except OSError as exc:
        raise _fail(path, 0, f"append failed: {exc}") from exc


def delete_vectors(path, ids) -> None:
    """Mark vector ids deleted by appending a tombstone block.

    Tombstones are the only deletion mechanism; compaction is offline and out
    of scope here. Existing blocks keep their bytes.
    """
    header = read_header(path)
    ids = np.asarray(sorted(set(int(i) for i in ids)), dtype=np.uint32)
    if ids.size and ids.max() >= header.n_vectors:
        raise _fail(path, 0, f"tombstone id {ids.max()} out of range")
    directory = read_directory(path)
    payload = struct.pack("<I", ids.size) + ids.tobytes()
    try:
        with open(path, "r+b") as fh:
            fh.seek(0, 2)
            offset = fh.tell()
            entries = list(directory)
            fh.write(_pack_block(BLOCK_TOMBSTONE, payload))
            entries.append(DirectoryEntry(offset, BLOCK_TOMBSTONE, ids.size))
            directory_offset = _write_directory(fh, entries, 0, offset + BLOCK_SIZE)
            fh.seek(0)
            fh.write(
                _HEADER.pack(
                    MAGIC, VERSION, header.dim, header.n_vectors,
                    header.element_width, BLOCK_SIZE,
                    directory_offset, header.index_head_offset,
                ).ljust(BLOCK_SIZE, b"\0")
            )
    except OSError as exc:
        raise _fail(path, 0, f"tombstone write failed: {exc}") from exc


def _read_block_direct(path, offset: int) -> bytes:
    try:
        with open(path, "rb") as fh:
            fh.seek(offset)
            block = fh.read(BLOCK_SIZE)
    except OSError as exc:
        raise _fail(path, offset, f"read failed: {exc}") from exc
    if len(block) != BLOCK_SIZE:
        raise _fail(path, offset, f"short read of {len(block)} bytes")
    return block


def _read_block_raw(path, offset: int, pool: "BufferPool | None") -> bytes:
    if pool is None:
        return _read_block_direct(path, offset)
    return pool.read_block(path, offset)


def block_type_of(block: bytes, offset: int) -> int:
    """Block type for eviction classification; block 0 is the header."""
    if offset == 0:
        return BLOCK_HEADER
    return block[0]


def _is_data(block_type: int) -> bool:
    return block_type == BLOCK_DATA


class BufferPool:
    """Fixed-capacity block cache with type-aware eviction.

    Data blocks are tracked separately from index-class blocks (header,
    index, directory, tombstone). A victim is the least recently used
    unpinned data block; index-class blocks are evicted, LRU-first, only
    when no unpinned data block is resident. Pinned blocks are never
    evicted. Concurrent readers of distinct blocks do not serialize against
    each other; concurrent readers of one absent block trigger exactly one
    file read.
    """

    def __init__(self, capacity_blocks: int):
        if capacity_blocks < 1:
            raise ValueError("capacity must be at least one block")
        self.capacity = capacity_blocks
        self._lock = threading.Lock()
        self._frames: dict[tuple[str, int], dict] = {}
        # recency per class, least recent first
        self._lru: dict[bool, OrderedDict] = {True: OrderedDict(), False: OrderedDict()}
        self.hits = 0
        self.misses = 0
        self.file_reads = 0
        self.evictions: list[tuple[tuple[str, int], str]] = []

    def _touch(self, key: tuple[str, int], is_data: bool) -> None:
        lru = self._lru[is_data]
        lru.pop(key, None)
        lru[key] = None

    def _evict_one(self) -> None:
        for is_data in (True, False):
            for key in self._lru[is_data]:
                frame = self._frames[key]
                if frame["pins"] == 0 and frame["block"] is not None:
                    del self._lru[is_data][key]
                    del self._frames[key]
                    self.evictions.append((key, _TYPE_NAMES[frame["type"]]))
                    return
        raise VectorFileError("buffer pool exhausted: every resident block is pinned")

    def read_block(self, path, offset: int) -> bytes:
        """Return the 4096-byte block, loading and caching it when absent."""
        key = (str(path), offset)
        while True:
            with self._lock:
                frame = self._frames.get(key)
                if frame is not None and frame["block"] is not None:
                    self.hits += 1
                    self._touch(key, _is_data(frame["type"]))
                    return frame["block"]
                if frame is not None:
                    event = frame["event"]
                else:
                    self.misses += 1
                    frame = {"block": None, "type": None, "pins": 0,
                             "event": threading.Event()}
                    self._frames[key] = frame
                    break
            event.wait()
        # load outside the lock so distinct-block readers proceed in parallel
        try:
            block = _read_block_direct(key[0], offset)
        except Exception:
            with self._lock:
                self._frames.pop(key, None)
            frame["event"].set()
            raise
        btype = block_type_of(block, offset)
        try:
            with self._lock:
                self.file_reads += 1
                resident = sum(1 for f in self._frames.values() if f["block"] is not None)
                while resident >= self.capacity:
                    self._evict_one()
                    resident -= 1
                frame["block"] = block
                frame["type"] = btype
                self._touch(key, _is_data(btype))
        except Exception:
            with self._lock:
                self._frames.pop(key, None)
            frame["event"].set()
            raise
        frame["event"].set()
        return block

    def pin(self, path, offset: int) -> "_Pin":
        """Pin a block resident; use as a context manager."""
        key = (str(path), offset)
        while True:
            self.read_block(path, offset)
            with self._lock:
                frame = self._frames.get(key)
                # retry if the frame was evicted between load and pin
                if frame is not None and frame["block"] is not None:
                    frame["pins"] += 1
                    return _Pin(self, key)

    def _unpin(self, key: tuple[str, int]) -> None:
        with self._lock:
            frame = self._frames.get(key)
            if frame is not None and frame["pins"] > 0:
                frame["pins"] -= 1

    def invalidate(self, path) -> None:
        """Drop all frames of a file (called after the file is rewritten)."""
        prefix = str(path)
        with self._lock:
            keys = [k for k in self._frames if k[0] == prefix]
            for key in keys:
                if self._frames[key]["pins"] > 0:
                    raise VectorFileError(f"cannot invalidate pinned block {key}")
                self._frames.pop(key)
                for lru in self._lru.values():
                    lru.pop(key, None)

    @property
    def resident_count(self) -> int:
        with self._lock:
            return sum(1 for f in self._frames.values() if f["block"] is not None)


class _Pin:
    def __init__(self, pool: BufferPool, key: tuple[str, int]):
        self._pool = pool
        self._key = key

    def __enter__(self) -> "_Pin":
        return self

    def __exit__(self, *exc) -> None:
        self._pool._unpin(self._key)


def describe_file(path) -> dict:
    """Header and directory summary used by the CLI inspect command."""
    header = read_header(path)
    directory = read_directory(path)
    counts: dict[str, int] = {}
    for entry in directory:
        name = _TYPE_NAMES.get(entry.block_type, f"type{entry.block_type}")
        counts[name] = counts.get(name, 0) + 1
    # the directory chain does not list itself; count it by walking
    n_dir = 1
    offset = header.directory_offset
    while True:
        block = _read_block_direct(path, offset)
        prev, _ = _DIR_PREFIX.unpack_from(block, _BLOCK_HEADER.size)
        if prev == 0:
            break
        offset = prev
        n_dir += 1
    counts["directory"] = n_dir
    return {
        "path": str(path),
        "dim": header.dim,
        "n_vectors": header.n_vectors,
        "element_width": header.element_width,
        "block_size": BLOCK_SIZE,
        "directory_offset": header.directory_offset,
        "index_head_offset": header.index_head_offset,
        "blocks": counts,
        "directory": [
            {"offset": e.offset, "type": _TYPE_NAMES.get(e.block_type, "?"),
             "items": e.item_count}
            for e in directory
        ],
    }
