"""Versioned in-memory key-value storage underlying every protocol.

Each record carries a version that strictly increases across puts to the
same key and is never reused; the version is the unit of optimistic
validation.  get/put/next_version are individually atomic (one mutex);
cross-key atomicity is the concurrency-control layers' responsibility.

Deletes are out of scope.  Reads of absent keys raise NotFound, which aborts
the enclosing transaction; writes to absent keys are inserts (first version
is 1).

The whole store can be written to and reloaded from a snapshot file:
concatenated length-prefixed binary records, little-endian,

    [u32 key_len][key utf-8][u8 tag][payload][u64 version]

with tag 0 = int (payload i64), 1 = str (payload u32 len + utf-8 bytes),
2 = bool (payload u8).  An empty file is an empty store.
"""

from __future__ import annotations

import struct
import threading
from typing import Dict, List, Tuple

from .futexpr import INT_MAX, INT_MIN, Value, value_kind


class NotFound(KeyError):
    """Key absent; aborts the reading transaction."""


class VersionRegression(RuntimeError):
    """put() with a non-successor version; internal invariant violation."""


class SnapshotError(ValueError):
    """Snapshot bytes do not parse as records."""


_TAGS = {"int": 0, "str": 1, "bool": 2}


class Store:
    def __init__(self):
        self._mutex = threading.Lock()
        self._records: Dict[str, Tuple[Value, int]] = {}

    def get(self, key: str) -> Tuple[Value, int]:
        with self._mutex:
            try:
                return self._records[key]
            except KeyError:
                raise NotFound(key) from None

    def put(self, key: str, value: Value, version: int) -> None:
        value_kind(value)  # reject unsupported types before they land
        with self._mutex:
            current = self._records.get(key)
            expect = 1 if current is None else current[1] + 1
            if version != expect:
                raise VersionRegression(
                    "put(%r) at version %d, expected %d" % (key, version, expect)
                )
            self._records[key] = (value, version)

    def next_version(self, key: str) -> int:
        with self._mutex:
            current = self._records.get(key)
            return 1 if current is None else current[1] + 1

    def version(self, key: str) -> int:
        """Current version, 0 when absent.  Validation helper; get() is the
        client-facing read and keeps its NotFound contract."""
        with self._mutex:
            current = self._records.get(key)
            return 0 if current is None else current[1]

    def contains(self, key: str) -> bool:
        with self._mutex:
            return key in self._records

    def items(self) -> List[Tuple[str, Value, int]]:
        """Stable key-sorted copy for oracles and snapshots."""
        with self._mutex:
            return [(k, v, ver)
                    for k, (v, ver) in sorted(self._records.items())]

    def values_dict(self) -> Dict[str, Value]:
        with self._mutex:
            return {k: v for k, (v, _) in self._records.items()}

    def restore_record(self, key: str, value: Value, version: int) -> None:
        """Install a record at an explicit version, bypassing the successor
        check.  Snapshot restore only; never valid mid-run."""
        value_kind(value)
        if version < 1:
            raise SnapshotError("record for %r has version %d" % (key, version))
        with self._mutex:
            self._records[key] = (value, version)

    # -- snapshot ----------------------------------------------------------

    def save_snapshot(self, path: str) -> None:
        chunks: List[bytes] = []
        for key, value, version in self.items():
            kb = key.encode("utf-8")
            chunks.append(struct.pack("<I", len(kb)))
            chunks.append(kb)
            tag = _TAGS[value_kind(value)]
            chunks.append(struct.pack("<B", tag))
            if tag == 0:
                chunks.append(struct.pack("<q", value))
            elif tag == 1:
                vb = value.encode("utf-8")
                chunks.append(struct.pack("<I", len(vb)))
                chunks.append(vb)
            else:
                chunks.append(struct.pack("<B", 1 if value else 0))
            chunks.append(struct.pack("<Q", version))
        with open(path, "wb") as f:
            f.write(b"".join(chunks))

    @classmethod
    def load_snapshot(cls, path: str) -> "Store":
        with open(path, "rb") as f:
            data = f.read()
        st = cls()
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(data):
                raise SnapshotError("truncated snapshot at byte %d" % pos)
            out = data[pos : pos + n]
            pos += n
            return out

        while pos < len(data):
            (klen,) = struct.unpack("<I", take(4))
            key = take(klen).decode("utf-8")
            (tag,) = struct.unpack("<B", take(1))
            if tag == 0:
                (value,) = struct.unpack("<q", take(8))
            elif tag == 1:
                (vlen,) = struct.unpack("<I", take(4))
                value = take(vlen).decode("utf-8")
            elif tag == 2:
                value = take(1) != b"\x00"
            else:
                raise SnapshotError("unknown value tag %d" % tag)
            (version,) = struct.unpack("<Q", take(8))
            st.restore_record(key, value, version)
        return st
