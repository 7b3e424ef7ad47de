import struct
from typing import BinaryIO, List, Tuple

import numpy as np

from .errors import FormatError


def write_names(f: BinaryIO, names: List[str]) -> None:
    for name in names:
        data = name.encode("utf-8")
        f.write(struct.pack("<I", len(data)))
        f.write(data)


class Reader:
    """Cursor over an in-memory artifact that reports failures by byte offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def _take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(
                f"Truncated {what}: need {size} bytes, {len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def magic(self, expected: bytes) -> None:
        found = self._take(len(expected), "magic")
        if found != expected:
            raise FormatError(f"Bad magic {found!r}, expected {expected!r}", 0)

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self._take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        start = self.offset
        chunk = self._take(itemsize * count, what)
        try:
            return np.frombuffer(chunk, dtype=dtype, count=count).copy()
        except ValueError as e:
            raise FormatError(f"Unreadable {what}: {e}", start) from None

    def string(self, what: str) -> str:
        (length,) = self.unpack("<I", f"{what} length")
        start = self.offset
        try:
            return self._take(length, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8", start) from None

    def names(self, count: int, what: str) -> List[str]:
        return [self.string(what) for _ in range(count)]

    def end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.offset} trailing bytes after artifact", self.offset
            )
