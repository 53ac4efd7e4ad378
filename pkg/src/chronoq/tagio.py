"""Bit-exact time-tag file formats.

Two interchangeable encodings of multi-channel tag streams:

* CSV — ASCII lines ``channel,time_ps`` with LF endings, channels grouped in
  ascending order, tags sorted within each channel.
* Binary — 16-byte header (8-byte magic ``QTTTAGS\\0``, uint32 LE format
  version, uint32 LE record count) followed by 16-byte records: uint8
  channel, 7 reserved zero bytes, int64 LE picoseconds.

Readers validate structure strictly and report the offending line number
(CSV) or byte offset (binary) in :class:`~chronoq.errors.TagFileError`.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import TagFileError
from .timetags import TimeTagStream

MAGIC = b"QTTTAGS\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sII")
_RECORD_DTYPE = np.dtype([("channel", "<u1"), ("pad", "V7"), ("time_ps", "<i8")])


def atomic_write_bytes(path, data: bytes):
    """Write-then-rename so partially written outputs never become visible."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _normalize(streams) -> dict:
    if isinstance(streams, dict):
        items = streams.items()
    else:
        items = ((s.channel_id, s.tags_ps) for s in streams)
    out = {}
    for ch, tags in items:
        ch = int(ch)
        if not 0 <= ch <= 255:
            raise ValueError("channel ids must fit an unsigned byte")
        out[ch] = np.asarray(tags, dtype=np.int64)
    return dict(sorted(out.items()))


def encode_tags_binary(streams) -> bytes:
    chans = _normalize(streams)
    n = sum(len(t) for t in chans.values())
    rec = np.zeros(n, dtype=_RECORD_DTYPE)
    pos = 0
    for ch, tags in chans.items():
        rec["channel"][pos:pos + len(tags)] = ch
        rec["time_ps"][pos:pos + len(tags)] = tags
        pos += len(tags)
    return _HEADER.pack(MAGIC, FORMAT_VERSION, n) + rec.tobytes()


def write_tags_binary(streams, path):
    atomic_write_bytes(path, encode_tags_binary(streams))


def read_tags_binary(path) -> dict:
    """Read a binary tag file into {channel: sorted int64 array}."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise TagFileError(f"{path}: truncated header at byte {len(data)}")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TagFileError(f"{path}: bad magic at byte 0")
    if version != FORMAT_VERSION:
        raise TagFileError(f"{path}: unsupported format version {version} at byte 8")
    body = data[_HEADER.size:]
    if len(body) != count * _RECORD_DTYPE.itemsize:
        raise TagFileError(
            f"{path}: expected {count} records "
            f"({count * _RECORD_DTYPE.itemsize} bytes) after byte 16, got {len(body)}")
    rec = np.frombuffer(body, dtype=_RECORD_DTYPE)
    if count:
        pad = np.frombuffer(body, dtype=np.uint8).reshape(count, 16)[:, 1:8]
        if pad.any():
            bad = int(np.flatnonzero(pad.any(axis=1))[0])
            raise TagFileError(
                f"{path}: reserved bytes not zero in record {bad} "
                f"at byte {_HEADER.size + bad * _RECORD_DTYPE.itemsize}")
    out = {}
    for ch in np.unique(rec["channel"]):
        tags = rec["time_ps"][rec["channel"] == ch]
        if len(tags) > 1 and np.any(np.diff(tags) < 0):
            raise TagFileError(f"{path}: channel {int(ch)} tags not sorted")
        out[int(ch)] = tags.astype(np.int64)
    return out


def encode_tags_csv(streams) -> str:
    chans = _normalize(streams)
    lines = []
    for ch, tags in chans.items():
        lines.extend(f"{ch},{int(t)}" for t in tags)
    return "\n".join(lines) + ("\n" if lines else "")


def write_tags_csv(streams, path):
    atomic_write_text(path, encode_tags_csv(streams))


def read_tags_csv(path) -> dict:
    """Read a CSV tag file into {channel: sorted int64 array}."""
    out = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise TagFileError(f"{path}: line {lineno}: expected 'channel,time_ps'")
            try:
                ch, t = int(parts[0]), int(parts[1])
            except ValueError:
                raise TagFileError(f"{path}: line {lineno}: non-integer field") from None
            if not 0 <= ch <= 255:
                raise TagFileError(f"{path}: line {lineno}: channel out of range")
            out.setdefault(ch, []).append(t)
    result = {}
    for ch, tags in out.items():
        arr = np.asarray(tags, dtype=np.int64)
        if len(arr) > 1 and np.any(np.diff(arr) < 0):
            raise TagFileError(f"{path}: channel {ch} tags not sorted")
        result[ch] = arr
    return dict(sorted(result.items()))


def streams_from_dict(chans: dict) -> list:
    return [TimeTagStream(channel_id=ch, tags_ps=tags) for ch, tags in sorted(chans.items())]


def read_tags(path) -> dict:
    """Dispatch on content: binary magic or CSV text."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == MAGIC:
        return read_tags_binary(path)
    return read_tags_csv(path)
