"""Plain-text scan and trajectory files.

Trajectory: one ``timestamp tx ty tz qx qy qz qw`` record per line, ``#`` starts
a comment. Scan: a ``MARS-SCAN v1 <scan_id> <base_timestamp> <num_points>``
header followed by one ``x y z t_offset`` line per point.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .lie import RigidTransform
from .pipeline import ScanFrame

SCAN_MAGIC = "MARS-SCAN"
SCAN_VERSION = "v1"
SCAN_SUFFIX = ".scan"


class FormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


def _num(x: float) -> str:
    return repr(float(x))


def format_trajectory(records) -> str:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, pose in records:
        q = pose.quaternion()
        lines.append(" ".join(_num(v) for v in (t, *pose.translation, *q)))
    return "\n".join(lines) + "\n"


def write_trajectory(path, records) -> None:
    Path(path).write_text(format_trajectory(records))


def read_trajectory(path) -> list[tuple[float, RigidTransform]]:
    out = []
    last = -np.inf
    with open(path) as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 8:
                raise FormatError(path, no, f"expected 8 fields, found {len(fields)}")
            try:
                v = [float(f) for f in fields]
            except ValueError:
                raise FormatError(path, no, "non-numeric field") from None
            if not np.all(np.isfinite(v)):
                raise FormatError(path, no, "non-finite value")
            q = np.array(v[4:])
            if np.linalg.norm(q) < 1e-12:
                raise FormatError(path, no, "zero quaternion")
            if v[0] <= last:
                raise FormatError(path, no, "timestamps must be strictly increasing")
            last = v[0]
            out.append((v[0], RigidTransform.from_quaternion(q, v[1:4])))
    return out


def format_scan(frame: ScanFrame) -> str:
    sid = str(frame.scan_id)
    if not sid or any(c.isspace() for c in sid):
        raise ValueError("scan_id must be a non-empty token without whitespace")
    header = f"{SCAN_MAGIC} {SCAN_VERSION} {sid} {_num(frame.base_timestamp)} {len(frame)}"
    body = [" ".join(_num(v) for v in (*p, o)) for p, o in zip(frame.points, frame.offsets)]
    return "\n".join([header, *body]) + "\n"


def write_scan(path, frame: ScanFrame) -> None:
    Path(path).write_text(format_scan(frame))


def read_scan(path) -> ScanFrame:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(path, 1, "empty file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != SCAN_MAGIC:
        raise FormatError(path, 1, f"expected '{SCAN_MAGIC} {SCAN_VERSION} <scan_id> <base_timestamp> <num_points>'")
    if head[1] != SCAN_VERSION:
        raise FormatError(path, 1, f"unsupported version {head[1]!r}")
    try:
        stamp = float(head[3])
        n = int(head[4])
    except ValueError:
        raise FormatError(path, 1, "bad timestamp or point count") from None
    if n < 0 or not np.isfinite(stamp):
        raise FormatError(path, 1, "bad timestamp or point count")
    body = [(no, ln) for no, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if len(body) != n:
        raise FormatError(path, None, f"header announces {n} points, found {len(body)}")
    data = np.empty((n, 4))
    for i, (no, ln) in enumerate(body):
        fields = ln.split()
        if len(fields) != 4:
            raise FormatError(path, no, f"expected 4 fields, found {len(fields)}")
        try:
            data[i] = [float(f) for f in fields]
        except ValueError:
            raise FormatError(path, no, "non-numeric field") from None
        if not np.all(np.isfinite(data[i])):
            raise FormatError(path, no, "non-finite value")
    sid: object = int(head[2]) if head[2].lstrip("-").isdigit() else head[2]
    return ScanFrame(sid, stamp, data[:, :3], data[:, 3])


def list_scan_files(directory) -> list[Path]:
    """Scan files of a directory in lexicographic filename order."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted((p for p in d.iterdir() if p.suffix == SCAN_SUFFIX and p.is_file()), key=lambda p: p.name)


def scan_filename(index: int) -> str:
    return f"scan_{index:06d}{SCAN_SUFFIX}"


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary sibling so a failed run leaves no partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
