"""Plain (ASCII, ``P2``) portable graymap output."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_gray(values, maxval: int = 255) -> np.ndarray:
    """Min-max scale to integers in ``[0, maxval]``; a constant input maps to 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {v.shape}")
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.int64)
    return np.rint((v - lo) / (hi - lo) * maxval).astype(np.int64)


def format_pgm(values, maxval: int = 255, scale: int = 1, comment: str | None = None) -> str:
    """Render ``values`` as plain PGM text; ``scale`` repeats each cell as a block."""
    g = to_gray(values, maxval)
    if scale > 1:
        g = np.kron(g, np.ones((scale, scale), dtype=np.int64))
    h, w = g.shape
    lines = ["P2"]
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines.append(f"{w} {h}")
    lines.append(str(maxval))
    lines += [" ".join(str(int(x)) for x in row) for row in g]
    return "\n".join(lines) + "\n"


def write_pgm(path, values, maxval: int = 255, scale: int = 1, comment: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_pgm(values, maxval, scale, comment))
    return path


def read_pgm(path) -> np.ndarray:
    """Parse a plain PGM file (comments allowed) into an integer array."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens += line.split()
    if not tokens or tokens[0] != "P2":
        raise ValueError("not a plain PGM (P2) file")
    w, h, _maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if data.size != w * h:
        raise ValueError(f"expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w)
