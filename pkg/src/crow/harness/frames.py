"""PGM (P5) frame emission."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from crow.errors import ShapeError
from crow.harness.io import atomic_write_bytes


def to_bytes(frame: np.ndarray) -> tuple[np.ndarray, int]:
    """Clip to [0, 1], scale to 0..255. Also returns how many pixels were clipped."""
    f = np.asarray(frame, dtype=np.float64)
    clipped = int(np.count_nonzero((f < 0.0) | (f > 1.0)))
    return np.rint(np.clip(f, 0.0, 1.0) * 255.0).astype(np.uint8), clipped


def encode_pgm(frame: np.ndarray, rows: int, cols: int) -> tuple[bytes, int]:
    pix, clipped = to_bytes(frame)
    header = f"P5\n{cols} {rows}\n255\n".encode("ascii")
    return header + pix.reshape(rows, cols).tobytes(), clipped


def write_frames_pgm(frames, grid, out_dir) -> dict:
    """Write frame_<t>.pgm (t from 1) for each row of ``frames`` (T, rows*cols)."""
    rows, cols = grid
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 1:
        frames = frames[None]
    if frames.shape[-1] != rows * cols:
        raise ShapeError(f"frame width {frames.shape[-1]} != {rows}x{cols} grid")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create frame directory {out_dir}: {exc}") from exc
    files, clipped = [], 0
    for t, frame in enumerate(frames, start=1):
        data, c = encode_pgm(frame, rows, cols)
        path = out_dir / f"frame_{t}.pgm"
        atomic_write_bytes(path, data)
        files.append(str(path))
        clipped += c
    return {"files": files, "clipped_pixels": clipped}
