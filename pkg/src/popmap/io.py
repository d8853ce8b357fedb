"""Binary population cubes and 16-bit PGM export.

A cube file is the magic ``PCB1``, then T, H, W as little-endian u64, then
T*H*W little-endian f64 values in frame-major order. Timestamps are implied:
frame i is day i // 24, hour i % 24.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from popmap.errors import InputError
from popmap.preprocess import GridMap, PopCube, hourly_timestamps, write_gridmap_csv

CUBE_MAGIC = b"PCB1"


def write_cube(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f8")
    if frames.ndim != 3:
        raise InputError(f"cube must be T x H x W, got {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<3Q", *frames.shape))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_cube_frames(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != CUBE_MAGIC:
        raise InputError(f"{path}: not a population cube (bad magic)")
    t, h, w = struct.unpack_from("<3Q", buf, 4)
    expected = 4 + 24 + 8 * t * h * w
    if len(buf) != expected:
        raise InputError(f"{path}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f8", offset=28).reshape(t, h, w).astype(np.float64)


def read_cube(path: str | Path, mask: np.ndarray, level: str = "fine") -> PopCube:
    frames = read_cube_frames(path)
    if frames.shape[1:] != mask.shape:
        raise InputError(f"{path}: grid {frames.shape[1:]} does not match mask {mask.shape}")
    if len(frames) % 24:
        raise InputError(f"{path}: {len(frames)} frames is not a whole number of days")
    return PopCube(frames, hourly_timestamps(len(frames) // 24), level, mask)


def export_pgm16(frames: np.ndarray, out_dir: str | Path, prefix: str = "frame") -> list[Path]:
    """One binary 16-bit PGM per frame scaled by a shared factor.

    ``pixel * scale`` recovers persons; ``scale`` goes into ``scale.json``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    peak = float(frames.max())
    scale = peak / 65535 if peak > 0 else 1.0
    paths = []
    for i, f in enumerate(frames):
        pix = np.clip(np.rint(f / scale), 0, 65535).astype(">u2")
        p = out / f"{prefix}_{i:03d}.pgm"
        h, w = pix.shape
        p.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + pix.tobytes())
        paths.append(p)
    (out / "scale.json").write_text(json.dumps({"scale": scale, "max_population": peak, "frames": len(frames)}))
    return paths


def read_pgm16(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:  # magic, width, height, maxval; one whitespace byte ends the header
        while buf[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not buf[end : end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 65535:
        raise InputError(f"{path}: not a 16-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(buf[pos + 1 : pos + 1 + 2 * w * h], dtype=">u2").reshape(h, w).astype(np.int64)


def export_csv(cube: PopCube, out_dir: str | Path, prefix: str = "frame") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (day, hour) in enumerate(cube.timestamps):
        p = out / f"{prefix}_{i:03d}.csv"
        write_gridmap_csv(p, GridMap(cube.frames[i], cube.level, cube.mask), day, hour)
        paths.append(p)
    return paths
