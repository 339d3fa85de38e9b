"""Binary PPM/PGM image output: P6 8-bit RGB, P5 16-bit millimeter depth."""

from __future__ import annotations

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary 8-bit P6."""
    h, w, _ = rgb.shape
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_pgm16(path, depth_m: np.ndarray) -> None:
    """Write an (H, W) float depth image (meters) as 16-bit P5 in millimeters."""
    h, w = depth_m.shape
    mm = np.clip(np.round(depth_m * 1000.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(mm.tobytes())


def _read_header(f, magic: bytes) -> tuple[int, int, int]:
    tokens = []
    while len(tokens) < 4:
        line = f.readline()
        if not line:
            raise ValueError("truncated netpbm header")
        body = line.split(b"#", 1)[0]
        tokens.extend(body.split())
    if tokens[0] != magic:
        raise ValueError(f"expected {magic.decode()}, got {tokens[0].decode()}")
    return int(tokens[1]), int(tokens[2]), int(tokens[3])


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back to (H, W, 3) float in [0, 1]."""
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P6")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def read_pgm16(path) -> np.ndarray:
    """Read a binary 16-bit P5 file back to (H, W) float meters."""
    with open(path, "rb") as f:
        w, h, _ = _read_header(f, b"P5")
        data = np.frombuffer(f.read(w * h * 2), dtype=">u2")
    return data.reshape(h, w).astype(np.float64) / 1000.0
