"""Text manifests, PPM images and RKVT tensor directories."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .tensorcore import rkvt


def write_manifest(path, items: dict):
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_tensor_dir(path, arrays: dict, manifest: dict):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        rkvt.save(path / f"{name}.rkvt", arr)
    write_manifest(path / "manifest.txt", manifest)


def load_tensor_dir(path):
    path = Path(path)
    if not (path / "manifest.txt").exists():
        raise FileNotFoundError(f"{path / 'manifest.txt'} not found")
    manifest = read_manifest(path / "manifest.txt")
    arrays = {p.name[: -len(".rkvt")]: rkvt.load(p) for p in sorted(path.glob("*.rkvt"))}
    return arrays, manifest


# ---------------------------------------------------------------- PPM (P6)


def write_ppm(path, image):
    """image: float (3, H, W) in [0, 1] or uint8 (H, W, 3)."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def read_ppm(path) -> np.ndarray:
    """Return float32 (3, H, W) in [0, 1]."""
    buf = Path(path).read_bytes()
    m = _PPM_HEADER.match(buf)
    if not m:
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return (data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0).copy()
