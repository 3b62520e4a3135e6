"""Writers for 8-bit PNG, portable float maps and ASCII OBJ meshes."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    """Write an (H, W), (H, W, 3) or (H, W, 4) image with values in [0, 1]."""
    arr = to_uint8(np.asarray(image, dtype=np.float64))
    Image.fromarray(arr).save(Path(path), format="PNG", optimize=False)


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM; rows are stored bottom to top as the format requires."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        header = "Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError("PFM supports (H, W) or (H, W, 3) arrays")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        channels = 3 if header == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_obj(path, mesh) -> None:
    lines = ["# adapterlab mesh"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    has_uv = mesh.uv is not None
    if has_uv:
        lines += [f"vt {u:.9g} {v:.9g}" for u, v in mesh.uv]
    for a, b, c in mesh.faces + 1:
        lines.append(f"f {a}/{a} {b}/{b} {c}/{c}" if has_uv else f"f {a} {b} {c}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    from .mesh import TriMesh

    verts, uvs, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(p) for p in parts[1:3]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    uv = np.asarray(uvs) if uvs else None
    return TriMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3), uv=uv)
