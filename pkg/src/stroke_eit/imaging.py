"""Portable pixmap/graymap images of nodal fields.

Binary PPM (P6) and PGM (P5) contain no metadata, so identical fields give
identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import Mesh, locate_points

BACKGROUND = (40, 40, 40)


def diverging_colormap(t: np.ndarray) -> np.ndarray:
    """Blue (-1) through white (0) to red (+1); ``t`` is clipped to [-1, 1]."""
    t = np.clip(np.asarray(t, dtype=float), -1.0, 1.0)
    pos = np.clip(t, 0, 1)[..., None]
    neg = np.clip(-t, 0, 1)[..., None]
    white = np.array([255.0, 255.0, 255.0])
    red = np.array([178.0, 24.0, 43.0])
    blue = np.array([33.0, 102.0, 172.0])
    rgb = white + pos * (red - white) + neg * (blue - white)
    return np.round(rgb).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_pnm(path):
    """(magic, width, height, pixel bytes) of a binary PGM/PPM file."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    magic = parts[0].decode()
    w, h = (int(v) for v in parts[1].split())
    return magic, w, h, parts[3]


def _sample_plane(mesh: Mesh, field: np.ndarray, plane_points: np.ndarray, inside: np.ndarray):
    values = np.full(len(plane_points), np.nan)
    if inside.any():
        # points near the curved boundary beyond the tolerance stay background
        el, lam = locate_points(mesh, plane_points[inside], tol=1e-3 * mesh.radii.get("outer", 1.0),
                                missing="mask")
        hit = el >= 0
        vals = np.full(len(el), np.nan)
        vals[hit] = np.einsum("pi,pi->p", lam[hit], field[mesh.elements[el[hit]]])
        values[inside] = vals
    return values


def raster_slices(mesh: Mesh, field: np.ndarray, size: int = 128):
    """List of (name, 2D array with NaN outside) slices of a nodal field.

    2D meshes give the full field; 3D meshes give the three axis-aligned
    mid-slices through the origin.
    """
    R = float(mesh.radii.get("outer", np.abs(mesh.nodes).max()))
    c = (np.arange(size) + 0.5) / size * 2 * R - R
    U, V = np.meshgrid(c, -c)  # image rows run top to bottom
    u, v = U.ravel(), V.ravel()
    inside = u * u + v * v < (R * (1 - 1e-9)) ** 2
    field = np.asarray(field, dtype=float)
    if mesh.dimension == 2:
        pts = np.column_stack([u, v])
        return [("full", _sample_plane(mesh, field, pts, inside).reshape(size, size))]
    zeros = np.zeros_like(u)
    planes = {
        "xy": np.column_stack([u, v, zeros]),
        "xz": np.column_stack([u, zeros, v]),
        "yz": np.column_stack([zeros, u, v]),
    }
    return [(name, _sample_plane(mesh, field, pts, inside).reshape(size, size))
            for name, pts in planes.items()]


def render_field(values: np.ndarray, scale: float | None = None) -> np.ndarray:
    """RGB image of a sliced field with a symmetric colour scale."""
    finite = np.isfinite(values)
    if scale is None:
        scale = float(np.abs(values[finite]).max()) if finite.any() else 1.0
    scale = scale if scale > 0 else 1.0
    rgb = np.empty(values.shape + (3,), dtype=np.uint8)
    rgb[...] = BACKGROUND
    rgb[finite] = diverging_colormap(values[finite] / scale)
    return rgb


def save_field_images(mesh: Mesh, field: np.ndarray, stem, size: int = 128,
                      scale: float | None = None) -> list[Path]:
    """Write one PPM per slice as ``<stem>_<slice>.ppm``; returns the paths."""
    paths = []
    for name, values in raster_slices(mesh, field, size):
        path = Path(f"{stem}_{name}.ppm")
        write_ppm(path, render_field(values, scale))
        paths.append(path)
    return paths


def save_mask_image(mesh: Mesh, field: np.ndarray, stem, size: int = 128) -> list[Path]:
    """Graymap of the half-maximum mask (white inside, black outside)."""
    peak = float(np.max(field))
    paths = []
    for name, values in raster_slices(mesh, field, size):
        gray = np.zeros(values.shape, dtype=np.uint8)
        if peak > 0:
            gray[np.nan_to_num(values, nan=-np.inf) >= 0.5 * peak] = 255
        path = Path(f"{stem}_{name}_mask.pgm")
        write_pgm(path, gray)
        paths.append(path)
    return paths
