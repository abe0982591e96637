"""Image-quality metrics for difference reconstructions.

Half-maximum masks are superlevel sets of the P1 field. On each simplex the
set {f >= t} is a convex polytope whose vertices are the simplex vertices
above the threshold and the level-set crossings on the edges, so its measure
and centroid are computed exactly by splitting it into simplices.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import Mesh

CSV_COLUMNS = ("caseId", "method", "mse", "psnr", "comError", "volumeError")


@dataclass(frozen=True)
class MetricsRecord:
    mse: float
    psnr: float | None
    com_error: float | None
    volume_error: float
    threshold_used: float
    recon_volume: float = 0.0
    truth_volume: float = 0.0

    def row(self, case_id: str, method: str) -> dict:
        def fmt(v):
            return "n/a" if v is None else repr(float(v))
        return {
            "caseId": case_id,
            "method": method,
            "mse": fmt(self.mse),
            "psnr": fmt(self.psnr),
            "comError": fmt(self.com_error),
            "volumeError": fmt(self.volume_error),
        }


def _simplex_moments(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Measures ``(C,)`` and first moments ``(C, d)`` of simplices ``P`` ``(C, d+1, d)``."""
    d = P.shape[2]
    vol = np.abs(np.linalg.det(P[:, 1:, :] - P[:, :1, :])) / math.factorial(d)
    return vol, vol[:, None] * P.mean(axis=1)


def _cut_moments(vals: np.ndarray, X: np.ndarray, t: float) -> tuple[float, np.ndarray]:
    """Exact moments of {f >= t} over simplices that the level set cuts."""
    order = np.argsort(-vals, axis=1, kind="stable")
    v = np.take_along_axis(vals, order, axis=1)
    x = np.take_along_axis(X, order[:, :, None], axis=1)
    k = (v >= t).sum(axis=1)  # vertices above, 1..d
    d = X.shape[2]

    def cross(i, j, sel):
        s = ((v[sel, i] - t) / (v[sel, i] - v[sel, j]))[:, None]
        return x[sel, i] + s * (x[sel, j] - x[sel, i])

    measure, moment = 0.0, np.zeros(d)

    def add(pieces, sign=1.0):
        nonlocal measure, moment
        vol, mom = _simplex_moments(np.stack(pieces, axis=1))
        measure += sign * float(vol.sum())
        moment = moment + sign * mom.sum(axis=0)

    # one vertex above: the corner simplex at that vertex
    sel = k == 1
    if sel.any():
        add([x[sel, 0]] + [cross(0, j, sel) for j in range(1, d + 1)])
    # one vertex below: the whole simplex minus the corner at that vertex
    sel = k == d
    if d > 1 and sel.any():
        add([x[sel, j] for j in range(d + 1)])
        add([x[sel, d]] + [cross(i, d, sel) for i in range(d)], -1.0)
    # tetrahedron split two and two: a prism, three tetrahedra
    sel = k == 2
    if d == 3 and sel.any():
        a1, a2, a3 = x[sel, 0], cross(0, 2, sel), cross(0, 3, sel)
        b1, b2, b3 = x[sel, 1], cross(1, 2, sel), cross(1, 3, sel)
        add([a1, a2, a3, b3])
        add([a1, a2, b2, b3])
        add([a1, b1, b2, b3])
    return measure, moment


def superlevel_moments(field: np.ndarray, mesh: Mesh, threshold: float) -> tuple[float, np.ndarray]:
    """Measure and first moment of {x : field(x) >= threshold}."""
    vals = np.asarray(field, dtype=float)[mesh.elements]  # (M, d+1)
    coords = mesh.nodes[mesh.elements]
    vol = mesh.element_measures()
    lo, hi = vals.min(axis=1), vals.max(axis=1)
    full = lo >= threshold
    cut = (hi >= threshold) & ~full
    measure = float(vol[full].sum())
    moment = (vol[full, None] * coords[full].mean(axis=1)).sum(axis=0)
    if np.any(cut):
        m, mom = _cut_moments(vals[cut], coords[cut], threshold)
        measure += m
        moment = moment + mom
    return measure, moment


def half_max_mask(field: np.ndarray, mesh: Mesh):
    """(measure, centroid or None, threshold) of the half-maximum superlevel set."""
    peak = float(np.max(field))
    if peak <= 0:
        return 0.0, None, 0.0
    t = 0.5 * peak
    m, mom = superlevel_moments(field, mesh, t)
    return m, (mom / m if m > 0 else None), t


def evaluate(recon: np.ndarray, truth: np.ndarray, mesh: Mesh) -> MetricsRecord:
    """MSE, PSNR, centre-of-mass error and signed volume error."""
    recon = np.asarray(recon, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if recon.shape != (mesh.node_count,) or truth.shape != (mesh.node_count,):
        raise ValueError("recon and truth must be nodal fields on the mesh")
    mse = float(np.mean((recon - truth) ** 2))
    tmax = float(truth.max())
    if tmax > 0:
        psnr = math.inf if mse == 0 else 10.0 * math.log10(tmax ** 2 / mse)
    else:
        psnr = None
    vr, cr, thr = half_max_mask(recon, mesh)
    vt, ct, _ = half_max_mask(truth, mesh)
    com = None if cr is None or ct is None else float(np.linalg.norm(cr - ct))
    return MetricsRecord(mse, psnr, com, vr - vt, thr, vr, vt)


def write_metrics_csv(path, rows: list[dict], columns=CSV_COLUMNS) -> None:
    """Rows in the given column order; extra keys in a row are dropped."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_metrics_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
