"""Layered head-phantom meshes, graph extraction and P1 interpolation.

The 2D head is a disk built from concentric node rings that are triangulated
with Delaunay; the 3D head is a ball obtained by mapping a Kuhn-subdivided
cube lattice radially onto concentric spheres. In both cases the tissue
interfaces coincide with node rings/shells, so element layer tags (assigned by
centroid radius) follow the interfaces exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from itertools import permutations
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, cKDTree

MESH_FORMAT_VERSION = 1

BRAIN, SKULL, SKIN, NONE = 0, 1, 2, -1
LAYER_NAMES = {BRAIN: "brain", SKULL: "skull", SKIN: "skin", NONE: "none"}
LAYER_CODES = {v: k for k, v in LAYER_NAMES.items()}


class MeshError(ValueError):
    """Invalid mesh or infeasible geometry specification."""


class OutOfDomainError(MeshError):
    """A destination point lies outside the source mesh."""


@dataclass(frozen=True)
class HeadGeometrySpec:
    """Concentric three-layer head geometry.

    ``electrode_width`` is an arc length in meters. In 3D it is the diameter
    of a spherical cap measured along the surface. ``None`` selects the
    width for which the electrodes cover half of the boundary.
    """

    outer_radius: float = 0.095
    skin_thickness: float = 0.007
    skull_thickness: float = 0.008
    electrode_count: int = 16
    electrode_width: float | None = None
    target_element_size: float = 0.003
    electrode_refinement_levels: int = 0

    @classmethod
    def default_2d(cls) -> "HeadGeometrySpec":
        return cls(electrode_count=16, target_element_size=0.0025, electrode_refinement_levels=4)

    @classmethod
    def default_3d(cls) -> "HeadGeometrySpec":
        return cls(electrode_count=32, target_element_size=0.0075)

    @property
    def brain_radius(self) -> float:
        return self.outer_radius - self.skin_thickness - self.skull_thickness

    @property
    def skull_outer_radius(self) -> float:
        return self.outer_radius - self.skin_thickness

    def validate(self) -> None:
        if not (self.outer_radius > self.skin_thickness + self.skull_thickness > 0):
            raise MeshError("need outer_radius > skin + skull thickness > 0")
        if self.skin_thickness <= 0 or self.skull_thickness <= 0:
            raise MeshError("layer thicknesses must be positive")
        if self.electrode_count < 2:
            raise MeshError("at least two electrodes are required")
        if self.target_element_size <= 0:
            raise MeshError("target_element_size must be positive")
        if self.electrode_width is not None and self.electrode_width <= 0:
            raise MeshError("electrode_width must be positive")
        if self.electrode_refinement_levels < 0:
            raise MeshError("electrode_refinement_levels must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "outer_radius": self.outer_radius,
            "skin_thickness": self.skin_thickness,
            "skull_thickness": self.skull_thickness,
            "electrode_count": self.electrode_count,
            "electrode_width": self.electrode_width,
            "target_element_size": self.target_element_size,
            "electrode_refinement_levels": self.electrode_refinement_levels,
        }

    def refined(self) -> "HeadGeometrySpec":
        """Spec for a mesh with about four times the element count (2D)."""
        return replace(self, target_element_size=self.target_element_size / 2,
                       electrode_refinement_levels=self.electrode_refinement_levels + 1)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simplicial mesh with boundary electrode patches.

    Attributes
    ----------
    nodes : (N, d) float array of coordinates in meters.
    elements : (M, d+1) int array, positively oriented simplices.
    boundary_facets : (F, d) int array, oriented with outward normals.
    electrodes : tuple of int arrays indexing ``boundary_facets``.
    layer_tags : (M,) int array of layer codes.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_facets: np.ndarray
    electrodes: tuple
    layer_tags: np.ndarray
    radii: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("nodes", "elements", "boundary_facets", "layer_tags"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        for e in self.electrodes:
            e.setflags(write=False)

    @property
    def dimension(self) -> int:
        return self.nodes.shape[1]

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]

    @property
    def element_count(self) -> int:
        return self.elements.shape[0]

    @property
    def electrode_count(self) -> int:
        return len(self.electrodes)

    @property
    def mesh_id(self) -> str:
        cached = self.__dict__.get("_mesh_id")
        if cached is None:
            h = hashlib.sha256()
            h.update(np.ascontiguousarray(self.nodes, dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(self.elements, dtype=np.int64).tobytes())
            for e in self.electrodes:
                h.update(np.asarray(e, dtype=np.int64).tobytes())
                h.update(b"|")
            cached = h.hexdigest()[:16]
            object.__setattr__(self, "_mesh_id", cached)
        return cached

    def element_measures(self) -> np.ndarray:
        return simplex_measures(self.nodes[self.elements])

    def facet_measures(self, facets: np.ndarray | None = None) -> np.ndarray:
        facets = self.boundary_facets if facets is None else facets
        return facet_measures(self.nodes[facets])

    def validate(self) -> None:
        """Raise :class:`MeshError` if an invariant is violated."""
        n = self.node_count
        d = self.dimension
        if d not in (2, 3):
            raise MeshError(f"unsupported dimension {d}")
        if self.elements.shape[1] != d + 1 or self.boundary_facets.shape[1] != d:
            raise MeshError("element/facet arity does not match dimension")
        if self.elements.min() < 0 or self.elements.max() >= n:
            raise MeshError("element node index out of range")
        if np.any(self.element_measures() <= 0):
            raise MeshError("element with nonpositive measure")
        if len(self.electrodes) < 2:
            raise MeshError("need at least two electrodes")
        seen = np.concatenate([np.asarray(e) for e in self.electrodes])
        if len(np.unique(seen)) != len(seen):
            raise MeshError("electrode facet sets overlap")
        if seen.min() < 0 or seen.max() >= len(self.boundary_facets):
            raise MeshError("electrode facet index out of range")
        expected = {tuple(sorted(f)) for f in _boundary_facets_unoriented(self.elements)}
        for f in self.boundary_facets[seen]:
            if tuple(sorted(f)) not in expected:
                raise MeshError("electrode facet is not on the boundary")

    def to_dict(self) -> dict:
        return {
            "version": MESH_FORMAT_VERSION,
            "meshId": self.mesh_id,
            "dimension": self.dimension,
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "boundaryFacets": self.boundary_facets.tolist(),
            "electrodes": [np.asarray(e).tolist() for e in self.electrodes],
            "layerTags": [LAYER_NAMES[int(t)] for t in self.layer_tags],
            "radii": dict(self.radii),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mesh":
        if data.get("version") != MESH_FORMAT_VERSION:
            raise MeshError(f"unsupported mesh file version {data.get('version')!r}")
        d = int(data["dimension"])
        nodes = np.asarray(data["nodes"], dtype=float).reshape(-1, d)
        mesh = cls(
            nodes=nodes,
            elements=np.asarray(data["elements"], dtype=np.int64).reshape(-1, d + 1),
            boundary_facets=np.asarray(data["boundaryFacets"], dtype=np.int64).reshape(-1, d),
            electrodes=tuple(np.asarray(e, dtype=np.int64) for e in data["electrodes"]),
            layer_tags=np.array([LAYER_CODES[t] for t in data["layerTags"]], dtype=np.int64),
            radii={k: float(v) for k, v in data.get("radii", {}).items()},
        )
        mesh.validate()
        return mesh


def save_mesh(mesh: Mesh, path, extra: dict | None = None) -> None:
    payload = mesh.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload))


def load_mesh(path) -> Mesh:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MeshError(f"corrupt mesh file {path}: {exc}") from exc
    return Mesh.from_dict(data)


# --------------------------------------------------------------------------
# simplex geometry


def simplex_measures(coords: np.ndarray) -> np.ndarray:
    """Signed measures of simplices given as (M, d+1, d) coordinates."""
    edges = coords[:, 1:, :] - coords[:, :1, :]
    d = coords.shape[2]
    return np.linalg.det(edges) / math.factorial(d)


def facet_measures(coords: np.ndarray) -> np.ndarray:
    """Measures of (d-1)-simplices embedded in R^d, coords (F, d, d)."""
    edges = coords[:, 1:, :] - coords[:, :1, :]
    gram = np.einsum("fik,fjk->fij", edges, edges)
    k = edges.shape[1]
    return np.sqrt(np.maximum(np.linalg.det(gram), 0.0)) / math.factorial(k)


def barycentric_gradients(coords: np.ndarray) -> np.ndarray:
    """Constant gradients of the P1 basis on each simplex, shape (M, d, d+1)."""
    edges = coords[:, 1:, :] - coords[:, :1, :]  # (M, d, d)
    inv = np.linalg.inv(edges)  # columns: gradients of lambda_1..lambda_d
    d = coords.shape[2]
    grads = np.empty((coords.shape[0], d, d + 1))
    grads[:, :, 1:] = inv
    grads[:, :, 0] = -inv.sum(axis=2)
    return grads


def _boundary_facets_unoriented(elements: np.ndarray) -> np.ndarray:
    k = elements.shape[1]
    faces = np.concatenate([np.delete(elements, i, axis=1) for i in range(k)])
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return faces[counts[inv.ravel()] == 1]


def boundary_facets(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Facets used by exactly one element, oriented with outward normals."""
    k = elements.shape[1]
    faces = np.concatenate([np.delete(elements, i, axis=1) for i in range(k)])
    opposite = np.concatenate([elements[:, i] for i in range(k)])
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    mask = counts[inv.ravel()] == 1
    faces, opposite = faces[mask].copy(), opposite[mask]
    away = nodes[faces].mean(axis=1) - nodes[opposite]
    flip = np.einsum("fi,fi->f", facet_normals(nodes[faces]), away) < 0
    faces[flip, :2] = faces[flip, 1::-1]
    return faces


def facet_normals(coords: np.ndarray) -> np.ndarray:
    """Unnormalized facet normals: (dy, -dx) in 2D, (b-a) x (c-a) in 3D."""
    if coords.shape[2] == 2:
        t = coords[:, 1] - coords[:, 0]
        return np.column_stack([t[:, 1], -t[:, 0]])
    return np.cross(coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0])


def _orient(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    elements = elements.copy()
    vol = simplex_measures(nodes[elements])
    neg = vol < 0
    elements[neg, :2] = elements[neg, 1::-1]
    return elements


def node_lumped_measures(mesh: Mesh) -> np.ndarray:
    """Share of the domain measure attributed to each node (vertex rule)."""
    vol = mesh.element_measures() / (mesh.dimension + 1)
    return np.bincount(mesh.elements.ravel(), np.repeat(vol, mesh.dimension + 1),
                       minlength=mesh.node_count)


def node_layers(mesh: Mesh) -> np.ndarray:
    """Layer code per node; skull wins on interfaces, then skin, then brain.

    The insulating skull must keep its value on the interface nodes, otherwise
    a one-element-thick skull would carry no skull nodes at all.
    """
    out = np.full(mesh.node_count, NONE, dtype=np.int64)
    for code in (BRAIN, SKIN, SKULL):
        nodes = np.unique(mesh.elements[mesh.layer_tags == code])
        out[nodes] = code
    return out


# --------------------------------------------------------------------------
# generation


def _layer_radii(spec: HeadGeometrySpec, h: float) -> np.ndarray:
    """Increasing shell radii from 0 to outer_radius, interfaces included."""
    rb, rs, ro = spec.brain_radius, spec.skull_outer_radius, spec.outer_radius
    nb = max(2, int(round(rb / h)))
    ns = max(1, int(round(spec.skull_thickness / h)))
    nk = max(1, int(round(spec.skin_thickness / h)))
    return np.concatenate([
        np.linspace(0.0, rb, nb + 1),
        np.linspace(rb, rs, ns + 1)[1:],
        np.linspace(rs, ro, nk + 1)[1:],
    ])


def _tag_by_radius(centroid_radius: np.ndarray, spec: HeadGeometrySpec) -> np.ndarray:
    tags = np.full(centroid_radius.shape, BRAIN, dtype=np.int64)
    tags[centroid_radius > spec.brain_radius] = SKULL
    tags[centroid_radius > spec.skull_outer_radius] = SKIN
    return tags


def electrode_width_default(spec: HeadGeometrySpec, dimension: int) -> float:
    """Arc width giving 50 % total boundary coverage."""
    R, L = spec.outer_radius, spec.electrode_count
    if dimension == 2:
        return math.pi * R / L
    # cap of angular radius t: area 2 pi R^2 (1 - cos t) = 0.5 * 4 pi R^2 / L
    t = math.acos(1.0 - 1.0 / L)
    return 2.0 * t * R


def _disk_boundary_angles(spec: HeadGeometrySpec, h: float):
    R, L = spec.outer_radius, spec.electrode_count
    w = spec.electrode_width if spec.electrode_width is not None else electrode_width_default(spec, 2)
    w_ang = w / R
    period = 2 * math.pi / L
    if w_ang >= period:
        raise MeshError(f"{L} electrodes of width {w:.4g} m overlap on radius {R} m")
    h_ang = h / R
    n_e = max(1, int(round(w_ang / h_ang)))
    n_g = max(1, int(round((period - w_ang) / h_ang)))
    angles, on_electrode = [], []
    for ell in range(L):
        start = ell * period - w_ang / 2
        angles.extend(start + w_ang * np.arange(n_e) / n_e)
        on_electrode.extend([ell] * n_e)
        angles.extend(start + w_ang + (period - w_ang) * np.arange(n_g) / n_g)
        on_electrode.extend([-1] * n_g)
    return np.asarray(angles), np.asarray(on_electrode)


def _edge_fans(spec: HeadGeometrySpec, h: float, levels: int):
    """Graded node fans around every electrode edge.

    Level ``k`` adds two boundary points at arc distance ``h / 2**k`` from the
    edge and three interior points on the half circle of that radius.
    """
    R, L = spec.outer_radius, spec.electrode_count
    w = spec.electrode_width if spec.electrode_width is not None else electrode_width_default(spec, 2)
    edges = np.concatenate([ell * 2 * math.pi / L + np.array([-w, w]) / (2 * R) for ell in range(L)])
    boundary, interior = [], []
    fan = np.linspace(0.0, math.pi, 5)[1:-1]
    for te in edges:
        p = R * np.array([math.cos(te), math.sin(te)])
        tangent = np.array([-math.sin(te), math.cos(te)])
        inward = -p / R
        for k in range(1, levels + 1):
            rho = h * 2.0 ** (-k)
            boundary += [te - rho / R, te + rho / R]
            interior += [p + rho * (math.cos(a) * tangent + math.sin(a) * inward) for a in fan]
    return np.asarray(boundary), np.asarray(interior).reshape(-1, 2)


def _disk_mesh(spec: HeadGeometrySpec, h: float, levels: int) -> Mesh:
    R, L = spec.outer_radius, spec.electrode_count
    radii = _layer_radii(spec, h)
    angles_b, _ = _disk_boundary_angles(spec, h)
    fan_b, fan_i = _edge_fans(spec, h, levels)
    pts = [np.zeros((1, 2))]
    for i, r in enumerate(radii[1:-1], start=1):
        n = max(6, int(round(2 * math.pi * r / h)))
        theta = 2 * math.pi * (np.arange(n) + 0.5 * (i % 2)) / n
        pts.append(r * np.column_stack([np.cos(theta), np.sin(theta)]))
    pts.append(fan_i)
    angles_b = np.sort(np.mod(np.concatenate([angles_b, fan_b]), 2 * math.pi))
    pts.append(R * np.column_stack([np.cos(angles_b), np.sin(angles_b)]))
    nodes = np.concatenate(pts)
    tri = Delaunay(nodes)
    elements = _orient(nodes, tri.simplices.astype(np.int64))
    vol = simplex_measures(nodes[elements])
    elements = elements[vol > 1e-12 * h * h]
    facets = boundary_facets(nodes, elements)

    w = spec.electrode_width if spec.electrode_width is not None else electrode_width_default(spec, 2)
    mid = nodes[facets].mean(axis=1)
    ang = np.arctan2(mid[:, 1], mid[:, 0])
    electrodes = []
    for ell in range(L):
        offset = np.abs((ang - ell * 2 * math.pi / L + math.pi) % (2 * math.pi) - math.pi)
        electrodes.append(np.flatnonzero(offset < w / (2 * R)))

    centroid_r = np.linalg.norm(nodes[elements].mean(axis=1), axis=1)
    return Mesh(nodes, elements, facets, tuple(electrodes), _tag_by_radius(centroid_r, spec),
                radii=_radii_dict(spec))


def _radii_dict(spec: HeadGeometrySpec) -> dict:
    return {"outer": spec.outer_radius, "skullOuter": spec.skull_outer_radius,
            "brain": spec.brain_radius}


def fibonacci_sphere(n: int) -> np.ndarray:
    """Near-equispaced unit vectors on the sphere."""
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = math.pi * (3 - math.sqrt(5)) * k
    rho = np.sqrt(1 - z * z)
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


def _kuhn_cube_lattice(n: int):
    """Lattice points in [-n, n]^3 and six tetrahedra per unit cube.

    The Kuhn subdivision is mirrored per octant so that every tetrahedron
    contains the cube corner nearest the origin and the one farthest from it;
    mirrored cubes still share face diagonals across the coordinate planes.
    """
    m = 2 * n + 1
    grid = np.arange(-n, n + 1)
    I, J, K = np.meshgrid(grid, grid, grid, indexing="ij")
    pts = np.column_stack([I.ravel(), J.ravel(), K.ravel()]).astype(float)
    lo = np.arange(-n, n)
    ci, cj, ck = np.meshgrid(lo, lo, lo, indexing="ij")
    corner = np.column_stack([ci.ravel(), cj.ravel(), ck.ravel()])
    outward = np.where(corner >= 0, 1, -1)
    start = np.where(outward > 0, corner, corner + 1)  # corner nearest the origin
    strides = np.array([m * m, m, 1])

    def index(p):
        return (p + n) @ strides

    tets = []
    for perm in permutations(range(3)):
        p0 = start
        p1 = p0.copy()
        p1[:, perm[0]] += outward[:, perm[0]]
        p2 = p1.copy()
        p2[:, perm[1]] += outward[:, perm[1]]
        p3 = p2.copy()
        p3[:, perm[2]] += outward[:, perm[2]]
        tets.append(np.column_stack([index(p0), index(p1), index(p2), index(p3)]))
    return pts, np.concatenate(tets)


def _ball_mesh(spec: HeadGeometrySpec, h: float) -> Mesh:
    radii = _layer_radii(spec, h)
    n = len(radii) - 1
    lattice, tets = _kuhn_cube_lattice(n)
    shell = np.abs(lattice).max(axis=1).astype(int)
    norm2 = np.linalg.norm(lattice, axis=1)
    scale = np.zeros_like(norm2)
    nz = shell > 0
    scale[nz] = radii[shell[nz]] / norm2[nz]
    nodes = lattice * scale[:, None]
    elements = _orient(nodes, tets.astype(np.int64))
    facets = boundary_facets(nodes, elements)

    L = spec.electrode_count
    w = spec.electrode_width if spec.electrode_width is not None else electrode_width_default(spec, 3)
    cap = 0.5 * w / spec.outer_radius
    centers = fibonacci_sphere(L)
    cosang = np.clip(centers @ centers.T, -1, 1)
    np.fill_diagonal(cosang, -1)
    min_sep = float(np.arccos(cosang.max()))
    if min_sep <= 2 * cap:
        raise MeshError(f"{L} electrode caps of angular radius {cap:.3f} rad overlap")
    fc = nodes[facets].mean(axis=1)
    fc /= np.linalg.norm(fc, axis=1)[:, None]
    ang = np.arccos(np.clip(fc @ centers.T, -1, 1))  # (F, L)
    nearest = ang.argmin(axis=1)
    within = ang[np.arange(len(fc)), nearest] <= cap
    electrodes = tuple(np.flatnonzero(within & (nearest == ell)) for ell in range(L))
    if any(len(e) == 0 for e in electrodes):
        raise MeshError("mesh too coarse to resolve every electrode cap")

    centroid_r = np.linalg.norm(nodes[elements].mean(axis=1), axis=1)
    return Mesh(nodes, elements, facets, electrodes, _tag_by_radius(centroid_r, spec),
                radii=_radii_dict(spec))


def generate_head_mesh(spec: HeadGeometrySpec, dimension: int, density: str = "dense") -> Mesh:
    """Concentric skin/skull/brain disk (2D) or ball (3D) with electrodes.

    ``density="coarse"`` doubles the target element size and drops the
    electrode-edge refinement (2D), which gives at most half the element count
    of the dense mesh.
    """
    spec.validate()
    if dimension not in (2, 3):
        raise MeshError("dimension must be 2 or 3")
    if density not in ("dense", "coarse"):
        raise MeshError("density must be 'dense' or 'coarse'")
    h = spec.target_element_size * (2.0 if density == "coarse" else 1.0)
    if dimension == 2:
        levels = spec.electrode_refinement_levels if density == "dense" else 0
        mesh = _disk_mesh(spec, h, levels)
    else:
        mesh = _ball_mesh(spec, h)
    mesh.validate()
    return mesh


# --------------------------------------------------------------------------
# graph


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected mesh graph with the renormalized GCN adjacency."""

    node_count: int
    edges: np.ndarray  # (E, 2), i < j
    adjacency: sp.csr_matrix  # boolean structure without self-loops
    normalized_adjacency: sp.csr_matrix
    node_coordinates: np.ndarray | None = None
    graph_id: str = ""

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()


def normalize_adjacency(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    n = adjacency.shape[0]
    a = (adjacency.astype(bool).astype(float) + sp.identity(n, format="csr")).tocsr()
    a.data[:] = 1.0
    deg = np.asarray(a.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    out = sp.diags(dinv) @ a @ sp.diags(dinv)
    out = out.tocsr()
    out.sort_indices()
    return out


def graph_from_edges(n: int, edges: np.ndarray, coordinates=None, graph_id: str = "") -> Graph:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    data = np.ones(2 * len(edges))
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    adj.data[:] = 1.0
    adj.sort_indices()
    return Graph(n, edges, adj, normalize_adjacency(adj), coordinates, graph_id)


def extract_graph(mesh: Mesh) -> Graph:
    """Graph whose edges join nodes sharing an element."""
    k = mesh.elements.shape[1]
    pairs = [mesh.elements[:, [i, j]] for i in range(k) for j in range(i + 1, k)]
    pairs = np.sort(np.concatenate(pairs), axis=1)
    edges = np.unique(pairs, axis=0)
    return graph_from_edges(mesh.node_count, edges, mesh.nodes.copy(), mesh.mesh_id)


# --------------------------------------------------------------------------
# interpolation


def locate_points(mesh: Mesh, points: np.ndarray, tol: float | None = None,
                  candidates: int = 12, missing: str = "raise"):
    """Containing element and barycentric coordinates for each point.

    Points that fall in no element (curved boundary approximated by flat
    facets) use the element whose barycentric coordinates are least negative,
    provided the point is within ``tol`` of it. ``tol`` defaults to half the
    largest element diameter. Points farther away raise
    :class:`OutOfDomainError`, or get element index -1 when ``missing`` is
    ``"mask"``.
    """
    points = np.asarray(points, dtype=float)
    coords = mesh.nodes[mesh.elements]
    centroids = coords.mean(axis=1)
    edges = coords[:, 1:, :] - coords[:, :1, :]
    inv = np.linalg.inv(edges)  # maps x - x0 to (lambda_1..lambda_d)
    if tol is None:
        diam = np.linalg.norm(coords - centroids[:, None, :], axis=2).max()
        tol = float(diam)
    tree = cKDTree(centroids)
    k = min(candidates, mesh.element_count)
    _, cand = tree.query(points, k=k)
    cand = cand.reshape(len(points), k)

    def bary(el, pts):
        rel = pts - coords[el, 0, :]
        lam_tail = np.einsum("...ij,...j->...i", np.swapaxes(inv[el], -1, -2), rel)
        lam0 = 1.0 - lam_tail.sum(axis=-1, keepdims=True)
        return np.concatenate([lam0, lam_tail], axis=-1)

    lam = bary(cand, points[:, None, :])  # (P, k, d+1)
    score = lam.min(axis=2)
    best = score.argmax(axis=1)
    el = cand[np.arange(len(points)), best]
    lam_best = lam[np.arange(len(points)), best]
    bad = score[np.arange(len(points)), best] < -1e-10
    if np.any(bad):
        # wider search for points not contained in any of the nearest candidates
        for i in np.flatnonzero(bad):
            lam_all = bary(np.arange(mesh.element_count), points[i][None, :])
            j = int(lam_all.min(axis=1).argmax())
            el[i], lam_best[i] = j, lam_all[j]
        still = lam_best.min(axis=1) < -1e-10
        if np.any(still):
            proj = np.clip(lam_best[still], 0, None)
            proj /= proj.sum(axis=1, keepdims=True)
            nearest_pt = np.einsum("pi,pij->pj", proj, coords[el[still]])
            dist = np.linalg.norm(nearest_pt - points[still], axis=1)
            if np.any(dist > tol) and missing == "mask":
                idx = np.flatnonzero(still)[dist > tol]
                proj[dist > tol] = np.nan
                lam_best[still] = proj
                el[idx] = -1
                return el, lam_best
            if np.any(dist > tol):
                raise OutOfDomainError(
                    f"{int((dist > tol).sum())} point(s) outside the source mesh "
                    f"(max distance {dist.max():.3g} m > tolerance {tol:.3g} m)")
            lam_best[still] = proj
    return el, lam_best


def interpolation_matrix(src: Mesh, points: np.ndarray, tol: float | None = None) -> sp.csr_matrix:
    """Sparse P1 evaluation operator from ``src`` nodal values to ``points``."""
    el, lam = locate_points(src, points, tol)
    k = src.dimension + 1
    rows = np.repeat(np.arange(len(points)), k)
    cols = src.elements[el].ravel()
    return sp.csr_matrix((lam.ravel(), (rows, cols)), shape=(len(points), src.node_count))


def interpolate_field(src: Mesh, field: np.ndarray, dst: Mesh, tol: float | None = None) -> np.ndarray:
    """Piecewise-linear transfer of a nodal field from ``src`` to ``dst`` nodes."""
    field = np.asarray(field, dtype=float)
    if field.shape[0] != src.node_count:
        raise MeshError("field size does not match source mesh")
    if dst is src:
        return field.copy()
    return interpolation_matrix(src, dst.nodes, tol) @ field
