"""Randomized layered head phantoms with an initial and an expanded hemorrhage.

The initial bleed is a disk (2D) or ball (3D). The expansion adds a half
ellipse / half ellipsoid whose flat side passes through the bleed centre,
perpendicular to a random main axis ``u``; its semi-axis along ``u`` is the
sampled expansion length and its minor semi-axes equal the initial radius.
The expanded region therefore reaches the initial boundary exactly where
``u`` exits it and grows outward from there.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import BRAIN, SKIN, SKULL, Mesh, node_layers

PHANTOM_FORMAT_VERSION = 1

SKIN_SIGMA = 0.06948
BRAIN_SIGMA = 0.06948
SKULL_SIGMA = 0.009
HEMORRHAGE_SIGMA = 0.312


class RecipeInfeasibleError(RuntimeError):
    """Rejection sampling ran out of attempts."""


class ContainmentError(ValueError):
    """A hemorrhage does not fit inside the brain region."""


@dataclass(frozen=True)
class PhantomRecipe:
    radius_range: tuple = (0.01, 0.0233)
    length_range: tuple = (0.015, 0.0747)
    skin_sigma: float = SKIN_SIGMA
    brain_sigma: float = BRAIN_SIGMA
    skull_sigma: float = SKULL_SIGMA
    hemorrhage_sigma: float = HEMORRHAGE_SIGMA
    perturbation: float = 0.25
    max_tries: int = 1000

    def validate(self) -> None:
        r0, r1 = self.radius_range
        l0, l1 = self.length_range
        if not 0 < r0 <= r1:
            raise ValueError("radius_range must satisfy 0 < low <= high")
        if not 0 <= l0 <= l1:
            raise ValueError("length_range must satisfy 0 <= low <= high")
        if not 0 <= self.perturbation < 1:
            raise ValueError("perturbation must lie in [0, 1)")
        if self.max_tries < 1:
            raise ValueError("max_tries must be positive")

    def to_dict(self) -> dict:
        return {
            "radiusRange": list(self.radius_range),
            "lengthRange": list(self.length_range),
            "skinSigma": self.skin_sigma,
            "brainSigma": self.brain_sigma,
            "skullSigma": self.skull_sigma,
            "hemorrhageSigma": self.hemorrhage_sigma,
            "perturbation": self.perturbation,
            "maxTries": self.max_tries,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomRecipe":
        return cls(
            radius_range=tuple(data.get("radiusRange", cls.radius_range)),
            length_range=tuple(data.get("lengthRange", cls.length_range)),
            skin_sigma=data.get("skinSigma", SKIN_SIGMA),
            brain_sigma=data.get("brainSigma", BRAIN_SIGMA),
            skull_sigma=data.get("skullSigma", SKULL_SIGMA),
            hemorrhage_sigma=data.get("hemorrhageSigma", HEMORRHAGE_SIGMA),
            perturbation=data.get("perturbation", 0.25),
            max_tries=data.get("maxTries", 1000),
        )


@dataclass(frozen=True, eq=False)
class PhantomPair:
    """Baseline and expanded-hemorrhage conductivities on one mesh."""

    sigma1: np.ndarray
    sigma2: np.ndarray
    descriptor: dict
    layer_perturbations: tuple = (1.0, 1.0, 1.0)
    mesh_id: str = ""
    delta_true: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "delta_true", self.sigma2 - self.sigma1)

    def to_dict(self) -> dict:
        return {
            "version": PHANTOM_FORMAT_VERSION,
            "meshId": self.mesh_id,
            "sigma1": self.sigma1.tolist(),
            "sigma2": self.sigma2.tolist(),
            "descriptor": self.descriptor,
            "layerPerturbations": list(self.layer_perturbations),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomPair":
        if data.get("version") != PHANTOM_FORMAT_VERSION:
            raise ValueError(f"unsupported phantom file version {data.get('version')!r}")
        return cls(
            sigma1=np.asarray(data["sigma1"], dtype=float),
            sigma2=np.asarray(data["sigma2"], dtype=float),
            descriptor=data["descriptor"],
            layer_perturbations=tuple(data.get("layerPerturbations", (1.0, 1.0, 1.0))),
            mesh_id=data.get("meshId", ""),
        )


def save_phantom(pair: PhantomPair, path, extra: dict | None = None) -> None:
    payload = pair.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload))


def load_phantom(path) -> PhantomPair:
    return PhantomPair.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# geometry


def _random_direction(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _uniform_in_ball(rng: np.random.Generator, d: int, radius: float) -> np.ndarray:
    return _random_direction(rng, d) * radius * rng.random() ** (1.0 / d)


def half_ellipsoid_max_radius(center, axis, length: float, minor: float, samples: int = 2049) -> float:
    """Largest distance from the origin over the half ellipse/ellipsoid.

    Points of the surface are c + a cos(t) u + r sin(t) w with t in [0, pi/2]
    and w a unit vector normal to u; for fixed t the distance is maximised by
    w along the component of c normal to u, which reduces the search to t.
    """
    c = np.asarray(center, dtype=float)
    cu = float(c @ axis)
    cperp = math.sqrt(max(float(c @ c) - cu * cu, 0.0))
    t = np.linspace(0.0, 0.5 * math.pi, samples)
    ct, st = np.cos(t), np.sin(t)
    r2 = float(c @ c) + 2 * length * ct * cu + (length * ct) ** 2 + (minor * st) ** 2 + 2 * minor * st * cperp
    return float(np.sqrt(r2.max()))


def hemorrhage_indicator(points: np.ndarray, center, radius: float,
                         axis=None, length: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the disk/ball united with the half ellipse/ellipsoid."""
    rel = np.asarray(points, dtype=float) - np.asarray(center, dtype=float)
    inside = np.einsum("ij,ij->i", rel, rel) <= radius * radius
    if axis is not None and length > 0:
        s = rel @ np.asarray(axis, dtype=float)
        perp2 = np.einsum("ij,ij->i", rel, rel) - s * s
        inside |= (s >= 0) & ((s / length) ** 2 + perp2 / radius ** 2 <= 1.0)
    return inside


def _layer_values(mesh: Mesh, skin: float, skull: float, brain: float) -> np.ndarray:
    layers = node_layers(mesh)
    sigma = np.empty(mesh.node_count)
    sigma[layers == BRAIN] = brain
    sigma[layers == SKULL] = skull
    sigma[layers == SKIN] = skin
    return sigma


def _brain_radius(mesh: Mesh) -> float:
    if "brain" not in mesh.radii:
        raise ContainmentError("mesh carries no brain radius")
    return float(mesh.radii["brain"])


# --------------------------------------------------------------------------
# sampling


def sample_phantom_pair(seed: int, mesh: Mesh, recipe: PhantomRecipe | None = None) -> PhantomPair:
    """Random phantom pair following the simulation recipe.

    The initial radius is drawn once; on rejection only the centre, the
    expansion direction and the expansion length are redrawn, so the radius
    stays exactly uniform on ``recipe.radius_range``.
    """
    recipe = recipe or PhantomRecipe()
    recipe.validate()
    rng = np.random.default_rng(seed)
    d = mesh.dimension
    rb = _brain_radius(mesh)

    p = recipe.perturbation
    scale_skin, scale_skull, scale_brain = rng.uniform(1 - p, 1 + p, size=3)
    radius = float(rng.uniform(*recipe.radius_range))
    if radius >= rb:
        raise RecipeInfeasibleError("initial hemorrhage radius exceeds the brain radius")

    for attempt in range(1, recipe.max_tries + 1):
        center = _uniform_in_ball(rng, d, rb)
        axis = _random_direction(rng, d)
        length = float(rng.uniform(*recipe.length_range))
        if np.linalg.norm(center) + radius >= rb:
            continue
        if length > 0 and half_ellipsoid_max_radius(center, axis, length, radius) >= rb:
            continue
        break
    else:
        raise RecipeInfeasibleError(
            f"no hemorrhage inside the brain after {recipe.max_tries} tries")

    skin = recipe.skin_sigma * scale_skin
    skull = recipe.skull_sigma * scale_skull
    brain = recipe.brain_sigma * scale_brain
    base = _layer_values(mesh, skin, skull, brain)
    initial = hemorrhage_indicator(mesh.nodes, center, radius)
    expanded = hemorrhage_indicator(mesh.nodes, center, radius, axis, length)
    sigma1 = np.where(initial, recipe.hemorrhage_sigma, base)
    sigma2 = np.where(expanded, recipe.hemorrhage_sigma, base)
    descriptor = {
        "kind": "random",
        "seed": int(seed),
        "center": center.tolist(),
        "radius": radius,
        "axis": axis.tolist(),
        "length": length,
        "attempts": attempt,
    }
    return PhantomPair(sigma1, sigma2, descriptor,
                       (float(scale_skin), float(scale_skull), float(scale_brain)), mesh.mesh_id)


def spherical_growth_pair(mesh: Mesh, d1: float, d2: float, center,
                          recipe: PhantomRecipe | None = None) -> PhantomPair:
    """Concentric sphere (disk) growth from diameter ``d1`` to ``d2``.

    Tissue conductivities are the unperturbed recipe values.
    """
    recipe = recipe or PhantomRecipe()
    if d2 < d1 or d1 <= 0:
        raise ValueError("need 0 < d1 <= d2")
    center = np.asarray(center, dtype=float)
    if center.shape != (mesh.dimension,):
        raise ValueError("center dimension does not match the mesh")
    rb = _brain_radius(mesh)
    if np.linalg.norm(center) + d2 / 2 >= rb:
        raise ContainmentError(f"sphere of diameter {d2} m at {center.tolist()} exits the brain")
    base = _layer_values(mesh, recipe.skin_sigma, recipe.skull_sigma, recipe.brain_sigma)
    sigma1 = np.where(hemorrhage_indicator(mesh.nodes, center, d1 / 2), recipe.hemorrhage_sigma, base)
    sigma2 = np.where(hemorrhage_indicator(mesh.nodes, center, d2 / 2), recipe.hemorrhage_sigma, base)
    descriptor = {"kind": "spherical", "center": center.tolist(), "d1": float(d1), "d2": float(d2)}
    return PhantomPair(sigma1, sigma2, descriptor, (1.0, 1.0, 1.0), mesh.mesh_id)


def shell_volume(d1: float, d2: float, dimension: int = 3) -> float:
    """Exact measure of the region between concentric spheres (disks)."""
    if dimension == 3:
        return 4.0 / 3.0 * math.pi * ((d2 / 2) ** 3 - (d1 / 2) ** 3)
    return math.pi * ((d2 / 2) ** 2 - (d1 / 2) ** 2)
