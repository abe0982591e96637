"""Simulated monitoring data: noisy voltage pairs, LD images and datasets.

Measurements are always simulated on the dense mesh and inverted on the
coarse one; the manifest records both mesh ids so the separation can be
checked after the fact.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import CurrentPatternSet, VoltageFrame, save_voltage_frame, load_voltage_frame, solve_forward
from .mesh import Mesh, interpolate_field, save_mesh
from .phantom import PhantomPair, PhantomRecipe, load_phantom, sample_phantom_pair, save_phantom
from .recon_linear import CorrelationRegularizer, LDResult, load_ld, reconstruct_ld, save_ld

MANIFEST_VERSION = 1
TARGET_FORMAT_VERSION = 1
NOMINAL_RELATIVE_NOISE = 0.00067


@dataclass(frozen=True)
class NoiseModel:
    """Independent zero-mean Gaussian noise on every channel.

    Exactly one of ``std_absolute`` (volts) and ``std_relative_to_max``
    (fraction of the largest noiseless voltage over both frames) is set.
    A zero level is accepted and produces noiseless frames.
    """

    std_absolute: float | None = None
    std_relative_to_max: float | None = NOMINAL_RELATIVE_NOISE

    def __post_init__(self):
        if (self.std_absolute is None) == (self.std_relative_to_max is None):
            raise ValueError("set exactly one of std_absolute and std_relative_to_max")
        level = self.std_absolute if self.std_absolute is not None else self.std_relative_to_max
        if level < 0:
            raise ValueError("noise level must be nonnegative")

    def std_for(self, *frames: np.ndarray) -> float:
        if self.std_absolute is not None:
            return float(self.std_absolute)
        peak = max(float(np.abs(f).max()) for f in frames)
        return float(self.std_relative_to_max) * peak

    def covariance(self, std: float, channels: int) -> np.ndarray:
        """Gamma_e = std^2 I."""
        return std ** 2 * np.eye(channels)

    def to_dict(self) -> dict:
        return {"stdAbsolute": self.std_absolute, "stdRelativeToMax": self.std_relative_to_max}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseModel":
        return cls(data.get("stdAbsolute"), data.get("stdRelativeToMax"))


@dataclass(frozen=True, eq=False)
class MonitoringPair:
    V1: VoltageFrame
    V2: VoltageFrame
    noise: NoiseModel
    noise_std: float
    truth: PhantomPair | None = None

    def __post_init__(self):
        if self.V1.mesh_id != self.V2.mesh_id:
            raise ValueError("frames come from different meshes")
        if not np.array_equal(self.V1.patterns.patterns, self.V2.patterns.patterns):
            raise ValueError("frames use different current patterns")

    @property
    def delta_v(self) -> np.ndarray:
        return self.V2.voltages - self.V1.voltages


def simulate_pair(pair: PhantomPair, dense_mesh: Mesh, z, patterns: CurrentPatternSet,
                  noise: NoiseModel, seed: int, phantom_mesh: Mesh | None = None) -> MonitoringPair:
    """Noisy frames V_k = U(sigma_k) + e_k with independent draws per frame."""
    s1, s2 = pair.sigma1, pair.sigma2
    if pair.mesh_id and pair.mesh_id != dense_mesh.mesh_id:
        if phantom_mesh is None or phantom_mesh.mesh_id != pair.mesh_id:
            raise ValueError("phantom lives on another mesh; pass that mesh as phantom_mesh")
        s1 = interpolate_field(phantom_mesh, s1, dense_mesh)
        s2 = interpolate_field(phantom_mesh, s2, dense_mesh)
    _, f1 = solve_forward(dense_mesh, s1, z, patterns)
    _, f2 = solve_forward(dense_mesh, s2, z, patterns)
    std = noise.std_for(f1.voltages, f2.voltages)
    rng = np.random.default_rng(seed)
    e1 = rng.standard_normal(f1.voltages.shape) * std
    e2 = rng.standard_normal(f2.voltages.shape) * std
    V1 = VoltageFrame(f1.voltages + e1, patterns, dense_mesh.mesh_id)
    V2 = VoltageFrame(f2.voltages + e2, patterns, dense_mesh.mesh_id)
    return MonitoringPair(V1, V2, noise, std, pair)


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetSpec:
    count: int
    splits: dict = field(default_factory=lambda: {"train": 0, "val": 0, "test": 0})
    seed_base: int = 0
    recipe: PhantomRecipe = PhantomRecipe()
    noise: NoiseModel = NoiseModel()
    z: float = 1e-3

    def split_labels(self) -> list[str]:
        total = sum(self.splits.values())
        if total != self.count:
            raise ValueError(f"split sizes {self.splits} do not add up to count={self.count}")
        labels = []
        for name in ("train", "val", "test"):
            labels += [name] * int(self.splits.get(name, 0))
        return labels


def save_target(delta: np.ndarray, mesh: Mesh, path, extra: dict | None = None) -> None:
    payload = {"version": TARGET_FORMAT_VERSION, "meshId": mesh.mesh_id, "delta": delta.tolist()}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload))


def load_target(path) -> np.ndarray:
    data = json.loads(Path(path).read_text())
    if data.get("version") != TARGET_FORMAT_VERSION:
        raise ValueError(f"unsupported target file version {data.get('version')!r}")
    return np.asarray(data["delta"], dtype=float)


# worker state, set once per process by _init_worker
_WORKER: dict = {}


def _init_worker(dense: Mesh, coarse: Mesh, patterns: CurrentPatternSet, reg: CorrelationRegularizer,
                 spec: DatasetSpec, out_dir: str, extra: dict) -> None:
    _WORKER.update(dense=dense, coarse=coarse, patterns=patterns, reg=reg, spec=spec,
                   out_dir=out_dir, extra=extra)


def _make_sample(index: int) -> dict:
    w = _WORKER
    dense, coarse, spec = w["dense"], w["coarse"], w["spec"]
    seed = spec.seed_base + index
    phantom = sample_phantom_pair(seed, dense, spec.recipe)
    # a distinct stream for the noise so phantom and noise draws never overlap
    pair = simulate_pair(phantom, dense, spec.z, w["patterns"], spec.noise, seed + 7_919_000_000)
    ld = reconstruct_ld(pair, coarse, spec.z, w["patterns"], w["reg"])
    target = interpolate_field(dense, phantom.delta_true, coarse)
    out = Path(w["out_dir"])
    stem = f"sample_{index:05d}"
    extra = dict(w["extra"], seed=seed)
    files = {
        "phantomFile": f"{stem}_phantom.json",
        "voltageFiles": [f"{stem}_v1.json", f"{stem}_v2.json"],
        "ldFile": f"{stem}_ld.json",
        "targetFile": f"{stem}_target.json",
    }
    save_phantom(phantom, out / files["phantomFile"], extra)
    save_voltage_frame(pair.V1, out / files["voltageFiles"][0], dict(extra, noiseStd=pair.noise_std))
    save_voltage_frame(pair.V2, out / files["voltageFiles"][1], dict(extra, noiseStd=pair.noise_std))
    save_ld(ld, out / files["ldFile"], extra)
    save_target(target, coarse, out / files["targetFile"], extra)
    return dict(index=index, seed=seed, graphId=coarse.mesh_id, ldSolveTime=ld.solve_time, **files)


def build_dataset(spec: DatasetSpec, dense: Mesh, coarse: Mesh, patterns: CurrentPatternSet,
                  reg: CorrelationRegularizer, out_dir, jobs: int = 1, extra: dict | None = None) -> dict:
    """Simulate ``spec.count`` samples and write them with a manifest.

    Sample ``i`` uses seed ``seed_base + i`` whatever the worker count, so
    the files do not depend on ``jobs``.
    """
    if dense.mesh_id == coarse.mesh_id:
        raise ValueError("data and inverse meshes must differ (inverse-crime guard)")
    labels = spec.split_labels()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = dict(extra or {})
    save_mesh(dense, out / "mesh_dense.json", extra)
    save_mesh(coarse, out / "mesh_coarse.json", extra)
    init = (dense, coarse, patterns, reg, spec, str(out), extra)
    if jobs > 1 and spec.count > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=init) as ex:
            records = list(ex.map(_make_sample, range(spec.count)))
    else:
        _init_worker(*init)
        records = [_make_sample(i) for i in range(spec.count)]
    splits = {name: [] for name in ("train", "val", "test")}
    sample_records = []
    for rec, label in zip(records, labels):
        splits[label].append(rec["index"])
        rec = dict(rec, split=label)
        rec.pop("ldSolveTime")
        sample_records.append(rec)
    manifest = {
        "version": MANIFEST_VERSION,
        "dimension": dense.dimension,
        "denseMeshId": dense.mesh_id,
        "inverseMeshId": coarse.mesh_id,
        "meshFiles": {"dense": "mesh_dense.json", "inverse": "mesh_coarse.json"},
        "patternSet": patterns.to_dict(),
        "noise": spec.noise.to_dict(),
        "recipe": spec.recipe.to_dict(),
        "seedBase": spec.seed_base,
        "splits": splits,
        "sampleRecords": sample_records,
    }
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {data.get('version')!r}")
    return data


def verify_manifest(path) -> None:
    """Re-open every file the manifest references; raise on the first failure."""
    path = Path(path)
    manifest = load_manifest(path)
    root = path.parent
    if manifest["denseMeshId"] == manifest["inverseMeshId"]:
        raise ValueError("manifest uses one mesh for data and inversion")
    for rec in manifest["sampleRecords"]:
        load_phantom(root / rec["phantomFile"])
        for f in rec["voltageFiles"]:
            load_voltage_frame(root / f)
        ld = load_ld(root / rec["ldFile"])
        if ld.mesh_id != manifest["inverseMeshId"]:
            raise ValueError(f"{rec['ldFile']} is not on the inverse mesh")
        load_target(root / rec["targetFile"])


def load_split(path, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (LD inputs, targets) for one split, in manifest order."""
    path = Path(path)
    manifest = load_manifest(path)
    root = path.parent
    recs = [r for r in manifest["sampleRecords"] if r["split"] == split]
    if not recs:
        return np.zeros((0, 0)), np.zeros((0, 0))
    X = np.stack([load_ld(root / r["ldFile"]).delta for r in recs])
    Y = np.stack([load_target(root / r["targetFile"]) for r in recs])
    return X, Y


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))
