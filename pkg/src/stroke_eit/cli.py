"""Command-line pipeline: meshes, data, reconstructions, training, reports.

Every subcommand reads one JSON configuration (``--config``), writes its
artifacts below the output directory and appends a line with timings to
``run_log.jsonl`` there. Artifacts carry the hash of the configuration that
produced them.

Exit codes: 0 success, 2 configuration error, 3 numerical error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, load_config
from .datagen import (
    DatasetSpec,
    MonitoringPair,
    NoiseModel,
    build_dataset,
    load_manifest,
    load_target,
    save_target,
    simulate_pair,
)
from .fem import (
    AssemblyError,
    FitError,
    NumericError,
    default_patterns,
    load_voltage_frame,
    save_voltage_frame,
)
from .gunet import CorruptModelError, Descriptor, GUNetModel, TrainConfig, TrainingData, TrainingError, train
from .gunet.model import load_model, save_model
from .gunet.train import predict
from .imaging import save_field_images, save_mask_image
from .mesh import HeadGeometrySpec, Mesh, MeshError, extract_graph, generate_head_mesh, interpolate_field, load_mesh, save_mesh
from .metrics import CSV_COLUMNS, evaluate, read_metrics_csv, write_metrics_csv
from .phantom import ContainmentError, PhantomRecipe, RecipeInfeasibleError, save_phantom, spherical_growth_pair
from .recon_linear import ConditioningError, build_correlation_regularizer, load_ld, reconstruct_ld, save_ld
from .recon_nonlinear import MOParams, load_mo, reconstruct_mo, save_mo

log = logging.getLogger("stroke_eit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
POST_FORMAT_VERSION = 1
SUBCOMMANDS = ("gen-mesh", "gen-data", "recon-ld", "recon-mo", "train", "postprocess", "evaluate", "report")

NUMERIC_ERRORS = (NumericError, AssemblyError, FitError, ConditioningError, TrainingError,
                  RecipeInfeasibleError, FloatingPointError, np.linalg.LinAlgError)
IO_ERRORS = (OSError, CorruptModelError, json.JSONDecodeError, UnicodeDecodeError)


class Run:
    """Resolved configuration plus the artifact layout of one output directory."""

    def __init__(self, cfg: dict, jobs: int = 1):
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self.hash = config_hash(cfg)
        self.out = Path(cfg["outputDir"])
        self.z = float(cfg["contactImpedance"])
        self.amplitude = float(cfg["currentAmplitude"])

    # layout -------------------------------------------------------------
    def dir(self, name: str) -> Path:
        path = self.out / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def stamp(self) -> dict:
        return {"configHash": self.hash, "softwareVersion": __version__}

    def mesh_path(self, name: str) -> Path:
        return self.out / "meshes" / f"{name}.json"

    def mesh(self, name: str) -> Mesh:
        path = self.mesh_path(name)
        if not path.exists():
            raise FileNotFoundError(f"{path} is missing; run gen-mesh first")
        return load_mesh(path)

    def patterns(self, dimension: int):
        spec = self.spec(dimension)
        return default_patterns(dimension, spec.electrode_count, self.amplitude)

    def spec(self, dimension: int) -> HeadGeometrySpec:
        try:
            spec = HeadGeometrySpec(**self.cfg["mesh2d" if dimension == 2 else "mesh3d"])
        except TypeError as exc:
            raise ConfigError(f"bad mesh specification: {exc}") from exc
        return spec

    def recipe(self) -> PhantomRecipe:
        recipe = PhantomRecipe.from_dict(self.cfg["recipe"])
        try:
            recipe.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return recipe

    def noise(self) -> NoiseModel:
        n = self.cfg["noise"]
        try:
            return NoiseModel(n.get("stdAbsolute"), n.get("stdRelativeToMax"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def regularizer(self, mesh: Mesh):
        ld = self.cfg["ld"]
        return build_correlation_regularizer(mesh, ld.get("correlationLength"), float(ld["marginalStd"]))

    def dataset_manifest(self) -> Path:
        path = self.out / "data2d" / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"{path} is missing; run gen-data first")
        return path

    def test_records(self) -> list[dict]:
        manifest = load_manifest(self.dataset_manifest())
        return [r for r in manifest["sampleRecords"] if r["split"] == "test"]

    def growth_cases(self) -> list[tuple[str, float, float]]:
        return [(str(c[0]), float(c[1]), float(c[2])) for c in self.cfg["growth3d"]["cases"]]

    def write_json(self, path: Path, payload: dict) -> None:
        payload = dict(payload, **self.stamp)
        path.write_text(json.dumps(payload))


# ----------------------------------------------------------------------
# subcommands


def cmd_gen_mesh(run: Run, args) -> dict:
    """Dense data meshes, coarse inverse meshes and the MO forward mesh."""
    d = run.dir("meshes")
    info = {}
    spec2, spec3 = run.spec(2), run.spec(3)
    fwd = replace(spec2, **run.cfg["moForwardMesh2d"])
    for name, spec, dim, density in (("mesh2d_dense", spec2, 2, "dense"), ("mesh2d_coarse", spec2, 2, "coarse"),
                                     ("mesh2d_moforward", fwd, 2, "dense"),
                                     ("mesh3d_dense", spec3, 3, "dense"), ("mesh3d_coarse", spec3, 3, "coarse")):
        t0 = time.perf_counter()
        mesh = generate_head_mesh(spec, dim, density)
        save_mesh(mesh, d / f"{name}.json", dict(run.stamp, spec=spec.to_dict(), density=density))
        info[name] = {"nodes": mesh.node_count, "elements": mesh.element_count,
                      "seconds": time.perf_counter() - t0}
    return info


def _growth_worker(args):
    run_cfg, jobs, name, d1, d2, index = args
    run = Run(run_cfg, jobs)
    dense = run.mesh("mesh3d_dense")
    center = run.cfg["growth3d"]["center"]
    phantom = spherical_growth_pair(dense, d1, d2, center, run.recipe())
    seed = run.cfg["seed"] + 1_000_003 * (index + 1)
    pair = simulate_pair(phantom, dense, run.z, run.patterns(3), run.noise(), seed)
    out = run.dir("data3d")
    stamp = dict(run.stamp, caseId=name, seed=seed)
    save_phantom(phantom, out / f"case_{name}_phantom.json", stamp)
    save_voltage_frame(pair.V1, out / f"case_{name}_v1.json", dict(stamp, noiseStd=pair.noise_std))
    save_voltage_frame(pair.V2, out / f"case_{name}_v2.json", dict(stamp, noiseStd=pair.noise_std))
    save_target(phantom.delta_true, dense, out / f"case_{name}_target.json", stamp)
    return {"caseId": name, "d1": d1, "d2": d2, "seed": seed, "noiseStd": pair.noise_std}


def _map(fn, items, jobs):
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def cmd_gen_data(run: Run, args) -> dict:
    """The 2D training/validation/test set and the 3D spherical-growth suite."""
    ds = run.cfg["dataset"]
    spec = DatasetSpec(int(ds["count"]), dict(ds["splits"]), seed_base=int(run.cfg["seed"]) * 1_000_000,
                       recipe=run.recipe(), noise=run.noise(), z=run.z)
    dense, coarse = run.mesh("mesh2d_dense"), run.mesh("mesh2d_coarse")
    t0 = time.perf_counter()
    build_dataset(spec, dense, coarse, run.patterns(2), run.regularizer(coarse), run.dir("data2d"),
                  jobs=run.jobs, extra=run.stamp)
    t2d = time.perf_counter() - t0
    t0 = time.perf_counter()
    cases = _map(_growth_worker, [(run.cfg, 1, n, d1, d2, i) for i, (n, d1, d2) in enumerate(run.growth_cases())],
                 run.jobs)
    run.write_json(run.dir("data3d") / "manifest.json",
                   {"version": 1, "denseMeshId": run.mesh("mesh3d_dense").mesh_id,
                    "center": run.cfg["growth3d"]["center"], "cases": cases})
    return {"samples2d": spec.count, "seconds2d": t2d, "cases3d": len(cases), "seconds3d": time.perf_counter() - t0}


def _load_pair3d(run: Run, name: str) -> MonitoringPair:
    d = run.out / "data3d"
    V1 = load_voltage_frame(d / f"case_{name}_v1.json")
    V2 = load_voltage_frame(d / f"case_{name}_v2.json")
    std = json.loads((d / f"case_{name}_v1.json").read_text())["noiseStd"]
    return MonitoringPair(V1, V2, run.noise(), float(std))


def _ld3d_worker(args):
    run_cfg, name = args
    run = Run(run_cfg)
    coarse = run.mesh("mesh3d_coarse")
    pair = _load_pair3d(run, name)
    res = reconstruct_ld(pair, coarse, run.z, run.patterns(3), run.regularizer(coarse))
    save_ld(res, run.dir("ld3d") / f"case_{name}_ld.json", dict(run.stamp, caseId=name))
    return {"caseId": name, "solveTimeSeconds": res.solve_time}


def cmd_recon_ld(run: Run, args) -> dict:
    """LD images of the 3D growth suite (the 2D set carries its own)."""
    names = [n for n, _, _ in run.growth_cases()]
    if not (run.out / "data3d" / "manifest.json").exists():
        raise FileNotFoundError("data3d/manifest.json is missing; run gen-data first")
    return {"cases": _map(_ld3d_worker, [(run.cfg, n) for n in names], run.jobs)}


def _mo_params(run: Run) -> MOParams:
    p = MOParams.from_dict(run.cfg["mo"])
    try:
        p.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return p


def _mo_worker(args):
    run_cfg, rec = args
    run = Run(run_cfg)
    root = run.out / "data2d"
    coarse, fwd = run.mesh("mesh2d_coarse"), run.mesh("mesh2d_moforward")
    V1 = load_voltage_frame(root / rec["voltageFiles"][0])
    V2 = load_voltage_frame(root / rec["voltageFiles"][1])
    std = json.loads((root / rec["voltageFiles"][0]).read_text())["noiseStd"]
    pair = MonitoringPair(V1, V2, run.noise(), float(std))
    res = reconstruct_mo(pair, coarse, run.z, run.patterns(2), params=_mo_params(run), forward_mesh=fwd)
    stem = f"sample_{rec['index']:05d}"
    save_mo(res, run.dir("mo") / f"{stem}_mo.json", dict(run.stamp, sampleIndex=rec["index"]))
    return {"index": rec["index"], "iterations": res.iterations, "lineSearchFailed": res.line_search_failed,
            "solveTimeSeconds": res.solve_time}


def cmd_recon_mo(run: Run, args) -> dict:
    """Nonlinear reconstructions of the first ``mo.cases`` 2D test samples."""
    _mo_params(run)
    recs = run.test_records()[: int(run.cfg["mo"]["cases"])]
    return {"cases": _map(_mo_worker, [(run.cfg, r) for r in recs], run.jobs)}


def train_config(run: Run) -> TrainConfig:
    t = dict(run.cfg["train"])
    t.setdefault("rngSeed", int(run.cfg["seed"]))
    cfg = TrainConfig.from_dict(t)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def descriptor(run: Run) -> Descriptor:
    m = run.cfg["model"]
    d = Descriptor(tuple(int(c) for c in m["channels"]), int(m["convsPerLevel"]), float(m["poolKeepFraction"]))
    try:
        d.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return d


def cmd_train(run: Run, args) -> dict:
    """Fit the graph U-net on the 2D LD images; validation MSE picks the model."""
    from .datagen import load_split

    path = run.dataset_manifest()
    X_tr, Y_tr = load_split(path, "train")
    X_va, Y_va = load_split(path, "val")
    coarse = run.mesh("mesh2d_coarse")
    data = TrainingData(extract_graph(coarse), X_tr, Y_tr, X_va, Y_va)
    tc = train_config(run)
    model = GUNetModel.initialize(descriptor(run), seed=int(run.cfg["seed"]))
    best, hist = train(model, data, tc)
    d = run.dir("model")
    save_model(best, d / "model.json", dict(run.stamp, trainConfig=tc.to_dict()))
    run.write_json(d / "history.json", hist.to_dict())
    return {"epochs": len(hist.val_mse), "bestEpoch": hist.best_epoch, "bestValMSE": hist.best_val_mse,
            "initialValMSE": hist.initial_val_mse, "trainingSeconds": hist.seconds}


def _mesh_registry(run: Run) -> dict:
    reg = {}
    for name in ("mesh2d_coarse", "mesh3d_coarse"):
        if run.mesh_path(name).exists():
            m = run.mesh(name)
            reg[m.mesh_id] = m
    return reg


def postprocess_file(run: Run, model: GUNetModel, ld_path: Path, meshes: dict, out_path: Path,
                     mode: str) -> float:
    """Apply the network to one LD file; returns the wall time in seconds."""
    ld = load_ld(ld_path)
    mesh = meshes.get(ld.mesh_id)
    if mesh is None:
        raise FileNotFoundError(f"no mesh with id {ld.mesh_id} for {ld_path}")
    t0 = time.perf_counter()
    graph = extract_graph(mesh)
    out = predict(model, graph, ld.delta, mode)
    seconds = time.perf_counter() - t0
    if out.shape != ld.delta.shape or not np.all(np.isfinite(out)):
        raise NumericError(f"post-processed image of {ld_path} is not a finite nodal field")
    run.write_json(out_path, {"version": POST_FORMAT_VERSION, "meshId": ld.mesh_id,
                              "source": ld_path.name, "delta": out.tolist()})
    return seconds


def _post_inputs(run: Run) -> list[tuple[Path, Path]]:
    pairs = []
    root = run.out / "data2d"
    if (root / "manifest.json").exists():
        for rec in run.test_records():
            pairs.append((root / rec["ldFile"], run.out / "post" / f"sample_{rec['index']:05d}_post.json"))
    for name, _, _ in run.growth_cases():
        src = run.out / "ld3d" / f"case_{name}_ld.json"
        if src.exists():
            pairs.append((src, run.out / "post" / f"case_{name}_post.json"))
    return pairs


def cmd_postprocess(run: Run, args) -> dict:
    """Network output for the given LD file, or for every 2D test and 3D LD image."""
    model_path = Path(args.model) if args.model else run.out / "model" / "model.json"
    model = load_model(model_path)
    # the input scaling must match the one the model was trained with
    trained = json.loads(model_path.read_text()).get("trainConfig", {})
    mode = trained.get("normalizationMode", train_config(run).normalization_mode)
    meshes = _mesh_registry(run)
    run.dir("post")
    if args.input:
        src = Path(args.input)
        pairs = [(src, run.out / "post" / (src.stem.removesuffix("_ld") + "_post.json"))]
    else:
        pairs = _post_inputs(run)
        if not pairs:
            raise FileNotFoundError("no LD files to post-process; run gen-data or recon-ld first")
    timings = {}
    for src, dst in pairs:
        timings[dst.name] = postprocess_file(run, model, src, meshes, dst, mode)
    return {"files": len(pairs), "wallSeconds": timings, "maxWallSeconds": max(timings.values())}


def _post_delta(path: Path) -> np.ndarray:
    return np.asarray(json.loads(path.read_text())["delta"], dtype=float)


def metric_rows(run: Run) -> list[dict]:
    rows = []
    coarse2 = run.mesh("mesh2d_coarse")
    root = run.out / "data2d"
    for rec in run.test_records():
        case = f"2d-{rec['index']:05d}"
        truth = load_target(root / rec["targetFile"])
        fields = {"LD": load_ld(root / rec["ldFile"]).delta}
        post = run.out / "post" / f"sample_{rec['index']:05d}_post.json"
        if post.exists():
            fields["gUnet"] = _post_delta(post)
        mo = run.out / "mo" / f"sample_{rec['index']:05d}_mo.json"
        if mo.exists():
            fields["MO"] = np.asarray(load_mo(mo)["delta"], dtype=float)
        for method, f in fields.items():
            rows.append(evaluate(f, truth, coarse2).row(case, method))
    if (run.out / "ld3d").exists():
        dense3, coarse3 = run.mesh("mesh3d_dense"), run.mesh("mesh3d_coarse")
        for name, _, _ in run.growth_cases():
            ld_path = run.out / "ld3d" / f"case_{name}_ld.json"
            if not ld_path.exists():
                continue
            truth = load_target(run.out / "data3d" / f"case_{name}_target.json")
            fields = {"LD": load_ld(ld_path).delta}
            post = run.out / "post" / f"case_{name}_post.json"
            if post.exists():
                fields["gUnet"] = _post_delta(post)
            for method, f in fields.items():
                # recon lives on the coarse ball; truth is exact on the data mesh
                rows.append(evaluate(interpolate_field(coarse3, f, dense3), truth, dense3).row(f"3d-{name}", method))
    for r in rows:
        r["configHash"] = run.hash
    return rows


def cmd_evaluate(run: Run, args) -> dict:
    """Metrics CSV over the 2D test set and the 3D growth suite."""
    rows = metric_rows(run)
    write_metrics_csv(run.dir("metrics") / "metrics.csv", rows, CSV_COLUMNS + ("configHash",))
    return {"rows": len(rows)}


def cmd_report(run: Run, args) -> dict:
    """Slice images per case plus a copy of the metrics CSV."""
    d = run.dir("report")
    count = 0
    coarse2 = run.mesh("mesh2d_coarse")
    root = run.out / "data2d"
    n2 = int(args.cases2d)
    for rec in run.test_records()[:n2]:
        stem = f"sample_{rec['index']:05d}"
        fields = {"truth": load_target(root / rec["targetFile"]), "ld": load_ld(root / rec["ldFile"]).delta}
        if (run.out / "post" / f"{stem}_post.json").exists():
            fields["gunet"] = _post_delta(run.out / "post" / f"{stem}_post.json")
        if (run.out / "mo" / f"{stem}_mo.json").exists():
            fields["mo"] = np.asarray(load_mo(run.out / "mo" / f"{stem}_mo.json")["delta"], dtype=float)
        for method, f in fields.items():
            count += len(save_field_images(coarse2, f, d / f"{stem}_{method}"))
            count += len(save_mask_image(coarse2, f, d / f"{stem}_{method}"))
    if (run.out / "ld3d").exists():
        coarse3 = run.mesh("mesh3d_coarse")
        dense3 = run.mesh("mesh3d_dense")
        for name, _, _ in run.growth_cases():
            ld_path = run.out / "ld3d" / f"case_{name}_ld.json"
            if not ld_path.exists():
                continue
            stem = f"case_{name}"
            count += len(save_field_images(dense3, load_target(run.out / "data3d" / f"{stem}_target.json"),
                                           d / f"{stem}_truth"))
            fields = {"ld": load_ld(ld_path).delta}
            if (run.out / "post" / f"{stem}_post.json").exists():
                fields["gunet"] = _post_delta(run.out / "post" / f"{stem}_post.json")
            for method, f in fields.items():
                count += len(save_field_images(coarse3, f, d / f"{stem}_{method}"))
    csv_path = run.out / "metrics" / "metrics.csv"
    if csv_path.exists():
        rows = read_metrics_csv(csv_path)
        write_metrics_csv(d / "metrics.csv", rows, CSV_COLUMNS + ("configHash",))
    return {"images": count}


COMMANDS = {
    "gen-mesh": cmd_gen_mesh, "gen-data": cmd_gen_data, "recon-ld": cmd_recon_ld, "recon-mo": cmd_recon_mo,
    "train": cmd_train, "postprocess": cmd_postprocess, "evaluate": cmd_evaluate, "report": cmd_report,
}


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stroke-eit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").splitlines()[0])
        p.add_argument("--config", help="JSON configuration file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the configuration seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for per-sample work")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "postprocess":
            p.add_argument("--input", help="single LD file to post-process")
            p.add_argument("--model", help="model file (default: <out>/model/model.json)")
        if name == "report":
            p.add_argument("--cases2d", type=int, default=4, help="number of 2D test cases to render")
    return parser


def _append_log(out: Path, entry: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_log.jsonl", "a") as fh:
        fh.write(json.dumps(entry) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"stroke-eit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, args.jobs)
    t0 = time.perf_counter()
    status, cause, details = EXIT_OK, None, {}
    try:
        details = COMMANDS[args.command](run, args)
    except ConfigError as exc:
        status, cause = EXIT_CONFIG, f"config error: {exc}"
    except (ContainmentError, MeshError) as exc:
        status, cause = EXIT_CONFIG, f"config error: {exc}"
    except NUMERIC_ERRORS as exc:
        status, cause = EXIT_NUMERIC, f"numeric error: {exc}"
    except IO_ERRORS as exc:
        status, cause = EXIT_IO, f"I/O error: {exc}"
    except (KeyError, ValueError) as exc:
        # malformed artifacts surface as missing keys or bad versions
        status, cause = EXIT_IO, f"I/O error: unreadable artifact: {exc}"
    entry = {"command": args.command, "configHash": run.hash, "jobs": run.jobs, "status": status,
             "wallSeconds": time.perf_counter() - t0, "details": details}
    if cause:
        entry["error"] = cause
    try:
        _append_log(run.out, entry)
    except OSError as exc:
        if status == EXIT_OK:
            status, cause = EXIT_IO, f"I/O error: cannot write run log: {exc}"
    if cause:
        print(f"stroke-eit: {cause}".splitlines()[0], file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
