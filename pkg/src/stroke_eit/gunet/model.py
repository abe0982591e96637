"""Graph U-net for post-processing nodal difference images.

Layout for the default descriptor (channels 32, 64, 128, 256):

    encoder   level 0: 3 convs 1->32->32->32        pool (keep 1/8)
              level 1: 3 convs 32->64->64->64       pool
              level 2: 3 convs 64->128->128->128    pool
    bottom    level 3: 3 convs 128->256->256->256
    decoder   level 2: unpool, concat skip (256+128), 3 convs ->128
              level 1: unpool, concat skip (128+64),  3 convs ->64
              level 0: unpool, concat skip (64+32),   3 convs ->32
    output    node-wise linear projection 32->1

which has 327,009 parameters. Nothing in the model refers to node counts,
coordinates or the spatial dimension.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ..mesh import Graph
from .layers import (
    LEAKY_SLOPE,
    clone_cluster_unpool,
    clone_cluster_unpool_backward,
    gcn_layer_backward,
    gcn_layer_forward,
    kmax_pool,
    kmax_pool_backward,
)

MODEL_FORMAT_VERSION = 1


class CorruptModelError(ValueError):
    """A model file that cannot be parsed or fails validation."""


@dataclass(frozen=True)
class Descriptor:
    channels: tuple = (32, 64, 128, 256)
    convs_per_level: int = 3
    pool_keep_fraction: float = 1.0 / 8.0
    in_channels: int = 1
    out_channels: int = 1

    @property
    def levels(self) -> int:
        return len(self.channels)

    def validate(self) -> None:
        if self.levels < 1 or self.convs_per_level < 1:
            raise ValueError("need at least one level and one conv per level")
        if not 0 < self.pool_keep_fraction <= 1:
            raise ValueError("pool_keep_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "channels": list(self.channels),
            "convsPerLevel": self.convs_per_level,
            "poolKeepFraction": self.pool_keep_fraction,
            "inChannels": self.in_channels,
            "outChannels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Descriptor":
        d = cls(tuple(int(c) for c in data["channels"]), int(data["convsPerLevel"]),
                float(data["poolKeepFraction"]), int(data.get("inChannels", 1)),
                int(data.get("outChannels", 1)))
        if "levels" in data and int(data["levels"]) != d.levels:
            raise ValueError("descriptor levels disagree with the channel list")
        return d

    def layer_shapes(self) -> dict:
        """Ordered parameter names and shapes implied by the descriptor."""
        shapes = {}
        ch = self.channels
        c_in = self.in_channels
        for lvl, c in enumerate(ch):
            for k in range(self.convs_per_level):
                cin = c_in if k == 0 else c
                shapes[f"enc{lvl}.conv{k}.W"] = (cin, c)
                shapes[f"enc{lvl}.conv{k}.b"] = (c,)
            c_in = c
            if lvl < self.levels - 1:
                shapes[f"pool{lvl}.p"] = (c,)
        for lvl in range(self.levels - 2, -1, -1):
            c = ch[lvl]
            for k in range(self.convs_per_level):
                cin = ch[lvl + 1] + c if k == 0 else c
                shapes[f"dec{lvl}.conv{k}.W"] = (cin, c)
                shapes[f"dec{lvl}.conv{k}.b"] = (c,)
        shapes["out.W"] = (ch[0], self.out_channels)
        shapes["out.b"] = (self.out_channels,)
        return shapes

    def parameter_count(self) -> int:
        return int(sum(math.prod(s) for s in self.layer_shapes().values()))


@dataclass(frozen=True)
class GraphSignal:
    features: np.ndarray
    graph: Graph

    def __post_init__(self):
        if self.features.shape[0] != self.graph.node_count:
            raise ValueError("feature rows must equal the graph node count")


@dataclass(eq=False)
class GUNetModel:
    descriptor: Descriptor
    params: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, descriptor: Descriptor | None = None, seed: int = 0) -> "GUNetModel":
        """He-uniform weights scaled for the leaky rectifier, zero biases.

        Hidden convolutions use bound sqrt(6 / ((1 + a^2) fan_in)) with the
        leak a = 0.01, which keeps the activation scale roughly constant
        through the 20-odd layers; the linear output projection uses gain 1
        and pooling projections only matter through their direction.
        """
        descriptor = descriptor or Descriptor()
        descriptor.validate()
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in descriptor.layer_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
                continue
            fan_in = shape[0]
            if name.endswith(".p") or name.startswith("out."):
                bound = math.sqrt(3.0 / fan_in)
            else:
                bound = math.sqrt(6.0 / ((1 + LEAKY_SLOPE ** 2) * fan_in))
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(descriptor, params)

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "GUNetModel":
        return GUNetModel(self.descriptor, {k: v.copy() for k, v in self.params.items()})

    # ------------------------------------------------------------------
    def forward(self, X: np.ndarray, A: sp.csr_matrix, A_hat: sp.csr_matrix, keep_cache: bool = False):
        """Output features for input ``X`` on the graph ``(A, A_hat)``.

        ``A`` is the 0/1 structure (no self-loops) used for pooling,
        ``A_hat`` the normalized convolution operator.
        """
        desc, P = self.descriptor, self.params
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != desc.in_channels:
            raise ValueError(f"expected {desc.in_channels} input channels, got {X.shape[1]}")
        tape = []
        graphs = [(A, A_hat)]
        skips = []
        pools = []
        h = X
        for lvl in range(desc.levels):
            Ahat_l = graphs[-1][1]
            for k in range(desc.convs_per_level):
                name = f"enc{lvl}.conv{k}"
                h, cache = gcn_layer_forward(h, Ahat_l, P[name + ".W"], P[name + ".b"])
                tape.append(("conv", name, lvl, cache))
            if lvl < desc.levels - 1:
                skips.append(h)
                pre = h
                h, level = kmax_pool(h, graphs[-1][0], P[f"pool{lvl}.p"], desc.pool_keep_fraction)
                pools.append((level, pre))
                graphs.append((level.A, level.A_hat))
                tape.append(("pool", f"pool{lvl}", lvl, None))
        for lvl in range(desc.levels - 2, -1, -1):
            level, _ = pools[lvl]
            n_fine = graphs[lvl][0].shape[0]
            up = clone_cluster_unpool(h, n_fine, level.kept, level.assignment)
            c_up = up.shape[1]
            h = np.concatenate([up, skips[lvl]], axis=1)
            tape.append(("unpool", f"unpool{lvl}", lvl, c_up))
            Ahat_l = graphs[lvl][1]
            for k in range(desc.convs_per_level):
                name = f"dec{lvl}.conv{k}"
                h, cache = gcn_layer_forward(h, Ahat_l, P[name + ".W"], P[name + ".b"])
                tape.append(("conv", name, lvl, cache))
        # node-wise linear projection: no further smoothing of the output
        out = h @ P["out.W"] + P["out.b"]
        tape.append(("linear", "out", 0, h))
        if keep_cache:
            return out, (tape, graphs, pools)
        return out

    def backward(self, dOut: np.ndarray, state) -> tuple[dict, np.ndarray]:
        """Parameter gradients and the input gradient for a stored forward pass."""
        tape, graphs, pools = state
        P = self.params
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        skip_grads: dict = {}
        g = dOut
        for kind, name, lvl, cache in reversed(tape):
            if kind == "linear":
                grads[name + ".W"] += cache.T @ g
                grads[name + ".b"] += g.sum(axis=0)
                g = g @ P[name + ".W"].T
            elif kind == "conv":
                Ahat_l = graphs[lvl][1]
                g, dW, db = gcn_layer_backward(g, Ahat_l, P[name + ".W"], cache)
                grads[name + ".W"] += dW
                grads[name + ".b"] += db
            elif kind == "unpool":
                c_up = cache
                level, _ = pools[lvl]
                skip_grads[lvl] = g[:, c_up:]
                g = clone_cluster_unpool_backward(g[:, :c_up], len(level.kept), level.assignment)
            elif kind == "pool":
                level, pre = pools[lvl]
                g, dp = kmax_pool_backward(g, pre, level)
                grads[f"pool{lvl}.p"] += dp
                # the pre-pool activation also feeds the skip connection
                g = g + skip_grads.pop(lvl)
        return grads, g

    def __call__(self, signal: GraphSignal) -> GraphSignal:
        out = self.forward(signal.features, signal.graph.adjacency, signal.graph.normalized_adjacency)
        return GraphSignal(out, signal.graph)

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": MODEL_FORMAT_VERSION,
            "descriptor": self.descriptor.to_dict(),
            "parameterCount": self.parameter_count,
            "parameters": [
                {"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in self.params.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GUNetModel":
        if not isinstance(data, dict) or data.get("version") != MODEL_FORMAT_VERSION:
            raise CorruptModelError(f"unsupported model file version {data.get('version')!r}"
                                    if isinstance(data, dict) else "model file is not an object")
        try:
            desc = Descriptor.from_dict(data["descriptor"])
            expected = desc.layer_shapes()
            params = {}
            for block in data["parameters"]:
                shape = tuple(int(s) for s in block["shape"])
                arr = np.asarray(block["data"], dtype=float)
                if arr.size != math.prod(shape):
                    raise CorruptModelError(f"block {block['name']} has {arr.size} values for shape {shape}")
                params[block["name"]] = arr.reshape(shape)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CorruptModelError):
                raise
            raise CorruptModelError(f"malformed model file: {exc}") from exc
        if set(params) != set(expected) or any(params[k].shape != s for k, s in expected.items()):
            raise CorruptModelError("parameter blocks do not match the descriptor")
        if int(data.get("parameterCount", -1)) != desc.parameter_count():
            raise CorruptModelError("parameterCount does not match the descriptor")
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise CorruptModelError("non-finite parameter values")
        return cls(desc, {k: params[k] for k in expected})


def save_model(model: GUNetModel, path, extra: dict | None = None) -> None:
    payload = model.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload))


def load_model(path) -> GUNetModel:
    try:
        data = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptModelError(f"cannot parse model file {path}: {exc}") from exc
    return GUNetModel.from_dict(data)


def gunet_forward(model: GUNetModel, signal: GraphSignal) -> GraphSignal:
    return model(signal)
