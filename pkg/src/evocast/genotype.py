"""DAG-encoded candidate networks.

A genotype holds two DAG stages: a 2-D stage operating on (time, feature)
matrices and, after a flatten, a 1-D stage operating on vectors.  A fixed
feed-forward output layer maps the 1-D stage output to the day length.
Each DAG is a strictly upper-triangular adjacency matrix over
input anchor / interior nodes / output anchor plus one layer spec per
interior node.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .layers import LayerSpec, StructuralError
from .tensor import Tensor

M_MAX_INTERIOR = 12
DEFAULT_INIT_MAX = 5

# sampling ranges for layer hyperparameters; 1-D conv/attention widths are
# kept small because their channel outputs multiply the vector width
HP_RANGES = {
    "mlp_out": (4, 64),
    "conv2d_out": (4, 64),
    "conv1d_out": (2, 8),
    "attn2d_out": (4, 64),
    "attn1d_out": (1, 4),
    "kernel": (2, 5),
    "pool": (2, 5),
    "heads": (1, 4),
    "dropout": (0.0, 0.5),
}


@dataclass(frozen=True)
class NodeSpec:
    combiner: str
    layer: LayerSpec
    activation: str

    def __post_init__(self):
        if self.combiner not in L.COMBINERS:
            raise L.ConfigError(f"unknown combiner {self.combiner!r}")
        if self.activation not in L.ACTIVATIONS:
            raise L.ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class DagSpec:
    adjacency: np.ndarray  # (m, m) bool, strictly upper triangular
    nodes: list  # m - 2 NodeSpec for the interior nodes

    @property
    def m(self):
        return self.adjacency.shape[0]

    def copy(self):
        return DagSpec(self.adjacency.copy(), list(self.nodes))

    def __eq__(self, other):
        return (
            isinstance(other, DagSpec)
            and np.array_equal(self.adjacency, other.adjacency)
            and self.nodes == other.nodes
        )


@dataclass
class Genotype:
    gamma1: DagSpec  # 2-D stage
    gamma2: DagSpec  # 1-D stage
    h: int  # output day length

    def __eq__(self, other):
        return (
            isinstance(other, Genotype)
            and self.h == other.h
            and self.gamma1 == other.gamma1
            and self.gamma2 == other.gamma2
        )

    def copy(self):
        return Genotype(self.gamma1.copy(), self.gamma2.copy(), self.h)


class DagValidationError(StructuralError):
    def __init__(self, rule, node, message):
        self.rule = rule
        self.node = node
        super().__init__(f"{rule} at node {node}: {message}")


def validate_dag(dag, two_d):
    """Check all DAG invariants; raises DagValidationError naming the first
    violated rule and node."""
    m = dag.m
    adj = dag.adjacency
    if m < 2 or m - 2 > M_MAX_INTERIOR:
        raise DagValidationError("Size", m, f"node count {m} outside [2, {M_MAX_INTERIOR + 2}]")
    if adj.shape != (m, m):
        raise DagValidationError("Size", 0, f"adjacency shape {adj.shape}")
    if len(dag.nodes) != m - 2:
        raise DagValidationError("Size", 0, f"{len(dag.nodes)} specs for {m - 2} interior nodes")
    lower = np.tril(adj)
    if lower.any():
        i, j = np.argwhere(lower)[0]
        raise DagValidationError("Cyclic", int(i), f"edge {i}->{j} on/below diagonal")
    for i in range(1, m):
        if not adj[:, i].any():
            raise DagValidationError("Disconnected", i, "no incoming edge")
    for i in range(m - 1):
        if not adj[i, :].any():
            raise DagValidationError("Dangling", i, "no outgoing edge")
    legal = L.LAYER_KINDS_2D if two_d else L.LAYER_KINDS_1D
    for idx, node in enumerate(dag.nodes):
        if node.layer.kind not in legal:
            raise DagValidationError(
                "IllegalKind", idx + 1, f"{node.layer.kind} in {'2-D' if two_d else '1-D'} stage"
            )
        if not two_d and "dimension" in node.layer.params:
            raise DagValidationError(
                "IllegalKind", idx + 1, "attention dimension outside the 2-D stage"
            )


def validate_genotype(g):
    validate_dag(g.gamma1, two_d=True)
    validate_dag(g.gamma2, two_d=False)
    if g.h < 1:
        raise StructuralError(f"output length must be >= 1, got {g.h}")


# ---------------------------------------------------------------------------
# random sampling

def _randint(rng, key):
    lo, hi = HP_RANGES[key]
    return int(rng.integers(lo, hi + 1))


def random_layer_spec(rng, two_d):
    kinds = L.LAYER_KINDS_2D if two_d else L.LAYER_KINDS_1D
    kind = str(rng.choice(kinds))
    if kind == "Identity":
        return LayerSpec("Identity", {})
    if kind == "MLP":
        return LayerSpec("MLP", {"out": _randint(rng, "mlp_out")})
    if kind == "SelfAttention":
        heads = _randint(rng, "heads")
        params = {
            "init": str(rng.choice(["convolution", "random"])),
            "heads": heads,
            "out": _randint(rng, "attn2d_out" if two_d else "attn1d_out"),
        }
        if two_d:
            params["dimension"] = str(rng.choice(["temporal", "spatial"]))
        return LayerSpec("SelfAttention", params)
    if kind in ("Conv1D", "Conv2D"):
        return LayerSpec(
            kind,
            {
                "kernel": _randint(rng, "kernel"),
                "out": _randint(rng, "conv2d_out" if kind == "Conv2D" else "conv1d_out"),
            },
        )
    if kind in ("Pool1D", "Pool2D"):
        return LayerSpec(
            kind,
            {"size": _randint(rng, "pool"), "type": str(rng.choice(["max", "average"]))},
        )
    if kind in ("Norm1D", "Norm2D"):
        return LayerSpec(kind, {"type": str(rng.choice(["batch", "layer"]))})
    return LayerSpec("Dropout", {"rate": float(rng.uniform(*HP_RANGES["dropout"]))})


def random_node_spec(rng, two_d):
    return NodeSpec(
        combiner=str(rng.choice(L.COMBINERS)),
        layer=random_layer_spec(rng, two_d),
        activation=str(rng.choice(L.ACTIVATIONS)),
    )


def random_dag(rng, two_d, interior_max):
    n_interior = int(rng.integers(0, interior_max + 1))
    m = n_interior + 2
    adj = np.zeros((m, m), dtype=bool)
    # sparse random wiring above the diagonal, then repair connectivity
    for i in range(m):
        for j in range(i + 1, m):
            adj[i, j] = rng.random() < 0.35
    nodes = [random_node_spec(rng, two_d) for _ in range(n_interior)]
    dag = DagSpec(adj, nodes)
    repair_dag(dag, rng)
    return dag


def repair_dag(dag, rng):
    """Reconnect dangling/disconnected nodes; keeps strict upper-triangularity."""
    m = dag.m
    adj = dag.adjacency
    adj &= ~np.tril(np.ones((m, m), dtype=bool))
    for i in range(1, m):
        if not adj[:, i].any():
            adj[int(rng.integers(0, i)), i] = True
    for i in range(m - 1):
        if not adj[i, :].any():
            adj[i, int(rng.integers(i + 1, m))] = True
    return dag


def random_genotype(seed, h, f, m_init_max=DEFAULT_INIT_MAX, rng=None):
    """Sample a small valid genotype; pure function of the seed."""
    if m_init_max < 2:
        raise L.ConfigError(f"m_init_max must be >= 2, got {m_init_max}")
    if rng is None:
        rng = np.random.default_rng(seed)
    interior_max = min(m_init_max - 2, M_MAX_INTERIOR)
    for _ in range(32):
        g = Genotype(
            gamma1=random_dag(rng, True, interior_max),
            gamma2=random_dag(rng, False, interior_max),
            h=h,
        )
        try:
            validate_genotype(g)
            return g
        except StructuralError:  # pragma: no cover - repair should prevent this
            continue
    raise StructuralError("failed to sample a valid genotype")


# ---------------------------------------------------------------------------
# the handcrafted two-branch convolution + MLP seed architecture

def cnn_mlp_seed(h, f):
    """2-D stage: single identity node.  1-D stage: two parallel
    convolution->average-pool branches plus an MLP branch, concatenated and
    fed to a final MLP node."""
    g1 = DagSpec(np.zeros((3, 3), dtype=bool), [
        NodeSpec("add", LayerSpec("Identity", {}), "identity"),
    ])
    g1.adjacency[0, 1] = True
    g1.adjacency[1, 2] = True

    # nodes 1..7: conv_a, pool_a, conv_b, pool_b, mlp_branch, merge, head
    nodes = [
        NodeSpec("add", LayerSpec("Conv1D", {"kernel": 3, "out": 4}), "relu"),
        NodeSpec("add", LayerSpec("Pool1D", {"size": 2, "type": "average"}), "identity"),
        NodeSpec("add", LayerSpec("Conv1D", {"kernel": 5, "out": 4}), "relu"),
        NodeSpec("add", LayerSpec("Pool1D", {"size": 2, "type": "average"}), "identity"),
        NodeSpec("add", LayerSpec("MLP", {"out": 64}), "relu"),
        NodeSpec("concat", LayerSpec("Identity", {}), "identity"),
        NodeSpec("add", LayerSpec("MLP", {"out": 64}), "relu"),
    ]
    m = len(nodes) + 2
    adj = np.zeros((m, m), dtype=bool)
    for i, j in [(0, 1), (1, 2), (0, 3), (3, 4), (0, 5), (2, 6), (4, 6), (5, 6), (6, 7), (7, 8)]:
        adj[i, j] = True
    g2 = DagSpec(adj, nodes)
    g = Genotype(g1, g2, h)
    validate_genotype(g)
    return g


# ---------------------------------------------------------------------------
# network instantiation and forward

class Network:
    """Trainable instantiation of a genotype for a fixed feature count.

    Parameters are created lazily on the first forward pass (shapes follow
    from the genotype deterministically), seeded per node so initialization
    does not depend on evaluation order.
    """

    def __init__(self, genotype, f, seed=0):
        validate_genotype(genotype)
        self.genotype = genotype
        self.f = int(f)
        self.seed = int(seed)
        self.params = {}
        self._built = False

    def _node_rng(self, key):
        # stable across processes, unlike hash()
        tag = zlib.crc32(repr(key).encode())
        return np.random.default_rng(np.random.SeedSequence([self.seed, tag]))

    def _ensure_params(self, key, spec, in_shape, two_d):
        if key not in self.params:
            self.params[key] = L.init_layer_params(
                spec, in_shape, self._node_rng(key), two_d=two_d
            )
        return self.params[key]

    def _run_dag(self, dag, x, two_d, mode, prefix):
        outs = [None] * dag.m
        outs[0] = x
        for i in range(1, dag.m):
            preds = [outs[j] for j in range(i) if dag.adjacency[j, i]]
            if i == dag.m - 1:
                outs[i] = L.combine(preds, "add")
                continue
            node = dag.nodes[i - 1]
            combined = L.combine(preds, node.combiner)
            try:
                params = self._ensure_params(
                    (prefix, i), node.layer, combined.shape[1:], two_d
                )
                y = L.layer_forward(node.layer, params, combined, mode=mode)
            except (T.ShapeError, L.StructuralError) as exc:
                raise StructuralError(
                    f"node {prefix}[{i}] ({node.layer.kind}): {exc}"
                ) from exc
            outs[i] = L.apply_activation(node.activation, y)
        return outs[-1]

    def forward(self, x, mode="eval"):
        """Map (batch, time, features) input to (batch, day-length) output."""
        if x.data.ndim != 3 or x.shape[1:] != (self.genotype.h, self.f):
            raise StructuralError(
                f"expected input (batch, {self.genotype.h}, {self.f}), got {x.shape}"
            )
        b = x.shape[0]
        y = self._run_dag(self.genotype.gamma1, x, True, mode, "g1")
        y = T.reshape(y, (b, y.shape[1] * y.shape[2]))
        y = self._run_dag(self.genotype.gamma2, y, False, mode, "g2")
        key = ("out",)
        if key not in self.params:
            rng = self._node_rng(key)
            self.params[key] = {
                "w": T.parameter(L._glorot(rng, (y.shape[1], self.genotype.h))),
                "b": T.parameter(np.zeros(self.genotype.h)),
            }
        out_p = self.params[key]
        self._built = True
        if out_p["w"].shape[0] != y.shape[1]:
            raise StructuralError(
                f"final layer built for width {out_p['w'].shape[0]}, got {y.shape[1]}"
            )
        if not np.all(np.isfinite(y.data)):
            raise FloatingPointError("non-finite activations in network forward")
        return T.add(T.matmul(y, out_p["w"]), out_p["b"])

    def build(self):
        """Instantiate all parameters via a throwaway forward pass."""
        if not self._built:
            x = Tensor(np.zeros((1, self.genotype.h, self.f)))
            self.forward(x, mode="eval")
        return self

    def parameters(self):
        self.build()
        out = []
        for record in self.params.values():
            out.extend(L.layer_param_tensors(record))
        return out

    def checkpoint(self):
        """Deep copy of all trainable values and normalization buffers."""
        self.build()
        snap = {}
        for key, record in self.params.items():
            snap[key] = {
                name: (value.data.copy() if isinstance(value, Tensor) else value)
                for name, value in record.items()
                if name != "rng"
            }
            for name, value in record.items():
                if isinstance(value, np.ndarray):
                    snap[key][name] = value.copy()
                elif isinstance(value, L.AttentionParams):
                    snap[key][name] = [w.data.copy() for w in value.tensors()]
        return snap

    def load_checkpoint(self, snap):
        for key, record in self.params.items():
            for name, value in record.items():
                stored = snap[key].get(name)
                if isinstance(value, Tensor):
                    value.data[...] = stored
                elif isinstance(value, np.ndarray):
                    value[...] = stored
                elif isinstance(value, L.AttentionParams):
                    for w, saved in zip(value.tensors(), stored):
                        w.data[...] = saved


def build_network(genotype, f, seed=0):
    return Network(genotype, f, seed=seed).build()


def network_forward(network, x, mode="eval"):
    return network.forward(x, mode=mode)


# ---------------------------------------------------------------------------
# serialization

class GenotypeParseError(ValueError):
    pass


def _dag_to_dict(dag):
    edges = [[int(i), int(j)] for i, j in np.argwhere(dag.adjacency)]
    return {
        "m": dag.m,
        "edges": edges,
        "nodes": [
            {
                "combiner": n.combiner,
                "layer": {"kind": n.layer.kind, **n.layer.params},
                "activation": n.activation,
            }
            for n in dag.nodes
        ],
    }


def _dag_from_dict(d, where):
    try:
        m = int(d["m"])
        adj = np.zeros((m, m), dtype=bool)
        for i, j in d["edges"]:
            if not 0 <= i < j < m:
                raise GenotypeParseError(
                    f"{where}: edge [{i}, {j}] must satisfy 0 <= from < to < m"
                )
            adj[int(i), int(j)] = True
        nodes = []
        for idx, n in enumerate(d["nodes"]):
            layer = dict(n["layer"])
            kind = layer.pop("kind")
            try:
                spec = LayerSpec(kind, layer)
            except L.ConfigError as exc:
                raise GenotypeParseError(f"{where}.nodes[{idx}]: {exc}") from exc
            nodes.append(NodeSpec(n["combiner"], spec, n["activation"]))
        return DagSpec(adj, nodes)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GenotypeParseError):
            raise
        raise GenotypeParseError(f"{where}: {exc}") from exc


def serialize_genotype(g):
    return json.dumps(
        {"h": g.h, "gamma1": _dag_to_dict(g.gamma1), "gamma2": _dag_to_dict(g.gamma2)},
        indent=2,
        sort_keys=True,
    )


def deserialize_genotype(text):
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeParseError(f"line {exc.lineno}: {exc.msg}") from exc
    for name in ("h", "gamma1", "gamma2"):
        if name not in payload:
            raise GenotypeParseError(f"missing field {name!r}")
    g = Genotype(
        gamma1=_dag_from_dict(payload["gamma1"], "gamma1"),
        gamma2=_dag_from_dict(payload["gamma2"], "gamma2"),
        h=int(payload["h"]),
    )
    validate_genotype(g)
    return g
