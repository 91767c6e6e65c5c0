"""Evolutionary variation operators over DAG genotypes.

All operators return fresh genotypes and leave their arguments untouched.
Every result is repaired back into the valid region, so closure holds by
construction: mutate and crossover never emit a genotype that fails
validation.
"""

from __future__ import annotations

import numpy as np

from . import genotype as G
from . import layers as L
from .genotype import DagSpec, Genotype, NodeSpec
from .layers import LayerSpec

MUTATION_KINDS = (
    "insert_node",
    "delete_node",
    "add_edge",
    "remove_edge",
    "change_layer",
    "perturb_params",
    "change_combiner",
    "change_activation",
)

# structural edits are far more disruptive than parameter tweaks; weighting
# exploitation higher keeps offspring close to their (already selected) parents
MUTATION_WEIGHTS = {
    "insert_node": 0.08,
    "delete_node": 0.08,
    "add_edge": 0.09,
    "remove_edge": 0.09,
    "change_layer": 0.16,
    "perturb_params": 0.30,
    "change_combiner": 0.08,
    "change_activation": 0.12,
}


def _interior(dag):
    return dag.m - 2


def _insert_node(dag, rng, two_d):
    if _interior(dag) >= G.M_MAX_INTERIOR:
        return False
    m = dag.m
    pos = int(rng.integers(1, m))  # new node index in [1, m-1]
    adj = np.zeros((m + 1, m + 1), dtype=bool)
    old = dag.adjacency
    # shift indices >= pos up by one
    idx = np.arange(m)
    new_idx = np.where(idx >= pos, idx + 1, idx)
    adj[np.ix_(new_idx, new_idx)] = old
    adj[int(rng.integers(0, pos)), pos] = True
    adj[pos, int(rng.integers(pos + 1, m + 1))] = True
    dag.adjacency = adj
    dag.nodes.insert(pos - 1, G.random_node_spec(rng, two_d))
    return True


def _delete_node(dag, rng):
    if _interior(dag) == 0:
        return False
    pos = int(rng.integers(1, dag.m - 1))
    adj = dag.adjacency
    # bridge predecessors to successors so paths survive
    preds = np.where(adj[:, pos])[0]
    succs = np.where(adj[pos, :])[0]
    for p in preds:
        for s in succs:
            adj[p, s] = True
    keep = [i for i in range(dag.m) if i != pos]
    dag.adjacency = adj[np.ix_(keep, keep)]
    del dag.nodes[pos - 1]
    return True


def _add_edge(dag, rng):
    missing = np.argwhere(np.triu(~dag.adjacency, k=1))
    if len(missing) == 0:
        return False
    i, j = missing[int(rng.integers(len(missing)))]
    dag.adjacency[i, j] = True
    return True


def _remove_edge(dag, rng):
    present = np.argwhere(dag.adjacency)
    if len(present) == 0:
        return False
    i, j = present[int(rng.integers(len(present)))]
    dag.adjacency[i, j] = False
    return True


def _perturbed_layer(spec, rng, two_d):
    p = dict(spec.params)
    if spec.kind == "Identity":
        return None
    if spec.kind == "Dropout":
        lo, hi = G.HP_RANGES["dropout"]
        p["rate"] = float(np.clip(p["rate"] + rng.normal(0, 0.1), lo, hi))
    else:
        numeric = [k for k in p if isinstance(p[k], int)]
        if not numeric:
            # pooling/norm types, attention init flavor: resample the choice
            return G.random_layer_spec(rng, two_d) if not p else _flip_choice(spec, p, rng)
        key = numeric[int(rng.integers(len(numeric)))]
        ranges = {
            "out": _out_range(spec.kind, two_d),
            "kernel": G.HP_RANGES["kernel"],
            "size": G.HP_RANGES["pool"],
            "heads": G.HP_RANGES["heads"],
        }
        lo, hi = ranges[key]
        p[key] = int(np.clip(p[key] + int(rng.integers(-2, 3)), lo, hi))
    return LayerSpec(spec.kind, p)


def _out_range(kind, two_d):
    if kind == "MLP":
        return G.HP_RANGES["mlp_out"]
    if kind == "SelfAttention":
        return G.HP_RANGES["attn2d_out" if two_d else "attn1d_out"]
    return G.HP_RANGES["conv2d_out" if two_d else "conv1d_out"]


def _flip_choice(spec, p, rng):
    if "type" in p:
        choices = ("batch", "layer") if spec.kind.startswith("Norm") else ("max", "average")
        p["type"] = str(rng.choice(choices))
    return LayerSpec(spec.kind, p)


def _mutate_node(dag, rng, two_d, what):
    if _interior(dag) == 0:
        return False
    pos = int(rng.integers(0, _interior(dag)))
    node = dag.nodes[pos]
    if what == "change_layer":
        dag.nodes[pos] = NodeSpec(
            node.combiner, G.random_layer_spec(rng, two_d), node.activation
        )
    elif what == "perturb_params":
        new = _perturbed_layer(node.layer, rng, two_d)
        if new is None:
            return False
        dag.nodes[pos] = NodeSpec(node.combiner, new, node.activation)
    elif what == "change_combiner":
        others = [c for c in L.COMBINERS if c != node.combiner]
        dag.nodes[pos] = NodeSpec(str(rng.choice(others)), node.layer, node.activation)
    else:
        others = [a for a in L.ACTIVATIONS if a != node.activation]
        dag.nodes[pos] = NodeSpec(node.combiner, node.layer, str(rng.choice(others)))
    return True


def mutate(genotype, rng, kind=None):
    """One structural or parametric edit on one of the two stages, followed
    by repair.  Inapplicable picks fall through to another attempt, so a
    change always happens when any kind is applicable."""
    child = genotype.copy()
    for _ in range(16):
        which = int(rng.integers(0, 2))
        dag = child.gamma1 if which == 0 else child.gamma2
        two_d = which == 0
        if kind is not None:
            choice = kind
        else:
            weights = np.array([MUTATION_WEIGHTS[k] for k in MUTATION_KINDS])
            choice = str(rng.choice(MUTATION_KINDS, p=weights / weights.sum()))
        if choice == "insert_node":
            done = _insert_node(dag, rng, two_d)
        elif choice == "delete_node":
            done = _delete_node(dag, rng)
        elif choice == "add_edge":
            done = _add_edge(dag, rng)
        elif choice == "remove_edge":
            done = _remove_edge(dag, rng)
        else:
            done = _mutate_node(dag, rng, two_d, choice)
        if done:
            break
    G.repair_dag(child.gamma1, rng)
    G.repair_dag(child.gamma2, rng)
    G.validate_genotype(child)
    return child


# ---------------------------------------------------------------------------
# crossover

def _pad_to(dag, m, rng):
    """Grow a dag to m nodes by adding placeholder interior slots before the
    output anchor; placeholders are marked with None specs and dropped after
    the exchange."""
    extra = m - dag.m
    if extra <= 0:
        return dag.copy(), set()
    old_m = dag.m
    adj = np.zeros((m, m), dtype=bool)
    idx = np.arange(old_m)
    new_idx = np.where(idx == old_m - 1, m - 1, idx)
    adj[np.ix_(new_idx, new_idx)] = dag.adjacency
    out = DagSpec(adj, list(dag.nodes) + [None] * extra)
    return out, set(range(old_m - 1, m - 1))


def _drop_placeholders(dag, rng):
    while None in dag.nodes:
        pos = dag.nodes.index(None) + 1
        adj = dag.adjacency
        preds = np.where(adj[:, pos])[0]
        succs = np.where(adj[pos, :])[0]
        for p in preds:
            for s in succs:
                adj[p, s] = True
        keep = [i for i in range(dag.m) if i != pos]
        dag.adjacency = adj[np.ix_(keep, keep)]
        del dag.nodes[pos - 1]
    return dag


def _crossover_dag(d1, d2, rng):
    """Swap a contiguous block of interior nodes, with the adjacency rows and
    columns they own, between size-aligned copies of the parents."""
    m = max(d1.m, d2.m)
    a, _ = _pad_to(d1, m, rng)
    b, _ = _pad_to(d2, m, rng)
    if m > 2:
        lo = int(rng.integers(1, m - 1))
        hi = int(rng.integers(lo, m - 1))  # inclusive block [lo, hi]
        block = np.arange(lo, hi + 1)
        swap_a = a.adjacency.copy()
        swap_b = b.adjacency.copy()
        for mat_dst, mat_src in ((a.adjacency, swap_b), (b.adjacency, swap_a)):
            mat_dst[block, :] = mat_src[block, :]
            mat_dst[:, block] = mat_src[:, block]
        for i in block:
            a.nodes[i - 1], b.nodes[i - 1] = b.nodes[i - 1], a.nodes[i - 1]
    for child in (a, b):
        _drop_placeholders(child, rng)
        child.adjacency &= ~np.tril(np.ones((child.m, child.m), dtype=bool))
        G.repair_dag(child, rng)
    return a, b


def crossover(parent_a, parent_b, rng):
    """Two offspring from a block exchange in each stage; always valid."""
    g1a, g1b = _crossover_dag(parent_a.gamma1, parent_b.gamma1, rng)
    g2a, g2b = _crossover_dag(parent_a.gamma2, parent_b.gamma2, rng)
    child_a = Genotype(g1a, g2a, parent_a.h)
    child_b = Genotype(g1b, g2b, parent_b.h)
    G.validate_genotype(child_a)
    G.validate_genotype(child_b)
    return child_a, child_b


def tournament_select(fitnesses, rng, size=3):
    """Index of the fittest (lowest) entry among ``size`` distinct draws."""
    n = len(fitnesses)
    if n == 0:
        raise ValueError("empty population")
    picks = rng.choice(n, size=min(size, n), replace=False)
    return int(min(picks, key=lambda i: fitnesses[i]))
