"""Canonical string encoding of cell topologies, and the isomorphism table.

Two genotypes that realize the same computation graph after dropping
``none`` edges and contracting ``skip_connect`` edges map to one string.
Node expressions are built in topological order: an edge from a node with
expression ``S`` contributes ``#`` when it is a ``none`` edge or ``S`` is
the zero marker, ``S`` itself for a skip edge, and ``(S)@<op>`` otherwise;
a node's expression is the ``+``-join of its sorted contributions.  The
output node's expression is the canonical string.

On the 6-edge, 5-op cell space this partitions the 15625 genotypes into
exactly 6466 classes, matching the published census of unique structures.
"""

from __future__ import annotations

from dataclasses import dataclass
from threading import Lock
from typing import Optional

import numpy as np

from .spaces import Genotype, SearchSpaceDesc, enumerate_space, validate_genotype

INPUT_ATOM = "0"
ZERO_MARK = "#"
DEAD_TOKEN = "%dead%"


def canonicalize(g: Genotype, space: SearchSpaceDesc,
                 collapse_dead: bool = False) -> str:
    """Canonical string of one genotype's computational equivalence class.

    With ``collapse_dead`` every architecture whose output carries no
    input-dependent signal (no path from input to output) maps to the
    single :data:`DEAD_TOKEN`; by default such architectures keep their
    structural strings, matching the published class census.
    """
    if not space.is_topological:
        raise ValueError("canonicalize is defined for topological spaces")
    validate_genotype(g, space)
    if space.kind == "op_on_edge":
        expr = _encode_edge_space(g, space)
    else:
        expr = _encode_node_space(g, space)
    if collapse_dead and is_dead(expr):
        return DEAD_TOKEN
    return expr


def is_dead(canonical: str) -> bool:
    """True when the canonical string carries no input signal."""
    return canonical == DEAD_TOKEN or INPUT_ATOM not in canonical


def _encode_edge_space(g: Genotype, space: SearchSpaceDesc) -> str:
    exprs = {0: INPUT_ATOM}
    incoming: dict[int, list[tuple[int, int]]] = {}
    for pos, (src, dst) in enumerate(space.edges):
        incoming.setdefault(dst, []).append((src, pos))
    for v in range(1, space.num_nodes):
        terms = []
        for src, pos in incoming.get(v, []):
            op = space.ops[g.indices[pos]]
            if op.role == "none" or exprs[src] == ZERO_MARK:
                terms.append(ZERO_MARK)
            elif op.role == "skip":
                terms.append(exprs[src])
            else:
                terms.append("(" + exprs[src] + ")@" + op.name)
        exprs[v] = "+".join(sorted(terms)) if terms else ZERO_MARK
    return exprs[space.num_nodes - 1]


def _encode_node_space(g: Genotype, space: SearchSpaceDesc) -> str:
    # fixed all-predecessor connectivity: node v applies its op to the sum
    # of all earlier node values
    exprs = {0: INPUT_ATOM}
    for v in range(1, space.num_nodes):
        op = space.ops[g.indices[v - 1]]
        inner = "+".join(sorted(exprs[u] for u in range(v)))
        if op.role == "none":
            exprs[v] = ZERO_MARK
        elif op.role == "skip":
            exprs[v] = inner
        else:
            exprs[v] = "(" + inner + ")@" + op.name
    return exprs[space.num_nodes - 1]


@dataclass
class IsoClass:
    canonical: str
    representative: Genotype
    members: list[Genotype]

    @property
    def size(self) -> int:
        return len(self.members)


class IsoTable:
    """All isomorphism classes of an enumerable topological space.

    Representatives are first-seen genotypes in lexicographic enumeration
    order, so they are stable across runs.  Reads are lock-free after
    construction; the lazy per-genotype lookup used by samplers inserts
    under a lock.
    """

    def __init__(self, space: SearchSpaceDesc, collapse_dead: bool = False):
        self.space = space
        self.collapse_dead = collapse_dead
        self.classes: list[IsoClass] = []
        self._by_string: dict[str, IsoClass] = {}
        self._lock = Lock()
        for g in enumerate_space(space):
            s = canonicalize(g, space, collapse_dead=collapse_dead)
            cls = self._by_string.get(s)
            if cls is None:
                cls = IsoClass(s, g, [])
                self._by_string[s] = cls
                self.classes.append(cls)
            cls.members.append(g)

    def __len__(self) -> int:
        return len(self.classes)

    def class_of(self, g: Genotype) -> IsoClass:
        s = canonicalize(g, self.space, collapse_dead=self.collapse_dead)
        cls = self._by_string.get(s)
        if cls is None:
            with self._lock:
                cls = self._by_string.get(s)
                if cls is None:
                    cls = IsoClass(s, g, [g])
                    self._by_string[s] = cls
                    self.classes.append(cls)
        return cls

    def representative(self, g: Genotype) -> Genotype:
        return self.class_of(g).representative

    def non_dead_classes(self) -> list[IsoClass]:
        return [c for c in self.classes if not is_dead(c.canonical)]


def sample_deiso(table: IsoTable, rng: np.random.Generator) -> Genotype:
    """Uniform over isomorphism classes; returns the class representative."""
    return table.classes[int(rng.integers(len(table.classes)))].representative


def sample(space: SearchSpaceDesc, rng: np.random.Generator,
           mode: str = "uniform", table: Optional[IsoTable] = None) -> Genotype:
    """Draw one genotype, either uniform over raw genotypes or uniform over
    isomorphism classes (``deiso``)."""
    from .spaces import sample_uniform
    if mode == "uniform":
        return sample_uniform(space, rng)
    if mode == "deiso":
        if not space.is_topological:
            raise ValueError("deiso sampling needs a topological space")
        if table is None:
            table = IsoTable(space)
        return sample_deiso(table, rng)
    raise ValueError(f"unknown sampling mode {mode!r}")
