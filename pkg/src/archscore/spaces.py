"""Search-space descriptors and genotypes.

Three space kinds are covered: operation-on-edge cells (every edge of a
small DAG carries one op), operation-on-node cells (each node carries one
op; connectivity is fixed to all-predecessors), and non-topological
decision spaces (depth/width/ratio/groups per stage).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import layers as L

ENUMERATION_GUARD = 10_000_000

# characters reserved by the canonical encoding
_RESERVED = set("()@+#$/,")


@dataclass(frozen=True)
class OpTemplate:
    """One operation choice at a cell position.

    ``role`` distinguishes the two structurally special choices: ``none``
    (absent edge) and ``skip`` (identity).  Ordinary ops name a primitive:
    convs realize as relu-conv-bn, pools as a bare pooling layer.
    """

    name: str
    role: str = "op"            # "op" | "none" | "skip"
    layer_kind: str = ""        # conv2d | avgpool | maxpool for role == "op"
    kernel: int = 3

    def __post_init__(self):
        if self.role not in ("op", "none", "skip"):
            raise ValueError(f"bad op role {self.role!r}")
        if _RESERVED & set(self.name):
            raise ValueError(f"op name {self.name!r} uses reserved characters")
        if self.role == "op" and not self.layer_kind:
            raise ValueError(f"op {self.name!r} needs a layer_kind")

    @property
    def has_params(self) -> bool:
        return self.layer_kind == "conv2d"


OP_NONE = OpTemplate("none", role="none")
OP_SKIP = OpTemplate("skip_connect", role="skip")
OP_CONV1 = OpTemplate("nor_conv_1x1", layer_kind="conv2d", kernel=1)
OP_CONV3 = OpTemplate("nor_conv_3x3", layer_kind="conv2d", kernel=3)
OP_AVGPOOL = OpTemplate("avg_pool_3x3", layer_kind="avgpool", kernel=3)
OP_MAXPOOL = OpTemplate("max_pool_3x3", layer_kind="maxpool", kernel=3)


@dataclass(frozen=True)
class StageGeometry:
    """Per-stage channel counts and square spatial sizes plus the image head."""

    channels: tuple[int, ...] = (16, 32, 64)
    spatial: tuple[int, ...] = (32, 16, 8)
    cells_per_stage: tuple[int, ...] = (1, 1, 1)
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10

    def __post_init__(self):
        if not (len(self.channels) == len(self.spatial) == len(self.cells_per_stage)):
            raise ValueError("stage geometry tuples must have equal length")

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def c2hw(self, stage: int) -> int:
        """C^2 * H * W of the stage; equal across stages makes params and
        FLOPs rankings coincide."""
        return self.channels[stage] ** 2 * self.spatial[stage] ** 2


@dataclass(frozen=True)
class Decision:
    """One non-topological decision and its ordered value choices."""

    name: str
    choices: tuple[int, ...]


@dataclass(frozen=True)
class SearchSpaceDesc:
    name: str
    kind: str                                   # op_on_edge | op_on_node | non_topological
    num_nodes: int = 0
    edges: tuple[tuple[int, int], ...] = ()     # (src, dst), topological
    ops: tuple[OpTemplate, ...] = ()
    stages: StageGeometry = field(default_factory=StageGeometry)
    decisions: tuple[Decision, ...] = ()
    bn_affine: bool = True

    def __post_init__(self):
        if self.kind not in ("op_on_edge", "op_on_node", "non_topological"):
            raise ValueError(f"bad space kind {self.kind!r}")
        if self.kind == "op_on_edge":
            for (s, d) in self.edges:
                if not (0 <= s < d < self.num_nodes):
                    raise ValueError(f"edge ({s},{d}) is not topological")

    @property
    def is_topological(self) -> bool:
        return self.kind in ("op_on_edge", "op_on_node")

    @property
    def num_positions(self) -> int:
        if self.kind == "op_on_edge":
            return len(self.edges)
        if self.kind == "op_on_node":
            return self.num_nodes - 1
        return len(self.decisions)

    def cardinalities(self) -> tuple[int, ...]:
        if self.is_topological:
            return (len(self.ops),) * self.num_positions
        return tuple(len(d.choices) for d in self.decisions)

    def size(self) -> int:
        n = 1
        for c in self.cardinalities():
            n *= c
        return n

    def op_index(self, name: str) -> int:
        for i, op in enumerate(self.ops):
            if op.name == name:
                return i
        raise KeyError(f"no op named {name!r} in space {self.name!r}")


@dataclass(frozen=True, order=True)
class Genotype:
    """One architecture: a vector of decision indices.

    Ordering is lexicographic over the index vector, so genotypes sort
    and hash; the text form is ``<space>/<i>,<i>,...``.
    """

    space: str
    indices: tuple[int, ...]

    def __str__(self) -> str:
        return f"{self.space}/{','.join(str(i) for i in self.indices)}"

    @classmethod
    def parse(cls, text: str) -> "Genotype":
        space, _, rest = text.partition("/")
        if not space or not rest:
            raise ValueError(f"bad genotype text {text!r}")
        return cls(space, tuple(int(t) for t in rest.split(",")))

    def op_names(self, space: SearchSpaceDesc) -> tuple[str, ...]:
        return tuple(space.ops[i].name for i in self.indices)


def validate_genotype(g: Genotype, space: SearchSpaceDesc) -> None:
    cards = space.cardinalities()
    if g.space != space.name:
        raise ValueError(f"genotype {g} does not belong to space {space.name!r}")
    if len(g.indices) != len(cards):
        raise ValueError(f"genotype {g} has {len(g.indices)} positions, "
                         f"space expects {len(cards)}")
    for i, (v, c) in enumerate(zip(g.indices, cards)):
        if not 0 <= v < c:
            raise ValueError(f"genotype {g}: index {v} at position {i} "
                             f"exceeds cardinality {c}")


def enumerate_space(space: SearchSpaceDesc) -> Iterator[Genotype]:
    """Every genotype exactly once, lexicographic order."""
    if space.size() > ENUMERATION_GUARD:
        raise ValueError(
            f"space {space.name!r} has {space.size()} genotypes, over the "
            f"enumeration guard ({ENUMERATION_GUARD}); sample instead")
    for combo in itertools.product(*[range(c) for c in space.cardinalities()]):
        yield Genotype(space.name, combo)


def sample_uniform(space: SearchSpaceDesc, rng: np.random.Generator) -> Genotype:
    cards = space.cardinalities()
    return Genotype(space.name, tuple(int(rng.integers(c)) for c in cards))


def mutation_pairs(space: SearchSpaceDesc, from_op: str,
                   to_op: str) -> Iterator[tuple[Genotype, Genotype]]:
    """Every ordered edit-distance-1 pair mutating ``from_op`` into ``to_op``.

    Yields one pair per (position, background assignment).
    """
    if from_op == to_op:
        raise ValueError("from_op and to_op must differ")
    if not space.is_topological:
        raise ValueError("mutation pairs are defined for topological spaces")
    a, b = space.op_index(from_op), space.op_index(to_op)
    npos = space.num_positions
    nops = len(space.ops)
    for pos in range(npos):
        for rest in itertools.product(range(nops), repeat=npos - 1):
            base = list(rest[:pos]) + [a] + list(rest[pos:])
            mut = list(base)
            mut[pos] = b
            yield (Genotype(space.name, tuple(base)),
                   Genotype(space.name, tuple(mut)))


def count_params_flops(g: Genotype, space: SearchSpaceDesc) -> tuple[int, int]:
    """Exact cell-op parameter and FLOP counts (stem/head excluded).

    FLOPs follow the documented 2*MAC convention, so only convolutions
    count; batch-norm affine parameters are included when the space uses
    affine norms.
    """
    validate_genotype(g, space)
    geo = space.stages
    if space.kind == "non_topological":
        from .nontopo import count_params_flops_nontopo
        return count_params_flops_nontopo(g, space)
    params = 0
    flops = 0
    for stage in range(geo.num_stages):
        c = geo.channels[stage]
        hw = geo.spatial[stage]
        cell_params = 0
        cell_flops = 0
        for idx in g.indices:
            op = space.ops[idx]
            if op.layer_kind != "conv2d":
                continue
            conv = L.LayerSpec("conv2d", in_channels=c, out_channels=c,
                               kernel=op.kernel, padding=op.kernel // 2)
            cell_params += L.count_layer_params(conv)
            if space.bn_affine:
                cell_params += 2 * c
            cell_flops += L.count_layer_flops(conv, hw, hw)
        n_cells = geo.cells_per_stage[stage]
        params += n_cells * cell_params
        flops += n_cells * cell_flops
    return params, flops


# --------------------------------------------------------------------------
# ready-made spaces

NB201_EDGES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
NB201_OPS = (OP_NONE, OP_SKIP, OP_CONV1, OP_CONV3, OP_AVGPOOL)


def nb201_like(name: str = "nb201-like",
               stages: Optional[StageGeometry] = None,
               ops: tuple[OpTemplate, ...] = NB201_OPS,
               bn_affine: bool = True) -> SearchSpaceDesc:
    """The 4-node / 6-edge / 5-op cell space on the 16-32-64 geometry."""
    return SearchSpaceDesc(
        name=name, kind="op_on_edge", num_nodes=4, edges=NB201_EDGES,
        ops=ops, stages=stages or StageGeometry(), bn_affine=bn_affine)


def toy_edge_space(name: str = "toy3",
                   ops: tuple[OpTemplate, ...] = (OP_SKIP, OP_CONV1, OP_CONV3),
                   stages: Optional[StageGeometry] = None,
                   bn_affine: bool = False) -> SearchSpaceDesc:
    """27-genotype desk space: 3 nodes, 3 edges, 3 ops, 16x16 inputs."""
    return SearchSpaceDesc(
        name=name, kind="op_on_edge", num_nodes=3,
        edges=((0, 1), (0, 2), (1, 2)), ops=ops,
        stages=stages or StageGeometry(channels=(8, 16), spatial=(16, 8),
                                       cells_per_stage=(1, 1), in_channels=3,
                                       image_size=16, num_classes=4),
        bn_affine=bn_affine)


def toy_node_space(name: str = "toynode",
                   ops: tuple[OpTemplate, ...] = (OP_CONV1, OP_CONV3, OP_AVGPOOL),
                   stages: Optional[StageGeometry] = None) -> SearchSpaceDesc:
    """Op-on-node space: each non-input node applies its op to the sum of
    all previous nodes (fixed connectivity, shared node parameters)."""
    return SearchSpaceDesc(
        name=name, kind="op_on_node", num_nodes=4, ops=ops,
        stages=stages or StageGeometry(channels=(8, 16), spatial=(16, 8),
                                       cells_per_stage=(1, 1), in_channels=3,
                                       image_size=16, num_classes=4),
        bn_affine=False)


def nds_resnet_like(name: str = "nds-resnet-like",
                    depths: tuple[int, ...] = (1, 2, 3),
                    widths: tuple[int, ...] = (8, 12, 16),
                    ratios: tuple[int, ...] = (),
                    groups: tuple[int, ...] = (),
                    stages: Optional[StageGeometry] = None) -> SearchSpaceDesc:
    """Desk-scale non-topological space over residual stages.

    Decisions: per-stage depth and width, plus optional bottleneck ratio
    and group count (shared across stages like the benchmark family).
    """
    geo = stages or StageGeometry(channels=(16, 16), spatial=(16, 8),
                                  cells_per_stage=(1, 1), in_channels=3,
                                  image_size=16, num_classes=4)
    decisions: list[Decision] = []
    for s in range(geo.num_stages):
        decisions.append(Decision(f"depth{s}", tuple(depths)))
    for s in range(geo.num_stages):
        decisions.append(Decision(f"width{s}", tuple(widths)))
    if ratios:
        decisions.append(Decision("ratio", tuple(ratios)))
    if groups:
        decisions.append(Decision("groups", tuple(groups)))
    return SearchSpaceDesc(name=name, kind="non_topological", stages=geo,
                           decisions=tuple(decisions), bn_affine=False)


def prune_ops(space: SearchSpaceDesc, removed: tuple[str, ...]) -> SearchSpaceDesc:
    """Sub-space with the named operations removed from the vocabulary."""
    if not space.is_topological:
        raise ValueError("op pruning applies to topological spaces")
    removed_set = set(removed)
    unknown = removed_set - {op.name for op in space.ops}
    if unknown:
        raise KeyError(f"ops not in space: {sorted(unknown)}")
    kept = tuple(op for op in space.ops if op.name not in removed_set)
    if not kept:
        raise ValueError("op pruning would leave an empty vocabulary")
    suffix = "" if not removed else "-minus-" + "-".join(sorted(removed_set))
    return SearchSpaceDesc(
        name=space.name + suffix, kind=space.kind, num_nodes=space.num_nodes,
        edges=space.edges, ops=kept, stages=space.stages,
        decisions=space.decisions, bn_affine=space.bn_affine)


def embed_genotype(g: Genotype, sub: SearchSpaceDesc,
                   full: SearchSpaceDesc) -> Genotype:
    """Map a sub-space genotype onto the full space's op indices."""
    names = g.op_names(sub)
    return Genotype(full.name, tuple(full.op_index(n) for n in names))
