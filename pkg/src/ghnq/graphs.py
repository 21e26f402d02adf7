"""CNN computational graphs: sampling, validation, virtual edges, file format.

A graph is a DAG of typed operation nodes between a single Input and a
single Output. The sampler builds mobile-style networks: a stem
convolution, 1-5 stages of blocks at fixed width, spatial downsampling
between stages, then global average pooling and a classifier. Depth is
measured as the number of convolution nodes; width as the largest
convolution output-channel count. Channel counts come from a powers-of-two
grid, and draws exceeding the parameter cap are rejected and redrawn.

Graphs serialize to a line-oriented text format (see :func:`serialize_graph`).
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import heapq
from collections import deque
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConstraintInfeasibleError, GraphError, GraphFormatError
from .nn import conv_output_extent


class OpKind(enum.Enum):
    CONV_REGULAR = "conv"
    CONV_DEPTHWISE = "dwconv"
    CONV_DILATED = "dilconv"
    BATCHNORM = "bn"
    MAX_POOL = "maxpool"
    AVG_POOL = "avgpool"
    GLOBAL_AVG_POOL = "gap"
    LINEAR = "linear"
    RESIDUAL_ADD = "add"
    CONCAT = "concat"
    RELU = "relu"
    INPUT = "input"
    OUTPUT = "output"


CONV_KINDS = (OpKind.CONV_REGULAR, OpKind.CONV_DEPTHWISE, OpKind.CONV_DILATED)
POOL_KINDS = (OpKind.MAX_POOL, OpKind.AVG_POOL)

_KIND_BY_TOKEN = {k.value: k for k in OpKind}

# attribute schema per kind; order fixed for serialization
_ATTR_KEYS: dict[OpKind, tuple[str, ...]] = {
    OpKind.CONV_REGULAR: ("kernel", "stride", "padding", "dilation", "groups",
                          "c_in", "c_out", "bias"),
    OpKind.CONV_DEPTHWISE: ("kernel", "stride", "padding", "dilation", "groups",
                            "c_in", "c_out", "bias"),
    OpKind.CONV_DILATED: ("kernel", "stride", "padding", "dilation", "groups",
                          "c_in", "c_out", "bias"),
    OpKind.BATCHNORM: ("channels",),
    OpKind.MAX_POOL: ("kernel", "stride", "padding"),
    OpKind.AVG_POOL: ("kernel", "stride", "padding"),
    OpKind.GLOBAL_AVG_POOL: (),
    OpKind.LINEAR: ("in_features", "out_features", "bias"),
    OpKind.RESIDUAL_ADD: (),
    OpKind.CONCAT: (),
    OpKind.RELU: (),
    OpKind.INPUT: (),
    OpKind.OUTPUT: (),
}


@dataclasses.dataclass(frozen=True)
class NodeSpec:
    """One operation node; ``attrs`` follow the schema for its kind."""

    id: int
    kind: OpKind
    attrs: dict = dataclasses.field(default_factory=dict)

    def param_shapes(self) -> list[tuple[int, ...]]:
        """Shapes of the tensors this node owns, in decode order."""
        a = self.attrs
        if self.kind in CONV_KINDS:
            shapes = [(a["c_out"], a["c_in"] // a["groups"], a["kernel"], a["kernel"])]
            if a.get("bias"):
                shapes.append((a["c_out"],))
            return shapes
        if self.kind is OpKind.BATCHNORM:
            return [(a["channels"],), (a["channels"],)]
        if self.kind is OpKind.LINEAR:
            shapes = [(a["out_features"], a["in_features"])]
            if a.get("bias"):
                shapes.append((a["out_features"],))
            return shapes
        return []


@dataclasses.dataclass
class ArchGraph:
    """DAG of CNN operations plus optional distance-tagged virtual edges.

    ``virtual_edges`` is ``None`` until :func:`compute_virtual_edges` runs;
    an empty list means "computed, and there are none".
    """

    nodes: list[NodeSpec]
    edges: list[tuple[int, int]]
    input_resolution: tuple[int, int, int]
    num_classes: int
    virtual_edges: Optional[list[tuple[int, int, int]]] = None

    def node_by_id(self, node_id: int) -> NodeSpec:
        return self._node_map()[node_id]

    def _node_map(self) -> dict[int, NodeSpec]:
        return {n.id: n for n in self.nodes}

    def predecessors(self) -> dict[int, list[int]]:
        """Incoming neighbours per node, in edge declaration order."""
        preds: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for src, dst in self.edges:
            preds[dst].append(src)
        return preds

    def successors(self) -> dict[int, list[int]]:
        succs: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for src, dst in self.edges:
            succs[src].append(dst)
        return succs

    def parameterized_nodes(self) -> list[NodeSpec]:
        return [n for n in self.nodes if n.param_shapes()]


def topological_order(g: ArchGraph) -> list[int]:
    """Kahn's algorithm, smallest ready id first (deterministic)."""
    preds = g.predecessors()
    succs = g.successors()
    indeg = {nid: len(ps) for nid, ps in preds.items()}
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for nxt in succs[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) != len(g.nodes):
        raise GraphError("graph contains a directed cycle")
    return order


def infer_shapes(g: ArchGraph) -> dict[int, tuple]:
    """Propagate per-sample tensor shapes; raises GraphError on mismatch.

    Spatial nodes carry (C, H, W); post-pooling vectors carry (F,).
    """
    shapes: dict[int, tuple] = {}
    preds = g.predecessors()
    for nid in topological_order(g):
        node = g.node_by_id(nid)
        ins = [shapes[p] for p in preds[nid]]
        a = node.attrs
        if node.kind is OpKind.INPUT:
            shapes[nid] = tuple(g.input_resolution)
            continue
        if not ins:
            raise GraphError(f"node {nid} ({node.kind.value}) has no inputs")
        if (node.kind not in (OpKind.RESIDUAL_ADD, OpKind.CONCAT)
                and len(ins) != 1):
            raise GraphError(
                f"node {nid} ({node.kind.value}) must have exactly one input, "
                f"got {len(ins)}")
        if node.kind in CONV_KINDS:
            c, h, w = _expect_spatial(nid, node, ins[0])
            if c != a["c_in"]:
                raise GraphError(
                    f"node {nid}: conv expects c_in={a['c_in']} but input has {c} channels")
            oh = conv_output_extent(h, a["kernel"], a["stride"], a["padding"], a["dilation"])
            ow = conv_output_extent(w, a["kernel"], a["stride"], a["padding"], a["dilation"])
            if oh < 1 or ow < 1:
                raise GraphError(f"node {nid}: non-positive conv output extent {oh}x{ow}")
            shapes[nid] = (a["c_out"], oh, ow)
        elif node.kind is OpKind.BATCHNORM:
            c, h, w = _expect_spatial(nid, node, ins[0])
            if c != a["channels"]:
                raise GraphError(
                    f"node {nid}: batchnorm over {a['channels']} channels fed {c}")
            shapes[nid] = ins[0]
        elif node.kind in POOL_KINDS:
            c, h, w = _expect_spatial(nid, node, ins[0])
            oh = conv_output_extent(h, a["kernel"], a["stride"], a["padding"])
            ow = conv_output_extent(w, a["kernel"], a["stride"], a["padding"])
            if oh < 1 or ow < 1:
                raise GraphError(f"node {nid}: non-positive pool output extent {oh}x{ow}")
            shapes[nid] = (c, oh, ow)
        elif node.kind is OpKind.GLOBAL_AVG_POOL:
            c, _, _ = _expect_spatial(nid, node, ins[0])
            shapes[nid] = (c,)
        elif node.kind is OpKind.LINEAR:
            feat = int(np.prod(ins[0]))
            if feat != a["in_features"]:
                raise GraphError(
                    f"node {nid}: linear expects in_features={a['in_features']} "
                    f"but input flattens to {feat}")
            shapes[nid] = (a["out_features"],)
        elif node.kind is OpKind.RESIDUAL_ADD:
            if len(ins) < 2:
                raise GraphError(f"node {nid}: residual add needs >= 2 inputs")
            if any(s != ins[0] for s in ins[1:]):
                raise GraphError(f"node {nid}: residual add inputs differ in shape: {ins}")
            shapes[nid] = ins[0]
        elif node.kind is OpKind.CONCAT:
            if len(ins) < 2:
                raise GraphError(f"node {nid}: concat needs >= 2 inputs")
            if any(len(s) != len(ins[0]) or s[1:] != ins[0][1:] for s in ins[1:]):
                raise GraphError(f"node {nid}: concat inputs differ beyond channels: {ins}")
            shapes[nid] = (sum(s[0] for s in ins),) + tuple(ins[0][1:])
        elif node.kind is OpKind.RELU:
            shapes[nid] = ins[0]
        elif node.kind is OpKind.OUTPUT:
            if len(ins) != 1:
                raise GraphError(f"node {nid}: output must have exactly one input")
            shapes[nid] = ins[0]
        else:
            raise GraphError(f"node {nid}: unknown kind {node.kind}")
    return shapes


def _expect_spatial(nid: int, node: NodeSpec, shape: tuple) -> tuple:
    if len(shape) != 3:
        raise GraphError(
            f"node {nid} ({node.kind.value}) needs a spatial (C,H,W) input, got {shape}")
    return shape


def validate_graph(g: ArchGraph) -> None:
    """Check every structural invariant; shape-checks the whole graph."""
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        raise GraphError("duplicate node ids")
    id_set = set(ids)
    for src, dst in g.edges:
        if src not in id_set or dst not in id_set:
            raise GraphError(f"edge ({src},{dst}) references a missing node")
    preds = g.predecessors()
    succs = g.successors()
    inputs = [n for n in g.nodes if n.kind is OpKind.INPUT]
    outputs = [n for n in g.nodes if n.kind is OpKind.OUTPUT]
    if len(inputs) != 1 or len(outputs) != 1:
        raise GraphError(f"need exactly one input and one output node, "
                         f"got {len(inputs)} and {len(outputs)}")
    if preds[inputs[0].id]:
        raise GraphError("input node has incoming edges")
    if succs[outputs[0].id]:
        raise GraphError("output node has outgoing edges")
    reach_fwd = _reachable(inputs[0].id, succs)
    reach_bwd = _reachable(outputs[0].id, preds)
    stranded = id_set - (reach_fwd & reach_bwd)
    if stranded:
        raise GraphError(f"nodes not on an input-to-output path: {sorted(stranded)}")
    if g.virtual_edges is not None:
        for src, dst, dist in g.virtual_edges:
            if dist < 2:
                raise GraphError(f"virtual edge ({src},{dst}) has distance {dist} < 2")
    infer_shapes(g)  # also enforces DAG, merge arity, shape agreement


def _reachable(start: int, neighbours: dict[int, list[int]]) -> set[int]:
    seen = {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nxt in neighbours[cur]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def count_params(g: ArchGraph) -> int:
    """Total scalar parameters owned by the graph's nodes."""
    total = 0
    for node in g.nodes:
        for shape in node.param_shapes():
            total += int(np.prod(shape))
    return total


def conv_depth(g: ArchGraph) -> int:
    """Depth measure used by the sampling space: number of conv nodes."""
    return sum(1 for n in g.nodes if n.kind in CONV_KINDS)


def max_width(g: ArchGraph) -> int:
    """Width measure: largest convolution output-channel count."""
    widths = [n.attrs["c_out"] for n in g.nodes if n.kind in CONV_KINDS]
    return max(widths) if widths else 0


def has_batchnorm(g: ArchGraph) -> bool:
    return any(n.kind is OpKind.BATCHNORM for n in g.nodes)


def compute_virtual_edges(g: ArchGraph, s_max: int) -> ArchGraph:
    """Return a copy with virtual edges for all pairs at distance 2..s_max.

    Distances follow edge direction; originals are untouched.
    """
    if s_max < 2:
        raise GraphError(f"s_max must be >= 2, got {s_max}")
    succs = g.successors()
    virtual: list[tuple[int, int, int]] = []
    for node in sorted(g.nodes, key=lambda n: n.id):
        dist = {node.id: 0}
        queue = deque([node.id])
        while queue:
            cur = queue.popleft()
            if dist[cur] >= s_max:
                continue
            for nxt in succs[cur]:
                if nxt not in dist:
                    dist[nxt] = dist[cur] + 1
                    queue.append(nxt)
        for dst in sorted(dist):
            if 2 <= dist[dst] <= s_max:
                virtual.append((node.id, dst, dist[dst]))
    return dataclasses.replace(g, virtual_edges=virtual)


# -- sampling -----------------------------------------------------------------

_ALL_KINDS = tuple(OpKind)


@dataclasses.dataclass
class SpaceConfig:
    """Architecture space definition; defaults give the full training space."""

    max_params: int = 10_000_000
    depth_range: tuple[int, int] = (4, 20)
    width_range: tuple[int, int] = (8, 512)
    allowed_ops: tuple[OpKind, ...] = _ALL_KINDS
    residual_prob: float = 0.25
    concat_prob: float = 0.10
    depthwise_prob: float = 0.20
    dilated_prob: float = 0.15
    pool_downsample_prob: float = 0.35
    bn_free: bool = False
    rng_seed: int = 0
    input_resolution: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10

    def validate(self) -> None:
        if self.max_params <= 0:
            raise GraphError("max_params must be positive")
        if self.depth_range[0] < 1 or self.depth_range[0] > self.depth_range[1]:
            raise GraphError(f"empty depth range {self.depth_range}")
        if not self.width_grid():
            raise GraphError(f"no power-of-two widths inside {self.width_range}")
        if self.rng_seed < 0:
            raise GraphError("rng_seed must be non-negative")
        for required in (OpKind.INPUT, OpKind.OUTPUT, OpKind.CONV_REGULAR,
                         OpKind.GLOBAL_AVG_POOL, OpKind.LINEAR, OpKind.RELU):
            if required not in self.allowed_ops:
                raise GraphError(f"allowed_ops must include {required.value}")

    def width_grid(self) -> list[int]:
        lo, hi = self.width_range
        return [1 << k for k in range(0, 16) if lo <= (1 << k) <= hi]


class _Builder:
    def __init__(self, cfg: SpaceConfig):
        self.cfg = cfg
        self.nodes: list[NodeSpec] = []
        self.edges: list[tuple[int, int]] = []
        self._next = 0
        self.use_bn = (not cfg.bn_free) and OpKind.BATCHNORM in cfg.allowed_ops

    def emit(self, kind: OpKind, prev: Optional[int] = None, **attrs) -> int:
        nid = self._next
        self._next += 1
        self.nodes.append(NodeSpec(nid, kind, attrs))
        if prev is not None:
            self.edges.append((prev, nid))
        return nid

    def link(self, src: int, dst: int) -> None:
        self.edges.append((src, dst))

    def conv_bn_relu(self, prev: int, kind: OpKind, c_in: int, c_out: int, *,
                     kernel: int = 3, stride: int = 1, dilation: int = 1,
                     groups: int = 1, final_relu: bool = True) -> int:
        padding = dilation * (kernel - 1) // 2
        cur = self.emit(kind, prev, kernel=kernel, stride=stride, padding=padding,
                        dilation=dilation, groups=groups, c_in=c_in, c_out=c_out,
                        bias=0 if self.use_bn else 1)
        if self.use_bn:
            cur = self.emit(OpKind.BATCHNORM, cur, channels=c_out)
        if final_relu:
            cur = self.emit(OpKind.RELU, cur)
        return cur


def _build_once(cfg: SpaceConfig, rng: np.random.Generator) -> ArchGraph:
    dmin, dmax = cfg.depth_range
    target = int(rng.integers(dmin, dmax + 1))
    grid = cfg.width_grid()
    c0, h, w = cfg.input_resolution

    max_down = max(0, int(np.floor(np.log2(max(min(h, w), 1)))) - 1)
    pools_allowed = any(k in cfg.allowed_ops for k in POOL_KINDS)
    stages = int(rng.integers(3, 6))
    stages = max(1, min(stages, 1 + max_down))
    widths = sorted(int(grid[i]) for i in rng.integers(0, len(grid), size=stages))
    # transition plan: (use_pool, pool_kind, pool_kernel) per stage boundary
    transitions = []
    for _ in range(stages - 1):
        use_pool = pools_allowed and rng.random() < cfg.pool_downsample_prob
        pool_kind = OpKind.MAX_POOL
        if use_pool:
            choices = [k for k in POOL_KINDS if k in cfg.allowed_ops]
            pool_kind = choices[int(rng.integers(0, len(choices)))]
        transitions.append((use_pool, pool_kind, int(rng.integers(2, 4))))

    def transition_cost(i):
        use_pool = transitions[i][0]
        changes = widths[i + 1] != widths[i]
        return (1 if changes else 0) if use_pool else 1

    while stages > 1 and 1 + sum(transition_cost(i) for i in range(stages - 1)) > target:
        stages -= 1
        widths = widths[:stages]
        transitions = transitions[:stages - 1]

    budget = target - 1 - sum(transition_cost(i) for i in range(stages - 1))
    counts = [0] * stages
    for _ in range(budget):
        counts[int(rng.integers(0, stages))] += 1

    b = _Builder(cfg)
    cur = b.emit(OpKind.INPUT)
    cur = b.conv_bn_relu(cur, OpKind.CONV_REGULAR, c0, widths[0])
    can_res = OpKind.RESIDUAL_ADD in cfg.allowed_ops
    can_cat = OpKind.CONCAT in cfg.allowed_ops
    can_dw = OpKind.CONV_DEPTHWISE in cfg.allowed_ops
    can_dil = OpKind.CONV_DILATED in cfg.allowed_ops

    for si in range(stages):
        width = widths[si]
        rem = counts[si]
        while rem > 0:
            if rem >= 2 and can_res and rng.random() < cfg.residual_prob:
                project = rem >= 3 and rng.random() < 0.25
                entry = cur
                branch = b.conv_bn_relu(entry, OpKind.CONV_REGULAR, width, width)
                branch = b.conv_bn_relu(branch, OpKind.CONV_REGULAR, width, width,
                                        final_relu=False)
                skip = entry
                if project:
                    skip = b.conv_bn_relu(entry, OpKind.CONV_REGULAR, width, width,
                                          kernel=1, final_relu=False)
                add = b.emit(OpKind.RESIDUAL_ADD, branch)
                b.link(skip, add)
                cur = b.emit(OpKind.RELU, add)
                rem -= 3 if project else 2
            elif rem >= 2 and can_cat and width >= 2 and rng.random() < cfg.concat_prob:
                entry = cur
                half = width // 2
                left = b.conv_bn_relu(entry, OpKind.CONV_REGULAR, width, half)
                right = b.conv_bn_relu(entry, OpKind.CONV_REGULAR, width, width - half,
                                       kernel=1)
                cat = b.emit(OpKind.CONCAT, left)
                b.link(right, cat)
                cur = cat
                rem -= 2
            elif rem >= 2 and can_dw and rng.random() < cfg.depthwise_prob:
                cur = b.conv_bn_relu(cur, OpKind.CONV_DEPTHWISE, width, width,
                                     groups=width)
                cur = b.conv_bn_relu(cur, OpKind.CONV_REGULAR, width, width, kernel=1)
                rem -= 2
            elif can_dil and rng.random() < cfg.dilated_prob:
                cur = b.conv_bn_relu(cur, OpKind.CONV_DILATED, width, width,
                                     dilation=2)
                rem -= 1
            else:
                kernel = 1 if rng.random() < 0.15 else 3
                cur = b.conv_bn_relu(cur, OpKind.CONV_REGULAR, width, width,
                                     kernel=kernel)
                rem -= 1
        if si < stages - 1:
            use_pool, pool_kind, pool_kernel = transitions[si]
            if use_pool:
                padding = 1 if pool_kernel == 3 else 0
                cur = b.emit(pool_kind, cur, kernel=pool_kernel, stride=2,
                             padding=padding)
                if widths[si + 1] != width:
                    cur = b.conv_bn_relu(cur, OpKind.CONV_REGULAR, width,
                                         widths[si + 1], kernel=1)
            else:
                cur = b.conv_bn_relu(cur, OpKind.CONV_REGULAR, width,
                                     widths[si + 1], stride=2)

    cur = b.emit(OpKind.GLOBAL_AVG_POOL, cur)
    cur = b.emit(OpKind.LINEAR, cur, in_features=widths[-1],
                 out_features=cfg.num_classes, bias=1)
    b.emit(OpKind.OUTPUT, cur)
    g = ArchGraph(nodes=b.nodes, edges=b.edges,
                  input_resolution=cfg.input_resolution,
                  num_classes=cfg.num_classes)
    assert conv_depth(g) == target, "sampler conv budget drifted"
    return g


def sample_architecture(cfg: SpaceConfig, draw_index: int,
                        max_attempts: int = 1000) -> ArchGraph:
    """Draw one architecture; identical (seed, draw_index) gives identical graphs.

    Candidates over the parameter cap are rejected and redrawn from the same
    stream; exceeding ``max_attempts`` consecutive rejections raises
    :class:`ConstraintInfeasibleError`.
    """
    cfg.validate()
    if draw_index < 0:
        raise GraphError("draw_index must be non-negative")
    rng = np.random.default_rng([cfg.rng_seed, draw_index])
    for _ in range(max_attempts):
        g = _build_once(cfg, rng)
        if count_params(g) <= cfg.max_params:
            validate_graph(g)
            return g
    raise ConstraintInfeasibleError(
        f"{max_attempts} consecutive draws exceeded max_params={cfg.max_params}; "
        f"narrow the width/depth ranges")


# -- evaluation splits --------------------------------------------------------

SPLIT_NAMES = ("iid", "deep", "wide", "bnfree")


def make_splits(cfg: SpaceConfig, sizes: dict[str, int], *,
                deep_depth_range: Optional[tuple[int, int]] = None,
                wide_width_range: Optional[tuple[int, int]] = None,
                split_seeds: Optional[dict[str, int]] = None,
                ) -> dict[str, list[ArchGraph]]:
    """Build the four disjoint evaluation sets.

    IID draws from the training distribution under its own seed; Deep/Wide
    use depth/width ranges strictly above the training ranges; BNFree drops
    BatchNorm. Disjointness across splits is enforced by canonical graph
    hashes (colliding draws are skipped).
    """
    cfg.validate()
    dmin, dmax = cfg.depth_range
    wmin, wmax = cfg.width_range
    if deep_depth_range is None:
        deep_depth_range = (dmax + 1, dmax + max(2, (dmax - dmin) // 2 + 1))
    if wide_width_range is None:
        wide_width_range = (wmax * 2, wmax * 4)
    if deep_depth_range[0] <= dmax:
        raise GraphError(
            f"deep split depth range {deep_depth_range} must start above "
            f"training depth max {dmax}")
    if wide_width_range[0] <= wmax:
        raise GraphError(
            f"wide split width range {wide_width_range} must start above "
            f"training width max {wmax}")
    seeds = dict(split_seeds or {})
    for i, name in enumerate(SPLIT_NAMES):
        seeds.setdefault(name, cfg.rng_seed + 1_000_003 * (i + 1))
    unknown = set(seeds) - set(SPLIT_NAMES)
    if unknown:
        raise GraphError(f"unknown split names in split_seeds: {sorted(unknown)}")
    all_seeds = [cfg.rng_seed] + [seeds[n] for n in SPLIT_NAMES]
    if len(set(all_seeds)) != len(all_seeds):
        raise GraphError(f"split seeds must be distinct from each other and from "
                         f"the training seed, got {all_seeds}")

    cfgs = {
        "iid": dataclasses.replace(cfg, rng_seed=seeds["iid"]),
        "deep": dataclasses.replace(cfg, rng_seed=seeds["deep"],
                                    depth_range=deep_depth_range),
        "wide": dataclasses.replace(cfg, rng_seed=seeds["wide"],
                                    width_range=wide_width_range),
        "bnfree": dataclasses.replace(cfg, rng_seed=seeds["bnfree"], bn_free=True),
    }
    unknown_sizes = set(sizes) - set(SPLIT_NAMES)
    if unknown_sizes:
        raise GraphError(f"unknown split names in sizes: {sorted(unknown_sizes)}")
    taken: set[str] = set()
    splits: dict[str, list[ArchGraph]] = {}
    for name in SPLIT_NAMES:
        want = int(sizes.get(name, 0))
        if want <= 0:
            continue
        members: list[ArchGraph] = []
        draw = 0
        attempts = 0
        while len(members) < want:
            if attempts > max(50 * want, 200):
                raise ConstraintInfeasibleError(
                    f"could not assemble {want} distinct graphs for split '{name}'")
            g = sample_architecture(cfgs[name], draw)
            draw += 1
            attempts += 1
            digest = canonical_hash(g)
            if digest in taken:
                continue
            taken.add(digest)
            members.append(g)
        splits[name] = members
    return splits


# -- serialization ------------------------------------------------------------

FORMAT_HEADER = "ghnq-graph v1"


def serialize_graph(g: ArchGraph, include_virtual: bool = True) -> str:
    """Render the documented line-oriented text format.

    Header, one ``meta`` line, one ``node`` line per node (id order), one
    ``edge`` line per edge (declaration order, which fixes merge-input
    order), and optional ``vedge`` lines.
    """
    c, h, w = g.input_resolution
    lines = [FORMAT_HEADER,
             f"meta channels={c} height={h} width={w} classes={g.num_classes}"]
    for node in sorted(g.nodes, key=lambda n: n.id):
        parts = [f"node {node.id} {node.kind.value}"]
        for key in _ATTR_KEYS[node.kind]:
            parts.append(f"{key}={node.attrs[key]}")
        lines.append(" ".join(parts))
    for src, dst in g.edges:
        lines.append(f"edge {src} {dst}")
    if include_virtual and g.virtual_edges is not None:
        lines.append(f"vedges {len(g.virtual_edges)}")
        for src, dst, dist in g.virtual_edges:
            lines.append(f"vedge {src} {dst} {dist}")
    return "\n".join(lines) + "\n"


def deserialize_graph(text: str | bytes) -> ArchGraph:
    """Parse the text format; errors carry the offending line number."""
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise GraphFormatError(f"expected header '{FORMAT_HEADER}'", line=1)
    meta = None
    nodes: list[NodeSpec] = []
    edges: list[tuple[int, int]] = []
    vedges: list[tuple[int, int, int]] = []
    vedge_count: Optional[int] = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        tag = fields[0]
        try:
            if tag == "meta":
                kv = _parse_kv(fields[1:], lineno)
                _require_keys(kv, ("channels", "height", "width", "classes"), lineno)
                meta = kv
            elif tag == "node":
                if len(fields) < 3:
                    raise GraphFormatError("node line needs '<id> <kind>'", line=lineno)
                nid = _parse_int(fields[1], lineno)
                kind = _KIND_BY_TOKEN.get(fields[2])
                if kind is None:
                    raise GraphFormatError(f"unknown node kind '{fields[2]}'", line=lineno)
                attrs = _parse_kv(fields[3:], lineno)
                _require_keys(attrs, _ATTR_KEYS[kind], lineno)
                nodes.append(NodeSpec(nid, kind, attrs))
            elif tag == "edge":
                if len(fields) != 3:
                    raise GraphFormatError("edge line needs '<src> <dst>'", line=lineno)
                edges.append((_parse_int(fields[1], lineno), _parse_int(fields[2], lineno)))
            elif tag == "vedges":
                if len(fields) != 2:
                    raise GraphFormatError("vedges line needs '<count>'", line=lineno)
                vedge_count = _parse_int(fields[1], lineno)
            elif tag == "vedge":
                if len(fields) != 4:
                    raise GraphFormatError("vedge line needs '<src> <dst> <distance>'",
                                           line=lineno)
                if vedge_count is None:
                    raise GraphFormatError("vedge line before 'vedges <count>'",
                                           line=lineno)
                vedges.append(tuple(_parse_int(f, lineno) for f in fields[1:]))
            else:
                raise GraphFormatError(f"unknown record '{tag}'", line=lineno)
        except GraphFormatError:
            raise
    if meta is None:
        raise GraphFormatError("missing meta line", line=1)
    if not nodes:
        raise GraphFormatError("no node lines", line=len(lines))
    if vedge_count is not None and vedge_count != len(vedges):
        raise GraphFormatError(
            f"vedges declares {vedge_count} entries but {len(vedges)} present",
            line=len(lines))
    g = ArchGraph(nodes=nodes, edges=edges,
                  input_resolution=(meta["channels"], meta["height"], meta["width"]),
                  num_classes=meta["classes"],
                  virtual_edges=vedges if vedge_count is not None else None)
    try:
        validate_graph(g)
    except GraphError as exc:
        raise GraphFormatError(str(exc)) from exc
    return g


def _parse_int(token: str, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise GraphFormatError(f"expected integer, got '{token}'", line=lineno) from None


def _parse_kv(fields: Sequence[str], lineno: int) -> dict:
    kv = {}
    for field in fields:
        if "=" not in field:
            raise GraphFormatError(f"expected key=value, got '{field}'", line=lineno)
        key, _, value = field.partition("=")
        kv[key] = _parse_int(value, lineno)
    return kv


def _require_keys(kv: dict, keys: Iterable[str], lineno: int) -> None:
    keys = tuple(keys)
    missing = [k for k in keys if k not in kv]
    extra = [k for k in kv if k not in keys]
    if missing:
        raise GraphFormatError(f"missing keys {missing}", line=lineno)
    if extra:
        raise GraphFormatError(f"unknown keys {extra}", line=lineno)


def canonical_hash(g: ArchGraph) -> str:
    """Stable identity for split-disjointness; ignores virtual edges."""
    return hashlib.sha256(serialize_graph(g, include_virtual=False).encode()).hexdigest()
