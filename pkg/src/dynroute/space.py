"""The layered routing-space DAG.

Nodes live on a (layer, scale) grid: scales {1/4, 1/8, 1/16, 1/32} indexed
0..3, layers 1..L.  Layer 1 offers only scale 1/4; each following layer adds
one deeper scale until all four are available (the pyramid ramp).  Edges go
strictly from layer l to l+1 and change scale by at most one step: Up
(halves channels, doubles resolution), Keep (identity), Down (doubles
channels, halves resolution).  The final layer feeds the decoder instead of
another routing layer, so inside the space it has no successors.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

from .errors import MaskError, SpaceError

NUM_SCALES = 4


class PathKind(Enum):
    UP = "up"
    KEEP = "keep"
    DOWN = "down"


PATH_ORDER = (PathKind.UP, PathKind.KEEP, PathKind.DOWN)
PATH_INDEX = {k: i for i, k in enumerate(PATH_ORDER)}


class NodeId(NamedTuple):
    layer: int     # 1-based
    scale: int     # 0 -> 1/4, 1 -> 1/8, 2 -> 1/16, 3 -> 1/32


def max_scale_at(layer):
    """Deepest scale index available at a layer (pyramid ramp)."""
    return min(layer - 1, NUM_SCALES - 1)


@dataclass(frozen=True)
class RoutingSpace:
    """Immutable node/edge structure plus the channel-width rule."""

    layers: int
    base_channels: int
    nodes: tuple = field(repr=False)
    edges: dict = field(repr=False)          # NodeId -> tuple[(NodeId, PathKind)]

    def channels(self, scale):
        return self.base_channels * (2 ** scale)

    def __contains__(self, node):
        return (1 <= node[0] <= self.layers
                and 0 <= node[1] <= max_scale_at(node[0]))

    def legal_kinds(self, node):
        """Outgoing path kinds legal at ``node``.

        Interior layers: Up unless at scale 1/4, Keep always, Down unless at
        1/32.  The final layer only hands off at its own scale (Keep into
        the decoder).
        """
        if node not in self:
            raise SpaceError(f"node {node} not in space")
        layer, scale = node
        if layer == self.layers:
            return (PathKind.KEEP,)
        kinds = []
        if scale > 0:
            kinds.append(PathKind.UP)
        kinds.append(PathKind.KEEP)
        if scale < NUM_SCALES - 1:
            kinds.append(PathKind.DOWN)
        return tuple(kinds)

    def entry(self):
        return NodeId(1, 0)


def build_space(layers, base_channels=64):
    """Construct the routing space for a given depth and stem width."""
    if layers < 1:
        raise SpaceError(f"layer count must be >= 1, got {layers}")
    if base_channels < 1:
        raise SpaceError(f"base_channels must be >= 1, got {base_channels}")
    nodes = tuple(NodeId(l, s) for l in range(1, layers + 1)
                  for s in range(max_scale_at(l) + 1))
    edges = {}
    for node in nodes:
        layer, scale = node
        if layer == layers:
            edges[node] = ()
            continue
        out = []
        if scale > 0:
            out.append((NodeId(layer + 1, scale - 1), PathKind.UP))
        out.append((NodeId(layer + 1, scale), PathKind.KEEP))
        if scale < NUM_SCALES - 1:
            out.append((NodeId(layer + 1, scale + 1), PathKind.DOWN))
        edges[node] = tuple(out)
    return RoutingSpace(layers=layers, base_channels=base_channels,
                        nodes=nodes, edges=edges)


def neighbors(space, node):
    """Legal (successor, kind) pairs; empty at the final layer."""
    node = NodeId(*node)
    if node not in space:
        raise SpaceError(f"node {node} not in space")
    return list(space.edges[node])


def predecessors(space, node):
    """Legal (producer, kind) pairs feeding ``node`` from layer-1 below."""
    node = NodeId(*node)
    if node not in space:
        raise SpaceError(f"node {node} not in space")
    layer, scale = node
    preds = []
    for s_prev, kind in ((scale + 1, PathKind.UP), (scale, PathKind.KEEP),
                         (scale - 1, PathKind.DOWN)):
        cand = NodeId(layer - 1, s_prev)
        if cand in space:
            preds.append((cand, kind))
    return preds


# ---------------------------------------------------------------------------
# Architecture masks
# ---------------------------------------------------------------------------

@dataclass
class ArchMask:
    """Fixed gate assignment embedding a static architecture in the space.

    ``values`` maps NodeId -> (up, keep, down) in {0, 1}.  Nodes absent from
    the map are fully closed.  A fully closed node that still receives input
    acts as a free pass-through at its own scale (the inference-time skip
    semantics), which is how architectures with fewer effective layers than
    the space embed into it.
    """

    layers: int
    base_channels: int
    values: dict = field(default_factory=dict)
    name: str | None = None

    def triple(self, node):
        return self.values.get(NodeId(*node), (0, 0, 0))

    def is_open(self, node, kind):
        return bool(self.triple(node)[PATH_INDEX[kind]])

    def occupied(self, node):
        """A node with at least one open path (its cell executes)."""
        return any(self.triple(node))

    def support(self):
        """Set of (NodeId, PathKind) pairs that are open."""
        out = set()
        for node, triple in self.values.items():
            for kind, v in zip(PATH_ORDER, triple):
                if v:
                    out.add((node, kind))
        return out

    def open_node_count(self):
        return sum(1 for n in self.values if self.occupied(n))


def mask_from_paths(layers, base_channels, paths, name=None):
    """Build a mask from an iterable of (layer, scale, kind) open paths."""
    values = {}
    for layer, scale, kind in paths:
        node = NodeId(layer, scale)
        triple = list(values.get(node, (0, 0, 0)))
        triple[PATH_INDEX[kind]] = 1
        values[node] = tuple(triple)
    return ArchMask(layers=layers, base_channels=base_channels, values=values, name=name)


def validate_mask(space, mask):
    """Check a mask against the space.

    Returns (violations, warnings): violations are values sitting on illegal
    paths or on nodes outside the space; warnings list every space node that
    cannot be reached from the stem entry following open paths only (a fully
    closed pass-through chain is legal at runtime but is reported here so
    sparse masks are visible).
    """
    violations = []
    for node, triple in sorted(mask.values.items()):
        node = NodeId(*node)
        if node not in space:
            violations.append(f"node {tuple(node)} outside space")
            continue
        legal = space.legal_kinds(node)
        for kind, v in zip(PATH_ORDER, triple):
            if v and kind not in legal:
                violations.append(f"illegal path {kind.value} open at node {tuple(node)}")

    reachable = {space.entry()}
    for layer in range(1, space.layers):
        for scale in range(max_scale_at(layer) + 1):
            node = NodeId(layer, scale)
            if node not in reachable:
                continue
            for succ, kind in space.edges[node]:
                if mask.is_open(node, kind):
                    reachable.add(succ)
    warnings = [f"node {tuple(n)} unreachable from entry via open paths"
                for n in space.nodes if n not in reachable]
    return violations, warnings


def full_mask(space, name="full"):
    """All legal paths open everywhere."""
    values = {n: tuple(1 if k in space.legal_kinds(n) else 0 for k in PATH_ORDER)
              for n in space.nodes}
    return ArchMask(space.layers, space.base_channels, values, name=name)


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------

def serialize_mask(space, mask):
    """Canonical text form: every node, layer-major then scale, one line each.

    Deterministic byte-for-byte, so files are diffable, hashable, and usable
    in round-trip equality tests.  The in-memory preset name is deliberately
    not serialized.
    """
    buf = io.StringIO()
    buf.write(f"L={space.layers}\n")
    buf.write(f"base_channels={space.base_channels}\n")
    buf.write("# layer scale up keep down\n")
    for node in space.nodes:
        up, keep, down = mask.triple(node)
        buf.write(f"{node.layer} {node.scale} {up} {keep} {down}\n")
    return buf.getvalue()


def parse_mask(text):
    """Inverse of ``serialize_mask``.  Returns (space, mask)."""
    layers = base = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key == "L":
                layers = int(val)
            elif key == "base_channels":
                base = int(val)
            else:
                raise MaskError(f"line {lineno}: unknown header key {key!r}")
            continue
        parts = line.split()
        if len(parts) != 5:
            raise MaskError(f"line {lineno}: expected 'layer scale up keep down'")
        layer, scale, up, keep, down = (int(p) for p in parts)
        for v in (up, keep, down):
            if v not in (0, 1):
                raise MaskError(f"line {lineno}: path values must be 0 or 1")
        rows.append((NodeId(layer, scale), (up, keep, down)))
    if layers is None or base is None:
        raise MaskError("mask text missing L= or base_channels= header")
    space = build_space(layers, base)
    values = {n: t for n, t in rows if any(t)}
    mask = ArchMask(layers, base, values)
    violations, _ = validate_mask(space, mask)
    if violations:
        raise MaskError("; ".join(violations))
    return space, mask
