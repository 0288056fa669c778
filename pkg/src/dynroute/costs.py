"""Analytic MAC and parameter accounting for the routing space.

Costs are exact integer multiply-accumulate counts derived from tensor
shapes; no tensors are evaluated.  Conventions:

* convolutions: one MAC per weight-input product (1x1: Cin*Cout*Hout*Wout,
  depthwise 3x3: 9*C*Hout*Wout); no bias terms anywhere,
* batch norm, ReLU and tanh each cost one MAC per element,
* bilinear x2 upsampling costs 4 taps per output element,
* mean poolings (stride-4 and global) cost one MAC per input element,
* identity transforms, additions and the per-sample alpha scalings are free.

Expected (alpha-weighted) node cost follows the budget formulation: the cell
is paid at the strongest path weight max(alpha), the gate unconditionally,
and each transform at its own alpha.  Stem and decoder are fixed costs.

"FLOPs" reporting supports both the macs and 2*macs conventions; pairwise
cost ratios are identical under either.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import CostError, MaskError, ShapeError
from .space import (NUM_SCALES, PATH_ORDER, NodeId, PathKind, max_scale_at,
                    validate_mask)

CONVENTIONS = ("macs", "2macs")


@dataclass(frozen=True)
class OpCost:
    """MAC and learnable-parameter counts for one operation or group."""

    macs: int = 0
    params: int = 0

    def __add__(self, other):
        return OpCost(self.macs + other.macs, self.params + other.params)

    def scaled(self, factor):
        return OpCost(int(round(self.macs * factor)), self.params)


def op_cost(kind, **dims):
    """Cost of a single primitive at the given dimensions.

    Kinds: conv1x1 (c_in, c_out, h_out, w_out), depthwise3x3 (c, h_out,
    w_out), bn / relu / tanh (c, h, w), bilinear_x2 (c, h_out, w_out),
    avg_pool / gap (c, h, w), identity.
    """
    try:
        if kind == "conv1x1":
            return OpCost(dims["c_in"] * dims["c_out"] * dims["h_out"] * dims["w_out"],
                          dims["c_in"] * dims["c_out"])
        if kind == "depthwise3x3":
            return OpCost(9 * dims["c"] * dims["h_out"] * dims["w_out"], 9 * dims["c"])
        if kind == "bn":
            return OpCost(dims["c"] * dims["h"] * dims["w"], 2 * dims["c"])
        if kind in ("relu", "tanh"):
            return OpCost(dims["c"] * dims["h"] * dims["w"], 0)
        if kind == "bilinear_x2":
            return OpCost(4 * dims["c"] * dims["h_out"] * dims["w_out"], 0)
        if kind in ("avg_pool", "gap"):
            return OpCost(dims["c"] * dims["h"] * dims["w"], 0)
        if kind == "identity":
            return OpCost(0, 0)
    except KeyError as exc:
        raise CostError(f"missing dimension {exc} for op kind {kind!r}") from exc
    raise CostError(f"unknown op descriptor {kind!r}")


def _ceil_div(a, b):
    return -(-a // b)


# ---------------------------------------------------------------------------
# Parameter-only helpers (shape independent)
# ---------------------------------------------------------------------------

def gate_hidden(channels):
    return max(channels // 2, 1)


def cell_params(channels):
    # Two sepconv blocks: depthwise 9C + pointwise C^2 + BN 2C each.
    return 2 * (9 * channels + channels * channels + 2 * channels)


def gate_params(channels):
    h = gate_hidden(channels)
    return channels * h + 2 * h + h * 3 + 3


def transform_params(channels, kind):
    if kind is PathKind.KEEP:
        return 0
    if kind is PathKind.DOWN:
        return channels * 2 * channels
    return channels * (channels // 2)


def stem_params(base, in_channels=3):
    entry = in_channels * base + 2 * base
    block = 9 * base + base * base + 2 * base
    return entry + 3 * block


def decoder_params(base, classes, scales):
    lateral = sum(base * (2 ** s) * base for s in scales)
    return lateral + base * classes


def param_count(space, with_gates, classes=19, in_channels=3):
    """Learnable parameters of the full assembly over ``space``."""
    total = stem_params(space.base_channels, in_channels)
    for node in space.nodes:
        c = space.channels(node.scale)
        total += cell_params(c)
        if node.layer < space.layers:
            for kind in space.legal_kinds(node):
                total += transform_params(c, kind)
        if with_gates:
            total += gate_params(c)
    total += decoder_params(space.base_channels,
                            classes,
                            range(max_scale_at(space.layers) + 1))
    return total


# ---------------------------------------------------------------------------
# Shape-aware model
# ---------------------------------------------------------------------------

class CostModel:
    """Per-node MAC coefficients for a space at a fixed input resolution."""

    def __init__(self, space, input_hw=(1024, 2048), classes=19,
                 gate_downsample=True, in_channels=3):
        h, w = input_hw
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} must be divisible by 32")
        self.space = space
        self.input_hw = (h, w)
        self.classes = classes
        self.gate_downsample = gate_downsample
        self.in_channels = in_channels

    def spatial(self, scale):
        h, w = self.input_hw
        f = 4 * (2 ** scale)
        return h // f, w // f

    def channels(self, scale):
        return self.space.channels(scale)

    # -- per-node pieces ---------------------------------------------------

    def cell(self, node):
        c = self.channels(node[1])
        h, w = self.spatial(node[1])
        block = (op_cost("depthwise3x3", c=c, h_out=h, w_out=w)
                 + op_cost("conv1x1", c_in=c, c_out=c, h_out=h, w_out=w)
                 + op_cost("bn", c=c, h=h, w=w)
                 + op_cost("relu", c=c, h=h, w=w))
        return block + block

    def gate(self, node):
        c = self.channels(node[1])
        hid = gate_hidden(c)
        h, w = self.spatial(node[1])
        total = OpCost()
        if self.gate_downsample:
            total += op_cost("avg_pool", c=c, h=h, w=w)
            h, w = _ceil_div(h, 4), _ceil_div(w, 4)
        total += op_cost("conv1x1", c_in=c, c_out=hid, h_out=h, w_out=w)
        total += op_cost("bn", c=hid, h=h, w=w)
        total += op_cost("relu", c=hid, h=h, w=w)
        total += op_cost("gap", c=hid, h=h, w=w)
        total += op_cost("conv1x1", c_in=hid, c_out=3, h_out=1, w_out=1)
        # bias add, tanh and the clamp on the three logits
        total += OpCost(macs=3 + 3 + 3, params=3)
        return total

    def transform(self, node, kind):
        c = self.channels(node[1])
        h, w = self.spatial(node[1])
        if kind is PathKind.KEEP:
            return op_cost("identity")
        if kind is PathKind.DOWN:
            return op_cost("conv1x1", c_in=c, c_out=2 * c,
                           h_out=_ceil_div(h, 2), w_out=_ceil_div(w, 2))
        conv = op_cost("conv1x1", c_in=c, c_out=c // 2, h_out=h, w_out=w)
        return conv + op_cost("bilinear_x2", c=c // 2, h_out=2 * h, w_out=2 * w)

    def node_transforms(self, node):
        node = NodeId(*node)
        if node.layer >= self.space.layers:
            return {PathKind.KEEP: op_cost("identity")}
        return {kind: self.transform(node, kind)
                for kind in self.space.legal_kinds(node)}

    # -- fixed blocks --------------------------------------------------------

    def stem(self):
        b = self.space.base_channels
        h, w = self.input_hw
        h2, w2 = h // 2, w // 2
        h4, w4 = h // 4, w // 4
        total = (op_cost("conv1x1", c_in=self.in_channels, c_out=b, h_out=h2, w_out=w2)
                 + op_cost("bn", c=b, h=h2, w=w2)
                 + op_cost("relu", c=b, h=h2, w=w2))
        for hh, ww in ((h2, w2), (h4, w4), (h4, w4)):
            total += (op_cost("depthwise3x3", c=b, h_out=hh, w_out=ww)
                      + op_cost("conv1x1", c_in=b, c_out=b, h_out=hh, w_out=ww)
                      + op_cost("bn", c=b, h=hh, w=ww)
                      + op_cost("relu", c=b, h=hh, w=ww))
        return total

    def decoder(self, live_scales=None):
        """Fusion head cost.  ``live_scales``: scales feeding the decoder.

        Lateral 1x1 convs run for live scales; the upsample-and-add chain
        runs from the deepest live scale up to 1/4; classifier and the final
        x4 upsampling always run.
        """
        existing = list(range(max_scale_at(self.space.layers) + 1))
        if live_scales is None:
            live = existing
        else:
            live = sorted(set(live_scales))
            if not set(live) <= set(existing):
                raise CostError(f"live scales {live} outside space scales {existing}")
        b = self.space.base_channels
        total = OpCost()
        for s in live:
            h, w = self.spatial(s)
            total += op_cost("conv1x1", c_in=self.channels(s), c_out=b, h_out=h, w_out=w)
        if live:
            deepest = max(live)
            for s in range(deepest - 1, -1, -1):
                h, w = self.spatial(s)
                total += op_cost("bilinear_x2", c=b, h_out=h, w_out=w)
        h4, w4 = self.spatial(0)
        total += op_cost("conv1x1", c_in=b, c_out=self.classes, h_out=h4, w_out=w4)
        h, w = self.input_hw
        total += op_cost("bilinear_x2", c=self.classes, h_out=h // 2, w_out=w // 2)
        total += op_cost("bilinear_x2", c=self.classes, h_out=h, w_out=w)
        return total

    def gates_total(self):
        return sum((self.gate(n) for n in self.space.nodes), OpCost())


# ---------------------------------------------------------------------------
# Expected (alpha-weighted) costs and the budget penalty
# ---------------------------------------------------------------------------

def node_expected_cost(model, node, alpha):
    """Mean over samples of the expected MACs inside one node.

    alpha: array (B, 3) or (3,) of activating factors in [0, 1), ordered
    (up, keep, down); entries on illegal paths must already be zero.  The
    cell is weighted by max(alpha), the gate is unconditional, each
    transform by its own factor.
    """
    a = np.atleast_2d(np.asarray(alpha, dtype=float))
    if a.shape[1] != 3:
        raise CostError(f"alpha must have 3 path entries, got shape {a.shape}")
    node = NodeId(*node)
    cell = model.cell(node).macs
    gate = model.gate(node).macs
    transforms = model.node_transforms(node)
    per_sample = a.max(axis=1) * cell + gate
    for kind, cost in transforms.items():
        per_sample = per_sample + a[:, PATH_ORDER.index(kind)] * cost.macs
    return float(per_sample.mean())


def space_expected_cost(model, alphas):
    """Expected MACs of the whole space: sum of node costs plus the fixed
    stem and decoder (always executed)."""
    missing = [n for n in model.space.nodes if n not in alphas]
    if missing:
        raise CostError(f"alphas missing for nodes {missing[:4]}"
                        + ("..." if len(missing) > 4 else ""))
    total = sum(node_expected_cost(model, n, alphas[n]) for n in model.space.nodes)
    return total + model.stem().macs + model.decoder().macs


def real_total_cost(model):
    """The all-open cost C used as the budget denominator (gates included)."""
    ones = {n: np.array([[1.0 if k in model.space.legal_kinds(n) else 0.0
                          for k in PATH_ORDER]]) for n in model.space.nodes}
    return space_expected_cost(model, ones)


def budget_loss(expected, real_total, mu):
    """(expected / real_total - mu)^2."""
    if real_total <= 0:
        raise CostError(f"real total cost must be positive, got {real_total}")
    if not 0.0 <= mu <= 1.0:
        raise CostError(f"attenuation factor mu must lie in [0, 1], got {mu}")
    return (expected / real_total - mu) ** 2


# ---------------------------------------------------------------------------
# Static architecture reports
# ---------------------------------------------------------------------------

def mask_liveness(space, mask):
    """Signal-flow over a mask: which nodes receive input when executing it.

    Open paths propagate; a live fully-closed node relays its input along
    its own scale (the pass-through skip).  Entry is fed by the stem.
    """
    live = {space.entry()}
    for layer in range(1, space.layers):
        for scale in range(max_scale_at(layer) + 1):
            node = NodeId(layer, scale)
            if node not in live:
                continue
            if mask.occupied(node):
                for succ, kind in space.edges[node]:
                    if mask.is_open(node, kind):
                        live.add(succ)
            else:
                succ = NodeId(layer + 1, scale)
                if succ in space:
                    live.add(succ)
    return live


@dataclass
class CostReport:
    """Per-node breakdown plus totals for one mask (or the full space)."""

    rows: list                     # (NodeId, OpCost cell, OpCost gate, OpCost trans)
    total: OpCost
    input_hw: tuple
    convention: str = "macs"
    mask_name: str | None = None

    def flops(self, convention=None):
        conv = convention or self.convention
        if conv not in CONVENTIONS:
            raise CostError(f"unknown FLOPs convention {conv!r}")
        return self.total.macs * (2 if conv == "2macs" else 1)

    def to_text(self):
        buf = io.StringIO()
        h, w = self.input_hw
        buf.write(f"# cost report input={h}x{w} convention={self.convention}"
                  + (f" mask={self.mask_name}" if self.mask_name else "") + "\n")
        buf.write("# layer scale cell_macs gate_macs trans_macs params\n")
        for node, cell, gate, trans in self.rows:
            params = cell.params + gate.params + trans.params
            buf.write(f"{node.layer} {node.scale} {cell.macs} {gate.macs} "
                      f"{trans.macs} {params}\n")
        buf.write(f"total_macs={self.total.macs}\n")
        buf.write(f"total_flops={self.flops()}\n")
        buf.write(f"total_params={self.total.params}\n")
        return buf.getvalue()


def static_cost_report(model, mask, include_gates=False, convention="macs"):
    """Cost of executing exactly the masked paths.

    A node's cell counts iff the node is live and has at least one open
    path; each open transform counts at weight 1.  With ``include_gates``
    every node of the space pays its gate (the dynamic-network view);
    without, the report describes a pure static architecture.  Stem always
    runs; decoder laterals run for scales whose final-layer node carries
    signal.
    """
    if convention not in CONVENTIONS:
        raise CostError(f"unknown FLOPs convention {convention!r}")
    space = model.space
    violations, _ = validate_mask(space, mask)
    if violations:
        raise MaskError("invalid mask: " + "; ".join(violations))

    live = mask_liveness(space, mask)
    rows = []
    total = OpCost()
    for node in space.nodes:
        cell = OpCost()
        gate = OpCost()
        trans = OpCost()
        if node in live and mask.occupied(node):
            cell = model.cell(node)
            for kind in space.legal_kinds(node):
                if mask.is_open(node, kind):
                    trans += model.transform(node, kind)
        if include_gates:
            gate = model.gate(node)
        rows.append((node, cell, gate, trans))
        total = total + cell + gate + trans

    total += model.stem()
    final_live = [s for s in range(max_scale_at(space.layers) + 1)
                  if NodeId(space.layers, s) in live]
    total += model.decoder(final_live)
    return CostReport(rows=rows, total=total, input_hw=model.input_hw,
                      convention=convention, mask_name=mask.name)
