"""Full model assembly: stem, routing layers, decoder, presets, extraction.

The stem reduces the input to 1/4 resolution (entry 1x1 conv stride 2, then
three separable-conv blocks of which the second has stride 2).  The routing
layers evaluate nodes layer by layer: aggregate producer outputs, gate, run
the cell, emit alpha-weighted scale transforms.  A naive decoder fuses the
final-layer features from the deepest scale upward with 1x1 laterals,
bilinear x2 steps and addition, classifies at 1/4 and upsamples x4.

Static architectures embed as frozen gate assignments (ArchMask): open paths
get alpha = 1, closed paths 0, and fully closed nodes act as free
pass-throughs at their own scale.  Route logs collected over many forwards
support extraction of the common network (paths open in at least a given
fraction of inferences) and activation histograms.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from . import engine, node as node_mod, ops
from .costs import CostModel, static_cost_report
from .engine import Tensor
from .errors import DataError, ShapeError
from .node import CellParams, GateParams, TransformParams
from .space import (PATH_INDEX, PATH_ORDER, ArchMask, NodeId, PathKind,
                    RoutingSpace, build_space, full_mask, mask_from_paths,
                    max_scale_at)

PRESET_NAMES = ("fcn32s", "unet", "deeplabv3", "hrnetv2", "autodeeplab",
                "common_a", "common_b", "common_c", "full")


def stable_seed(master, name):
    """Deterministic per-component seed derived from (master, name)."""
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class StemParams:
    entry_w: Tensor               # (base, 3, 1, 1), applied with stride 2
    entry_bn: ops.BatchNormParams
    blocks: list                  # three SepConvParams, strides (1, 2, 1)


@dataclass
class NodeParams:
    cell: CellParams
    gate: GateParams
    transforms: dict              # PathKind -> TransformParams


@dataclass
class DecoderParams:
    laterals: dict                # scale -> (base, C_s, 1, 1) conv weights
    classifier: Tensor            # (K, base, 1, 1)


@dataclass
class NetworkParams:
    space: RoutingSpace
    classes: int
    gate_downsample: bool
    stem: StemParams
    nodes: dict                   # NodeId -> NodeParams
    decoder: DecoderParams

    def named_parameters(self):
        """Stable-ordered (name, tensor) pairs over every learnable leaf."""
        yield "stem.entry.w", self.stem.entry_w
        yield "stem.entry.bn.gamma", self.stem.entry_bn.gamma
        yield "stem.entry.bn.beta", self.stem.entry_bn.beta
        for i, blk in enumerate(self.stem.blocks):
            yield f"stem.b{i}.dw", blk.depthwise
            yield f"stem.b{i}.pw", blk.pointwise
            yield f"stem.b{i}.bn.gamma", blk.bn.gamma
            yield f"stem.b{i}.bn.beta", blk.bn.beta
        for nid in self.space.nodes:
            np_ = self.nodes[nid]
            tag = f"node.{nid.layer}.{nid.scale}"
            for j, blk in enumerate((np_.cell.conv1, np_.cell.conv2)):
                yield f"{tag}.cell.c{j}.dw", blk.depthwise
                yield f"{tag}.cell.c{j}.pw", blk.pointwise
                yield f"{tag}.cell.c{j}.bn.gamma", blk.bn.gamma
                yield f"{tag}.cell.c{j}.bn.beta", blk.bn.beta
            yield f"{tag}.gate.w1", np_.gate.w1
            yield f"{tag}.gate.bn.gamma", np_.gate.bn.gamma
            yield f"{tag}.gate.bn.beta", np_.gate.bn.beta
            yield f"{tag}.gate.w2", np_.gate.w2
            yield f"{tag}.gate.bias", np_.gate.bias
            for kind in PATH_ORDER:
                t = np_.transforms.get(kind)
                if t is not None and t.weight is not None:
                    yield f"{tag}.trans.{kind.value}.w", t.weight
        for s in sorted(self.decoder.laterals):
            yield f"decoder.lat{s}.w", self.decoder.laterals[s]
        yield "decoder.cls.w", self.decoder.classifier

    def named_buffers(self):
        """(name, array) pairs for the batch-norm running statistics."""
        yield "stem.entry.bn.mean", self.stem.entry_bn.running_mean
        yield "stem.entry.bn.var", self.stem.entry_bn.running_var
        for i, blk in enumerate(self.stem.blocks):
            yield f"stem.b{i}.bn.mean", blk.bn.running_mean
            yield f"stem.b{i}.bn.var", blk.bn.running_var
        for nid in self.space.nodes:
            np_ = self.nodes[nid]
            tag = f"node.{nid.layer}.{nid.scale}"
            for j, blk in enumerate((np_.cell.conv1, np_.cell.conv2)):
                yield f"{tag}.cell.c{j}.bn.mean", blk.bn.running_mean
                yield f"{tag}.cell.c{j}.bn.var", blk.bn.running_var
            yield f"{tag}.gate.bn.mean", np_.gate.bn.running_mean
            yield f"{tag}.gate.bn.var", np_.gate.bn.running_var

    def gate_parameter_names(self):
        return {name for name, _ in self.named_parameters() if ".gate." in name}

    def param_total(self):
        return sum(t.data.size for _, t in self.named_parameters())


def build_network(space, classes, seed=0, gate_downsample=True):
    """Fresh parameters for the whole assembly; fully seed-deterministic."""
    base = space.base_channels
    stem = StemParams(
        entry_w=engine.normal((base, 3, 1, 1), seed=stable_seed(seed, "stem.entry"),
                              std=np.sqrt(2.0 / 3.0), requires_grad=True),
        entry_bn=ops.make_batch_norm(base),
        blocks=[ops.make_sepconv(base, base, seed=stable_seed(seed, f"stem.b{i}"),
                                 stride=2 if i == 1 else 1)
                for i in range(3)],
    )
    nodes = {}
    for nid in space.nodes:
        c = space.channels(nid.scale)
        tag = f"node.{nid.layer}.{nid.scale}"
        transforms = {}
        for kind in space.legal_kinds(nid):
            transforms[kind] = node_mod.make_transform(
                kind, c, seed=stable_seed(seed, f"{tag}.{kind.value}"))
        nodes[nid] = NodeParams(
            cell=node_mod.make_cell(c, seed=stable_seed(seed, f"{tag}.cell")),
            gate=node_mod.make_gate(c, seed=stable_seed(seed, f"{tag}.gate"),
                                    downsample_input=gate_downsample),
            transforms=transforms,
        )
    scales = range(max_scale_at(space.layers) + 1)
    decoder = DecoderParams(
        laterals={s: engine.normal((base, space.channels(s), 1, 1),
                                   seed=stable_seed(seed, f"decoder.lat{s}"),
                                   std=np.sqrt(2.0 / space.channels(s)),
                                   requires_grad=True)
                  for s in scales},
        classifier=engine.normal((classes, base, 1, 1),
                                 seed=stable_seed(seed, "decoder.cls"),
                                 std=np.sqrt(2.0 / base), requires_grad=True),
    )
    return NetworkParams(space=space, classes=classes,
                         gate_downsample=gate_downsample,
                         stem=stem, nodes=nodes, decoder=decoder)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def stem_forward(image, stem, mode="train"):
    """(B, 3, H, W) -> (B, base, H/4, W/4); H and W must divide by 32."""
    _, c, h, w = image.data.shape
    if c != 3:
        raise ShapeError(f"stem expects 3 input channels, got {c}")
    if h % 32 or w % 32:
        raise ShapeError(f"input {h}x{w} must be divisible by 32")
    x = ops.conv1x1(image, stem.entry_w, stride=2)
    x = ops.batch_norm(x, stem.entry_bn, mode)
    x = engine.relu(x)
    for blk in stem.blocks:
        x = ops.sepconv3x3(x, blk, mode)
    return x


@dataclass
class NetworkResult:
    logits: Tensor
    route: dict                   # NodeId -> GateDecision
    expected_cost: object         # Tensor (train graph) or float
    trace: set = field(default_factory=set)


def _frozen_rows(mask, nid, batch):
    return np.tile(np.asarray(mask.triple(nid), dtype=float), (batch, 1))


def network_forward(image, params, mode="train", frozen_mask=None, prune=True,
                    budget_active=None):
    """Evaluate the whole network.

    Returns NetworkResult with logits (B, K, H, W), the per-node gate
    decisions, the expected routing cost (a graph Tensor in train mode so the
    budget penalty can backpropagate into the gates; a float otherwise) and
    the execution trace {("cell", node)} | {("trans", node, kind)}.

    frozen_mask replaces every gate with fixed 0/1 factors; fully closed
    nodes become free pass-throughs and dead branches are never touched.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    space = params.space
    if budget_active is None:
        budget_active = params.gate_downsample
    batch = image.data.shape[0]
    _, _, img_h, img_w = image.data.shape

    x0 = stem_forward(image, params.stem, mode)
    incoming = {space.entry(): [x0]}
    route = {}
    trace = set()
    alpha_tensors = {}

    for layer in range(1, space.layers + 1):
        for scale in range(max_scale_at(layer) + 1):
            nid = NodeId(layer, scale)
            feeds = incoming.pop(nid, None)
            if feeds is None:
                continue
            x = feeds[0]
            for extra in feeds[1:]:
                x = engine.add(x, extra)

            if frozen_mask is not None and not frozen_mask.occupied(nid):
                # Pass-through wire: relay the aggregate at the same scale.
                succ = NodeId(layer + 1, scale)
                if succ in space:
                    incoming.setdefault(succ, []).append(x)
                else:
                    incoming.setdefault(("decoder", scale), []).append(x)
                continue

            np_ = params.nodes[nid]
            legal = space.legal_kinds(nid)
            frozen = _frozen_rows(frozen_mask, nid, batch) if frozen_mask is not None else None
            outputs, decision, alpha_t = node_mod.node_forward(
                x, np_.cell, np_.gate, np_.transforms, legal, mode=mode,
                frozen_alpha=frozen, prune=prune)
            route[nid] = decision
            alpha_tensors[nid] = alpha_t
            trace.add(("cell", nid))

            for kind, y in outputs.items():
                if y is None:
                    continue
                if frozen_mask is not None and not frozen_mask.is_open(nid, kind):
                    continue  # zero-weighted branch of a static architecture
                trace.add(("trans", nid, kind))
                if layer == space.layers:
                    incoming.setdefault(("decoder", scale), []).append(y)
                else:
                    step = {PathKind.UP: -1, PathKind.KEEP: 0, PathKind.DOWN: 1}[kind]
                    incoming.setdefault(NodeId(layer + 1, scale + step), []).append(y)

    logits = _decoder_forward(incoming, params, batch, (img_h, img_w))
    expected = _expected_cost(params, mode, frozen_mask, alpha_tensors, route,
                              (img_h, img_w), budget_active)
    return NetworkResult(logits=logits, route=route, expected_cost=expected,
                         trace=trace)


def _decoder_forward(incoming, params, batch, img_hw):
    space = params.space
    base = space.base_channels
    img_h, img_w = img_hw
    scales = sorted(params.decoder.laterals)
    fused = None
    for s in sorted(scales, reverse=True):
        feeds = incoming.pop(("decoder", s), None)
        lat = None
        if feeds is not None:
            y = feeds[0]
            for extra in feeds[1:]:
                y = engine.add(y, extra)
            lat = ops.conv1x1(y, params.decoder.laterals[s])
        if fused is None:
            fused = lat
        else:
            fused = ops.bilinear_upsample_x2(fused)
            if lat is not None:
                fused = engine.add(fused, lat)
    if fused is None:
        fused = engine.zeros((batch, base, img_h // 4, img_w // 4))
    logits = ops.conv1x1(fused, params.decoder.classifier)
    logits = ops.bilinear_upsample_x2(logits)
    return ops.bilinear_upsample_x2(logits)


def _expected_cost(params, mode, frozen_mask, alpha_tensors, route, img_hw,
                   budget_active):
    space = params.space
    model = CostModel(space, img_hw, classes=params.classes,
                      gate_downsample=budget_active)
    if frozen_mask is not None:
        # A frozen network runs no gates: its cost is the static report.
        return float(static_cost_report(model, frozen_mask,
                                        include_gates=False).total.macs)

    const = (model.stem() + model.decoder() + model.gates_total()).macs
    if mode == "train":
        acc = None
        for nid in space.nodes:
            alpha_t = alpha_tensors[nid]
            term = engine.scale(engine.max_channel(alpha_t), model.cell(nid).macs)
            for kind, cost in model.node_transforms(nid).items():
                if cost.macs:
                    term = engine.add(term, engine.scale(
                        engine.slice_channel(alpha_t, PATH_INDEX[kind]), cost.macs))
            acc = term if acc is None else engine.add(acc, term)
        return engine.add_const(engine.mean_batch(acc), const)

    total = float(const)
    for nid in space.nodes:
        alpha = route[nid].alpha
        per = alpha.max(axis=1) * model.cell(nid).macs
        for kind, cost in model.node_transforms(nid).items():
            per = per + alpha[:, PATH_INDEX[kind]] * cost.macs
        total += float(per.mean())
    return total


# ---------------------------------------------------------------------------
# Preset masks
# ---------------------------------------------------------------------------

def _chain(path_scales, forks=(), extra_keeps=()):
    """Open paths of a layer-1..16 chain given per-layer scales.

    path_scales: 16 entries, the scale at each layer or None for a
    pass-through wire.  Transition kinds are inferred from consecutive
    active scales; the final active node keeps into the decoder.
    """
    paths = []
    actives = [(l + 1, s) for l, s in enumerate(path_scales) if s is not None]
    for (l, s), (_, s_next) in zip(actives, actives[1:]):
        kind = {-1: PathKind.UP, 0: PathKind.KEEP, 1: PathKind.DOWN}[s_next - s]
        paths.append((l, s, kind))
    l_last, s_last = actives[-1]
    paths.append((l_last, s_last, PathKind.KEEP))
    paths.extend(forks)
    paths.extend(extra_keeps)
    return paths


def _preset_paths(name):
    k, u, d = PathKind.KEEP, PathKind.UP, PathKind.DOWN
    if name == "fcn32s":
        return _chain([0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 3, 3, 3, 3])
    if name == "autodeeplab":
        return _chain([0, 1, 2, None, 2, 1, 2, 2, 3, 3, 2, None, 2, 2, 1, 1])
    if name == "deeplabv3":
        paths = _chain([0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2])
        paths.append((12, 2, d))                       # fork a parallel 1/32 tail
        paths.extend((l, 3, k) for l in range(13, 17))
        return paths
    if name == "unet":
        paths = _chain([0, 1, 2, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 2, 1, 0])
        paths.append((2, 1, k))                        # skip branch at 1/8
        paths.extend((l, 1, k) for l in range(3, 15))
        return paths
    if name == "hrnetv2":
        paths = [(l, 0, k) for l in range(1, 17)]
        paths += [(9, 0, d)] + [(l, 1, k) for l in range(10, 17)]
        paths += [(10, 1, d)] + [(l, 2, k) for l in range(11, 17)]
        paths += [(11, 2, d)] + [(l, 3, k) for l in range(12, 17)]
        paths += [(13, 0, d), (13, 1, u), (13, 1, d), (13, 2, u), (13, 2, d),
                  (13, 3, u), (15, 2, d), (15, 3, u)]  # branch exchanges
        return paths
    if name == "common_a":
        return _chain([0, 1, 2, 2, 2, 3, 3, 2, 2, 2, 1, None, 1, None, 1, 1])
    if name == "common_b":
        paths = _chain([0, 1, 2, 2, 3, 3, 3, 3, 3, 3, 3, 2, 1, 1, 0, 0])
        paths.append((2, 1, k))                        # skip branch at 1/8
        paths.extend((l, 1, k) for l in range(3, 13))
        return paths
    if name == "common_c":
        paths = [(l, 0, k) for l in range(1, 17)]
        paths += [(7, 0, d)] + [(l, 1, k) for l in range(8, 17)]
        paths += [(9, 1, d)] + [(l, 2, k) for l in range(10, 17)]
        paths += [(10, 2, d)] + [(l, 3, k) for l in range(11, 17)]
        paths += [(13, 0, d), (13, 1, u), (13, 1, d), (13, 2, u), (13, 2, d),
                  (13, 3, u)]
        return paths
    raise ValueError(f"unknown preset {name!r}; known: {PRESET_NAMES}")


def preset_mask(name, space=None):
    """Connection-pattern replica of a named architecture inside the space.

    These reproduce the published routing shapes (monotone encoder chains,
    symmetric encoder-decoder, parallel multi-resolution branches, searched
    zigzags and extracted common networks) within this routing space; they
    are cost-calibrated readings, not layer-exact reconstructions.
    """
    if space is None:
        space = build_space(16, 64)
    if name == "full":
        return full_mask(space)
    if space.layers != 16:
        raise ValueError(f"preset {name!r} is defined on the 16-layer space")
    return mask_from_paths(space.layers, space.base_channels,
                           _preset_paths(name), name=name)


# ---------------------------------------------------------------------------
# Route logging, extraction and histograms
# ---------------------------------------------------------------------------

class RouteLog:
    """Per-sample, per-node activating factors accumulated over forwards."""

    def __init__(self, space):
        self.layers = space.layers
        self.base_channels = space.base_channels
        self._legal = {n: tuple(space.legal_kinds(n)) for n in space.nodes}
        self._nodes = tuple(space.nodes)
        self.records = []          # list[dict NodeId -> (3,) float array]

    def __len__(self):
        return len(self.records)

    def legal_kinds(self, nid):
        return self._legal[NodeId(*nid)]

    def add_forward(self, route):
        """Record one network forward; ``route`` maps NodeId -> GateDecision."""
        batch = max((d.alpha.shape[0] for d in route.values()), default=1)
        for b in range(batch):
            entry = {nid: d.alpha[b].copy() for nid, d in route.items()}
            self.records.append(entry)

    def open_frequency(self):
        """NodeId -> (3,) fraction of logged forwards with the path open."""
        if not self.records:
            raise DataError("route log is empty")
        counts = {n: np.zeros(3) for n in self._nodes}
        for entry in self.records:
            for nid, alpha in entry.items():
                counts[nid] += alpha > 0
        n = len(self.records)
        return {nid: c / n for nid, c in counts.items()}

    def all_alphas(self):
        """Flat array of every logged legal-path alpha."""
        vals = []
        for entry in self.records:
            for nid, alpha in entry.items():
                for kind in self._legal[nid]:
                    vals.append(alpha[PATH_INDEX[kind]])
        return np.asarray(vals)

    # -- serialization -----------------------------------------------------

    def to_text(self):
        buf = io.StringIO()
        buf.write(f"L={self.layers}\n")
        buf.write(f"base_channels={self.base_channels}\n")
        buf.write("# forward layer scale alpha_up alpha_keep alpha_down ('-' illegal)\n")
        for i, entry in enumerate(self.records):
            for nid in self._nodes:
                alpha = entry.get(nid)
                if alpha is None:
                    continue
                cols = []
                for kind in PATH_ORDER:
                    if kind in self._legal[nid]:
                        cols.append(repr(float(alpha[PATH_INDEX[kind]])))
                    else:
                        cols.append("-")
                buf.write(f"{i} {nid.layer} {nid.scale} {' '.join(cols)}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        layers = base = None
        rows = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line and not line[0].isdigit():
                key, _, val = line.partition("=")
                if key.strip() == "L":
                    layers = int(val)
                elif key.strip() == "base_channels":
                    base = int(val)
                else:
                    raise DataError(f"route log line {lineno}: unknown header")
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(f"route log line {lineno}: expected 6 fields")
            rows.append((int(parts[0]), int(parts[1]), int(parts[2]), parts[3:]))
        if layers is None or base is None:
            raise DataError("route log missing L= or base_channels= header")
        log = cls(build_space(layers, base))
        by_fwd = {}
        for fwd, layer, scale, cols in rows:
            alpha = np.array([0.0 if c == "-" else float(c) for c in cols])
            by_fwd.setdefault(fwd, {})[NodeId(layer, scale)] = alpha
        log.records = [by_fwd[i] for i in sorted(by_fwd)]
        return log


def extract_common(log, threshold=0.95):
    """Mask of the paths open in at least ``threshold`` of logged forwards."""
    if not 0.0 < threshold <= 1.0:
        raise DataError(f"threshold must lie in (0, 1], got {threshold}")
    freq = log.open_frequency()
    values = {}
    for nid, f in freq.items():
        triple = tuple(int(f[PATH_INDEX[kind]] >= threshold and kind in log.legal_kinds(nid))
                       for kind in PATH_ORDER)
        if any(triple):
            values[nid] = triple
    return ArchMask(log.layers, log.base_channels, values, name="common")


def route_histogram(log, bins=20):
    """(bin_edges, counts, zero_mass): counts over the open alphas in (0, 1),
    with the exactly-zero (closed) mass reported separately."""
    if bins < 2:
        raise DataError(f"need at least 2 bins, got {bins}")
    vals = log.all_alphas()
    zero_mass = int((vals == 0.0).sum())
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(vals[vals > 0.0], bins=edges)
    return edges, counts, zero_mass
