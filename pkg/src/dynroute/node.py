"""Per-node computation: aggregation, cell, soft conditional gate, transforms.

Each routing node aggregates up to three same-shape inputs from the previous
layer, transforms them through a cell (identity branch plus a stack of two
separable-convolution blocks), and weights its outgoing scale transforms by
per-sample activating factors produced by a small gate head:

    raw = conv1x1(w2, GAP(relu(bn(conv1x1(w1, x'))))) + bias
    alpha = max(0, tanh(raw))          in [0, 1)

where x' is the node input, optionally average-pooled 4x when a compute
budget is active.  alpha = 0 closes a path; alpha > 0 opens it with that
weight.  In inference, a sample whose paths are all closed skips the cell
entirely and passes its input through at the same scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from . import ops
from .engine import Tensor
from .errors import LegalityError, ShapeError
from .space import PATH_INDEX, PATH_ORDER, PathKind

GATE_BIAS_INIT = 1.5


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class CellParams:
    """Two stacked separable-conv blocks; the identity branch has no params."""

    conv1: ops.SepConvParams
    conv2: ops.SepConvParams

    @property
    def channels(self):
        return self.conv1.in_channels


def make_cell(channels, seed):
    return CellParams(
        conv1=ops.make_sepconv(channels, channels, seed=seed),
        conv2=ops.make_sepconv(channels, channels, seed=seed + 10),
    )


@dataclass
class GateParams:
    """Gate head C -> C/2 -> 3 with a learnable bias on the three path logits.

    w2 starts at zero so every gate opens at exactly tanh(bias_init); the
    bias starts at 1.5, biasing all paths open early in training.
    """

    w1: Tensor                    # (C/2, C, 1, 1)
    bn: ops.BatchNormParams       # on C/2
    w2: Tensor                    # (3, C/2, 1, 1)
    bias: Tensor                  # (1, 3, 1, 1)
    downsample_input: bool = False

    @property
    def channels(self):
        return self.w1.data.shape[1]


def make_gate(channels, seed, downsample_input=False):
    hidden = max(channels // 2, 1)
    return GateParams(
        w1=engine.normal((hidden, channels, 1, 1), seed=seed,
                         std=np.sqrt(2.0 / channels), requires_grad=True),
        bn=ops.make_batch_norm(hidden),
        w2=engine.zeros((3, hidden, 1, 1), requires_grad=True),
        bias=engine.constant((1, 3, 1, 1), GATE_BIAS_INIT, requires_grad=True),
        downsample_input=downsample_input,
    )


@dataclass
class TransformParams:
    """Scale-transform weights: Down and Up carry a 1x1 conv, Keep nothing."""

    kind: PathKind
    weight: Tensor | None = None


def make_transform(kind, channels, seed):
    if kind is PathKind.KEEP:
        return TransformParams(kind=kind)
    if kind is PathKind.DOWN:
        w = engine.normal((2 * channels, channels, 1, 1), seed=seed,
                          std=np.sqrt(2.0 / channels), requires_grad=True)
    else:
        w = engine.normal((channels // 2, channels, 1, 1), seed=seed,
                          std=np.sqrt(2.0 / channels), requires_grad=True)
    return TransformParams(kind=kind, weight=w)


@dataclass
class GateDecision:
    """Per-sample activating factors and open/closed flags for one node.

    alpha: (B, 3) in [0, 1), ordered (up, keep, down); illegal paths are
    forced closed.  open[b, j] is True iff alpha[b, j] > 0 and path j is
    legal.  ``raw`` keeps the pre-activation logits for training-side
    diagnostics.
    """

    alpha: np.ndarray
    open: np.ndarray
    legal: tuple
    raw: np.ndarray | None = None

    def all_closed(self):
        """Per-sample flag: every legal path closed."""
        return ~self.open.any(axis=1)


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def aggregate_inputs(y_from_above=None, y_same=None, y_from_below=None):
    """Element-wise sum of the producers present; at least one is required."""
    present = [t for t in (y_from_above, y_same, y_from_below) if t is not None]
    if not present:
        raise ShapeError("node has no producers: all three inputs absent")
    shape = present[0].data.shape
    for t in present[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"aggregation shape mismatch: {t.data.shape} vs {shape}")
    out = present[0]
    for t in present[1:]:
        out = engine.add(out, t)
    return out


def cell_forward(x, cell, mode="train"):
    """identity(x) + sepconv_stack(x); channel count preserved."""
    if x.data.shape[1] != cell.channels:
        raise ShapeError(f"cell expects {cell.channels} channels, got {x.data.shape[1]}")
    h = ops.sepconv3x3(x, cell.conv1, mode)
    h = ops.sepconv3x3(h, cell.conv2, mode)
    return engine.add(x, h)


def gate_forward(x, gate, legal, mode="train"):
    """Run the gate head; returns (GateDecision, alpha Tensor (B, 3, 1, 1)).

    The tensor output stays in the autodiff graph so training can push
    gradients into the gate; the decision carries plain arrays for routing
    bookkeeping.  Illegal paths are masked closed in both.
    """
    if x.data.shape[1] != gate.channels:
        raise ShapeError(f"gate expects {gate.channels} channels, got {x.data.shape[1]}")
    xin = ops.avg_pool(x, 4) if gate.downsample_input else x
    h = ops.conv1x1(xin, gate.w1)
    h = ops.batch_norm(h, gate.bn, mode)
    h = engine.relu(h)
    h = ops.global_avg_pool(h)
    raw = engine.add(ops.conv1x1(h, gate.w2), gate.bias)
    alpha_t = engine.relu(engine.tanh(raw))

    legal_row = np.array([k in legal for k in PATH_ORDER], dtype=float)
    if not all(legal_row):
        mask = engine.from_array(legal_row.reshape(1, 3, 1, 1))
        alpha_t = engine.mul(alpha_t, mask)

    alpha = alpha_t.data[:, :, 0, 0].copy()
    decision = GateDecision(
        alpha=alpha,
        open=(alpha > 0) & (legal_row[None, :] > 0),
        legal=tuple(legal),
        raw=raw.data[:, :, 0, 0].copy(),
    )
    return decision, alpha_t


def transform(h, alpha_j, kind, params, legal):
    """Scale transform weighted by a per-sample factor.

    alpha_j: Tensor (B, 1, 1, 1).  Down: stride-2 1x1 conv doubling channels;
    Up: 1x1 conv halving channels then bilinear x2; Keep: identity.  The
    factor multiplies the transformed map, so a closed path emits zeros of
    the target shape.
    """
    if kind not in legal:
        raise LegalityError(f"path {kind.value} illegal at this node")
    if kind is PathKind.DOWN:
        y = ops.conv1x1(h, params.weight, stride=2)
    elif kind is PathKind.UP:
        y = ops.bilinear_upsample_x2(ops.conv1x1(h, params.weight))
    else:
        y = h
    return engine.mul(y, alpha_j)


def node_forward(x, cell, gate, transforms, legal, mode="train",
                 frozen_alpha=None, prune=True):
    """Full node evaluation.

    Returns (outputs, decision, alpha_tensor) where outputs maps each legal
    PathKind to a Tensor of the target shape (None when nothing can flow).

    train: the cell always executes and every legal path emits
    alpha_j * T_j(H).  infer with prune=True: per-sample skip semantics --
    samples whose paths are all closed replace the cell with identity and
    forward their input on the Keep path; prune=False evaluates the same
    semantics without skipping any compute (used to cross-check pruning).

    frozen_alpha: (B, 3) array overriding the gate entirely (static masks).
    """
    if frozen_alpha is not None:
        legal_row = np.array([k in legal for k in PATH_ORDER], dtype=float)
        alpha = np.asarray(frozen_alpha, dtype=float) * legal_row[None, :]
        decision = GateDecision(alpha=alpha,
                                open=(alpha > 0) & (legal_row[None, :] > 0),
                                legal=tuple(legal))
        alpha_t = engine.from_array(alpha[:, :, None, None])
    else:
        decision, alpha_t = gate_forward(x, gate, legal, mode)

    if mode == "train":
        h = cell_forward(x, cell, mode)
        outputs = {}
        for kind in legal:
            aj = engine.slice_channel(alpha_t, PATH_INDEX[kind])
            outputs[kind] = transform(h, aj, kind, transforms[kind], legal)
        return outputs, decision, alpha_t

    # Inference: per-sample cell skipping for fully closed samples.
    closed = decision.all_closed()
    if prune and closed.all():
        h_eff = x
    else:
        h_full = cell_forward(x, cell, mode)
        if closed.any():
            keep_mask = engine.from_array(
                np.where(closed, 1.0, 0.0).reshape(-1, 1, 1, 1))
            live_mask = engine.from_array(
                np.where(closed, 0.0, 1.0).reshape(-1, 1, 1, 1))
            h_eff = engine.add(engine.mul(x, keep_mask), engine.mul(h_full, live_mask))
        else:
            h_eff = h_full

    outputs = {}
    for kind in legal:
        j = PATH_INDEX[kind]
        col = decision.alpha[:, j]
        if kind is PathKind.KEEP:
            # Closed samples pass their (identity) hidden state through at
            # weight 1; open samples scale the transformed map by alpha.
            eff = np.where(closed, 1.0, col)
            aj = engine.from_array(eff.reshape(-1, 1, 1, 1))
            outputs[kind] = transform(h_eff, aj, kind, transforms[kind], legal)
        else:
            if prune and not (col > 0).any():
                outputs[kind] = None
                continue
            aj = engine.from_array(col.reshape(-1, 1, 1, 1))
            outputs[kind] = transform(h_eff, aj, kind, transforms[kind], legal)
    return outputs, decision, alpha_t
