"""Named invariant suites behind ``dynroute verify``.

Each check raises VerificationFailure with a diagnostic when its invariant
does not hold.  ``fast`` runs the desk-size checks in well under a minute;
``full`` adds the paper-table cost oracles and the larger gradient check.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import engine, ops
from .costs import (CostModel, budget_loss, param_count, real_total_cost,
                    space_expected_cost, static_cost_report)
from .engine import Graph, backward, grad_check
from .errors import DynRouteError
from .network import (build_network, extract_common, network_forward,
                      preset_mask, RouteLog)
from .space import (PATH_ORDER, build_space, full_mask, parse_mask,
                    serialize_mask)
from .trainer import TrainConfig, joint_loss, synth_dataset

GATE_INIT_ALPHA = float(np.tanh(1.5))

PAPER_FLOPS = {"autodeeplab": 33.1, "fcn32s": 35.1, "deeplabv3": 42.5,
               "unet": 53.9, "hrnetv2": 62.5}
PAPER_PARAMS = {"autodeeplab": 2.5e6, "fcn32s": 2.9e6, "deeplabv3": 3.7e6,
                "unet": 6.1e6, "hrnetv2": 5.4e6}
PAPER_PARAMS_FULL = {"without_gates": 15.3e6, "with_gates": 17.8e6,
                     "gate_delta": 2.5e6}


class VerificationFailure(DynRouteError):
    pass


def _fail(name, msg):
    raise VerificationFailure(f"{name}: {msg}")


@contextlib.contextmanager
def corrupted_tanh():
    """Negative-control hook: tanh backward off by 5%."""
    orig = engine.tanh

    def bad_tanh(a):
        def bwd(g):
            y = np.tanh(a.data)
            return (g * (1.0 - y * y) * 1.05,)
        return engine.record("tanh", [a], np.tanh, bwd)

    engine.tanh = bad_tanh
    try:
        yield
    finally:
        engine.tanh = orig


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_gate_initialization():
    space = build_space(4, 8)
    params = build_network(space, classes=4, seed=3)
    rng = np.random.default_rng(0)
    x = engine.from_array(rng.normal(size=(2, 3, 64, 64)))
    result = network_forward(x, params, mode="infer")
    for nid, dec in result.route.items():
        for kind in dec.legal:
            a = dec.alpha[:, PATH_ORDER.index(kind)]
            if np.abs(a - GATE_INIT_ALPHA).max() > 1e-4:
                _fail("gate_initialization",
                      f"node {tuple(nid)} path {kind.value}: alpha {a} != tanh(1.5)")
        if not dec.open[:, [PATH_ORDER.index(k) for k in dec.legal]].all():
            _fail("gate_initialization", f"node {tuple(nid)} has closed legal paths")


def check_primitive_gradients(eps=1e-5, tol=1e-3):
    rng = np.random.default_rng(7)

    def tensor(shape):
        return engine.from_array(rng.normal(size=shape), requires_grad=True)

    x = tensor((2, 3, 5, 6))
    w = tensor((4, 3, 1, 1))
    k = tensor((3, 1, 3, 3))
    bn = ops.make_batch_norm(4)
    cases = {
        "conv1x1": (lambda: engine.sum_all(ops.conv1x1(x, w)), [x, w]),
        "conv1x1s2": (lambda: engine.sum_all(ops.conv1x1(x, w, stride=2)), [x, w]),
        "depthwise3x3": (lambda: engine.sum_all(ops.depthwise3x3(x, k)), [x, k]),
        "depthwise3x3s2": (lambda: engine.sum_all(ops.depthwise3x3(x, k, stride=2)),
                           [x, k]),
        "bn_train": (lambda: engine.sum_all(engine.mul(
            batchnormed := ops.batch_norm(ops.conv1x1(x, w), bn, "train"),
            batchnormed)), [x, w, bn.gamma, bn.beta]),
        "bilinear": (lambda: engine.sum_all(engine.mul(
            up := ops.bilinear_upsample_x2(x), up)), [x]),
        "avg_pool": (lambda: engine.sum_all(engine.mul(
            p := ops.avg_pool(x, 4), p)), [x]),
        "gap": (lambda: engine.sum_all(engine.mul(
            p := ops.global_avg_pool(x), p)), [x]),
        "tanh_relu": (lambda: engine.sum_all(engine.relu(engine.tanh(x))), [x]),
    }
    for name, (fn, params) in cases.items():
        err = grad_check(fn, params, eps=eps, max_coords=40, seed=11)
        if err > tol:
            _fail("primitive_gradients", f"{name}: relative error {err:.2e} > {tol}")


def _joint_loss_closure(layers=3, base=8, size=32, classes=3, seed=5):
    space = build_space(layers, base)
    params = build_network(space, classes=classes, seed=seed, gate_downsample=True)
    # Jitter every parameter so no max/ReLU kink sits exactly at a sampled point.
    rng = np.random.default_rng(seed + 1)
    leaves = [t for _, t in params.named_parameters()]
    for t in leaves:
        t.data += rng.normal(0.0, 0.02, size=t.data.shape)
    data = synth_dataset(seed, 2, size, classes)
    x = engine.from_array(np.stack([d[0] for d in data]))
    y = np.stack([d[1] for d in data])
    model = CostModel(space, (size, size), classes=classes, gate_downsample=True)
    real = real_total_cost(model)
    cfg = TrainConfig(layers=layers, base_channels=base, classes=classes,
                      input_size=size, lambda2=0.5, mu=0.2, max_iter=1)

    def fn():
        res = network_forward(x, params, mode="train")
        loss, _, _ = joint_loss(res.logits, y, res.expected_cost, real, cfg)
        return loss

    return fn, leaves


def check_joint_loss_gradient(max_coords=100, tol=1e-3, layers=3, size=32):
    fn, leaves = _joint_loss_closure(layers=layers, size=size)
    err = grad_check(fn, leaves, eps=1e-5, max_coords=max_coords, seed=99)
    if err > tol:
        _fail("joint_loss_gradient", f"relative error {err:.2e} > {tol}")


def check_pruning_equivalence(states=10, layers=3, tol=1e-12):
    space = build_space(layers, 8)
    params = build_network(space, classes=3, seed=21)
    rng = np.random.default_rng(13)
    x = engine.from_array(rng.normal(size=(2, 3, 64, 64)))
    for trial in range(states):
        # Random gate states: biases span open/closed, w2 makes them
        # data-dependent so batches mix per-sample decisions.
        for nid in space.nodes:
            gate = params.nodes[nid].gate
            gate.bias.data[...] = rng.uniform(-2.0, 2.0, size=(1, 3, 1, 1))
            gate.w2.data[...] = rng.normal(0.0, 0.5, size=gate.w2.data.shape)
        pruned = network_forward(x, params, mode="infer", prune=True)
        naive = network_forward(x, params, mode="infer", prune=False)
        diff = np.abs(pruned.logits.data - naive.logits.data).max()
        if diff > tol:
            _fail("pruning_equivalence", f"trial {trial}: max deviation {diff:.2e}")


def check_cost_consistency(layers=6, base=16):
    space = build_space(layers, base)
    model = CostModel(space, (64, 64), classes=4, gate_downsample=True)
    ones = {n: np.array([[1.0 if k in space.legal_kinds(n) else 0.0
                          for k in PATH_ORDER]]) for n in space.nodes}
    expected = space_expected_cost(model, ones)
    report = static_cost_report(model, full_mask(space), include_gates=True)
    if expected != float(report.total.macs):
        _fail("cost_consistency",
              f"expected all-ones {expected} != static full {report.total.macs}")
    if budget_loss(0.25 * 100.0, 100.0, 0.25) != 0.0:
        _fail("cost_consistency", "budget loss not zero at ratio == mu")


def check_mask_roundtrip():
    space = build_space(16, 64)
    for name in ("fcn32s", "hrnetv2", "autodeeplab"):
        mask = preset_mask(name, space)
        text = serialize_mask(space, mask)
        _, parsed = parse_mask(text)
        if serialize_mask(space, parsed) != text:
            _fail("mask_roundtrip", f"{name}: serialize/parse not idempotent")


def check_extraction_roundtrip(layers=4, base=8, forwards=5):
    space = build_space(layers, base)
    params = build_network(space, classes=3, seed=2)
    mask = full_mask(space)
    rng = np.random.default_rng(4)
    log = RouteLog(space)
    for _ in range(forwards):
        x = engine.from_array(rng.normal(size=(1, 3, 64, 64)))
        res = network_forward(x, params, mode="infer", frozen_mask=mask)
        log.add_forward(res.route)
    recovered = extract_common(log, threshold=0.95)
    if serialize_mask(space, recovered) != serialize_mask(space, mask):
        _fail("extraction_roundtrip", "frozen full mask not recovered")


def check_preset_cost_oracle():
    space = build_space(16, 64)
    model = CostModel(space, (1024, 2048), classes=19)
    macs = {}
    params = {}
    for name in PAPER_FLOPS:
        rep = static_cost_report(model, preset_mask(name, space))
        macs[name] = rep.total.macs
        params[name] = rep.total.params
    order = sorted(PAPER_FLOPS, key=PAPER_FLOPS.get)
    if sorted(macs, key=macs.get) != order:
        _fail("preset_cost_oracle", f"FLOPs ordering {sorted(macs, key=macs.get)} "
                                    f"!= {order}")
    for i, a in enumerate(order):
        for b in order[i + 1:]:
            ours = macs[b] / macs[a]
            ref = PAPER_FLOPS[b] / PAPER_FLOPS[a]
            if abs(ours / ref - 1.0) > 0.20:
                _fail("preset_cost_oracle",
                      f"ratio {b}/{a}: {ours:.3f} vs {ref:.3f} beyond 20%")
    for name, ref in PAPER_PARAMS.items():
        if abs(params[name] / ref - 1.0) > 0.15:
            _fail("preset_cost_oracle",
                  f"params {name}: {params[name]/1e6:.2f}M vs {ref/1e6:.1f}M beyond 15%")
    without = param_count(space, with_gates=False)
    with_g = param_count(space, with_gates=True)
    if abs(without / PAPER_PARAMS_FULL["without_gates"] - 1.0) > 0.15:
        _fail("preset_cost_oracle", f"full-space params {without} off")
    if abs(with_g / PAPER_PARAMS_FULL["with_gates"] - 1.0) > 0.15:
        _fail("preset_cost_oracle", f"full-space params with gates {with_g} off")
    if abs((with_g - without) / PAPER_PARAMS_FULL["gate_delta"] - 1.0) > 0.25:
        _fail("preset_cost_oracle", f"gate delta {with_g - without} off")


FAST_CHECKS = (
    ("gate_initialization", check_gate_initialization),
    ("primitive_gradients", check_primitive_gradients),
    ("pruning_equivalence", check_pruning_equivalence),
    ("cost_consistency", check_cost_consistency),
    ("mask_roundtrip", check_mask_roundtrip),
    ("extraction_roundtrip", check_extraction_roundtrip),
)

FULL_CHECKS = FAST_CHECKS + (
    ("preset_cost_oracle", check_preset_cost_oracle),
    ("joint_loss_gradient", check_joint_loss_gradient),
)


def run_checks(level="fast", corrupt_gradient=False, out=print):
    """Run the suite; returns the number of failures."""
    checks = FAST_CHECKS if level == "fast" else FULL_CHECKS
    failures = 0
    ctx = corrupted_tanh() if corrupt_gradient else contextlib.nullcontext()
    with ctx:
        for name, fn in checks:
            try:
                fn()
            except VerificationFailure as exc:
                failures += 1
                out(f"FAIL {name}: {exc}")
            except Exception as exc:  # genuine crash counts as failure too
                failures += 1
                out(f"FAIL {name}: unexpected {type(exc).__name__}: {exc}")
            else:
                out(f"PASS {name}")
    return failures
