"""Float64 central-difference checks for primitives, layers and the full loss.

Each check reduces the output to a scalar through a fixed random projection
and compares reverse-mode gradients with finite differences. Large tensors
are probed on a seeded subset of coordinates.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import tensor as T
from .geometry import LossConfig, chamfer_distance, earth_movers_distance, knn_batched, repulsion_loss
from .model import (
    ArchConfig,
    Forward,
    classification_head,
    decoder_forward,
    edge_conv,
    encoder_forward,
    feature_down,
    feature_up,
    init_bn_state,
    init_params,
    offset_attention,
    segmentation_head,
)
from .tensor import Tensor

TOLERANCE = 1e-4
EPS = 1e-5
SCOPES = ("primitives", "layers", "end2end")

# small enough for finite differences, structurally identical to the default
TOY_ARCH = ArchConfig(
    neighbors=4,
    enc_widths=(4, 4, 6, 6),
    emb_dim=10,
    dim=8,
    coord_hidden=5,
    cls_hidden=(6,),
    seg_hidden=(6,),
    num_classes=3,
    num_parts=4,
)


def _project(out: Tensor, seed: int = 99) -> Tensor:
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.reduce_sum(out * Tensor(w))


def _coords(size: int, limit: int, rng) -> np.ndarray:
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def check_inputs(fn: Callable, inputs: List[np.ndarray], limit: int = 40, seed: int = 0) -> float:
    """Worst error over every input slot of ``fn``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for slot in range(len(inputs)):

        def f(x, slot=slot):
            args = [x if i == slot else Tensor(a) for i, a in enumerate(inputs)]
            return _project(fn(*args))

        coords = _coords(np.size(inputs[slot]), limit, rng)
        worst = max(worst, T.finite_difference_check(f, inputs[slot], EPS, coords))
    return worst


def check_params(build: Callable[[Forward], Tensor], params, bn_state, names, limit=12, seed=0,
                 training=True) -> float:
    """Worst error over the listed parameters; ``build`` returns a scalar."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names:

        def f(x, name=name):
            fw = Forward(params, bn_state, training=training)
            fw.leaves[name] = x
            return build(fw)

        coords = _coords(params[name].size, limit, rng)
        worst = max(worst, T.finite_difference_check(f, params[name], EPS, coords))
    return worst


# ------------------------------------------------------------------ primitives


def primitive_checks() -> List[Tuple[str, float]]:
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    c = rng.standard_normal((4, 5))
    row = rng.standard_normal(5)
    pos = rng.uniform(0.5, 2.0, (4, 5))
    # keep every entry well away from the relu kink and max ties
    away = np.sign(a) * (np.abs(a) + 0.1)
    bn_x = rng.standard_normal((6, 4, 3))
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    mask = (rng.random((4, 5)) > 0.5).astype(np.float64) * 2.0
    idx = np.array([[0, 2], [3, 3], [1, 0]])

    items = [
        ("matmul", lambda x, y: T.matmul(x, y), [a, b]),
        ("matmul_batched", lambda x, y: T.matmul(x, y), [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))]),
        ("add", lambda x, y: T.add(x, y), [a, row]),
        ("sub", lambda x, y: T.sub(x, y), [a, row]),
        ("mul", lambda x, y: T.mul(x, y), [a, c]),
        ("relu", T.relu, [away]),
        ("exp", T.exp, [a]),
        ("log", T.log, [pos]),
        ("neg", T.neg, [a]),
        ("sqrt", T.sqrt, [pos]),
        ("square", T.square, [a]),
        ("concat", lambda x, y: T.concat([x, y], axis=1), [a, c]),
        ("reshape", lambda x: T.reshape(x, (2, 10)), [a]),
        ("transpose", lambda x: T.transpose(x, (1, 0)), [a]),
        ("gather_rows", lambda x: T.gather_rows(x, idx), [a]),
        ("reduce_max", lambda x: T.reduce_max(x, axis=1), [away]),
        ("reduce_sum", lambda x: T.reduce_sum(x, axis=0), [a]),
        ("reduce_mean", lambda x: T.reduce_mean(x, axis=1), [a]),
        ("softmax", lambda x: T.softmax(x, axis=-1), [a]),
        ("l1_normalize", lambda x: T.l1_normalize(x, axis=0), [pos]),
        (
            "batch_norm",
            lambda x, g, bb: T.batch_norm(x, g, bb, training=True),
            [bn_x, gamma, beta],
        ),
        (
            "batch_norm_eval",
            lambda x, g, bb: T.batch_norm(
                x, g, bb, training=False, running_mean=np.full(3, 0.2), running_var=np.full(3, 1.5)
            ),
            [bn_x, gamma, beta],
        ),
        ("dropout", lambda x: T.dropout(x, 0.5, training=True, mask=mask), [a]),
    ]
    return [(name, check_inputs(fn, inputs)) for name, fn, inputs in items]


# ---------------------------------------------------------------------- layers


def _toy_model(seed=3):
    params = init_params(TOY_ARCH, np.random.default_rng(seed), np.float64)
    bn_state = init_bn_state(TOY_ARCH, np.float64)
    return params, bn_state


def _names(params, prefix):
    return [k for k in params if k.startswith(prefix)]


def layer_checks() -> List[Tuple[str, float]]:
    rng = np.random.default_rng(5)
    params, bn_state = _toy_model()
    arch = TOY_ARCH
    out = []

    # edge_conv on a fixed graph, w.r.t. its input and its parameters
    x = rng.standard_normal((2, 10, 3))
    graph = knn_batched(x, arch.neighbors)

    def ec(fw, inp):
        return edge_conv(fw, inp, graph, "encoder.ec0")

    out.append(("edge_conv.input", check_inputs(lambda t: ec(Forward(params, bn_state, training=True), t), [x])))
    out.append(("edge_conv.params", check_params(lambda fw: _project(ec(fw, Tensor(x))), params, bn_state,
                                                 _names(params, "encoder.ec0"))))

    d = arch.dim
    f = rng.standard_normal((2, 6, d))
    out.append(("offset_attention.input", check_inputs(
        lambda t: offset_attention(Forward(params, bn_state), t, "decoder.up1.attn"), [f])))
    out.append(("offset_attention.params", check_params(
        lambda fw: _project(offset_attention(fw, Tensor(f), "decoder.up1.attn")), params, bn_state,
        _names(params, "decoder.up1.attn"))))

    out.append(("feature_up.input", check_inputs(
        lambda t: feature_up(Forward(params, bn_state), t, 4, "decoder.up1"), [f])))
    out.append(("feature_up.params", check_params(
        lambda fw: _project(feature_up(fw, Tensor(f), 4, "decoder.up1")), params, bn_state,
        _names(params, "decoder.up1.mlp"))))

    g = rng.standard_normal((2, 12, d))
    out.append(("feature_down.input", check_inputs(
        lambda t: feature_down(Forward(params, bn_state), t, 4, "decoder.down"), [g])))
    out.append(("feature_down.params", check_params(
        lambda fw: _project(feature_down(fw, Tensor(g), 4, "decoder.down")), params, bn_state,
        _names(params, "decoder.down"))))

    feats = rng.standard_normal((2, 7, arch.emb_dim))
    out.append(("classification_head.input", check_inputs(
        lambda t: classification_head(Forward(params, bn_state), t, arch), [feats])))
    out.append(("classification_head.params", check_params(
        lambda fw: _project(classification_head(fw, Tensor(feats), arch)), params, bn_state,
        _names(params, "cls."), training=False)))
    out.append(("segmentation_head.input", check_inputs(
        lambda t: segmentation_head(Forward(params, bn_state), t, arch), [feats])))
    out.append(("segmentation_head.params", check_params(
        lambda fw: _project(segmentation_head(fw, Tensor(feats), arch)), params, bn_state,
        _names(params, "seg."), training=False)))

    p = rng.uniform(-0.5, 0.5, (2, 12, 3))
    q = rng.uniform(-0.5, 0.5, (2, 12, 3))
    out.append(("chamfer_distance", check_inputs(lambda s, t: chamfer_distance(s, t), [p, q])))
    out.append(("earth_movers_distance", check_inputs(lambda s, t: earth_movers_distance(s, t), [p, q])))
    out.append(("repulsion_loss", check_inputs(lambda s: repulsion_loss(s, 3, 0.3), [p])))
    return out


# --------------------------------------------------------------------- end2end


def end_to_end_loss(fw: Forward, inputs: np.ndarray, target: np.ndarray, ratio: float, loss: LossConfig,
                    points: Tensor = None) -> Tensor:
    pts = Tensor(inputs) if points is None else points
    pred = decoder_forward(fw, encoder_forward(fw, pts, TOY_ARCH), ratio, TOY_ARCH)
    terms = chamfer_distance(pred, target)
    total = T.mul(terms, loss.cd_weight)
    if loss.variant.endswith("+RL"):
        total = total + T.mul(repulsion_loss(pred, loss.rep_neighbors, loss.rep_radius), loss.rep_weight)
    return total


def end2end_checks() -> List[Tuple[str, float]]:
    """Joint reconstruction + repulsion loss on a 16-point toy cloud."""
    rng = np.random.default_rng(7)
    params, bn_state = _toy_model()
    target = rng.uniform(-0.5, 0.5, (1, 16, 3))
    inputs = target[:, ::2].copy()
    ratio = 0.5
    loss = LossConfig(cd_weight=100.0, rep_weight=1.0, rep_neighbors=3, rep_radius=0.3)
    out = []
    for prefix in ("encoder.ec0", "encoder.ec3", "encoder.mlp", "decoder.entry", "decoder.up1", "decoder.down",
                   "decoder.up2", "decoder.coord"):
        err = check_params(lambda fw: end_to_end_loss(fw, inputs, target, ratio, loss), params, bn_state,
                           _names(params, prefix), limit=6)
        out.append((f"end2end.{prefix}", err))
    err = T.finite_difference_check(
        lambda x: end_to_end_loss(Forward(params, bn_state, training=True), inputs, target, ratio, loss, points=x),
        inputs,
        EPS,
    )
    out.append(("end2end.input_points", err))
    return out


SUITES: Dict[str, Callable[[], List[Tuple[str, float]]]] = {
    "primitives": primitive_checks,
    "layers": layer_checks,
    "end2end": end2end_checks,
}


def run(scope: str) -> List[Tuple[str, float]]:
    if scope not in SUITES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    return SUITES[scope]()
