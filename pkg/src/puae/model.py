"""Encoder, upsampling decoder and downstream heads.

Parameters live in a flat ``{name: ndarray}`` dict; batch-norm running
statistics in a separate ``{name: (mean, var)}`` dict. A :class:`Forward`
turns them into graph leaves for one pass, so the arrays themselves are never
mutated by a forward or backward pass.

Point-set layers take batched features ``(B, M, D)``. Layers whose output must
not depend on point order evaluate on rows sorted into a canonical order and
scatter the result back; float32 GEMM is not bit-stable under row
permutation, and this keeps permutation (in/equi)variance bit-exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import LayoutError, ShapeMismatchError
from .geometry import knn_batched
from .tensor import Tensor

_ORDER_KEY = np.random.default_rng(20240417).standard_normal(4096)


@dataclass(frozen=True)
class ArchConfig:
    neighbors: int = 20
    enc_widths: Tuple[int, ...] = (64, 64, 128, 256)
    emb_dim: int = 648
    dim: int = 128
    coord_hidden: int = 64
    grid_span: float = 0.2
    cls_hidden: Tuple[int, ...] = (512, 256)
    seg_hidden: Tuple[int, ...] = (256, 128)
    num_classes: int = 40
    num_parts: int = 50
    dropout: float = 0.5
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        d["cls_hidden"] = list(self.cls_hidden)
        d["seg_hidden"] = list(self.seg_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        for key in ("enc_widths", "cls_hidden", "seg_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def pooled_dim(self) -> int:
        return 2 * self.emb_dim


# ------------------------------------------------------------------ parameters


def param_shapes(arch: ArchConfig) -> Dict[str, tuple]:
    """Name -> shape for every learnable tensor of the architecture."""
    shapes = {}

    def linear(name, fan_in, fan_out, bias=True):
        shapes[f"{name}.W"] = (fan_in, fan_out)
        if bias:
            shapes[f"{name}.b"] = (fan_out,)

    def bn(name, width):
        shapes[f"{name}.bn.gamma"] = (width,)
        shapes[f"{name}.bn.beta"] = (width,)

    prev = 3
    for i, w in enumerate(arch.enc_widths):
        linear(f"encoder.ec{i}", 2 * prev, w)
        bn(f"encoder.ec{i}", w)
        prev = w
    linear("encoder.mlp", sum(arch.enc_widths), arch.emb_dim)
    bn("encoder.mlp", arch.emb_dim)

    d = arch.dim
    linear("decoder.entry", arch.emb_dim, d)
    for up in ("decoder.up1", "decoder.up2"):
        linear(f"{up}.mlp", d + 2, d)
        _attention_shapes(shapes, f"{up}.attn", d)
    linear("decoder.down.ec", 2 * d, d)
    linear("decoder.down.mlp0", d, d)
    linear("decoder.down.mlp1", d, d)
    linear("decoder.coord0", d, arch.coord_hidden)
    linear("decoder.coord1", arch.coord_hidden, 3)

    prev = arch.pooled_dim
    for i, w in enumerate(arch.cls_hidden):
        linear(f"cls.fc{i}", prev, w)
        prev = w
    linear(f"cls.fc{len(arch.cls_hidden)}", prev, arch.num_classes)

    prev = arch.pooled_dim + arch.emb_dim
    for i, w in enumerate(arch.seg_hidden):
        linear(f"seg.fc{i}", prev, w)
        prev = w
    linear(f"seg.fc{len(arch.seg_hidden)}", prev, arch.num_parts)
    return shapes


def _attention_shapes(shapes, name, d):
    qk = max(1, d // 4)
    shapes[f"{name}.q.W"] = (d, qk)
    shapes[f"{name}.k.W"] = (d, qk)
    shapes[f"{name}.v.W"] = (d, d)
    shapes[f"{name}.v.b"] = (d,)
    shapes[f"{name}.trans.W"] = (d, d)
    shapes[f"{name}.trans.b"] = (d,)


def bn_names(arch: ArchConfig) -> list:
    return [f"encoder.ec{i}" for i in range(len(arch.enc_widths))] + ["encoder.mlp"]


def param_count(arch: ArchConfig, prefixes: Optional[Iterable[str]] = None) -> int:
    shapes = param_shapes(arch)
    if prefixes is not None:
        prefixes = tuple(prefixes)
        shapes = {k: v for k, v in shapes.items() if k.startswith(prefixes)}
    return int(sum(np.prod(s) for s in shapes.values()))


def init_params(arch: ArchConfig, rng: np.random.Generator, dtype=np.float32, prefixes=None) -> Dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; BN at (1, 0)."""
    out = {}
    shapes = param_shapes(arch)
    for name, shape in shapes.items():
        if prefixes is not None and not name.startswith(tuple(prefixes)):
            continue
        if name.endswith(".bn.gamma"):
            out[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bn.beta"):
            out[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shapes[name[: -2] + ".W"][0]
            bound = 1.0 / np.sqrt(fan_in)
            out[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return out


def init_bn_state(arch: ArchConfig, dtype=np.float32) -> Dict[str, tuple]:
    shapes = param_shapes(arch)
    return {
        name: (np.zeros(shapes[f"{name}.bn.gamma"], dtype), np.ones(shapes[f"{name}.bn.gamma"], dtype))
        for name in bn_names(arch)
    }


# --------------------------------------------------------------------- forward


class Forward:
    """State of one forward pass.

    ``frozen`` holds name prefixes whose parameters stay constant and whose
    batch-norm layers run on stored statistics even in training mode.
    """

    def __init__(
        self,
        params: Dict[str, np.ndarray],
        bn_state: Optional[Dict[str, tuple]] = None,
        *,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        frozen: Tuple[str, ...] = (),
        momentum: float = 0.9,
        eps: float = 1e-5,
    ):
        self.params = params
        self.bn_state = bn_state if bn_state is not None else {}
        self.training = training
        self.rng = rng
        self.frozen = tuple(frozen)
        self.momentum = momentum
        self.eps = eps
        self.leaves: Dict[str, Tensor] = {}
        self.bn_updates: Dict[str, tuple] = {}

    def is_frozen(self, name: str) -> bool:
        return bool(self.frozen) and name.startswith(self.frozen)

    def p(self, name: str) -> Tensor:
        leaf = self.leaves.get(name)
        if leaf is None:
            if name not in self.params:
                raise KeyError(f"missing parameter {name!r}")
            leaf = Tensor(self.params[name], requires_grad=not self.is_frozen(name), name=name)
            self.leaves[name] = leaf
        return leaf

    def trainable(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.leaves.items() if v.requires_grad}

    def batch_norm(self, x: Tensor, name: str) -> Tensor:
        training = self.training and not self.is_frozen(name)
        c = x.shape[-1]
        mean, var = self.bn_state.get(name, (np.zeros(c, x.dtype), np.ones(c, x.dtype)))
        out = T.batch_norm(
            x,
            self.p(f"{name}.bn.gamma"),
            self.p(f"{name}.bn.beta"),
            training=training,
            running_mean=mean,
            running_var=var,
            momentum=self.momentum,
            eps=self.eps,
        )
        if training:
            self.bn_updates[name] = (out.aux["running_mean"], out.aux["running_var"])
        return out

    def dropout(self, x: Tensor, rate: float) -> Tensor:
        return T.dropout(x, rate, training=self.training, rng=self.rng)

    def committed_bn(self) -> Dict[str, tuple]:
        """Running statistics after this pass."""
        state = dict(self.bn_state)
        state.update(self.bn_updates)
        return state


def linear(fw: Forward, x: Tensor, name: str) -> Tensor:
    out = x @ fw.p(f"{name}.W")
    if f"{name}.b" in fw.params:
        out = out + fw.p(f"{name}.b")
    return out


# ---------------------------------------------------------- canonical ordering


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Permutation sorting the rows of each (M, D) table in ``x`` (B, M, D).

    Depends only on row contents, so any reordering of the input yields the
    same sorted table (identical rows are interchangeable).
    """
    d = x.shape[-1]
    key = _ORDER_KEY[:d] if d <= len(_ORDER_KEY) else np.resize(_ORDER_KEY, d)
    proj = np.einsum("bmd,d->bm", x.astype(np.float64), key)
    first = x[..., 0]
    return np.stack([np.lexsort((first[b], proj[b])) for b in range(x.shape[0])])


def _flat_index(perm: np.ndarray) -> np.ndarray:
    b, m = perm.shape
    return (perm + np.arange(b)[:, None] * m).reshape(-1)


def permute_rows(x: Tensor, perm: np.ndarray) -> Tensor:
    """Rows of (B, M, ...) reordered per batch item: out[b, i] = x[b, perm[b, i]]."""
    b, m = perm.shape
    rest = x.shape[2:]
    flat = T.reshape(x, (b * m,) + rest)
    return T.reshape(T.gather_rows(flat, _flat_index(perm)), (b, m) + rest)


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    rows = np.arange(perm.shape[0])[:, None]
    inv[rows, perm] = np.arange(perm.shape[1])[None, :]
    return inv


def _batched(x: Tensor):
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


# ------------------------------------------------------------------- EdgeConv


def edge_conv(fw: Forward, x: Tensor, graph: np.ndarray, name: str, use_bn: bool = True) -> Tensor:
    """max_j ReLU(h([x_i, x_i - x_j])) over the neighbours j of each point.

    ``graph`` holds per-cloud local neighbour indices, (B, M, k) or (M, k)
    for unbatched ``x``. The shared linear map on the concatenated edge
    feature is split as W_top x_i + W_bot (x_i - x_j) and projected before
    gathering, which is the same function at a fraction of the cost.
    """
    x, squeeze = _batched(x)
    graph = np.asarray(graph)
    if graph.ndim == 2:
        graph = graph[None]
    b, m, c = x.shape
    if graph.shape[:2] != (b, m):
        raise ShapeMismatchError(f"edge_conv: graph {graph.shape} does not match features {x.shape}")
    if graph.size and (graph.min() < 0 or graph.max() >= m):
        raise IndexError(f"edge_conv: neighbour index out of range for {m} points")
    k = graph.shape[2]
    w = fw.p(f"{name}.W")
    if w.shape[0] != 2 * c:
        raise ShapeMismatchError(f"edge_conv: weight {w.shape} expects input width {w.shape[0] // 2}, got {c}")
    out_dim = w.shape[1]

    perm = canonical_order(x.data)
    inv = inverse_permutation(perm)
    xs = permute_rows(x, perm)
    rows = np.arange(b)[:, None, None]
    gs = inv[rows, np.take_along_axis(graph, perm[:, :, None], axis=1)]

    w_top = T.gather_rows(w, np.arange(c))
    w_bot = T.gather_rows(w, np.arange(c, 2 * c))
    flat = T.reshape(xs, (b * m, c))
    centre = flat @ (w_top + w_bot)
    if f"{name}.b" in fw.params:
        centre = centre + fw.p(f"{name}.b")
    other = flat @ w_bot
    gidx = (gs + np.arange(b)[:, None, None] * m).reshape(b * m, k)
    edges = T.reshape(centre, (b * m, 1, out_dim)) - T.gather_rows(other, gidx)
    edges = T.reshape(edges, (b, m, k, out_dim))
    if use_bn:
        edges = fw.batch_norm(edges, name)
    # relu commutes with max; taking the max first avoids ties among zeros
    out = T.relu(T.reduce_max(edges, axis=2))
    return _unbatch(permute_rows(out, inv), squeeze)


def encoder_forward(fw: Forward, points, arch: ArchConfig) -> Tensor:
    """(B, M, 3) coordinates -> (B, M, emb_dim) point features."""
    x = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
    x, squeeze = _batched(x)
    if x.shape[1] <= arch.neighbors:
        raise ShapeMismatchError(f"encoder needs more than {arch.neighbors} points, got {x.shape[1]}")
    feats = []
    for i in range(len(arch.enc_widths)):
        # layer 0 on coordinates, later layers on the previous features
        graph = knn_batched(x.data, arch.neighbors, include_self=False)
        x = edge_conv(fw, x, graph, f"encoder.ec{i}")
        feats.append(x)
    out = linear(fw, T.concat(feats, axis=-1), "encoder.mlp")
    out = T.relu(fw.batch_norm(out, "encoder.mlp"))
    return _unbatch(out, squeeze)


# ------------------------------------------------------------ offset-attention


def offset_attention(fw: Forward, f: Tensor, name: str) -> Tensor:
    """Single-head offset-attention with a residual connection.

    Scores are softmax-normalised over keys, then L1-normalised over queries;
    the transformed offset ``F - attended`` is added back onto ``F``.
    """
    f, squeeze = _batched(f)
    b, m, d = f.shape
    if fw.params[f"{name}.v.W"].shape[0] != d:
        raise ShapeMismatchError(f"offset_attention: width {d} does not match parameters")
    perm = canonical_order(f.data)
    fs = permute_rows(f, perm)
    q = fs @ fw.p(f"{name}.q.W")
    k = fs @ fw.p(f"{name}.k.W")
    v = linear(fw, fs, f"{name}.v")
    energy = q @ T.transpose(k, (0, 2, 1))
    attn = T.l1_normalize(T.softmax(energy, axis=-1), axis=1)
    attended = T.transpose(attn, (0, 2, 1)) @ v
    out = T.relu(linear(fw, fs - attended, f"{name}.trans")) + fs
    return _unbatch(permute_rows(out, inverse_permutation(perm)), squeeze)


# ------------------------------------------------------------ up / down blocks


def grid_pattern(factor: int, span: float = 0.2) -> np.ndarray:
    """``factor`` distinct 2-d codes on a near-square lattice in [-span, span]^2."""
    if factor < 1:
        raise LayoutError(f"expansion factor must be >= 1, got {factor}")
    rows = max(d for d in range(1, int(np.sqrt(factor)) + 1) if factor % d == 0)
    cols = factor // rows
    xs = np.linspace(-span, span, cols) if cols > 1 else np.zeros(1)
    ys = np.linspace(-span, span, rows) if rows > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def expansion_factor(ratio: float) -> int:
    factor = int(round(1.0 / ratio))
    if factor < 1 or abs(factor * ratio - 1.0) > 1e-9:
        raise LayoutError(f"1/ratio must be a positive integer, got ratio={ratio}")
    return factor


def duplicate_rows(x: Tensor, factor: int) -> Tensor:
    """(B, M, D) -> (B, M*factor, D); copies of row i occupy a contiguous group."""
    b, m, d = x.shape
    flat = T.reshape(x, (b * m, d))
    idx = np.repeat(np.arange(b * m), factor)
    return T.reshape(T.gather_rows(flat, idx), (b, m * factor, d))


def feature_up(fw: Forward, f: Tensor, factor: int, name: str, span: float = 0.2) -> Tensor:
    f, squeeze = _batched(f)
    b, m, _ = f.shape
    dup = duplicate_rows(f, factor)
    codes = np.tile(grid_pattern(factor, span), (m, 1)).astype(f.dtype)
    grid = Tensor(np.broadcast_to(codes, (b, m * factor, 2)).copy())
    h = T.relu(linear(fw, T.concat([dup, grid], axis=-1), f"{name}.mlp"))
    return _unbatch(offset_attention(fw, h, f"{name}.attn"), squeeze)


def feature_down(fw: Forward, f: Tensor, factor: int, name: str) -> Tensor:
    """Collapse each contiguous group of ``factor`` rows back into one row.

    Within a group every member is connected to every member (itself
    included); one EdgeConv plus a max over the group gives one vector, which
    two shared MLP layers refine. With no nonlinearity between the edge map
    and the two maxima, max over pairs (i, j) of centre_i - other_j equals
    max_i centre_i - min_j other_j, so the f x f edge tensor is never built.
    Rounding is monotone, so this is bit-identical to the pairwise form.
    """
    f, squeeze = _batched(f)
    b, n, d = f.shape
    if factor < 1 or n % factor:
        raise LayoutError(f"feature_down: {n} rows do not split into groups of {factor}")
    m = n // factor
    w = fw.p(f"{name}.ec.W")
    w_top = T.gather_rows(w, np.arange(d))
    w_bot = T.gather_rows(w, np.arange(d, 2 * d))
    groups = T.reshape(f, (b * m, factor, d))
    centre = groups @ (w_top + w_bot) + fw.p(f"{name}.ec.b")
    other = groups @ w_bot
    pooled = T.relu(T.reduce_max(centre, axis=1) + T.reduce_max(T.neg(other), axis=1))
    h = T.relu(linear(fw, pooled, f"{name}.mlp0"))
    h = T.relu(linear(fw, h, f"{name}.mlp1"))
    return _unbatch(T.reshape(h, (b, m, d)), squeeze)


def decoder_forward(fw: Forward, feats: Tensor, ratio: float, arch: ArchConfig) -> Tensor:
    """(B, M, emb_dim) point features -> (B, M/ratio, 3) coordinates.

    Expanded features come from up1 after the entry MLP and are contracted
    again by the down block. Their difference (each contracted row broadcast
    over its group) is the offset; it passes through a second up block with
    factor 1, and the coordinate MLP reads expanded features plus offset.
    """
    factor = expansion_factor(ratio)
    feats, squeeze = _batched(feats)
    f_in = T.relu(linear(fw, feats, "decoder.entry"))
    f_up = feature_up(fw, f_in, factor, "decoder.up1", arch.grid_span)
    f_down = feature_down(fw, f_up, factor, "decoder.down")
    offset = f_up - duplicate_rows(f_down, factor)
    delta = feature_up(fw, offset, 1, "decoder.up2", arch.grid_span)
    h = T.relu(linear(fw, f_up + delta, "decoder.coord0"))
    return _unbatch(linear(fw, h, "decoder.coord1"), squeeze)


# ------------------------------------------------------------------------ heads


def global_feature(x: Tensor) -> Tensor:
    """(B, M, C) canonically ordered rows -> (B, 2C) max || mean pooling."""
    return T.concat([T.reduce_max(x, axis=1), T.reduce_mean(x, axis=1)], axis=-1)


def classification_head(fw: Forward, feats: Tensor, arch: ArchConfig) -> Tensor:
    feats, squeeze = _batched(feats)
    if feats.shape[1] < 1:
        raise ShapeMismatchError("classification_head: no points")
    h = global_feature(permute_rows(feats, canonical_order(feats.data)))
    n_layers = len(arch.cls_hidden)
    for i in range(n_layers):
        h = fw.dropout(T.relu(linear(fw, h, f"cls.fc{i}")), arch.dropout)
    logits = linear(fw, h, f"cls.fc{n_layers}")
    return T.reshape(logits, logits.shape[1:]) if squeeze else logits


def segmentation_head(fw: Forward, feats: Tensor, arch: ArchConfig) -> Tensor:
    feats, squeeze = _batched(feats)
    b, m, c = feats.shape
    if m < 1:
        raise ShapeMismatchError("segmentation_head: no points")
    perm = canonical_order(feats.data)
    fs = permute_rows(feats, perm)
    g = global_feature(fs)
    g = T.gather_rows(g, np.repeat(np.arange(b), m))
    h = T.concat([T.reshape(fs, (b * m, c)), g], axis=-1)
    n_layers = len(arch.seg_hidden)
    for i in range(n_layers):
        h = fw.dropout(T.relu(linear(fw, h, f"seg.fc{i}")), arch.dropout)
    logits = T.reshape(linear(fw, h, f"seg.fc{n_layers}"), (b, m, arch.num_parts))
    return _unbatch(permute_rows(logits, inverse_permutation(perm)), squeeze)


# --------------------------------------------------------------------- bundle


class UAE:
    """Parameters, batch-norm state and architecture of one model."""

    def __init__(self, arch: ArchConfig = ArchConfig(), seed: int = 0, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.params = init_params(arch, np.random.default_rng(seed), self.dtype)
        self.bn_state = init_bn_state(arch, self.dtype)

    def forward(self, *, training: bool, rng=None, frozen=()) -> Forward:
        return Forward(
            self.params,
            self.bn_state,
            training=training,
            rng=rng,
            frozen=frozen,
            momentum=self.arch.bn_momentum,
            eps=self.arch.bn_eps,
        )

    def reconstruct(self, fw: Forward, points, ratio: float):
        """Encode subsampled points and decode them back to M/ratio points."""
        x = Tensor(np.asarray(points, dtype=self.dtype))
        feats = encoder_forward(fw, x, self.arch)
        return decoder_forward(fw, feats, ratio, self.arch), feats

    def encode(self, points, batch_size: int = 16) -> np.ndarray:
        """Eval-mode encoder features without recording a graph."""
        pts = np.asarray(points, dtype=self.dtype)
        single = pts.ndim == 2
        if single:
            pts = pts[None]
        outs = []
        for s in range(0, len(pts), batch_size):
            fw = self.forward(training=False, frozen=("encoder",))
            outs.append(encoder_forward(fw, Tensor(pts[s : s + batch_size]), self.arch).data)
        out = np.concatenate(outs)
        return out[0] if single else out

    def upsample(self, points, ratio: float) -> np.ndarray:
        fw = self.forward(training=False, frozen=("encoder", "decoder"))
        pts = np.asarray(points, dtype=self.dtype)
        return self.reconstruct(fw, pts, ratio)[0].data

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))
