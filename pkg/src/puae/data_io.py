"""File formats, synthetic shapes with exact surface distances, and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import (
    DataFormatError,
    DegenerateGeometryError,
    HashMismatchError,
    IntegrityError,
    VersionMismatchError,
)
from .geometry import Mesh, PointCloud, normalization_transform

# ------------------------------------------------------------------------ XYZ


def _read_text(path: Path) -> str:
    try:
        return path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"not UTF-8 text (byte offset {exc.start})", path) from None


def load_xyz(path) -> PointCloud:
    """Whitespace-separated rows; the first three columns are coordinates."""
    path = Path(path)
    rows = []
    extra = False
    for lineno, line in enumerate(_read_text(path).split("\n"), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) < 3:
            raise DataFormatError(f"expected at least 3 columns, got {len(parts)}", path, lineno)
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise DataFormatError(f"non-numeric value in {text!r}", path, lineno) from None
        if not all(np.isfinite(values)):
            raise DataFormatError("non-finite coordinate", path, lineno)
        extra = extra or len(parts) > 3
        rows.append(values[:3])
    if not rows:
        raise DataFormatError("file contains no points", path)
    if extra:
        warnings.warn(f"{path}: ignoring columns beyond xyz", stacklevel=2)
    return PointCloud(np.array(rows, dtype=np.float64), source=str(path))


def save_xyz(points, path, precision: int = 17) -> None:
    """Write one point per line. 17 significant digits round-trip float64."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    fmt = f"%.{precision}g"
    _atomic_write(path, lambda fh: np.savetxt(fh, pts, fmt=fmt), binary=False)


# ------------------------------------------------------------------------ OFF


def _off_tokens(text: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        for tok in line.split("#", 1)[0].split():
            yield lineno, tok


def load_off(path) -> Mesh:
    """OFF mesh; polygons are fan-triangulated around their first vertex."""
    path = Path(path)
    tokens = list(_off_tokens(_read_text(path)))
    if not tokens or not tokens[0][1].startswith("OFF"):
        raise DataFormatError("missing OFF header", path, tokens[0][0] if tokens else 1)
    head = tokens[0][1]
    pos = 1
    if head != "OFF":
        # header glued to the counts, e.g. "OFF8 6 0"
        tokens[0] = (tokens[0][0], head[3:])
        pos = 0

    def take(kind):
        nonlocal pos
        if pos >= len(tokens):
            raise DataFormatError(f"unexpected end of file while reading {kind}", path)
        lineno, tok = tokens[pos]
        pos += 1
        try:
            return (int(tok) if kind == "int" else float(tok)), lineno
        except ValueError:
            raise DataFormatError(f"expected {kind}, got {tok!r}", path, lineno) from None

    nv, _ = take("int")
    nf, _ = take("int")
    take("int")
    if nv < 0 or nf < 0:
        raise DataFormatError("negative element counts", path)
    verts = np.array([take("float")[0] for _ in range(3 * nv)], dtype=np.float64).reshape(nv, 3)
    faces = []
    for _ in range(nf):
        k, lineno = take("int")
        if k < 3:
            raise DataFormatError(f"face with {k} vertices", path, lineno)
        idx = [take("int")[0] for _ in range(k)]
        if min(idx) < 0 or max(idx) >= nv:
            raise DataFormatError("face references a missing vertex", path, lineno)
        faces.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, k - 1))
    if pos != len(tokens):
        raise DataFormatError(
            f"trailing data after {nv} vertices and {nf} faces declared in header", path, tokens[pos][0]
        )
    return Mesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), source=str(path))


def save_off(mesh: Mesh, path) -> None:
    def write(fh):
        fh.write(f"OFF\n{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(c)) for c in v) + "\n")
        for f in mesh.faces:
            fh.write("3 " + " ".join(str(int(i)) for i in f) + "\n")

    _atomic_write(path, write, binary=False)


def sample_mesh_surface(mesh: Mesh, n: int, rng: np.random.Generator, return_faces: bool = False):
    """Area-weighted face choice, then a uniform barycentric point on the face."""
    areas = mesh.face_areas()
    total = areas.sum()
    if len(areas) == 0 or not total > 0:
        raise DegenerateGeometryError("mesh has no surface area")
    faces = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    tri = mesh.triangles()[faces]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    cloud = PointCloud(pts, source=mesh.source)
    return (cloud, faces) if return_faces else cloud


# ----------------------------------------------------------- synthetic shapes


SHAPE_KINDS = ("sphere", "cube", "torus", "cylinder", "ellipsoid")

_DEFAULTS = {
    "sphere": {"radius": 1.0},
    "cube": {"half_extent": 1.0},
    "torus": {"R": 1.0, "ratio": 0.3},
    "cylinder": {"radius": 0.5, "half_height": 1.0},
    "ellipsoid": {"axes": [1.0, 0.7, 0.5]},
}


@dataclass
class SyntheticShape:
    """Analytic surface in a local frame plus a similarity transform.

    World points are ``scale * local @ rotation.T + offset``.
    """

    kind: str
    params: dict
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scale: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_local(self, points) -> np.ndarray:
        return ((np.asarray(points, dtype=np.float64) - self.offset) @ self.rotation) / self.scale

    def transformed(self, rotation=None, scale=1.0, offset=None) -> "SyntheticShape":
        """Compose another similarity transform on the world side."""
        rotation = np.eye(3) if rotation is None else np.asarray(rotation)
        offset = np.zeros(3) if offset is None else np.asarray(offset)
        return SyntheticShape(
            self.kind,
            dict(self.params),
            rotation @ self.rotation,
            self.scale * scale,
            scale * (self.offset @ rotation.T) + offset,
        )

    def distance(self, points) -> np.ndarray:
        """Exact unsigned distance from world points to the surface."""
        q = self.to_local(points)
        return self.scale * _LOCAL_DISTANCE[self.kind](q, self.params)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "rotation": self.rotation.tolist(),
            "scale": self.scale,
            "offset": self.offset.tolist(),
        }


def _sphere_distance(q, p):
    return np.abs(np.linalg.norm(q, axis=1) - p["radius"])


def _cube_distance(q, p):
    d = np.abs(q) - p["half_extent"]
    outside = np.linalg.norm(np.maximum(d, 0), axis=1)
    inside = np.minimum(d.max(axis=1), 0)
    return np.abs(outside + inside)


def _torus_distance(q, p):
    ring = np.hypot(q[:, 0], q[:, 1]) - p["R"]
    return np.abs(np.hypot(ring, q[:, 2]) - p["ratio"])


def _cylinder_distance(q, p):
    d = np.stack([np.hypot(q[:, 0], q[:, 1]) - p["radius"], np.abs(q[:, 2]) - p["half_height"]], axis=1)
    return np.abs(np.minimum(d.max(axis=1), 0) + np.linalg.norm(np.maximum(d, 0), axis=1))


def _ellipsoid_distance(q, p, iterations: int = 200):
    """Closest-point distance by bisection on the Lagrange multiplier.

    The closest point is x_i = e_i^2 y_i / (t + e_i^2), where t > -e_min^2
    solves sum (e_i y_i / (t + e_i^2))^2 = 1. When y has no component along
    the shortest axis the root may not exist and the closest point leaves
    that plane instead.
    """
    axes = np.asarray(p["axes"], dtype=np.float64)
    order = np.argsort(-axes)
    e = axes[order]
    y = np.abs(q[:, order])
    e2 = e * e
    n = len(y)

    def f(t):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(y == 0, 0.0, (e * y) / (t[:, None] + e2))
        return (ratio**2).sum(axis=1)

    lo = np.full(n, -e2[2])
    hi = e[0] * np.linalg.norm(y, axis=1) + 1e-300
    planar = y[:, 2] == 0
    degenerate = planar & (f(lo) < 1)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        above = f(mid) > 1
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    t = 0.5 * (lo + hi)
    x = np.where(y == 0, 0.0, e2 * y / (t[:, None] + e2 + (y == 0)))
    if degenerate.any():
        yd = y[degenerate]
        xd = np.zeros_like(yd)
        xd[:, :2] = e2[:2] * yd[:, :2] / (e2[:2] - e2[2])
        rest = 1 - ((xd[:, :2] / e[:2]) ** 2).sum(axis=1)
        xd[:, 2] = e[2] * np.sqrt(np.maximum(rest, 0))
        x[degenerate] = xd
    return np.linalg.norm(x - y, axis=1)


_LOCAL_DISTANCE = {
    "sphere": _sphere_distance,
    "cube": _cube_distance,
    "torus": _torus_distance,
    "cylinder": _cylinder_distance,
    "ellipsoid": _ellipsoid_distance,
}


def _sample_sphere(n, p, rng):
    v = rng.standard_normal((n, 3))
    return p["radius"] * v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_cube(n, p, rng):
    a = p["half_extent"]
    face = rng.integers(6, size=n)
    uv = rng.uniform(-a, a, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    out = np.empty((n, 3))
    for ax in range(3):
        sel = axis == ax
        others = [o for o in range(3) if o != ax]
        out[sel, ax] = sign[sel] * a
        out[np.ix_(sel, others)] = uv[sel]
    return out


def _sample_torus(n, p, rng):
    big, small = p["R"], p["ratio"]
    out = []
    need = n
    while need > 0:
        u = rng.uniform(0, 2 * np.pi, size=2 * need)
        v = rng.uniform(0, 2 * np.pi, size=2 * need)
        keep = rng.random(2 * need) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep][:need], v[keep][:need]
        ring = big + small * np.cos(v)
        out.append(np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1))
        need -= len(u)
    return np.concatenate(out)


def _sample_cylinder(n, p, rng):
    rad, hh = p["radius"], p["half_height"]
    side = 2 * np.pi * rad * 2 * hh
    cap = np.pi * rad * rad
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rr = np.where(part == 0, rad, rad * np.sqrt(rng.random(n)))
    z = np.where(part == 0, rng.uniform(-hh, hh, size=n), np.where(part == 1, hh, -hh))
    return np.stack([rr * np.cos(theta), rr * np.sin(theta), z], axis=1)


def _sample_ellipsoid(n, p, rng):
    a, b, c = p["axes"]
    gmax = max(b * c, a * c, a * b)
    out = []
    need = n
    while need > 0:
        s = _sample_sphere(2 * need, {"radius": 1.0}, rng)
        g = np.sqrt((b * c * s[:, 0]) ** 2 + (a * c * s[:, 1]) ** 2 + (a * b * s[:, 2]) ** 2)
        keep = rng.random(len(s)) < g / gmax
        s = s[keep][:need]
        out.append(s * np.array([a, b, c]))
        need -= len(s)
    return np.concatenate(out)


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "torus": _sample_torus,
    "cylinder": _sample_cylinder,
    "ellipsoid": _sample_ellipsoid,
}


def _validate_params(kind, params):
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    merged = dict(_DEFAULTS[kind])
    unknown = set(params or {}) - set(merged)
    if unknown:
        raise ValueError(f"{kind}: unknown parameters {sorted(unknown)}")
    merged.update(params or {})
    values = np.ravel([merged[k] for k in merged]).astype(float)
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise ValueError(f"{kind}: parameters must be positive, got {merged}")
    if kind == "ellipsoid" and len(merged["axes"]) != 3:
        raise ValueError("ellipsoid needs three semi-axes")
    if kind == "torus" and merged["ratio"] >= merged["R"]:
        raise ValueError("torus tube radius must be smaller than the ring radius")
    return merged


def synth_shape(kind: str, params: Optional[dict], n: int, rng: np.random.Generator):
    """``n`` points uniformly distributed over an analytic surface."""
    if n < 1:
        raise ValueError("n must be >= 1")
    merged = _validate_params(kind, params)
    pts = _SAMPLERS[kind](n, merged, rng)
    return PointCloud(pts, source=f"synthetic:{kind}"), SyntheticShape(kind, merged)


def part_labels(kind: str, local: np.ndarray, params: Optional[dict] = None) -> np.ndarray:
    """Per-point part index (0-based within the shape kind) from local coordinates."""
    p = _validate_params(kind, params)
    if kind in ("sphere", "ellipsoid"):
        return (local[:, 2] < 0).astype(np.int64)
    if kind == "cube":
        return np.argmax(np.abs(local), axis=1).astype(np.int64)
    if kind == "torus":
        return (np.hypot(local[:, 0], local[:, 1]) < p["R"]).astype(np.int64)
    # cylinder: caps versus lateral surface, whichever is closer
    lateral = np.abs(np.hypot(local[:, 0], local[:, 1]) - p["radius"])
    cap = np.abs(np.abs(local[:, 2]) - p["half_height"])
    return (cap < lateral).astype(np.int64)


PARTS_PER_KIND = {"sphere": 2, "ellipsoid": 2, "cube": 3, "torus": 2, "cylinder": 2}


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ---------------------------------------------------------------------- dataset


@dataclass
class Sample:
    cloud: PointCloud
    shape: Optional[SyntheticShape] = None
    sample_id: str = ""


@dataclass
class Dataset:
    samples: List[Sample]
    split: str = "train"
    manifest: dict = field(default_factory=dict)
    class_names: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def points(self) -> np.ndarray:
        return np.stack([s.cloud.points for s in self.samples])

    def classes(self) -> np.ndarray:
        return np.array([s.cloud.cls for s in self.samples], dtype=np.int64)

    def part_space(self) -> Dict[int, List[int]]:
        return {int(k): list(v) for k, v in self.manifest.get("parts", {}).items()}


_VARIATION = {
    "sphere": lambda rng: {"radius": 1.0},
    "cube": lambda rng: {"half_extent": 1.0},
    "torus": lambda rng: {"R": 1.0, "ratio": float(rng.uniform(0.2, 0.45))},
    "cylinder": lambda rng: {"radius": float(rng.uniform(0.3, 0.7)), "half_height": 1.0},
    "ellipsoid": lambda rng: {"axes": sorted(rng.uniform(0.5, 1.0, size=3).tolist(), reverse=True)},
}


def make_synthetic_dataset(
    kinds=("sphere", "cube", "torus"),
    per_kind: int = 20,
    n_points: int = 512,
    seed: int = 0,
    split: str = "train",
    target: str = "unit_cube",
    rotate: bool = True,
    with_parts: bool = False,
    n_shapes: Optional[int] = None,
) -> Dataset:
    """Clouds of the given kinds with randomised shape parameters and pose.

    ``n_shapes`` cycles through ``kinds`` to produce exactly that many
    samples instead of ``per_kind`` of each. Every sample is normalised into
    ``target`` and keeps an analytic surface (transformed identically) for
    exact point-to-surface evaluation.
    """
    rng = np.random.default_rng(seed)
    samples = []
    part_offset = 0
    parts, bases = {}, {}
    for ci, kind in enumerate(kinds):
        parts[ci] = list(range(part_offset, part_offset + PARTS_PER_KIND[kind]))
        bases[ci] = part_offset
        part_offset += PARTS_PER_KIND[kind]
    if n_shapes is None:
        sequence = [ci for ci in range(len(kinds)) for _ in range(per_kind)]
    else:
        sequence = [i % len(kinds) for i in range(n_shapes)]
    counts = {ci: 0 for ci in range(len(kinds))}
    for ci in sequence:
        kind, base = kinds[ci], bases[ci]
        j = counts[ci]
        counts[ci] += 1
        cloud, shape = synth_shape(kind, _VARIATION[kind](rng), n_points, rng)
        labels = part_labels(kind, cloud.points, shape.params) + base if with_parts else None
        rot = random_rotation(rng) if rotate else np.eye(3)
        pts = cloud.points @ rot.T
        centre, scale = normalization_transform(pts, target)
        normed = (pts - centre) * scale
        shape = shape.transformed(rot).transformed(scale=scale, offset=-scale * centre)
        sid = f"{split}-{seed}-{kind}-{j}"
        samples.append(Sample(PointCloud(normed, labels, ci, f"synthetic:{kind}"), shape, sid))
    manifest = {
        "generator": "synthetic",
        "kinds": list(kinds),
        "per_kind": per_kind,
        "n_shapes": n_shapes,
        "n_points": n_points,
        "seed": seed,
        "split": split,
        "normalization": target,
        "rotate": rotate,
        "parts": {str(k): v for k, v in parts.items()},
        "with_parts": with_parts,
        "sources": [s.sample_id for s in samples],
    }
    return Dataset(samples, split, manifest, list(kinds))


def split_dataset(dataset: Dataset, test_fraction: float, seed: int):
    """Seeded disjoint split: every sample lands in exactly one side."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])

    def sub(idx, split):
        samples = [dataset.samples[i] for i in idx]
        manifest = dict(dataset.manifest, split=split, sources=[s.sample_id for s in samples])
        return Dataset(samples, split, manifest, list(dataset.class_names))

    return sub(train_idx, "train"), sub(test_idx, "test")


def save_manifest(dataset: Dataset, path) -> None:
    _atomic_write(path, lambda fh: json.dump(dataset.manifest, fh, indent=2, sort_keys=True), binary=False)


def load_manifest(path) -> Dataset:
    """Rebuild a synthetic dataset from its JSON manifest."""
    try:
        m = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid manifest JSON: {exc.msg}", path, exc.lineno) from None
    if m.get("generator") != "synthetic":
        raise DataFormatError("only synthetic manifests can be regenerated", path)
    return make_synthetic_dataset(
        kinds=tuple(m["kinds"]),
        per_kind=m["per_kind"],
        n_points=m["n_points"],
        seed=m["seed"],
        split=m.get("split", "train"),
        target=m.get("normalization", "unit_cube"),
        rotate=m.get("rotate", True),
        with_parts=bool(m.get("with_parts", False)),
        n_shapes=m.get("n_shapes"),
    )


# ------------------------------------------------------------------ checkpoint

MAGIC = b"PUAECKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    version: int
    config_hash: str
    arch: dict
    param_count: int
    params: Dict[str, np.ndarray]
    bn_state: Dict[str, tuple]
    optimizer: Optional[dict]
    meta: dict


def _atomic_write(path, writer, binary: bool):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb" if binary else "w", encoding=None if binary else "utf-8") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, *, arch, params, bn_state=None, optimizer=None, meta=None) -> None:
    """Self-describing binary checkpoint.

    Layout: magic, u32 version, u64 header length, UTF-8 JSON header, raw
    little-endian tensor payload, SHA-256 of everything before it.
    """
    arch_dict = arch.to_dict() if hasattr(arch, "to_dict") else dict(arch)
    config_hash = arch.config_hash() if hasattr(arch, "config_hash") else _hash_dict(arch_dict)
    tensors = {f"param/{k}": v for k, v in params.items()}
    for name, (mean, var) in (bn_state or {}).items():
        tensors[f"bn_mean/{name}"] = mean
        tensors[f"bn_var/{name}"] = var
    opt_meta = None
    if optimizer is not None:
        for name, arr in optimizer["m"].items():
            tensors[f"adam_m/{name}"] = arr
        for name, arr in optimizer["v"].items():
            tensors[f"adam_v/{name}"] = arr
        opt_meta = {k: v for k, v in optimizer.items() if k not in ("m", "v")}

    directory, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "arch": arch_dict,
        "param_count": int(sum(int(np.prod(v.shape)) for v in params.values())),
        "tensors": directory,
        "payload_bytes": offset,
        "optimizer": opt_meta,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(head)))
    buf.write(head)
    for raw in blobs:
        buf.write(raw)
    body = buf.getvalue()
    _atomic_write(path, lambda fh: (fh.write(body), fh.write(hashlib.sha256(body).digest())), binary=True)


def _hash_dict(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_checkpoint(path, expected_arch=None) -> Checkpoint:
    """Read and verify a checkpoint.

    Raises IntegrityError on truncation, framing or digest failures,
    VersionMismatchError on an unknown format version and HashMismatchError
    when ``expected_arch`` describes a different architecture.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _PREAMBLE.size + _DIGEST:
        raise IntegrityError(f"{path}: file too short to be a checkpoint")
    magic, version, head_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: bad magic bytes")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (corrupted or truncated)")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREAMBLE.size
    if start + head_len > len(body):
        raise IntegrityError(f"{path}: header length exceeds file size")
    try:
        header = json.loads(body[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise IntegrityError(f"{path}: unreadable header") from None
    payload = body[start + head_len :]
    if len(payload) != header["payload_bytes"]:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, header declares {header['payload_bytes']}")

    tensors = {}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise IntegrityError(f"{path}: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)

    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    counted = int(sum(v.size for v in params.values()))
    if counted != header["param_count"]:
        raise IntegrityError(f"{path}: parameter count {counted} != header {header['param_count']}")
    if expected_arch is not None:
        want = expected_arch.config_hash() if hasattr(expected_arch, "config_hash") else _hash_dict(expected_arch)
        if want != header["config_hash"]:
            raise HashMismatchError(f"{path}: checkpoint was written for a different architecture")
        if hasattr(expected_arch, "to_dict"):
            from .model import param_count

            if param_count(expected_arch) != counted:
                raise IntegrityError(f"{path}: parameter count does not match the architecture")

    bn_state = {}
    for k, v in tensors.items():
        if k.startswith("bn_mean/"):
            name = k[len("bn_mean/") :]
            bn_state[name] = (v, tensors[f"bn_var/{name}"])
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = dict(header["optimizer"])
        optimizer["m"] = {k[len("adam_m/") :]: v for k, v in tensors.items() if k.startswith("adam_m/")}
        optimizer["v"] = {k[len("adam_v/") :]: v for k, v in tensors.items() if k.startswith("adam_v/")}
    return Checkpoint(
        version=version,
        config_hash=header["config_hash"],
        arch=header["arch"],
        param_count=counted,
        params=params,
        bn_state=bn_state,
        optimizer=optimizer,
        meta=header.get("meta", {}),
    )
