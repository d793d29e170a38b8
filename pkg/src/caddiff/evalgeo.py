"""Geometry-level evaluation: point sampling, Chamfer metrics, SVG export.

Sketch curves are sampled in their dequantized [0, 1]^2 plane, scaled,
rotated into 3D by the extrusion frame and replicated along the extrusion
normal.  No solid booleans are executed; samples from all extrusions are
pooled, so reported geometric numbers are internally comparable only.

3D conventions (fixed, also exercised by the axis tests):
 - sketch coordinates are recentered to [-0.5, 0.5]^2 and scaled by ``s``;
 - plane orientation tokens map to spherical angles theta in [0, pi],
   phi and gamma in [0, 2 pi); the plane normal is
   (sin t cos p, sin t sin p, cos t) and gamma spins the in-plane axes;
 - the plane origin tokens map to [-0.5, 0.5]^3, extrude distances to [0, 1];
 - final coordinates, provably inside [-2.5, 2.5]^3, are mapped affinely
   into the unit cube by p/5 + 0.5.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cadseq import CadSequence, CommandKind, dequantize, validate

log = logging.getLogger(__name__)

N_OFFSETS = 4
JSD_GRID = 28
WORLD_HALF = 2.5    # model-space coordinate bound before unit-cube mapping
DEGENERATE_EPS = 1e-9


class EvalGeoError(ValueError):
    pass


class EmptyCloud(EvalGeoError):
    pass


class NoSuchSketch(EvalGeoError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3), unit-cube normalized

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise EmptyCloud("point cloud must be a nonempty (N, 3) array")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class MetricsReport:
    """cov/novelty/unique/invalidity are percentages; mmd is Chamfer x100."""

    cov: float
    mmd: float
    jsd: float
    novelty: float
    unique: float
    invalidity: float

    def to_json(self) -> str:
        return json.dumps({
            "cov": self.cov, "mmd": self.mmd, "jsd": self.jsd,
            "novelty": self.novelty, "unique": self.unique,
            "invalidity": self.invalidity,
        })


# ---------------------------------------------------------------------------
# Curve geometry in the dequantized sketch plane

@dataclass(frozen=True)
class _Curve:
    kind: CommandKind
    start: tuple[float, float]   # unused for circles
    data: tuple                  # line: (end,); arc: (end, sweep, ccw); circle: (center, r)

    def length(self) -> float:
        if self.kind == CommandKind.LINE:
            (end,) = self.data
            return math.dist(self.start, end)
        if self.kind == CommandKind.CIRCLE:
            _, r = self.data
            return 2.0 * math.pi * r
        end, sweep, _ = self.data
        chord = math.dist(self.start, end)
        if sweep < DEGENERATE_EPS or math.sin(sweep / 2) < DEGENERATE_EPS:
            return 0.0
        return sweep * chord / (2.0 * math.sin(sweep / 2))

    def sample(self, m: int) -> np.ndarray:
        """m points evenly spaced along the curve, shape (m, 2)."""
        u = (np.arange(m) + 0.5) / m
        if self.kind == CommandKind.LINE:
            (end,) = self.data
            s = np.asarray(self.start)
            return s + u[:, None] * (np.asarray(end) - s)
        if self.kind == CommandKind.CIRCLE:
            center, r = self.data
            ang = 2.0 * math.pi * u
            return np.stack(
                [center[0] + r * np.cos(ang), center[1] + r * np.sin(ang)], axis=1
            )
        center, r, a0, sweep, ccw = _arc_geometry(self.start, *self.data)
        ang = a0 + (sweep if ccw else -sweep) * u
        return np.stack(
            [center[0] + r * np.cos(ang), center[1] + r * np.sin(ang)], axis=1
        )

    def degenerate(self) -> bool:
        if self.kind == CommandKind.LINE:
            return self.length() < DEGENERATE_EPS
        if self.kind == CommandKind.CIRCLE:
            return self.data[1] < DEGENERATE_EPS
        end, sweep, _ = self.data
        return (
            math.dist(self.start, end) < DEGENERATE_EPS
            or sweep < DEGENERATE_EPS
            or math.sin(sweep / 2) < DEGENERATE_EPS
        )


def _arc_geometry(start, end, sweep, ccw):
    """Center, radius, start angle and direction of an arc through two points.

    The arc leaves `start`, subtends `sweep` at the center, and ends at
    `end`; `ccw` picks the turning direction.
    """
    sx, sy = start
    ex, ey = end
    chord = math.dist(start, end)
    r = chord / (2.0 * math.sin(sweep / 2.0))
    mx, my = (sx + ex) / 2.0, (sy + ey) / 2.0
    ux, uy = (ex - sx) / chord, (ey - sy) / chord
    h = math.sqrt(max(r * r - (chord / 2.0) ** 2, 0.0))
    side = 1.0 if ccw else -1.0
    if sweep > math.pi:
        side = -side
    cx = mx + side * h * (-uy)
    cy = my + side * h * ux
    a0 = math.atan2(sy - cy, sx - cx)
    return (cx, cy), r, a0, sweep, ccw


def _dq(tok: int) -> float:
    return dequantize(tok)


@dataclass(frozen=True)
class _Extrusion:
    """One sketch with its curves plus the owning extrude parameters."""

    curves: tuple[_Curve, ...]
    scale: float
    angles: tuple[float, float, float]
    origin: tuple[float, float, float]
    dists: tuple[float, float]


def _loop_curves(commands, params, start_i, end_i) -> list[_Curve]:
    """Curves of one loop; the pen starts at the last line/arc endpoint."""
    pen = None
    for j in range(end_i - 1, start_i - 1, -1):
        if commands[j] in (CommandKind.LINE, CommandKind.ARC):
            pen = (_dq(params[j][0]), _dq(params[j][1]))
            break
    out = []
    for j in range(start_i, end_i):
        cmd = commands[j]
        toks = params[j]
        if cmd == CommandKind.CIRCLE:
            out.append(_Curve(cmd, (0.0, 0.0),
                              ((_dq(toks[0]), _dq(toks[1])), _dq(toks[2]))))
            continue
        end = (_dq(toks[0]), _dq(toks[1]))
        start = pen if pen is not None else end
        if cmd == CommandKind.LINE:
            out.append(_Curve(cmd, start, (end,)))
        else:  # ARC
            sweep = _dq(toks[2]) * 2.0 * math.pi
            ccw = toks[3] != 0
            out.append(_Curve(cmd, start, (end, sweep, ccw)))
        pen = end
    return out


def extrusions(seq: CadSequence) -> list[_Extrusion]:
    """Split a sequence into per-extrude sketch groups with 2D curves."""
    out: list[_Extrusion] = []
    commands, params = seq.commands, seq.params
    seg_curves: list[_Curve] = []
    loop_start = None
    for i, cmd in enumerate(commands):
        if cmd == CommandKind.SOL:
            if loop_start is not None:
                seg_curves.extend(_loop_curves(commands, params, loop_start, i))
            loop_start = i + 1
        elif cmd == CommandKind.EXTRUDE:
            if loop_start is not None:
                seg_curves.extend(_loop_curves(commands, params, loop_start, i))
                loop_start = None
            toks = params[i]
            if seg_curves:
                out.append(_Extrusion(
                    curves=tuple(seg_curves),
                    angles=(
                        _dq(toks[0]) * math.pi,
                        _dq(toks[1]) * 2.0 * math.pi,
                        _dq(toks[2]) * 2.0 * math.pi,
                    ),
                    origin=(_dq(toks[3]) - 0.5, _dq(toks[4]) - 0.5, _dq(toks[5]) - 0.5),
                    scale=_dq(toks[6]),
                    dists=(_dq(toks[7]), _dq(toks[8])),
                ))
            seg_curves = []
        elif cmd == CommandKind.EOS:
            break
    return out


def sketch_frame(theta: float, phi: float, gamma: float) -> np.ndarray:
    """Rows (u, v, n): in-plane axes and normal of the sketch plane."""
    st, ct = math.sin(theta), math.cos(theta)
    sp, cp = math.sin(phi), math.cos(phi)
    n = np.array([st * cp, st * sp, ct])
    e_theta = np.array([ct * cp, ct * sp, -st])
    e_phi = np.array([-sp, cp, 0.0])
    cg, sg = math.cos(gamma), math.sin(gamma)
    u = cg * e_theta + sg * e_phi
    v = -sg * e_theta + cg * e_phi
    return np.stack([u, v, n])


def _allocate(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of `total` items across weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        w = np.ones_like(w)
    quota = w / w.sum() * total
    base = np.floor(quota).astype(int)
    rem = total - base.sum()
    if rem > 0:
        order = np.argsort(-(quota - base), kind="stable")
        base[order[:rem]] += 1
    return base


def sample_points(seq: CadSequence, n_per_model: int = 2000,
                  n_offsets: int = N_OFFSETS) -> PointCloud:
    """Approximate point cloud of a model: curve samples swept along extrudes.

    Points are allocated across curves by scaled arc length with the
    largest-remainder rule, each replicated at n_offsets stations between
    -e1 and +e2 along the plane normal; boolean operations are ignored.
    """
    exts = extrusions(seq)
    entries = []   # (extrusion, curve)
    lengths = []
    skipped = 0
    for ext in exts:
        for curve in ext.curves:
            if curve.degenerate():
                skipped += 1
                continue
            entries.append((ext, curve))
            lengths.append(curve.length() * max(ext.scale, 1e-9))
    if skipped:
        log.warning("skipped %d degenerate curves", skipped)
    if not entries:
        raise EmptyCloud("no sampleable curves in the model")
    m2d = max(n_per_model // n_offsets, 1)
    alloc = _allocate(np.array(lengths), m2d)
    clouds = []
    for (ext, curve), m in zip(entries, alloc):
        if m == 0:
            continue
        pts2 = (curve.sample(int(m)) - 0.5) * ext.scale
        frame = sketch_frame(*ext.angles)
        base = np.asarray(ext.origin) + pts2 @ frame[:2]
        offsets = np.linspace(-ext.dists[0], ext.dists[1], n_offsets)
        for z in offsets:
            clouds.append(base + z * frame[2])
    pts = np.concatenate(clouds, axis=0)
    return PointCloud(pts / (2.0 * WORLD_HALF) + 0.5)


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric mean squared nearest-neighbor distance."""
    da, _ = cKDTree(b.points).query(a.points, k=1)
    db, _ = cKDTree(a.points).query(b.points, k=1)
    return float(np.mean(da**2) + np.mean(db**2))


def _occupancy(clouds: list[PointCloud], grid: int) -> np.ndarray:
    hist = np.zeros(grid**3, dtype=np.float64)
    for cloud in clouds:
        idx = np.clip((cloud.points * grid).astype(int), 0, grid - 1)
        flat = (idx[:, 0] * grid + idx[:, 1]) * grid + idx[:, 2]
        hist += np.bincount(flat, minlength=grid**3)
    total = hist.sum()
    if total == 0:
        raise EmptyCloud("no points for the occupancy histogram")
    return hist / total


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    """JSD with natural log, in [0, ln 2]."""
    m = 0.5 * (p + q)
    def kl(x, y):
        sel = x > 0
        return float(np.sum(x[sel] * np.log(x[sel] / y[sel])))
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def metrics(generated: list[CadSequence], reference: list[CadSequence],
            train_set: list[CadSequence], n_points: int = 2000,
            grid: int = JSD_GRID) -> MetricsReport:
    """Sequence- and geometry-level generation metrics.

    Geometric metrics (COV, MMD, JSD) use only grammatically valid
    sequences that yield nonempty clouds; invalidity, novelty and
    uniqueness are computed over the full generated list by exact token
    equality.
    """
    if not generated or not reference:
        raise EvalGeoError("generated and reference sets must be nonempty")
    n_gen = len(generated)
    invalid = sum(1 for s in generated if not validate(s).valid)
    train_keys = set(train_set)
    novel = sum(1 for s in generated if s not in train_keys)
    unique = len(set(generated))  # duplicates counted once

    def clouds_of(seqs):
        out = []
        for s in seqs:
            if not validate(s).valid:
                continue
            try:
                out.append(sample_points(s, n_points))
            except EmptyCloud:
                log.warning("skipping a sequence with no sampleable geometry")
        return out

    gen_clouds = clouds_of(generated)
    ref_clouds = clouds_of(reference)
    if not gen_clouds or not ref_clouds:
        raise EvalGeoError("no valid geometry on one side; cannot compute COV/MMD/JSD")

    dists = np.zeros((len(gen_clouds), len(ref_clouds)))
    for i, g in enumerate(gen_clouds):
        for j, r in enumerate(ref_clouds):
            dists[i, j] = chamfer(g, r)

    # COV: a reference shape is covered when it is a nearest neighbor of some
    # generated shape; ties prefer an uncovered reference.
    covered: set[int] = set()
    for i in range(len(gen_clouds)):
        row = dists[i]
        best = row.min()
        cands = np.flatnonzero(row == best)
        pick = next((c for c in cands if c not in covered), cands[0])
        covered.add(int(pick))
    cov = 100.0 * len(covered) / len(ref_clouds)
    mmd = 100.0 * float(dists.min(axis=0).mean())
    jsd = jensen_shannon(_occupancy(gen_clouds, grid), _occupancy(ref_clouds, grid))
    return MetricsReport(
        cov=cov,
        mmd=mmd,
        jsd=jsd,
        novelty=100.0 * novel / n_gen,
        unique=100.0 * unique / n_gen,
        invalidity=100.0 * invalid / n_gen,
    )


# ---------------------------------------------------------------------------
# SVG export

def _fmt(x: float) -> str:
    return f"{x:.6f}"


def export_svg(seq: CadSequence, sketch_index: int = 0) -> str:
    """Render one sketch (the curves consumed by extrude #sketch_index)
    as an SVG with a unit viewBox; output is byte-deterministic."""
    exts = extrusions(seq)
    if not 0 <= sketch_index < len(exts):
        raise NoSuchSketch(f"model has {len(exts)} sketches, asked for {sketch_index}")
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 1 1">',
        '<g fill="none" stroke="black" stroke-width="0.004">',
    ]
    for curve in exts[sketch_index].curves:
        if curve.kind == CommandKind.LINE:
            (end,) = curve.data
            parts.append(
                f'<path d="M {_fmt(curve.start[0])} {_fmt(curve.start[1])} '
                f'L {_fmt(end[0])} {_fmt(end[1])}"/>'
            )
        elif curve.kind == CommandKind.CIRCLE:
            center, r = curve.data
            parts.append(
                f'<circle cx="{_fmt(center[0])}" cy="{_fmt(center[1])}" r="{_fmt(r)}"/>'
            )
        else:
            end, sweep, ccw = curve.data
            if curve.degenerate():
                continue
            _, r, _, _, _ = _arc_geometry(curve.start, end, sweep, ccw)
            large = 1 if sweep > math.pi else 0
            sweep_flag = 1 if ccw else 0
            parts.append(
                f'<path d="M {_fmt(curve.start[0])} {_fmt(curve.start[1])} '
                f'A {_fmt(r)} {_fmt(r)} 0 {large} {sweep_flag} '
                f'{_fmt(end[0])} {_fmt(end[1])}"/>'
            )
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
