"""Closed-circuit track geometry.

Loads TUM-style track CSVs (x_m, y_m, w_tr_right_m, w_tr_left_m), derives
boundary polylines and the arc-length table, and generates lateral-offset
racelines with curvature and speed profiles. Also provides the synthetic
desk-scale track generators (circle, oval, stadium, serpentine).

All geometry is immutable after construction and safe to share across
workers.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _geom


class TrackError(Exception):
    """Base class for track geometry failures."""


class MalformedRow(TrackError):
    pass


class OpenLoop(TrackError):
    pass


class SelfIntersectingBoundary(TrackError):
    pass


class OffsetOutOfRange(TrackError):
    pass


class DegenerateGeometry(TrackError):
    pass


class FarFromRaceline(TrackError):
    pass


MAX_OFFSET_FRACTION = 0.7
PROJECTION_RADIUS = 10.0  # meters; beyond this a projection query is an error

REQUIRED_COLUMNS = ("x_m", "y_m", "w_tr_right_m", "w_tr_left_m")

# named raceline offsets; signed fraction of the available lateral space,
# positive toward the right boundary
NAMED_OFFSETS = {"left": -0.5, "center": 0.0, "right": 0.5}


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    w_right: float
    w_left: float


@dataclass(frozen=True)
class SpeedConfig:
    """Reference-speed rule: v_ref = min(v_max, sqrt(a_lat_max / |kappa|))."""

    v_max: float = 8.0
    a_lat_max: float = 6.0


@dataclass(frozen=True)
class TrackModel:
    xy: np.ndarray            # (N, 2) centerline waypoints
    w_right: np.ndarray       # (N,) lateral free space toward the right boundary
    w_left: np.ndarray        # (N,)
    inner_boundary: np.ndarray   # (N, 2) closed polyline (closing edge implied)
    outer_boundary: np.ndarray
    arc_table: np.ndarray     # (N+1,) cumulative centerline arc length, [-1] == total_length
    total_length: float
    normals: np.ndarray       # (N, 2) unit left normals of the centerline
    boundary_segments: np.ndarray = field(repr=False)  # (M, 2, 2) both boundaries

    @property
    def waypoints(self) -> list[Waypoint]:
        return [
            Waypoint(float(x), float(y), float(wr), float(wl))
            for (x, y), wr, wl in zip(self.xy, self.w_right, self.w_left)
        ]

    def project(self, point) -> tuple[float, float]:
        """Project a point onto the centerline -> (s, signed lateral d)."""
        s, d, _ = _geom.project_to_polyline(point, self.xy, self.arc_table)
        return float(s[0]), float(d[0])

    def project_many(self, points):
        s, d, _ = _geom.project_to_polyline(points, self.xy, self.arc_table)
        return s, d

    def widths_at(self, s):
        """Interpolated (w_right, w_left) at arc position(s) s."""
        idx, frac = _locate(self.arc_table, np.asarray(s, dtype=float) % self.total_length)
        nxt = (idx + 1) % len(self.xy)
        wr = self.w_right[idx] * (1 - frac) + self.w_right[nxt] * frac
        wl = self.w_left[idx] * (1 - frac) + self.w_left[nxt] * frac
        return wr, wl


def _locate(arc_table, s):
    """Segment index and fractional position for arc queries."""
    s = np.asarray(s, dtype=float)
    idx = np.clip(np.searchsorted(arc_table, s, side="right") - 1, 0, len(arc_table) - 2)
    seg_len = arc_table[idx + 1] - arc_table[idx]
    frac = (s - arc_table[idx]) / np.maximum(seg_len, 1e-300)
    return idx, frac


def _left_normals(xy: np.ndarray) -> np.ndarray:
    """Unit left normals from wrap-around central differences."""
    tang = np.roll(xy, -1, axis=0) - np.roll(xy, 1, axis=0)
    norm = np.linalg.norm(tang, axis=1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateGeometry("coincident neighbor waypoints")
    tang = tang / norm
    return np.stack([-tang[:, 1], tang[:, 0]], axis=1)


def _three_point_curvature(xy: np.ndarray) -> np.ndarray:
    """Signed curvature from the circumscribed circle of each wrap-around
    waypoint triple; positive for left turns."""
    p0 = np.roll(xy, 1, axis=0)
    p1 = xy
    p2 = np.roll(xy, -1, axis=0)
    a = p1 - p0
    b = p2 - p1
    c = p2 - p0
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    la = np.linalg.norm(a, axis=1)
    lb = np.linalg.norm(b, axis=1)
    lc = np.linalg.norm(c, axis=1)
    denom = la * lb * lc
    if np.any(denom < 1e-18):
        raise DegenerateGeometry("collinear duplicate waypoint triple")
    return 2.0 * cross / denom


def build_track(xy, w_right, w_left) -> TrackModel:
    """Validate raw centerline data and derive the full track model."""
    xy = np.asarray(xy, dtype=float)
    w_right = np.asarray(w_right, dtype=float)
    w_left = np.asarray(w_left, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2 or len(xy) < 3:
        raise MalformedRow("need at least 3 waypoints of (x, y)")
    # tolerate an explicitly repeated closing waypoint
    if np.linalg.norm(xy[0] - xy[-1]) < 1e-9:
        xy, w_right, w_left = xy[:-1], w_right[:-1], w_left[:-1]
    if np.any(w_right <= 0) or np.any(w_left <= 0):
        raise MalformedRow("track widths must be positive")
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    if np.any(seg <= 1e-6):
        raise DegenerateGeometry("consecutive waypoints closer than 1e-6 m")
    closing = np.linalg.norm(xy[0] - xy[-1])
    mean_spacing = float(seg.mean())
    if closing > 2.0 * mean_spacing:
        raise OpenLoop(
            f"endpoints {closing:.3f} m apart exceed 2x mean spacing {mean_spacing:.3f} m"
        )
    arc_table, total_length = _geom.cumulative_arclength(xy, closed=True)
    normals = _left_normals(xy)
    left_bound = xy + w_left[:, None] * normals
    right_bound = xy - w_right[:, None] * normals
    for name, bound in (("left", left_bound), ("right", right_bound)):
        if _geom.polyline_self_intersects(bound):
            raise SelfIntersectingBoundary(f"{name} boundary is not simple")
    # smaller enclosed area = inner boundary
    if abs(_signed_area(left_bound)) <= abs(_signed_area(right_bound)):
        inner, outer = left_bound, right_bound
    else:
        inner, outer = right_bound, left_bound
    segments = np.concatenate(
        [_geom.polyline_segments(inner), _geom.polyline_segments(outer)]
    )
    model = TrackModel(
        xy=xy,
        w_right=w_right,
        w_left=w_left,
        inner_boundary=inner,
        outer_boundary=outer,
        arc_table=arc_table,
        total_length=total_length,
        normals=normals,
        boundary_segments=segments,
    )
    for arr in (model.xy, model.arc_table, model.inner_boundary, model.outer_boundary):
        arr.setflags(write=False)
    return model


def _signed_area(verts):
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def load_track(source, *, delimiter: str = ",") -> TrackModel:
    """Load a track from a CSV file path, byte/str stream, or str content.

    Header row must name x_m, y_m, w_tr_right_m, w_tr_left_m (any order);
    lines starting with '#' are comments.
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        text = Path(source).read_text()
    elif isinstance(source, bytes):
        text = source.decode()
    elif hasattr(source, "read"):
        raw = source.read()
        text = raw.decode() if isinstance(raw, bytes) else raw
    else:
        text = str(source)
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise MalformedRow("empty track file")
    reader = csv.reader(io.StringIO("\n".join(lines)), delimiter=delimiter)
    header = [h.strip() for h in next(reader)]
    try:
        cols = [header.index(c) for c in REQUIRED_COLUMNS]
    except ValueError as exc:
        raise MalformedRow(f"header must contain {REQUIRED_COLUMNS}, got {header}") from exc
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            rows.append([float(row[c]) for c in cols])
        except (ValueError, IndexError) as exc:
            raise MalformedRow(f"non-numeric field at data row {lineno}: {row!r}") from exc
    if len(rows) < 3:
        raise MalformedRow("need at least 3 waypoints")
    data = np.asarray(rows, dtype=float)
    return build_track(data[:, :2], data[:, 2], data[:, 3])


@dataclass(frozen=True)
class Raceline:
    """A reference path: arc position, pose, curvature and speed per point.

    w_left_avail / w_right_avail are the remaining lateral distances from
    the raceline to the track boundaries, used for candidate containment.
    """

    offset_id: float          # signed fraction of available width, + = right
    s: np.ndarray             # (N,) strictly increasing, s[0] == 0
    xy: np.ndarray            # (N, 2)
    heading: np.ndarray       # (N,)
    kappa: np.ndarray         # (N,) signed, positive = left turn
    v_ref: np.ndarray         # (N,) > 0
    w_left_avail: np.ndarray
    w_right_avail: np.ndarray
    center_offset: np.ndarray  # (N,) signed meters from centerline, + = left
    length: float
    arc_table: np.ndarray = field(repr=False)  # (N+1,) incl. closing segment

    @property
    def points(self):
        return list(zip(self.s, self.xy[:, 0], self.xy[:, 1], self.heading, self.kappa, self.v_ref))

    def _interp(self, values, s, angular=False):
        idx, frac = _locate(self.arc_table, np.asarray(s, dtype=float) % self.length)
        nxt = (idx + 1) % len(self.s)
        v0 = values[idx]
        v1 = values[nxt]
        if angular:
            v1 = v0 + _geom.wrap_angle(v1 - v0)
        return v0 * (1 - frac) + v1 * frac

    def position_at(self, s):
        idx, frac = _locate(self.arc_table, np.asarray(s, dtype=float) % self.length)
        nxt = (idx + 1) % len(self.s)
        return self.xy[idx] * (1 - np.expand_dims(frac, -1)) + self.xy[nxt] * np.expand_dims(frac, -1)

    def heading_at(self, s):
        return self._interp(self.heading, s, angular=True)

    def v_ref_at(self, s):
        return self._interp(self.v_ref, s)

    def normal_at(self, s):
        h = self.heading_at(s)
        return np.stack([-np.sin(h), np.cos(h)], axis=-1)

    def avail_at(self, s):
        return self._interp(self.w_left_avail, s), self._interp(self.w_right_avail, s)

    def project_many(self, points, s_hint=None, window: float = 15.0):
        """Vectorized projection; optionally restricted to a window of
        segments around arc position s_hint (cheaper for local queries)."""
        seg_idx = None
        if s_hint is not None:
            n = len(self.s)
            spacing = self.length / n
            half = max(2, int(math.ceil(window / spacing)))
            center = int(np.searchsorted(self.arc_table, s_hint % self.length)) % n
            seg_idx = (np.arange(center - half, center + half + 1)) % n
            seg_idx = np.unique(seg_idx)
        s, d, _ = _geom.project_to_polyline(points, self.xy, self.arc_table, seg_idx=seg_idx)
        return s, d

    def project(self, point) -> tuple[float, float]:
        """Project one point -> (s, d). d positive left of travel direction.

        Raises FarFromRaceline when the point is more than PROJECTION_RADIUS
        away. Equidistant segments resolve to the smaller arc position.
        """
        s, d = self.project_many(np.asarray(point, dtype=float)[None, :])
        if abs(d[0]) > PROJECTION_RADIUS:
            raise FarFromRaceline(f"point {point} is {abs(d[0]):.2f} m from the raceline")
        return float(s[0]), float(d[0])


def curvature_at(raceline: Raceline, s) -> float | np.ndarray:
    """Linear interpolation of signed curvature; s wraps modulo length."""
    out = raceline._interp(raceline.kappa, s)
    return float(out) if np.isscalar(s) else out


def generate_raceline(track: TrackModel, offset, speed_cfg: SpeedConfig = SpeedConfig()) -> Raceline:
    """Constant lateral-offset raceline with curvature and speed profile.

    offset: named id ('left'/'center'/'right') or signed fraction of the
    available lateral width, positive toward the right boundary. Must stay
    within MAX_OFFSET_FRACTION so a vehicle-width margin remains.
    """
    if isinstance(offset, str):
        try:
            offset = NAMED_OFFSETS[offset.lower()]
        except KeyError:
            raise OffsetOutOfRange(f"unknown raceline id {offset!r}")
    offset = float(offset)
    if abs(offset) > MAX_OFFSET_FRACTION:
        raise OffsetOutOfRange(f"|offset| = {abs(offset):.2f} exceeds {MAX_OFFSET_FRACTION}")
    if offset >= 0:
        center_off = -offset * track.w_right  # toward right boundary = negative left
    else:
        center_off = -offset * track.w_left
    xy = track.xy + center_off[:, None] * track.normals
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    if np.any(seg <= 1e-9):
        raise DegenerateGeometry("offset raceline collapsed neighboring points")
    arc_table, length = _geom.cumulative_arclength(xy, closed=True)
    tang = np.roll(xy, -1, axis=0) - np.roll(xy, 1, axis=0)
    heading = np.arctan2(tang[:, 1], tang[:, 0])
    kappa = _three_point_curvature(xy)
    v_ref = np.minimum(speed_cfg.v_max, np.sqrt(speed_cfg.a_lat_max / np.maximum(np.abs(kappa), 1e-12)))
    rl = Raceline(
        offset_id=offset,
        s=arc_table[:-1].copy(),
        xy=xy,
        heading=heading,
        kappa=kappa,
        v_ref=v_ref,
        w_left_avail=track.w_left - center_off,
        w_right_avail=track.w_right + center_off,
        center_offset=center_off,
        length=length,
        arc_table=arc_table,
    )
    for arr in (rl.s, rl.xy, rl.heading, rl.kappa, rl.v_ref, rl.arc_table):
        arr.setflags(write=False)
    return rl


def project(point, raceline: Raceline) -> tuple[float, float]:
    """Module-level alias of Raceline.project."""
    return raceline.project(point)


RACELINE_CSV_HEADER = ["s_m", "x_m", "y_m", "psi_rad", "kappa_radpm", "vx_mps"]


def write_raceline_csv(raceline: Raceline, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RACELINE_CSV_HEADER)
        for s, x, y, psi, kap, v in raceline.points:
            w.writerow([repr(float(v_)) for v_ in (s, x, y, psi, kap, v)])


def write_track_csv(track: TrackModel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REQUIRED_COLUMNS)
        for (x, y), wr, wl in zip(track.xy, track.w_right, track.w_left):
            w.writerow([repr(float(v)) for v in (x, y, wr, wl)])


# ---------------------------------------------------------------------------
# synthetic desk-scale tracks


def make_circle_track(radius: float = 10.0, width: float = 3.0, n_points: int = 360) -> TrackModel:
    """CCW circle; widths are the full per-side free space (width/2 each)."""
    phi = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    xy = radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    half = np.full(n_points, width / 2.0)
    return build_track(xy, half, half)


def make_stadium_track(length: float = 60.0, width: float = 3.0, curve_frac: float = 0.4,
                       n_points: int = 480) -> TrackModel:
    """Two straights joined by semicircles; curve_frac of the length is curved."""
    r = curve_frac * length / (2.0 * np.pi)
    straight = (1.0 - curve_frac) * length / 2.0
    ds = length / n_points
    pts = []
    # bottom straight, right arc, top straight, left arc (CCW)
    n_s = max(2, int(round(straight / ds)))
    n_a = max(2, int(round(np.pi * r / ds)))
    xs = np.linspace(-straight / 2, straight / 2, n_s, endpoint=False)
    pts.append(np.stack([xs, np.full(n_s, -r)], axis=1))
    ang = np.linspace(-np.pi / 2, np.pi / 2, n_a, endpoint=False)
    pts.append(np.stack([straight / 2 + r * np.cos(ang), r * np.sin(ang)], axis=1))
    pts.append(np.stack([xs[::-1] + (xs[1] - xs[0] if n_s > 1 else 0), np.full(n_s, r)], axis=1))
    ang2 = np.linspace(np.pi / 2, 3 * np.pi / 2, n_a, endpoint=False)
    pts.append(np.stack([-straight / 2 + r * np.cos(ang2), r * np.sin(ang2)], axis=1))
    xy = np.concatenate(pts)
    half = np.full(len(xy), width / 2.0)
    return build_track(xy, half, half)


def make_oval_track(length: float = 60.0, width: float = 3.0, aspect: float = 0.6,
                    n_points: int = 480) -> TrackModel:
    """Ellipse resampled to uniform arc spacing and scaled to the target length."""
    phi = np.linspace(0.0, 2.0 * np.pi, 4096, endpoint=False)
    xy = np.stack([np.cos(phi), aspect * np.sin(phi)], axis=1)
    table, total = _geom.cumulative_arclength(xy, closed=True)
    xy = xy * (length / total)
    table = table * (length / total)
    s_new = np.linspace(0.0, length, n_points, endpoint=False)
    idx, frac = _locate(table, s_new)
    nxt = (idx + 1) % len(xy)
    res = xy[idx] * (1 - frac[:, None]) + xy[nxt] * frac[:, None]
    half = np.full(n_points, width / 2.0)
    return build_track(res, half, half)


def make_serpentine_track(length: float = 60.0, width: float = 3.0, waves: int = 5,
                          wiggle: float = 0.10, n_points: int = 600) -> TrackModel:
    """Radially modulated circle with alternating left/right sweeps."""
    phi = np.linspace(0.0, 2.0 * np.pi, 4096, endpoint=False)
    r = 1.0 + wiggle * np.sin(waves * phi)
    xy = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    table, total = _geom.cumulative_arclength(xy, closed=True)
    xy = xy * (length / total)
    table = table * (length / total)
    s_new = np.linspace(0.0, length, n_points, endpoint=False)
    idx, frac = _locate(table, s_new)
    nxt = (idx + 1) % len(xy)
    res = xy[idx] * (1 - frac[:, None]) + xy[nxt] * frac[:, None]
    half = np.full(n_points, width / 2.0)
    return build_track(res, half, half)


TRACK_GENERATORS = {
    "circle": make_circle_track,
    "oval": make_oval_track,
    "stadium": make_stadium_track,
    "serpentine": make_serpentine_track,
}


def make_track(shape: str, length: float = 60.0, width: float = 3.0, **kwargs) -> TrackModel:
    try:
        gen = TRACK_GENERATORS[shape]
    except KeyError:
        raise TrackError(f"unknown track shape {shape!r}; have {sorted(TRACK_GENERATORS)}")
    if shape == "circle":
        return gen(radius=length / (2.0 * np.pi), width=width, **kwargs)
    return gen(length=length, width=width, **kwargs)
