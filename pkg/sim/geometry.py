'''
Planar geometry for the micro-world and the counterfactual engine:
poses, oriented boxes, polylines, separating-axis overlap tests and
projection of points onto route/lane polylines.

Sign convention: lateral offsets are positive to the left of the direction
of travel.
'''
import math
from dataclasses import dataclass, field

import numpy as np

MIN_SEGMENT_LENGTH = 1e-6
SAT_TOLERANCE = 1e-12


def normalize_angle(angle):
    '''wrap an angle (scalar or array) into (-pi, pi]'''
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2*np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2*np.pi, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, 'x', float(self.x))
        object.__setattr__(self, 'y', float(self.y))
        object.__setattr__(self, 'yaw', normalize_angle(self.yaw))

    def compose(self, local):
        '''express a pose given in this pose's frame in the world frame'''
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(self.x + c*local.x - s*local.y,
                      self.y + s*local.x + c*local.y,
                      self.yaw + local.yaw)

    def forward(self, distance):
        return Pose2D(self.x + distance*math.cos(self.yaw),
                      self.y + distance*math.sin(self.yaw),
                      self.yaw)

    @property
    def xy(self):
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class OrientedBox:
    center: Pose2D
    half_length: float
    half_width: float

    def __post_init__(self):
        if not (self.half_length > 0 and self.half_width > 0):
            raise ValueError('box half extents must be strictly positive, got '
                             + str((self.half_length, self.half_width)))

    def corners(self):
        return box_corners(self.center.x, self.center.y, self.center.yaw,
                           self.half_length, self.half_width)

    def moved_to(self, pose):
        return OrientedBox(pose, self.half_length, self.half_width)

    def contains(self, point):
        local = transform_to_local([point], self.center)[0]
        return (abs(local[0]) <= self.half_length + SAT_TOLERANCE
                and abs(local[1]) <= self.half_width + SAT_TOLERANCE)


@dataclass(frozen=True)
class Polyline:
    points: np.ndarray
    cumulative_arclength: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        points = np.array(self.points, dtype=float).reshape(-1, 2)
        if len(points) < 2:
            raise ValueError('polyline needs at least 2 points, got ' + str(len(points)))
        seg_lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
        if np.any(seg_lengths < MIN_SEGMENT_LENGTH):
            raise ValueError('polyline has coincident consecutive points at segment(s) '
                             + str(np.nonzero(seg_lengths < MIN_SEGMENT_LENGTH)[0].tolist()))
        points.setflags(write=False)
        cumulative = np.concatenate([[0.0], np.cumsum(seg_lengths)])
        cumulative.setflags(write=False)
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'cumulative_arclength', cumulative)

    def __eq__(self, other):
        return isinstance(other, Polyline) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    @property
    def total_length(self):
        return float(self.cumulative_arclength[-1])

    @property
    def segment_headings(self):
        d = np.diff(self.points, axis=0)
        return np.arctan2(d[:, 1], d[:, 0])

    def _segment_index(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.total_length)
        idx = np.searchsorted(self.cumulative_arclength, s, side='right') - 1
        return np.clip(idx, 0, len(self.points) - 2), s

    def point_at(self, s):
        '''point(s) at arclength s (clamped to the polyline ends)'''
        idx, s = self._segment_index(s)
        seg_start = self.points[idx]
        d = self.points[idx + 1] - seg_start
        seg_len = np.linalg.norm(d, axis=-1)
        t = (s - self.cumulative_arclength[idx]) / seg_len
        return seg_start + d * np.expand_dims(t, -1)

    def heading_at(self, s):
        idx, _ = self._segment_index(s)
        return self.segment_headings[idx]

    def window(self, s_start, length):
        '''sub-polyline covering arclength [s_start, s_start + length] (clamped)'''
        s0 = float(np.clip(s_start, 0.0, self.total_length))
        s1 = float(np.clip(s_start + length, 0.0, self.total_length))
        if s1 - s0 < 2*MIN_SEGMENT_LENGTH:
            # at the very end of the line keep a short stub along the last heading
            s0 = max(0.0, s1 - max(length, 1.0))
        inner = self.cumulative_arclength[(self.cumulative_arclength > s0 + MIN_SEGMENT_LENGTH)
                                          & (self.cumulative_arclength < s1 - MIN_SEGMENT_LENGTH)]
        arclengths = np.concatenate([[s0], inner, [s1]])
        return Polyline(self.point_at(arclengths))


def box_corners(x, y, yaw, half_length, half_width):
    '''corners of (possibly batched) oriented boxes, counter clockwise, shape (..., 4, 2)'''
    x, y, yaw = np.asarray(x, dtype=float), np.asarray(y, dtype=float), np.asarray(yaw, dtype=float)
    half_length, half_width = np.asarray(half_length, dtype=float), np.asarray(half_width, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)
    lx = local[:, 0] * half_length[..., None]
    ly = local[:, 1] * half_width[..., None]
    gx = x[..., None] + c[..., None]*lx - s[..., None]*ly
    gy = y[..., None] + s[..., None]*lx + c[..., None]*ly
    return np.stack([gx, gy], axis=-1)


def transform_to_global(local_points, ego_pose):
    '''rigid transform of ego-frame points into the world frame: rotate by yaw then translate'''
    pts = np.asarray(local_points, dtype=float).reshape(-1, 2)
    c, s = math.cos(ego_pose.yaw), math.sin(ego_pose.yaw)
    rot = np.array([[c, -s], [s, c]])
    return pts @ rot.T + np.array([ego_pose.x, ego_pose.y])


def transform_to_local(global_points, ego_pose):
    pts = np.asarray(global_points, dtype=float).reshape(-1, 2)
    c, s = math.cos(ego_pose.yaw), math.sin(ego_pose.yaw)
    rot = np.array([[c, -s], [s, c]])
    return (pts - np.array([ego_pose.x, ego_pose.y])) @ rot


def sat_overlap_corners(corners_a, corners_b):
    '''
    batched separating axis test on rectangles given by their corners
    (..., 4, 2); broadcasting over the leading dimensions. Closed sets:
    touching edges count as overlap.
    '''
    corners_a = np.asarray(corners_a, dtype=float)
    corners_b = np.asarray(corners_b, dtype=float)
    corners_a, corners_b = np.broadcast_arrays(corners_a, corners_b)
    # two edge normals per rectangle are enough
    axes = np.concatenate([corners_a[..., 1:3, :] - corners_a[..., 0:2, :],
                           corners_b[..., 1:3, :] - corners_b[..., 0:2, :]], axis=-2)
    norms = np.linalg.norm(axes, axis=-1, keepdims=True)
    axes = axes / norms
    proj_a = np.einsum('...kd,...ad->...ak', corners_a, axes)
    proj_b = np.einsum('...kd,...ad->...ak', corners_b, axes)
    separated = ((proj_a.max(axis=-1) < proj_b.min(axis=-1) - SAT_TOLERANCE)
                 | (proj_b.max(axis=-1) < proj_a.min(axis=-1) - SAT_TOLERANCE))
    return ~np.any(separated, axis=-1)


def sat_overlap(a, b):
    '''true iff the closed rectangles a and b intersect'''
    return bool(sat_overlap_corners(a.corners(), b.corners()))


def project_points(points, headings, line, s_min=None, s_max=None):
    '''
    vectorised projection of points onto a polyline.
    returns (arclength, lateral_offset, heading_error, distance) arrays.
    s_min/s_max restrict the search to segments overlapping that arclength range
    (used to stop route projections jumping across self-approaching routes)
    '''
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    headings = np.broadcast_to(np.asarray(headings, dtype=float), (len(pts),))
    starts = line.points[:-1]
    d = line.points[1:] - starts
    seg_len = np.linalg.norm(d, axis=1)
    unit = d / seg_len[:, None]
    rel = pts[:, None, :] - starts[None, :, :]
    t = np.clip(np.einsum('nmd,md->nm', rel, unit), 0.0, seg_len[None, :])
    foot = starts[None, :, :] + unit[None, :, :] * t[..., None]
    dist = np.linalg.norm(pts[:, None, :] - foot, axis=-1)
    if s_min is not None or s_max is not None:
        lo = -np.inf if s_min is None else s_min
        hi = np.inf if s_max is None else s_max
        seg_lo = line.cumulative_arclength[:-1]
        seg_hi = line.cumulative_arclength[1:]
        allowed = (seg_hi >= lo) & (seg_lo <= hi)
        if np.any(allowed):
            dist = np.where(allowed[None, :], dist, np.inf)
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(pts))
    arclength = line.cumulative_arclength[best] + t[rows, best]
    rel_best = rel[rows, best]
    u = unit[best]
    # perpendicular component w.r.t. the segment direction, left positive
    lateral = u[:, 0]*rel_best[:, 1] - u[:, 1]*rel_best[:, 0]
    heading_error = normalize_angle(headings - line.segment_headings[best])
    heading_error = np.atleast_1d(heading_error)
    return arclength, lateral, heading_error, dist[rows, best]


def project_onto_polyline(point, heading, line):
    '''(arclength, signed lateral offset, heading error) of a single point'''
    s, lateral, heading_error, _ = project_points([point], [heading], line)
    return float(s[0]), float(lateral[0]), float(heading_error[0])
