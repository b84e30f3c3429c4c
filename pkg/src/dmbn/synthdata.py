"""Synthetic bimodal dataset: a 2-link planar arm reaching between random poses.

Each trajectory pairs a proprioceptive channel (two joint angles, scaled
by 1/pi into [-1, 1]) with a visual channel (16x16 grayscale renders of
the arm) at canonical times k/(T-1). Perturbation constructors build the
permuted-time and frozen variants used to stress temporal reasoning, and
the speed-warp augmentation resamples a sequence under a random monotone
time reparameterization.
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, MalformedFileError, UnsupportedVersionError

FRAME_SIZE = 16
JOINT_DIM = 2

# the arm base sits at this pixel (row, col): vertically centered, near the
# left edge; the world unit square spans the full grid
BASE_PIXEL = (8, 2)
_BRUSH_RADIUS = 1.25  # half-width of the drawn limb, in pixels

DATASET_MAGIC = b"NPXDATA1"
_MAGIC_PREFIX = b"NPXDATA"
_HEADER = struct.Struct("<5I")  # count, T, H, W, J


@dataclass(frozen=True)
class ArmGeometry:
    """Link lengths of the planar arm, in world units (unit frame)."""

    l1: float = 0.5
    l2: float = 0.5

    def __post_init__(self):
        if self.l1 <= 0 or self.l2 <= 0:
            raise DomainError("link lengths must be positive")
        if self.l1 + self.l2 > 1.0 + 1e-12:
            raise DomainError(f"l1 + l2 = {self.l1 + self.l2} must not exceed 1")


@dataclass
class Trajectory:
    """A timestamped bimodal sequence: times [T], joints [T,2], frames [T,16,16]."""

    times: np.ndarray
    joints: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        t = len(self.times)
        if self.joints.shape != (t, JOINT_DIM):
            raise DomainError(f"joints shape {self.joints.shape} != ({t}, {JOINT_DIM})")
        if self.frames.shape != (t, FRAME_SIZE, FRAME_SIZE):
            raise DomainError(f"frames shape {self.frames.shape} != ({t}, {FRAME_SIZE}, {FRAME_SIZE})")
        if t and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
            raise DomainError("frame values must lie in [0, 1]")

    def __len__(self):
        return len(self.times)

    def copy(self):
        return Trajectory(self.times.copy(), self.joints.copy(), self.frames.copy())


def canonical_times(t):
    if t < 2:
        raise DomainError(f"sequence length must be >= 2, got {t}")
    return np.arange(t, dtype=np.float64) / (t - 1)


def min_jerk(tau):
    """Minimum-jerk profile 10 tau^3 - 15 tau^4 + 6 tau^5 on [0, 1]."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0.0) or np.any(tau > 1.0):
        raise DomainError(f"min_jerk argument must lie in [0, 1], got {tau}")
    out = tau**3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)
    return float(out) if out.ndim == 0 else out


def forward_kinematics(theta1, theta2, geom=ArmGeometry()):
    """Elbow and tip positions relative to the base, world units."""
    if not (np.isfinite(theta1) and np.isfinite(theta2)):
        raise DomainError("joint angles must be finite")
    ex = geom.l1 * np.cos(theta1)
    ey = geom.l1 * np.sin(theta1)
    tx = ex + geom.l2 * np.cos(theta1 + theta2)
    ty = ey + geom.l2 * np.sin(theta1 + theta2)
    return (ex, ey), (tx, ty)


def _world_to_grid(x, y):
    # world x right, y up; grid row 0 at top
    scale = FRAME_SIZE - 1
    return scale * (1.0 - y), scale * x  # (row, col)


_BASE_WORLD = (BASE_PIXEL[1] / (FRAME_SIZE - 1), 1.0 - BASE_PIXEL[0] / (FRAME_SIZE - 1))

_ROWS, _COLS = np.meshgrid(
    np.arange(FRAME_SIZE, dtype=np.float64),
    np.arange(FRAME_SIZE, dtype=np.float64),
    indexing="ij",
)


def _segment_intensity(p0, p1):
    # distance from every pixel center to the segment, then a linear
    # falloff approximating coverage of a brush of radius _BRUSH_RADIUS
    (r0, c0), (r1, c1) = p0, p1
    dr, dc = r1 - r0, c1 - c0
    seg_sq = dr * dr + dc * dc
    if seg_sq == 0.0:
        u = np.zeros_like(_ROWS)
    else:
        u = np.clip(((_ROWS - r0) * dr + (_COLS - c0) * dc) / seg_sq, 0.0, 1.0)
    dist = np.hypot(_ROWS - (r0 + u * dr), _COLS - (c0 + u * dc))
    return np.clip(_BRUSH_RADIUS + 0.5 - dist, 0.0, 1.0)


def rasterize(theta1, theta2, geom=ArmGeometry()):
    """Render the arm pose as a 16x16 grayscale frame with values in [0, 1]."""
    (ex, ey), (tx, ty) = forward_kinematics(theta1, theta2, geom)
    bx, by = _BASE_WORLD
    base = _world_to_grid(bx, by)
    elbow = _world_to_grid(bx + ex, by + ey)
    tip = _world_to_grid(bx + tx, by + ty)
    frame = np.maximum(_segment_intensity(base, elbow), _segment_intensity(elbow, tip))
    return frame


# start/end poses are drawn from a subrange of the joint limits that keeps
# the arm inside the camera frame: a shoulder pointing left leaves almost
# nothing visible, which starves the visual channel of signal
_SHOULDER_RANGE = (-np.pi / 2, np.pi / 2)
_ELBOW_RANGE = (-2.2, 2.2)


def generate_trajectory(seed, t, geom=ArmGeometry()):
    """Min-jerk reach between two random joint configurations.

    The shoulder always sweeps upward (start angle <= end angle). Without
    that convention a reach and its reverse traverse identical pose sets,
    so any representation pooled over an unordered context set is blind to
    motion direction and full-sequence reconstruction is ill-posed.
    """
    times = canonical_times(t)
    rng = np.random.default_rng(seed)
    shoulder = np.sort(rng.uniform(*_SHOULDER_RANGE, size=2))
    elbow = rng.uniform(*_ELBOW_RANGE, size=2)
    start = np.array([shoulder[0], elbow[0]])
    end = np.array([shoulder[1], elbow[1]])
    profile = min_jerk(times)
    angles = start[None, :] + (end - start)[None, :] * profile[:, None]
    frames = np.stack([rasterize(a1, a2, geom) for a1, a2 in angles])
    return Trajectory(times=times, joints=angles / np.pi, frames=frames)


def generate_dataset(count, t, seed0=0, geom=ArmGeometry()):
    """Trajectories seeded seed0 .. seed0+count-1."""
    return [generate_trajectory(seed0 + i, t, geom) for i in range(count)]


def permute_times(traj, perm):
    """Reassign time stamps by a permutation; observation contents stay put."""
    perm = np.asarray(perm)
    t = len(traj)
    if sorted(perm.tolist()) != list(range(t)):
        raise ValueError(f"perm must be a bijection on 0..{t - 1}")
    return Trajectory(times=traj.times[perm], joints=traj.joints.copy(), frames=traj.frames.copy())


def freeze_sequence(traj, k):
    """Repeat the contents at index k for every later index; times unchanged."""
    t = len(traj)
    if not 0 <= k < t:
        raise IndexError(f"freeze index {k} out of range [0, {t})")
    joints = traj.joints.copy()
    frames = traj.frames.copy()
    joints[k + 1 :] = joints[k]
    frames[k + 1 :] = frames[k]
    return Trajectory(times=traj.times.copy(), joints=joints, frames=frames)


def warp_phases(taus, slopes):
    """Piecewise-linear monotone warp of [0,1] onto [0,1].

    Segments have equal input width; ``slopes`` are renormalized so the
    warp ends at 1.
    """
    slopes = np.asarray(slopes, dtype=np.float64)
    if slopes.ndim != 1 or slopes.size < 1 or np.any(slopes <= 0):
        raise DomainError("slopes must be a nonempty 1-d array of positive values")
    knots_in = np.linspace(0.0, 1.0, slopes.size + 1)
    knots_out = np.concatenate([[0.0], np.cumsum(slopes)]) / slopes.sum()
    return np.interp(taus, knots_in, knots_out)


def resample_nearest(traj, phases):
    """Contents at warped phase via nearest-index lookup; canonical times."""
    t = len(traj)
    idx = np.rint(np.asarray(phases) * (t - 1)).astype(int)
    idx = np.clip(idx, 0, t - 1)
    return Trajectory(times=canonical_times(t), joints=traj.joints[idx], frames=traj.frames[idx])


def augment_speed_warp(traj, seed):
    """Random speed warp plus an occasional repeated-frame run."""
    t = len(traj)
    if t < 4:
        raise ValueError(f"augmentation needs T >= 4, got {t}")
    rng = np.random.default_rng(seed)
    n_seg = int(rng.integers(2, 5))
    slopes = rng.uniform(0.5, 2.0, size=n_seg)
    out = resample_nearest(traj, warp_phases(traj.times, slopes))
    if rng.random() < 0.5:
        run = int(rng.integers(2, 6))
        run = min(run, t)
        start = int(rng.integers(0, t - run + 1))
        out.joints[start : start + run] = out.joints[start]
        out.frames[start : start + run] = out.frames[start]
    return out


def save_dataset(trajs, path):
    """Write trajectories in the binary dataset format (bit-exact round trip)."""
    lengths = {len(tr) for tr in trajs}
    if len(lengths) > 1:
        raise ValueError(f"all trajectories must share T, got lengths {sorted(lengths)}")
    t = lengths.pop() if lengths else 0
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(_HEADER.pack(len(trajs), t, FRAME_SIZE, FRAME_SIZE, JOINT_DIM))
    for tr in trajs:
        buf.write(np.ascontiguousarray(tr.times, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(tr.joints, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(tr.frames, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path):
    """Read a dataset file written by :func:`save_dataset`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(DATASET_MAGIC):
        raise MalformedFileError(f"{path}: file shorter than magic")
    magic = raw[: len(DATASET_MAGIC)]
    if magic != DATASET_MAGIC:
        if magic.startswith(_MAGIC_PREFIX):
            raise UnsupportedVersionError(f"{path}: unsupported dataset version {magic!r}")
        raise MalformedFileError(f"{path}: bad magic {magic!r}")
    off = len(DATASET_MAGIC)
    if len(raw) < off + _HEADER.size:
        raise MalformedFileError(f"{path}: truncated header")
    count, t, h, w, j = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    if h != FRAME_SIZE or w != FRAME_SIZE or j != JOINT_DIM:
        raise MalformedFileError(f"{path}: unsupported geometry {(h, w, j)}")
    block = 8 * (t + t * j + t * h * w)
    if len(raw) != off + count * block:
        raise MalformedFileError(
            f"{path}: expected {off + count * block} bytes for {count} trajectories, found {len(raw)}"
        )
    trajs = []
    for _ in range(count):
        times = np.frombuffer(raw, dtype="<f8", count=t, offset=off).copy()
        off += 8 * t
        joints = np.frombuffer(raw, dtype="<f8", count=t * j, offset=off).reshape(t, j).copy()
        off += 8 * t * j
        frames = (
            np.frombuffer(raw, dtype="<f8", count=t * h * w, offset=off).reshape(t, h, w).copy()
        )
        off += 8 * t * h * w
        trajs.append(Trajectory(times=times, joints=joints, frames=frames))
    return trajs
