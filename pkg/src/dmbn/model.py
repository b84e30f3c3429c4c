"""The multimodal conditional neural process in its two time-injection modes.

``channel`` mode feeds the observation time as an extra constant image
plane and an appended joint coordinate, and appends target times to the
set representative before decoding. ``pte`` mode keeps the raw inputs,
projects time into the hidden space (add, then a nonlinear remap) on the
context side, and subtracts the projected target time from the
representative before decoding.

Parameters are immutable during forward evaluation; only the optimizer
mutates them. Context sets are canonically sorted by time (ties keep
insertion order), which makes permutation invariance exact.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import DomainError, MalformedFileError, ModeError, ShapeError, UnsupportedVersionError
from .synthdata import FRAME_SIZE, JOINT_DIM
from .tensor import ParameterSet, Tensor

TIME_MODES = ("channel", "pte")
CONV_KERNEL = 3
CONV_STRIDE = 2

CHECKPOINT_MAGIC = b"NPXCKPT1"
_CKPT_PREFIX = b"NPXCKPT"

_CONFIG_KEYS = (
    "time_mode",
    "hidden_dim",
    "conv_widths",
    "joint_widths",
    "decoder_widths",
    "blend_weight",
    "var_floor",
    "seed",
)


@dataclass(frozen=True)
class ModelConfig:
    time_mode: str = "channel"
    hidden_dim: int = 64
    conv_widths: tuple = (8, 16)
    joint_widths: tuple = (32, 64)
    decoder_widths: tuple = (64, 64)
    blend_weight: float = 0.5
    var_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.time_mode not in TIME_MODES:
            raise ValueError(f"time_mode must be one of {TIME_MODES}, got {self.time_mode!r}")
        if self.hidden_dim < 2:
            raise ValueError(f"hidden_dim must be >= 2, got {self.hidden_dim}")
        if not 0.0 <= self.blend_weight <= 1.0:
            raise ValueError(f"blend_weight must lie in [0, 1], got {self.blend_weight}")
        if self.var_floor <= 0.0:
            raise ValueError(f"var_floor must be positive, got {self.var_floor}")
        object.__setattr__(self, "conv_widths", tuple(int(v) for v in self.conv_widths))
        object.__setattr__(self, "joint_widths", tuple(int(v) for v in self.joint_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(v) for v in self.decoder_widths))
        if len(self.conv_widths) != 2:
            raise ValueError("conv_widths must list exactly two conv layer widths")
        if len(self.joint_widths) != 2:
            raise ValueError("joint_widths must list exactly two layer widths")
        if self.joint_widths[-1] != self.hidden_dim:
            raise ValueError(
                f"joint encoder output {self.joint_widths[-1]} must equal hidden_dim {self.hidden_dim}"
            )

    @property
    def image_channels(self):
        return 2 if self.time_mode == "channel" else 1

    @property
    def joint_input_dim(self):
        return JOINT_DIM + 1 if self.time_mode == "channel" else JOINT_DIM

    @property
    def decoder_input_dim(self):
        return self.hidden_dim + 1 if self.time_mode == "channel" else self.hidden_dim


@dataclass
class ObservationSet:
    """A context set of (time, frame, joints) triples; order is irrelevant."""

    times: np.ndarray
    frames: np.ndarray
    joints: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        n = len(self.times)
        if n < 1:
            raise ValueError("observation set must contain at least one element")
        if self.frames.shape != (n, FRAME_SIZE, FRAME_SIZE):
            raise ShapeError(f"frames shape {self.frames.shape} != ({n}, {FRAME_SIZE}, {FRAME_SIZE})")
        if self.joints.shape != (n, JOINT_DIM):
            raise ShapeError(f"joints shape {self.joints.shape} != ({n}, {JOINT_DIM})")
        if np.any(self.times < 0.0) or np.any(self.times > 1.0):
            raise DomainError("observation times must lie in [0, 1]")

    def __len__(self):
        return len(self.times)

    @staticmethod
    def from_trajectory(traj, indices):
        idx = np.asarray(indices)
        return ObservationSet(traj.times[idx], traj.frames[idx], traj.joints[idx])


@dataclass
class GaussianPrediction:
    """Per-target-time, per-modality predictive means and variances.

    Fields are graph tensors so the training loss can backpropagate
    through them; use ``.data`` for plain arrays. Variances are floored
    at the model's var_floor by construction.
    """

    times: np.ndarray
    image_mean: Tensor  # (T, 16, 16)
    image_var: Tensor
    joint_mean: Tensor  # (T, 2)
    joint_var: Tensor


def _conv_out_size(size, layers):
    for _ in range(layers):
        size = (size - CONV_KERNEL) // CONV_STRIDE + 1
    return size


def init_params(cfg):
    """Seeded parameter initialization; names are stable across runs."""
    rng = np.random.default_rng(cfg.seed)
    ps = ParameterSet()

    # biases share the weight scale instead of starting at zero: with black
    # image backgrounds a zero bias puts relu preactivations exactly on the
    # kink, which breaks finite-difference gradient verification
    def dense(name, fan_in, fan_out):
        std = 1.0 / np.sqrt(fan_in)
        ps.add(f"{name}.w", rng.normal(0.0, std, size=(fan_in, fan_out)))
        ps.add(f"{name}.b", rng.normal(0.0, std, size=fan_out))

    c1, c2 = cfg.conv_widths
    cin = cfg.image_channels
    conv1_std = 1.0 / np.sqrt(cin * CONV_KERNEL**2)
    conv2_std = 1.0 / np.sqrt(c1 * CONV_KERNEL**2)
    ps.add("enc_img.conv1.w", rng.normal(0.0, conv1_std, size=(c1, cin, CONV_KERNEL, CONV_KERNEL)))
    ps.add("enc_img.conv1.b", rng.normal(0.0, conv1_std, size=c1))
    ps.add("enc_img.conv2.w", rng.normal(0.0, conv2_std, size=(c2, c1, CONV_KERNEL, CONV_KERNEL)))
    ps.add("enc_img.conv2.b", rng.normal(0.0, conv2_std, size=c2))
    side = _conv_out_size(FRAME_SIZE, 2)
    dense("enc_img.fc", c2 * side * side, cfg.hidden_dim)

    j1, j2 = cfg.joint_widths
    dense("enc_joint.fc1", cfg.joint_input_dim, j1)
    dense("enc_joint.fc2", j1, j2)

    if cfg.time_mode == "pte":
        dense("pte.proj", 1, cfg.hidden_dim)
        dense("pte.mix", cfg.hidden_dim, cfg.hidden_dim)

    d1, d2 = cfg.decoder_widths
    for modality, out_dim in (("img", FRAME_SIZE * FRAME_SIZE), ("joint", JOINT_DIM)):
        dense(f"dec_{modality}.fc1", cfg.decoder_input_dim, d1)
        dense(f"dec_{modality}.fc2", d1, d2)
        dense(f"dec_{modality}.mean", d2, out_dim)
        dense(f"dec_{modality}.var", d2, out_dim)
    return ps


def inject_time_channel(frame, joints, t):
    """Append the observation time as an image plane and a joint coordinate."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"time {t} must lie in [0, 1]")
    frame = np.asarray(frame, dtype=np.float64)
    joints = np.asarray(joints, dtype=np.float64)
    stacked = np.stack([frame, np.full_like(frame, t)])
    return stacked, np.concatenate([joints, [t]])


def _inject_batch(frames, joints, times):
    planes = np.broadcast_to(times[:, None, None], frames.shape)
    return (
        np.stack([frames, planes], axis=1),
        np.concatenate([joints, times[:, None]], axis=1),
    )


def _dense(params, name, x):
    return tz.add_bias(tz.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def encode_image(params, cfg, x):
    """Conv stack (two stride-2 relu layers) plus a linear map to the hidden dim."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    squeeze = x.data.ndim == 3
    if squeeze:
        x = tz.reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4 or x.data.shape[1] != cfg.image_channels:
        raise ShapeError(
            f"image input {x.data.shape} must have {cfg.image_channels} channels in {cfg.time_mode} mode"
        )
    h = tz.relu(tz.add_bias(tz.conv2d(x, params["enc_img.conv1.w"], CONV_STRIDE), params["enc_img.conv1.b"]))
    h = tz.relu(tz.add_bias(tz.conv2d(h, params["enc_img.conv2.w"], CONV_STRIDE), params["enc_img.conv2.b"]))
    h = tz.reshape(h, (h.data.shape[0], -1))
    h = _dense(params, "enc_img.fc", h)
    return tz.reshape(h, (-1,)) if squeeze else h


def encode_joints(params, cfg, x):
    """Two relu-coupled dense layers mapping joint input to the hidden dim."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    squeeze = x.data.ndim == 1
    if squeeze:
        x = tz.reshape(x, (1, -1))
    if x.data.ndim != 2 or x.data.shape[1] != cfg.joint_input_dim:
        raise ShapeError(
            f"joint input {x.data.shape} must have {cfg.joint_input_dim} coordinates in {cfg.time_mode} mode"
        )
    h = tz.relu(_dense(params, "enc_joint.fc1", x))
    h = _dense(params, "enc_joint.fc2", h)
    return tz.reshape(h, (-1,)) if squeeze else h


def _time_projection(params, times):
    col = Tensor(np.asarray(times, dtype=np.float64).reshape(-1, 1))
    return _dense(params, "pte.proj", col)


def pte_inject(params, cfg, h, times):
    """Add the projected time to an encoding and remap nonlinearly."""
    if cfg.time_mode != "pte":
        raise ModeError("pte_inject is only available in pte mode")
    h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64))
    squeeze = h.data.ndim == 1
    if squeeze:
        h = tz.reshape(h, (1, -1))
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if np.any(times < 0.0) or np.any(times > 1.0):
        raise DomainError("times must lie in [0, 1]")
    if len(times) != h.data.shape[0]:
        raise ShapeError(f"{len(times)} times for {h.data.shape[0]} encodings")
    mixed = tz.tanh(_dense(params, "pte.mix", tz.add(h, _time_projection(params, times))))
    return tz.reshape(mixed, (-1,)) if squeeze else mixed


def blend(h_img, h_joint, w):
    """Convex combination of the two modality encodings."""
    if not 0.0 <= w <= 1.0:
        raise DomainError(f"blend weight {w} must lie in [0, 1]")
    return tz.add(tz.mul(h_img, float(w)), tz.mul(h_joint, float(1.0 - w)))


def aggregate(blended, times):
    """Mean of the per-observation encodings, summed in canonical time order."""
    blended = blended if isinstance(blended, Tensor) else Tensor(np.asarray(blended, dtype=np.float64))
    if blended.data.ndim != 2 or blended.data.shape[0] < 1:
        raise ValueError(f"aggregate needs a nonempty (n, d) stack, got {blended.data.shape}")
    times = np.asarray(times, dtype=np.float64)
    if len(times) != blended.data.shape[0]:
        raise ValueError(f"{len(times)} times for {blended.data.shape[0]} encodings")
    order = np.argsort(times, kind="stable")
    if not np.array_equal(order, np.arange(len(times))):
        blended = tz.take_rows(blended, order)
    return tz.mean_rows(blended)


def condition_target(params, cfg, r, times):
    """Attach a target time to the representative: append (channel) or subtract P(t) (pte)."""
    r = r if isinstance(r, Tensor) else Tensor(np.asarray(r, dtype=np.float64))
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if np.any(times < 0.0) or np.any(times > 1.0):
        raise DomainError("target times must lie in [0, 1]")
    tiled = tz.repeat_rows(r, len(times))
    if cfg.time_mode == "channel":
        return tz.concat_cols(tiled, Tensor(times.reshape(-1, 1)))
    return tz.sub(tiled, _time_projection(params, times))


def decode(params, cfg, modality, c):
    """Shared trunk, then split mean and variance heads (softplus-floored)."""
    if modality not in ("image", "joints"):
        raise ValueError(f"modality must be 'image' or 'joints', got {modality!r}")
    tag = "img" if modality == "image" else "joint"
    c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float64))
    h = tz.relu(_dense(params, f"dec_{tag}.fc1", c))
    h = tz.relu(_dense(params, f"dec_{tag}.fc2", h))
    mean = _dense(params, f"dec_{tag}.mean", h)
    var = tz.add(tz.softplus(_dense(params, f"dec_{tag}.var", h)), cfg.var_floor)
    if modality == "image":
        n = mean.data.shape[0]
        mean = tz.reshape(mean, (n, FRAME_SIZE, FRAME_SIZE))
        var = tz.reshape(var, (n, FRAME_SIZE, FRAME_SIZE))
    return mean, var


def forward(params, cfg, ctx, target_times):
    """Full pipeline from a context set to Gaussian predictions at target times.

    Targets are predicted independently of one another (non-autoregressive);
    context order cannot matter because the set is sorted canonically first.
    """
    target_times = np.atleast_1d(np.asarray(target_times, dtype=np.float64))
    if np.any(target_times < 0.0) or np.any(target_times > 1.0):
        raise DomainError("target times must lie in [0, 1]")
    order = np.argsort(ctx.times, kind="stable")
    times = ctx.times[order]
    frames = ctx.frames[order]
    joints = ctx.joints[order]

    if cfg.time_mode == "channel":
        f4, j3 = _inject_batch(frames, joints, times)
        h_img = encode_image(params, cfg, f4)
        h_joint = encode_joints(params, cfg, j3)
        blended = blend(h_img, h_joint, cfg.blend_weight)
    else:
        h_img = encode_image(params, cfg, frames[:, None, :, :])
        h_joint = encode_joints(params, cfg, joints)
        blended = pte_inject(params, cfg, blend(h_img, h_joint, cfg.blend_weight), times)

    r = aggregate(blended, times)
    conditioned = condition_target(params, cfg, r, target_times)
    image_mean, image_var = decode(params, cfg, "image", conditioned)
    joint_mean, joint_var = decode(params, cfg, "joints", conditioned)
    return GaussianPrediction(
        times=target_times.copy(),
        image_mean=image_mean,
        image_var=image_var,
        joint_mean=joint_mean,
        joint_var=joint_var,
    )


def _format_config(cfg):
    values = {
        "time_mode": cfg.time_mode,
        "hidden_dim": str(cfg.hidden_dim),
        "conv_widths": ",".join(str(v) for v in cfg.conv_widths),
        "joint_widths": ",".join(str(v) for v in cfg.joint_widths),
        "decoder_widths": ",".join(str(v) for v in cfg.decoder_widths),
        "blend_weight": repr(cfg.blend_weight),
        "var_floor": repr(cfg.var_floor),
        "seed": str(cfg.seed),
    }
    return "".join(f"{k}={values[k]}\n" for k in _CONFIG_KEYS)


def _parse_config(text, path):
    fields = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedFileError(f"{path}: bad config line {line!r}")
        fields[key] = value
    missing = [k for k in _CONFIG_KEYS if k not in fields]
    if missing:
        raise MalformedFileError(f"{path}: config block missing keys {missing}")
    try:
        return ModelConfig(
            time_mode=fields["time_mode"],
            hidden_dim=int(fields["hidden_dim"]),
            conv_widths=tuple(int(v) for v in fields["conv_widths"].split(",")),
            joint_widths=tuple(int(v) for v in fields["joint_widths"].split(",")),
            decoder_widths=tuple(int(v) for v in fields["decoder_widths"].split(",")),
            blend_weight=float(fields["blend_weight"]),
            var_floor=float(fields["var_floor"]),
            seed=int(fields["seed"]),
        )
    except ValueError as exc:
        raise MalformedFileError(f"{path}: invalid config value ({exc})") from exc


def save_checkpoint(path, cfg, params):
    """Write config and named parameter blobs; round-trips are bit-exact."""
    config = _format_config(cfg).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(config)), config]
    chunks.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint, returning (config, parameters)."""
    with open(path, "rb") as fh:
        raw = fh.read()

    class _Reader:
        def __init__(self, buf):
            self.buf = buf
            self.off = 0

        def take(self, n, what):
            if self.off + n > len(self.buf):
                raise MalformedFileError(f"{path}: truncated while reading {what}")
            out = self.buf[self.off : self.off + n]
            self.off += n
            return out

        def u32(self, what):
            return struct.unpack("<I", self.take(4, what))[0]

    r = _Reader(raw)
    magic = r.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        if magic.startswith(_CKPT_PREFIX):
            raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {magic!r}")
        raise MalformedFileError(f"{path}: bad magic {magic!r}")
    cfg = _parse_config(r.take(r.u32("config length"), "config").decode(), path)
    params = ParameterSet()
    for _ in range(r.u32("parameter count")):
        name = r.take(r.u32("name length"), "name").decode()
        ndim = r.u32("rank")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        data = np.frombuffer(r.take(8 * int(np.prod(shape, dtype=np.int64)), f"tensor {name}"), dtype="<f8")
        params.add(name, data.reshape(shape))
    if r.off != len(raw):
        raise MalformedFileError(f"{path}: {len(raw) - r.off} trailing bytes")
    return cfg, params
