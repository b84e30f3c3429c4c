"""Gaussian negative-log-likelihood training with context/target sampling.

Each optimization step draws one sequence, samples a random context of
1..n_max observations, predicts the full sequence, and applies a
bias-corrected Adam update. The recorded loss curve is a deterministic
post-epoch evaluation (evenly spaced contexts over the training set), so
it is bit-stable given the seeds and constant when the learning rate is
zero. Per-sequence passes inside a step could run in parallel; the
optimizer update itself requires exclusive parameter access.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .model import ObservationSet, forward
from .synthdata import augment_speed_warp
from .tensor import Tensor, backward

AUGMENT_CHOICES = ("auto", "on", "off")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_max: int = 10
    p_aug: float = 0.5
    augment: str = "auto"  # auto: only when training pte mode
    var_warmup: float = 0.3  # leading fraction of epochs trained at unit variance
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0 or self.eps <= 0:
            raise ValueError("learning rate must be >= 0 and eps positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if not 0.0 <= self.p_aug <= 1.0:
            raise ValueError(f"p_aug must lie in [0, 1], got {self.p_aug}")
        if self.augment not in AUGMENT_CHOICES:
            raise ValueError(f"augment must be one of {AUGMENT_CHOICES}")
        if not 0.0 <= self.var_warmup < 1.0:
            raise ValueError(f"var_warmup must lie in [0, 1), got {self.var_warmup}")


@dataclass(frozen=True)
class EvalMetrics:
    """Held-out reconstruction quality, one row per modality in CSV form."""

    image_nll: float
    image_mse: float
    image_coverage: float
    joint_nll: float
    joint_mse: float
    joint_coverage: float


def gaussian_nll(mu, var, y, var_floor=1e-6):
    """Pointwise Gaussian negative log likelihood 0.5 ln(2 pi var) + (y-mu)^2 / (2 var)."""
    if var < var_floor:
        raise ValueError(f"variance {var} below floor {var_floor}")
    return 0.5 * math.log(2.0 * math.pi * var) + (y - mu) ** 2 / (2.0 * var)


def _nll_term(mean, var, target):
    y = Tensor(target)
    diff = tz.sub(y, mean)
    return tz.add(
        tz.mul(0.5, tz.log(tz.mul(var, 2.0 * math.pi))),
        tz.div(tz.mul(diff, diff), tz.mul(var, 2.0)),
    )


def nll_loss(pred, frames, joints):
    """Batch loss: elementwise NLL summed per target, averaged over targets,
    both modalities weighted equally."""
    n_targets = len(pred.times)
    img = tz.sum_all(_nll_term(pred.image_mean, pred.image_var, frames))
    jnt = tz.sum_all(_nll_term(pred.joint_mean, pred.joint_var, joints))
    return tz.mul(tz.add(img, jnt), 1.0 / n_targets)


def _warmup_loss(pred, frames, joints):
    # same NLL with the predictive variance pinned at 1: trains the mean
    # path first, otherwise the variance head explains residuals away
    # before the mean has learned anything
    ones_img = Tensor(np.ones_like(pred.image_mean.data))
    ones_jnt = Tensor(np.ones_like(pred.joint_mean.data))
    n_targets = len(pred.times)
    img = tz.sum_all(_nll_term(pred.image_mean, ones_img, frames))
    jnt = tz.sum_all(_nll_term(pred.joint_mean, ones_jnt, joints))
    return tz.mul(tz.add(img, jnt), 1.0 / n_targets)


def sample_context_target(traj, rng, n_max=10):
    """Context indices drawn without replacement; targets are the full sequence."""
    t = len(traj)
    if t < 2:
        raise ValueError(f"need T >= 2, got {t}")
    if n_max > t:
        raise ValueError(f"n_max {n_max} exceeds sequence length {t}")
    n = int(rng.integers(1, n_max + 1))
    ctx = rng.choice(t, size=n, replace=False)
    return ctx, np.arange(t)


class Adam:
    """Bias-corrected Adam over a ParameterSet's gradient accumulators."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None or g.shape != p.data.shape:
                raise ValueError(f"parameter {name!r} has no gradient of matching shape")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1**self.t)
            v_hat = self.v[name] / (1.0 - self.beta2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def evenly_spaced_indices(t, n_ctx):
    if not 1 <= n_ctx <= t:
        raise ValueError(f"n_ctx {n_ctx} must lie in [1, {t}]")
    return np.rint(np.linspace(0, t - 1, n_ctx)).astype(int)


def _dataset_nll(params, cfg, dataset, n_ctx):
    # deterministic evaluation pass used for the loss curve
    total = 0.0
    for traj in dataset:
        ctx = ObservationSet.from_trajectory(traj, evenly_spaced_indices(len(traj), n_ctx))
        pred = forward(params, cfg, ctx, traj.times)
        total += float(nll_loss(pred, traj.frames, traj.joints).data)
    return total / len(dataset)


def train(dataset, cfg, tcfg, init=None):
    """Optimize a fresh (or given) parameter set; returns (params, loss curve).

    The curve holds one deterministic mean-NLL evaluation per epoch,
    measured after that epoch's updates.
    """
    from .model import init_params

    if not dataset:
        raise ValueError("training dataset is empty")
    t = len(dataset[0])
    if tcfg.n_max > t:
        raise ValueError(f"n_max {tcfg.n_max} exceeds sequence length {t}")
    params = init if init is not None else init_params(cfg)
    adam = Adam(params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
    rng = np.random.default_rng(tcfg.seed)
    augment_on = tcfg.augment == "on" or (tcfg.augment == "auto" and cfg.time_mode == "pte")

    warmup_epochs = int(round(tcfg.var_warmup * tcfg.epochs))
    curve = []
    for epoch in range(tcfg.epochs):
        step_loss = nll_loss if epoch >= warmup_epochs else _warmup_loss
        for i in rng.permutation(len(dataset)):
            traj = dataset[i]
            if augment_on and len(traj) >= 4 and rng.random() < tcfg.p_aug:
                traj = augment_speed_warp(traj, int(rng.integers(2**31 - 1)))
            ctx_idx, tgt_idx = sample_context_target(traj, rng, tcfg.n_max)
            ctx = ObservationSet.from_trajectory(traj, ctx_idx)
            pred = forward(params, cfg, ctx, traj.times[tgt_idx])
            loss = step_loss(pred, traj.frames[tgt_idx], traj.joints[tgt_idx])
            backward(loss, params)
            adam.step()
        curve.append(_dataset_nll(params, cfg, dataset, tcfg.n_max))
    return params, curve


def evaluate(params, cfg, dataset, n_ctx):
    """Metrics over a dataset, conditioning on n_ctx evenly spaced observations."""
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    sums = {"image": [0.0, 0.0, 0.0], "joint": [0.0, 0.0, 0.0]}
    counts = {"image": 0, "joint": 0}
    n_targets = 0
    for traj in dataset:
        ctx = ObservationSet.from_trajectory(traj, evenly_spaced_indices(len(traj), n_ctx))
        pred = forward(params, cfg, ctx, traj.times)
        for key, mean, var, y in (
            ("image", pred.image_mean.data, pred.image_var.data, traj.frames),
            ("joint", pred.joint_mean.data, pred.joint_var.data, traj.joints),
        ):
            nll = 0.5 * np.log(2.0 * np.pi * var) + (y - mean) ** 2 / (2.0 * var)
            sums[key][0] += float(nll.reshape(len(traj), -1).sum(axis=1).sum())
            sums[key][1] += float(((y - mean) ** 2).sum())
            sums[key][2] += int((np.abs(y - mean) <= np.sqrt(var)).sum())
            counts[key] += y.size
        n_targets += len(traj)
    return EvalMetrics(
        image_nll=sums["image"][0] / n_targets,
        image_mse=sums["image"][1] / counts["image"],
        image_coverage=sums["image"][2] / counts["image"],
        joint_nll=sums["joint"][0] / n_targets,
        joint_mse=sums["joint"][1] / counts["joint"],
        joint_coverage=sums["joint"][2] / counts["joint"],
    )


def constant_mean_baseline_mse(dataset):
    """MSE of predicting the per-position dataset mean, per modality.

    Equals the mean per-position variance of the dataset, which is the
    floor any constant predictor can reach.
    """
    frames = np.concatenate([traj.frames for traj in dataset])
    joints = np.concatenate([traj.joints for traj in dataset])
    return {
        "image": float(frames.var(axis=0).mean()),
        "joint": float(joints.var(axis=0).mean()),
    }


def write_loss_curve(path, curve):
    with open(path, "w") as fh:
        fh.write("epoch,nll\n")
        for i, value in enumerate(curve):
            fh.write(f"{i},{value!r}\n")


def write_metrics_csv(path, metrics):
    with open(path, "w") as fh:
        fh.write("modality,nll,mse,coverage\n")
        fh.write(f"image,{metrics.image_nll!r},{metrics.image_mse!r},{metrics.image_coverage!r}\n")
        fh.write(f"joints,{metrics.joint_nll!r},{metrics.joint_mse!r},{metrics.joint_coverage!r}\n")
