"""Frozen-encoder probing: can a small head recover observation time?

For each condition a fresh regression head is trained on per-observation
encoder outputs (the encoders themselves are never updated) to predict
the observation's time stamp. Conditions:

- ``dmbn``: trained time-as-channel encoders, real time signal.
- ``null``: trained time-as-channel encoders, time signal zeroed.
- ``random``: freshly initialized time-as-channel encoders, real time.
- ``dmbn_pte``: trained pte encoders; features are taken after the
  time injection, i.e. the representation entering set aggregation.

Repeats are independent (own seed, own train/test split, own head) and
could run in parallel; the report aggregates them into means with
normal-approximation 95% confidence intervals.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tz
from .model import ModelConfig, _inject_batch, encode_image, encode_joints, init_params, load_checkpoint, pte_inject
from .tensor import ParameterSet, Tensor, backward
from .training import Adam

CONDITIONS = ("null", "random", "dmbn", "dmbn_pte")
ENCODERS = ("image", "joint")

CONDITION_LABELS = {
    "null": "Null",
    "random": "Random",
    "dmbn": "DMBN",
    "dmbn_pte": "DMBN-PTE",
}

_BATCH = 64


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    epochs: int = 200
    lr: float = 1e-3
    repeats: int = 10
    train_frac: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 2:
            raise ValueError(f"repeats must be >= 2, got {self.repeats}")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if self.epochs < 1 or self.lr <= 0 or self.hidden < 1:
            raise ValueError("epochs, lr and hidden must be positive")


@dataclass(frozen=True)
class ProbeRow:
    condition: str
    encoder: str
    mean_loss: float
    ci_low: float
    ci_high: float


def extract_features(params, cfg, dataset, condition):
    """Per-observation encoder features and true times, grouped by sequence.

    Returns (features, times) where features maps encoder name to an
    (S, T, d) array and times is (S, T). Encoders are evaluated frozen:
    parameters are read, never written.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"condition must be one of {CONDITIONS}, got {condition!r}")
    expected_mode = "pte" if condition == "dmbn_pte" else "channel"
    if cfg.time_mode != expected_mode:
        raise ValueError(f"condition {condition!r} needs a {expected_mode}-mode model, got {cfg.time_mode}")
    if not dataset:
        raise ValueError("dataset is empty")

    img_chunks, joint_chunks, time_chunks = [], [], []
    for traj in dataset:
        times = traj.times
        if condition == "dmbn_pte":
            h_img = encode_image(params, cfg, traj.frames[:, None, :, :])
            h_joint = encode_joints(params, cfg, traj.joints)
            img_chunks.append(pte_inject(params, cfg, h_img, times).data)
            joint_chunks.append(pte_inject(params, cfg, h_joint, times).data)
        else:
            injected = np.zeros_like(times) if condition == "null" else times
            f4, j3 = _inject_batch(traj.frames, traj.joints, injected)
            img_chunks.append(encode_image(params, cfg, f4).data)
            joint_chunks.append(encode_joints(params, cfg, j3).data)
        time_chunks.append(times)
    features = {
        "image": np.stack(img_chunks),
        "joint": np.stack(joint_chunks),
    }
    return features, np.stack(time_chunks)


def train_probe(features, times, pcfg, rng):
    """Fit a two-layer regression head on frozen features; returns held-out MSE.

    The train/test split is by whole sequences (80/20 by default) and
    features are standardized with train-split statistics.
    """
    features = np.asarray(features, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if features.ndim != 3 or times.shape != features.shape[:2]:
        raise ValueError(f"features {features.shape} and times {times.shape} must be (S, T, d) and (S, T)")
    n_seq = features.shape[0]
    if n_seq < 2:
        raise ValueError("need at least 2 sequences to split")
    perm = rng.permutation(n_seq)
    n_test = max(1, int(round(n_seq * (1.0 - pcfg.train_frac))))
    test_idx, train_idx = perm[:n_test], perm[n_test:]

    d = features.shape[2]
    x_train = features[train_idx].reshape(-1, d)
    y_train = times[train_idx].reshape(-1, 1)
    x_test = features[test_idx].reshape(-1, d)
    y_test = times[test_idx].reshape(-1, 1)

    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd[sd < 1e-12] = 1.0
    x_train = (x_train - mu) / sd
    x_test = (x_test - mu) / sd

    head = ParameterSet()
    head.add("fc1.w", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, pcfg.hidden)))
    head.add("fc1.b", np.zeros(pcfg.hidden))
    head.add("fc2.w", rng.normal(0.0, 1.0 / np.sqrt(pcfg.hidden), size=(pcfg.hidden, 1)))
    head.add("fc2.b", np.zeros(1))
    adam = Adam(head, lr=pcfg.lr)

    def predict(x):
        h = tz.relu(tz.add_bias(tz.matmul(Tensor(x), head["fc1.w"]), head["fc1.b"]))
        return tz.add_bias(tz.matmul(h, head["fc2.w"]), head["fc2.b"])

    n_train = x_train.shape[0]
    batch = min(_BATCH, n_train)
    for epoch in range(pcfg.epochs):
        # cosine decay: minibatch noise would otherwise put a floor under
        # the loss and mask how recoverable the time signal really is
        adam.lr = pcfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / pcfg.epochs))
        order = rng.permutation(n_train)
        for lo in range(0, n_train, batch):
            sel = order[lo : lo + batch]
            diff = tz.sub(predict(x_train[sel]), Tensor(y_train[sel]))
            loss = tz.mean_all(tz.mul(diff, diff))
            backward(loss, head)
            adam.step()

    residual = predict(x_test).data - y_test
    return float(np.mean(residual * residual))


def _confidence_interval(losses):
    losses = np.asarray(losses, dtype=np.float64)
    mean = float(losses.mean())
    half = 1.96 * float(losses.std(ddof=1)) / np.sqrt(len(losses))
    return mean, mean - half, mean + half


def probe_report(ckpt_dmbn, ckpt_pte, dataset, pcfg):
    """Run all conditions and encoders for R repeats each; returns ProbeRows.

    Checkpoint arguments are file paths; the dmbn checkpoint must be a
    channel-mode model and the pte checkpoint a pte-mode model.
    """
    cfg_dmbn, params_dmbn = load_checkpoint(ckpt_dmbn)
    cfg_pte, params_pte = load_checkpoint(ckpt_pte)
    if cfg_dmbn.time_mode != "channel":
        raise ValueError(f"{ckpt_dmbn}: expected a channel-mode checkpoint, got {cfg_dmbn.time_mode}")
    if cfg_pte.time_mode != "pte":
        raise ValueError(f"{ckpt_pte}: expected a pte-mode checkpoint, got {cfg_pte.time_mode}")

    fixed_features = {
        "dmbn": extract_features(params_dmbn, cfg_dmbn, dataset, "dmbn")[0],
        "null": extract_features(params_dmbn, cfg_dmbn, dataset, "null")[0],
        "dmbn_pte": extract_features(params_pte, cfg_pte, dataset, "dmbn_pte")[0],
    }
    times = np.stack([traj.times for traj in dataset])

    rows = []
    for ci, condition in enumerate(CONDITIONS):
        for ei, encoder in enumerate(ENCODERS):
            losses = []
            for r in range(pcfg.repeats):
                rng = np.random.default_rng([pcfg.seed, ci, ei, r])
                if condition == "random":
                    cfg_r = replace(cfg_dmbn, seed=int(rng.integers(2**31 - 1)))
                    feats = extract_features(init_params(cfg_r), cfg_r, dataset, "random")[0][encoder]
                else:
                    feats = fixed_features[condition][encoder]
                losses.append(train_probe(feats, times, pcfg, rng))
            mean, lo, hi = _confidence_interval(losses)
            rows.append(ProbeRow(condition=condition, encoder=encoder, mean_loss=mean, ci_low=lo, ci_high=hi))
    return rows


def write_probe_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("condition,encoder,mean_loss,ci_low,ci_high\n")
        for row in rows:
            fh.write(f"{row.condition},{row.encoder},{row.mean_loss!r},{row.ci_low!r},{row.ci_high!r}\n")


def format_probe_table(rows):
    """Aligned text table with losses scaled by 1e3, CIs in parentheses."""
    by_key = {(r.condition, r.encoder): r for r in rows}

    def cell(condition, encoder):
        r = by_key[(condition, encoder)]
        return f"{1e3 * r.mean_loss:.2f} ({1e3 * r.ci_low:.2f}, {1e3 * r.ci_high:.2f})"

    header = f"{'Model':<10}  {'Image Encoder Loss (1e-3)':<28}  {'Joint Encoder Loss (1e-3)':<28}"
    lines = [header, "-" * len(header)]
    for condition in CONDITIONS:
        lines.append(
            f"{CONDITION_LABELS[condition]:<10}  {cell(condition, 'image'):<28}  {cell(condition, 'joint'):<28}"
        )
    return "\n".join(lines) + "\n"
