"""Command-line surface: dataset generation, training, perturbation,
evaluation, probing and the end-to-end reproduce pipeline.

Every command is deterministic given its flags and seed (the NPX_SEED
environment variable overrides the default seed when no --seed is
given), never mutates its inputs, and writes a manifest recording the
resolved flags, input/output checksums and wall-clock duration.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import kernels
from .errors import MalformedFileError, ModeError
from .manifest import RunManifest, sha256_file, write_manifest
from .model import ModelConfig, ObservationSet, forward, load_checkpoint, save_checkpoint
from .probe import ProbeConfig, format_probe_table, probe_report, write_probe_csv
from .render import render_strip, write_pgm
from .synthdata import freeze_sequence, generate_dataset, load_dataset, permute_times, save_dataset
from .training import (
    TrainConfig,
    evaluate,
    evenly_spaced_indices,
    train,
    write_loss_curve,
    write_metrics_csv,
)

SEED_ENV = "NPX_SEED"


class UsageError(Exception):
    """Invalid flag combination or value; maps to exit code 2."""


def resolve_seed(value, default=0):
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return default


def _finish_manifest(path, command, flags, seed, inputs, outputs, t0):
    manifest = RunManifest(
        command=command,
        flags=flags,
        seed=seed,
        inputs={p: sha256_file(p) for p in inputs},
        outputs={p: sha256_file(p) for p in outputs},
        duration_s=time.monotonic() - t0,
        kernel_backend=kernels.active_backend(),
    )
    write_manifest(path, manifest)
    return manifest


def run_gen_data(out_dir, train_n, test_n, t, seed):
    t0 = time.monotonic()
    os.makedirs(out_dir, exist_ok=True)
    train_path = os.path.join(out_dir, "train.npx")
    test_path = os.path.join(out_dir, "test.npx")
    save_dataset(generate_dataset(train_n, t, seed0=seed), train_path)
    save_dataset(generate_dataset(test_n, t, seed0=seed + train_n), test_path)
    flags = {"train_n": train_n, "test_n": test_n, "T": t}
    _finish_manifest(
        os.path.join(out_dir, "manifest.json"),
        "gen-data", flags, seed, [], [train_path, test_path], t0,
    )
    return {"train": train_path, "test": test_path}


def run_train(data_path, mode, out_dir, epochs, lr, n_max, p_aug, augment, seed):
    t0 = time.monotonic()
    dataset = load_dataset(data_path)
    cfg = ModelConfig(time_mode=mode, seed=seed)
    tcfg = TrainConfig(epochs=epochs, lr=lr, n_max=n_max, p_aug=p_aug, augment=augment, seed=seed)
    params, curve = train(dataset, cfg, tcfg)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    curve_path = os.path.join(out_dir, "loss.csv")
    save_checkpoint(ckpt_path, cfg, params)
    write_loss_curve(curve_path, curve)
    flags = {
        "data": data_path, "mode": mode, "epochs": epochs, "lr": lr,
        "n_max": n_max, "p_aug": p_aug, "augment": augment,
    }
    _finish_manifest(
        os.path.join(out_dir, "manifest.json"),
        "train", flags, seed, [data_path], [ckpt_path, curve_path], t0,
    )
    return {"ckpt": ckpt_path, "loss": curve_path}


def run_perturb(data_path, kind, index, seed, freeze_at, out_file):
    t0 = time.monotonic()
    dataset = load_dataset(data_path)
    if not 0 <= index < len(dataset):
        raise ValueError(f"sequence index {index} out of range [0, {len(dataset)})")
    traj = dataset[index]
    flags = {"data": data_path, "kind": kind, "index": index}
    if kind == "permute":
        perm = np.random.default_rng(seed).permutation(len(traj))
        out = permute_times(traj, perm)
        flags["permutation"] = perm.tolist()
    else:
        k = len(traj) // 2 if freeze_at is None else freeze_at
        if not 0 <= k < len(traj):
            raise UsageError(f"--freeze-at {k} out of range [0, {len(traj)})")
        out = freeze_sequence(traj, k)
        flags["freeze_at"] = k
    save_dataset([out], out_file)
    _finish_manifest(out_file + ".manifest.json", "perturb", flags, seed, [data_path], [out_file], t0)
    return {"sequence": out_file}


def run_eval(ckpt_path, data_path, n_ctx, out_dir):
    t0 = time.monotonic()
    cfg, params = load_checkpoint(ckpt_path)
    dataset = load_dataset(data_path)
    if not dataset:
        raise ValueError(f"{data_path}: dataset is empty")
    t = len(dataset[0])
    if not 1 <= n_ctx <= t:
        raise ValueError(f"n_ctx {n_ctx} incompatible with sequence length {t}")
    os.makedirs(out_dir, exist_ok=True)
    metrics = evaluate(params, cfg, dataset, n_ctx)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(metrics_path, metrics)
    outputs = [metrics_path]
    for i, traj in enumerate(dataset):
        ctx_idx = evenly_spaced_indices(len(traj), n_ctx)
        pred = forward(params, cfg, ObservationSet.from_trajectory(traj, ctx_idx), traj.times)
        strip = render_strip(traj, pred.image_mean.data, pred.image_var.data, ctx_idx)
        pgm_path = os.path.join(out_dir, f"seq_{i:03d}.pgm")
        write_pgm(pgm_path, strip)
        outputs.append(pgm_path)
    flags = {"ckpt": ckpt_path, "data": data_path, "n_ctx": n_ctx}
    _finish_manifest(
        os.path.join(out_dir, "manifest.json"),
        "eval", flags, 0, [ckpt_path, data_path], outputs, t0,
    )
    return {"metrics": metrics_path}


def run_probe(ckpt_dmbn, ckpt_pte, data_path, repeats, probe_epochs, seed, out_dir):
    t0 = time.monotonic()
    for path in (ckpt_dmbn, ckpt_pte):
        if not os.path.exists(path):
            raise FileNotFoundError(f"checkpoint not found: {path}")
    dataset = load_dataset(data_path)
    pcfg = ProbeConfig(repeats=repeats, epochs=probe_epochs, seed=seed)
    rows = probe_report(ckpt_dmbn, ckpt_pte, dataset, pcfg)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "probe.csv")
    table_path = os.path.join(out_dir, "probe.txt")
    write_probe_csv(csv_path, rows)
    table = format_probe_table(rows)
    with open(table_path, "w") as fh:
        fh.write(table)
    print(table, end="")
    flags = {
        "ckpt_dmbn": ckpt_dmbn, "ckpt_pte": ckpt_pte, "data": data_path,
        "repeats": repeats, "probe_epochs": probe_epochs,
    }
    _finish_manifest(
        os.path.join(out_dir, "manifest.json"),
        "probe", flags, seed, [ckpt_dmbn, ckpt_pte, data_path], [csv_path, table_path], t0,
    )
    return {"csv": csv_path, "table": table_path}


def run_reproduce(out_dir, seed, train_n, test_n, t, epochs, n_max, probe_repeats, probe_epochs):
    t0 = time.monotonic()
    os.makedirs(out_dir, exist_ok=True)
    data = run_gen_data(os.path.join(out_dir, "data"), train_n, test_n, t, seed)
    ckpts = {}
    for mode in ("channel", "pte"):
        result = run_train(
            data["train"], mode, os.path.join(out_dir, f"train_{mode}"),
            epochs=epochs, lr=1e-3, n_max=n_max, p_aug=0.5, augment="auto", seed=seed,
        )
        ckpts[mode] = result["ckpt"]
    probe_out = run_probe(
        ckpts["channel"], ckpts["pte"], data["train"],
        repeats=probe_repeats, probe_epochs=probe_epochs, seed=seed,
        out_dir=os.path.join(out_dir, "probe"),
    )
    eval_outs = {}
    for mode in ("channel", "pte"):
        for n_ctx in (1, min(20, t)):
            result = run_eval(
                ckpts[mode], data["test"], n_ctx,
                os.path.join(out_dir, f"eval_{mode}_ctx{n_ctx}"),
            )
            eval_outs[f"{mode}_ctx{n_ctx}"] = result["metrics"]
    artifacts = [data["train"], data["test"], *ckpts.values(), probe_out["csv"], *eval_outs.values()]
    flags = {
        "train_n": train_n, "test_n": test_n, "T": t, "epochs": epochs,
        "n_max": n_max, "probe_repeats": probe_repeats, "probe_epochs": probe_epochs,
    }
    _finish_manifest(
        os.path.join(out_dir, "manifest.json"),
        "reproduce", flags, seed, [], artifacts, t0,
    )
    return {"ckpts": ckpts, "probe": probe_out, "evals": eval_outs, "data": data}


def build_parser():
    parser = argparse.ArgumentParser(prog="dmbn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic bimodal corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train-n", type=int, default=40)
    p.add_argument("--test-n", type=int, default=8)
    p.add_argument("--T", type=int, default=30)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train one time-injection mode")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=("channel", "pte"))
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n-max", type=int, default=10)
    p.add_argument("--p-aug", type=float, default=0.5)
    p.add_argument("--augment", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("perturb", help="write a permuted- or frozen-time test sequence")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, choices=("permute", "freeze"))
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--freeze-at", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="metrics and qualitative strips for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-ctx", type=int, default=20)
    p.add_argument("--out", required=True)

    p = sub.add_parser("probe", help="frozen-encoder time regression report")
    p.add_argument("--ckpt-dmbn", required=True)
    p.add_argument("--ckpt-pte", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--probe-epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("reproduce", help="gen-data, train both modes, probe, eval")
    p.add_argument("--out", required=True)
    p.add_argument("--train-n", type=int, default=40)
    p.add_argument("--test-n", type=int, default=8)
    p.add_argument("--T", type=int, default=30)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--n-max", type=int, default=10)
    p.add_argument("--probe-repeats", type=int, default=10)
    p.add_argument("--probe-epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)

    return parser


def _dispatch(args):
    if args.command == "gen-data":
        if args.T < 2:
            raise UsageError(f"--T must be >= 2, got {args.T}")
        run_gen_data(args.out, args.train_n, args.test_n, args.T, resolve_seed(args.seed))
    elif args.command == "train":
        run_train(
            args.data, args.mode, args.out, args.epochs, args.lr,
            args.n_max, args.p_aug, args.augment, resolve_seed(args.seed),
        )
    elif args.command == "perturb":
        run_perturb(args.data, args.kind, args.index, resolve_seed(args.seed), args.freeze_at, args.out)
    elif args.command == "eval":
        run_eval(args.ckpt, args.data, args.n_ctx, args.out)
    elif args.command == "probe":
        run_probe(
            args.ckpt_dmbn, args.ckpt_pte, args.data,
            args.repeats, args.probe_epochs, resolve_seed(args.seed), args.out,
        )
    elif args.command == "reproduce":
        if args.T < 2:
            raise UsageError(f"--T must be >= 2, got {args.T}")
        run_reproduce(
            args.out, resolve_seed(args.seed), args.train_n, args.test_n, args.T,
            args.epochs, args.n_max, args.probe_repeats, args.probe_epochs,
        )


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, MalformedFileError, ModeError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
