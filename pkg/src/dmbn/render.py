"""Binary PGM emission and qualitative reconstruction strips."""

import numpy as np

from .synthdata import FRAME_SIZE

_SEPARATOR = 0.5


def write_pgm(path, image):
    """Write a [0,1] grayscale array as a binary portable graymap (P5)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {img.shape}")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def _tile_row(tiles):
    sep = np.full((FRAME_SIZE, 1), _SEPARATOR)
    parts = []
    for i, tile in enumerate(tiles):
        if i:
            parts.append(sep)
        parts.append(tile)
    return np.concatenate(parts, axis=1)


def render_strip(traj, pred_mean, pred_var, ctx_indices):
    """Stack observations, predicted means, targets and variances into one strip.

    Rows (top to bottom): the observed context frames at their time slots
    (blank elsewhere), the predicted mean frames, the ground-truth frames,
    and the per-pixel variance normalized by its maximum. Rows and columns
    are separated by single mid-gray lines, so the strip height is
    4 * 16 + 3 pixels.
    """
    t = len(traj)
    blank = np.zeros((FRAME_SIZE, FRAME_SIZE))
    ctx = set(int(i) for i in ctx_indices)
    obs_row = _tile_row([traj.frames[k] if k in ctx else blank for k in range(t)])
    mean_row = _tile_row([np.clip(pred_mean[k], 0.0, 1.0) for k in range(t)])
    target_row = _tile_row([traj.frames[k] for k in range(t)])
    vmax = float(pred_var.max())
    var_row = _tile_row([pred_var[k] / vmax if vmax > 0 else blank for k in range(t)])
    sep = np.full((1, obs_row.shape[1]), _SEPARATOR)
    return np.concatenate([obs_row, sep, mean_row, sep, target_row, sep, var_row], axis=0)
