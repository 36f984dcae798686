"""Pure-numpy reference versions of the voxel kernels."""

import numpy as np


def _linear_axis_coords(n_in, n_out):
    # half-voxel-centred sampling (align_corners=False), edge-clamped
    scale = n_in / n_out
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = x - i0
    return i0, i1, frac


def resample_linear(data, out_shape):
    out = np.asarray(data, dtype=np.float64)
    for axis, n_out in enumerate(out_shape):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        i0, i1, frac = _linear_axis_coords(n_in, n_out)
        shape = [1] * out.ndim
        shape[axis] = n_out
        frac = frac.reshape(shape)
        out = out.take(i0, axis=axis) * (1.0 - frac) + out.take(i1, axis=axis) * frac
    return out


def _nearest_axis_coords(n_in, n_out):
    idx = np.floor((np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def resample_nearest(labels, out_shape):
    out = np.asarray(labels)
    for axis, n_out in enumerate(out_shape):
        if out.shape[axis] != n_out:
            out = out.take(_nearest_axis_coords(out.shape[axis], n_out), axis=axis)
    return np.ascontiguousarray(out)


def remap_lut(grid, lut):
    return lut[grid]


def overlap_counts(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    inter = int(np.count_nonzero(pred & gt))
    return inter, int(np.count_nonzero(pred)), int(np.count_nonzero(gt))


def accumulate_tile(acc, wsum, tile, weight, start):
    d, h, w = weight.shape
    z, y, x = start
    acc[:, z:z + d, y:y + h, x:x + w] += tile * weight
    wsum[z:z + d, y:y + h, x:x + w] += weight
