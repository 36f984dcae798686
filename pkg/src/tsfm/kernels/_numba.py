"""numba-compiled voxel kernels; same contracts as ``_numpy``."""

import numpy as np
from numba import njit


@njit(cache=True)
def _linear_coord(i, n_in, n_out):
    x = (i + 0.5) * (n_in / n_out) - 0.5
    if x < 0.0:
        x = 0.0
    elif x > n_in - 1:
        x = float(n_in - 1)
    i0 = int(np.floor(x))
    i1 = min(i0 + 1, n_in - 1)
    return i0, i1, x - i0


@njit(cache=True)
def _resample_linear(data, od, oh, ow):
    nd, nh, nw = data.shape
    out = np.empty((od, oh, ow), dtype=np.float64)
    for k in range(od):
        z0, z1, fz = _linear_coord(k, nd, od)
        for j in range(oh):
            y0, y1, fy = _linear_coord(j, nh, oh)
            for i in range(ow):
                x0, x1, fx = _linear_coord(i, nw, ow)
                c00 = data[z0, y0, x0] * (1.0 - fx) + data[z0, y0, x1] * fx
                c01 = data[z0, y1, x0] * (1.0 - fx) + data[z0, y1, x1] * fx
                c10 = data[z1, y0, x0] * (1.0 - fx) + data[z1, y0, x1] * fx
                c11 = data[z1, y1, x0] * (1.0 - fx) + data[z1, y1, x1] * fx
                c0 = c00 * (1.0 - fy) + c01 * fy
                c1 = c10 * (1.0 - fy) + c11 * fy
                out[k, j, i] = c0 * (1.0 - fz) + c1 * fz
    return out


def resample_linear(data, out_shape):
    data = np.ascontiguousarray(data, dtype=np.float64)
    return _resample_linear(data, *(int(s) for s in out_shape))


@njit(cache=True)
def _nearest_coord(i, n_in, n_out):
    idx = int(np.floor((i + 0.5) * (n_in / n_out)))
    return min(idx, n_in - 1)


@njit(cache=True)
def _resample_nearest(labels, od, oh, ow):
    nd, nh, nw = labels.shape
    out = np.empty((od, oh, ow), dtype=labels.dtype)
    for k in range(od):
        z = _nearest_coord(k, nd, od)
        for j in range(oh):
            y = _nearest_coord(j, nh, oh)
            for i in range(ow):
                out[k, j, i] = labels[z, y, _nearest_coord(i, nw, ow)]
    return out


def resample_nearest(labels, out_shape):
    return _resample_nearest(np.ascontiguousarray(labels), *(int(s) for s in out_shape))


@njit(cache=True)
def _remap_flat(flat, lut):
    out = np.empty(flat.size, dtype=lut.dtype)
    for n in range(flat.size):
        out[n] = lut[flat[n]]
    return out


def remap_lut(grid, lut):
    grid = np.ascontiguousarray(grid)
    return _remap_flat(grid.ravel(), lut).reshape(grid.shape)


@njit(cache=True)
def _overlap_flat(pred, gt):
    inter = 0
    npred = 0
    ngt = 0
    for n in range(pred.size):
        p = pred[n]
        g = gt[n]
        if p:
            npred += 1
        if g:
            ngt += 1
        if p and g:
            inter += 1
    return inter, npred, ngt


def overlap_counts(pred, gt):
    pred = np.ascontiguousarray(pred, dtype=np.bool_).ravel()
    gt = np.ascontiguousarray(gt, dtype=np.bool_).ravel()
    inter, npred, ngt = _overlap_flat(pred, gt)
    return int(inter), int(npred), int(ngt)


@njit(cache=True)
def _accumulate(acc, wsum, tile, weight, z, y, x):
    nc = tile.shape[0]
    d, h, w = weight.shape
    for k in range(d):
        for j in range(h):
            for i in range(w):
                wt = weight[k, j, i]
                wsum[z + k, y + j, x + i] += wt
                for c in range(nc):
                    acc[c, z + k, y + j, x + i] += np.float64(tile[c, k, j, i]) * wt


def accumulate_tile(acc, wsum, tile, weight, start):
    z, y, x = (int(s) for s in start)
    _accumulate(acc, wsum, np.ascontiguousarray(tile), np.ascontiguousarray(weight), z, y, x)
