import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
import torch

from tsfm.model import ModelConfig, TransformerConfig, build, preset

NIFTI_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.int32): 8,
               np.dtype(np.float32): 16, np.dtype(np.float64): 64}


def write_nifti(path, data, pixdim=(1.0, 1.0, 1.0), slope=0.0, inter=0.0, datatype=None, magic=b"n+1\x00",
                ndim=None, endian="<"):
    """Minimal NIfTI-1 writer for fixtures. ``data`` is in (D, H, W) = (k, j, i) order."""
    data = np.asarray(data)
    nz, ny, nx = data.shape
    code = datatype if datatype is not None else NIFTI_CODES[data.dtype]
    hdr = bytearray(352)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dims = [ndim if ndim is not None else 3, nx, ny, nz, 1, 1, 1, 1]
    struct.pack_into(endian + "8h", hdr, 40, *dims)
    struct.pack_into(endian + "h", hdr, 70, code)
    struct.pack_into(endian + "h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, pixdim[0], pixdim[1], pixdim[2], 0, 0, 0, 0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    payload = bytes(hdr) + data.astype(data.dtype.newbyteorder(endian)).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload)
    path.write_bytes(payload)
    return path


@pytest.fixture
def toy_config():
    return preset("toy")


@pytest.fixture
def toy_model(toy_config):
    return build(toy_config, seed=0)


def tiny_config(**kw):
    d = dict(
        num_classes=1,
        num_stages=2,
        base_channels=2,
        blocks_per_stage=(1, 1),
        transformer=TransformerConfig(layers=1, hidden=4, heads=2, mlp_ratio=2),
        patch_size=(4, 4, 4),
        preset_name="tiny",
    )
    d.update(kw)
    return ModelConfig(**d).validate()


def randomize(model, seed=0, scale=0.3):
    """Give every parameter (including zero-initialized ones) a random value."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def fd_relative_error(fn, tensors, h=1e-5, seed=0):
    """Max-normalized relative error between autograd and central differences.

    ``fn`` maps the (double, requires_grad) tensors to an output; the scalar probed
    is ``sum(out * r)`` for a fixed random ``r``. Returns max|a - n| / max|n|.
    """
    g = torch.Generator().manual_seed(seed)
    out = fn()
    r = torch.randn(out.shape, generator=g, dtype=torch.float64) if out.dim() else torch.ones((), dtype=torch.float64)

    def scalar():
        return (fn() * r).sum()

    analytic = torch.autograd.grad(scalar(), tensors)
    worst, scale = 0.0, 0.0
    with torch.no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.view(-1)
            af = a.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                fp = scalar().item()
                flat[i] = old - h
                fm = scalar().item()
                flat[i] = old
                num = (fp - fm) / (2 * h)
                worst = max(worst, abs(af[i].item() - num))
                scale = max(scale, abs(num))
    return worst / max(scale, 1e-300)
