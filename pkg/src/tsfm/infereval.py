"""Sliding-window inference, Dice evaluation and table rendering."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import datapool, kernels, volumeio
from .errors import CaseMismatch, ShapeMismatch

TRANSFER_BUDGETS = (10, 20, 50, 100)


@dataclass
class PredictionMap:
    probs: np.ndarray
    spacing: tuple
    case_id: str = ""

    def __post_init__(self):
        if self.probs.ndim != 4:
            raise ShapeMismatch(f"probabilities must be (C+1, D, H, W), got {self.probs.shape}")

    def save(self, stem) -> None:
        """Raw little-endian float32 probabilities plus a JSON sidecar."""
        stem = Path(stem)
        np.ascontiguousarray(self.probs, dtype="<f4").tofile(stem.with_suffix(".probs.f32"))
        side = {"shape": list(self.probs.shape), "dtype": "float32", "spacing": list(self.spacing), "case_id": self.case_id}
        stem.with_suffix(".probs.json").write_text(json.dumps(side, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, stem) -> "PredictionMap":
        stem = Path(stem)
        side = json.loads(stem.with_suffix(".probs.json").read_text())
        probs = np.fromfile(stem.with_suffix(".probs.f32"), dtype="<f4").reshape(side["shape"]).astype(np.float32)
        return cls(probs, tuple(side["spacing"]), side.get("case_id", ""))


def gaussian_weight(patch_size, sigma_scale=1.0 / 8) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(p, dtype=np.float64) for p in patch_size], indexing="ij")
    w = np.ones(patch_size, dtype=np.float64)
    for g, p in zip(grids, patch_size):
        center = (p - 1) / 2.0
        sigma = p * sigma_scale
        w *= np.exp(-0.5 * ((g - center) / sigma) ** 2)
    w /= w.max()
    w[w == 0] = w[w > 0].min()
    return w


def tile_starts(size: int, patch: int, overlap: float) -> list:
    if size <= patch:
        return [0]
    step = max(int(patch * (1.0 - overlap)), 1)
    starts = list(range(0, size - patch, step))
    starts.append(size - patch)
    return sorted(set(starts))


def sliding_window_predict(
    model,
    v: volumeio.Volume,
    patch_size=None,
    overlap: float = 0.5,
    weighting: str = "gaussian",
    case_id: str = "",
    interpolate_pos: bool = False,
) -> PredictionMap:
    """Weighted average of per-tile sigmoid probabilities over a whole volume.

    The volume is zero-padded at the far end of each axis up to the patch
    size; tiles are evaluated one at a time in a fixed raster order.
    """
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    patch_size = tuple(int(p) for p in (patch_size or model.config.patch_size))
    data = np.asarray(v.data, dtype=np.float32)
    shape = data.shape
    padded_shape = tuple(max(s, p) for s, p in zip(shape, patch_size))
    if padded_shape != shape:
        buf = np.zeros(padded_shape, dtype=np.float32)
        buf[tuple(slice(0, s) for s in shape)] = data
        data = buf
    if weighting == "gaussian":
        weight = gaussian_weight(patch_size)
    elif weighting == "uniform":
        weight = np.ones(patch_size, dtype=np.float64)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")

    n_out = model.config.num_classes + 1
    acc = np.zeros((n_out,) + padded_shape, dtype=np.float64)
    wsum = np.zeros(padded_shape, dtype=np.float64)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for z in tile_starts(padded_shape[0], patch_size[0], overlap):
            for y in tile_starts(padded_shape[1], patch_size[1], overlap):
                for x in tile_starts(padded_shape[2], patch_size[2], overlap):
                    tile = data[z:z + patch_size[0], y:y + patch_size[1], x:x + patch_size[2]]
                    inp = torch.from_numpy(np.ascontiguousarray(tile))[None, None].to(dtype)
                    prob = torch.sigmoid(model(inp, interpolate_pos=interpolate_pos))[0].to(torch.float32).numpy()
                    kernels.accumulate_tile(acc, wsum, prob, weight, (z, y, x))
    model.train(was_training)
    probs = acc / wsum
    probs = probs[(slice(None),) + tuple(slice(0, s) for s in shape)]
    return PredictionMap(np.clip(probs, 0.0, 1.0).astype(np.float32), v.spacing, case_id)


def resample_prediction(pm: PredictionMap, target_shape, target_spacing) -> PredictionMap:
    """Trilinear resampling of every class probability map (e.g. back to original spacing)."""
    probs = np.stack([kernels.resample_linear(p, target_shape) for p in pm.probs]).astype(np.float32)
    return PredictionMap(np.clip(probs, 0, 1), tuple(target_spacing), pm.case_id)


def binarize(pm, threshold: float = 0.5) -> np.ndarray:
    """Independent per-class masks ``probs >= threshold``; classes may overlap."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    probs = pm.probs if isinstance(pm, PredictionMap) else np.asarray(pm)
    return probs >= threshold


def dice(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    inter, npred, ngt = kernels.overlap_counts(pred, gt)
    if npred + ngt == 0:
        return 1.0
    return 2.0 * inter / (npred + ngt)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Optional postprocessing: keep only the largest 26-connected component."""
    from scipy import ndimage

    lab, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (int(np.argmax(sizes)) + 1)


# ---------------------------------------------------------------- reports


@dataclass
class DiceRow:
    dataset_id: str
    class_name: str
    dice: float | None
    is_tumor: bool = False
    n_cases: int = 0


@dataclass
class DiceReport:
    rows: list = field(default_factory=list)
    method: str = "Ours"

    @property
    def mean_tumor(self) -> float | None:
        vals = [r.dice for r in self.rows if r.is_tumor and r.dice is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_organ(self) -> float | None:
        vals = [r.dice for r in self.rows if not r.is_tumor and r.dice is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "kind": "dice",
            "method": self.method,
            "rows": [
                {"dataset_id": r.dataset_id, "class_name": r.class_name, "dice": r.dice,
                 "is_tumor": r.is_tumor, "n_cases": r.n_cases}
                for r in self.rows
            ],
            "mean_tumor": self.mean_tumor,
            "mean_organ": self.mean_organ,
        }

    @classmethod
    def from_dict(cls, d) -> "DiceReport":
        return cls([DiceRow(**r) for r in d["rows"]], d.get("method", "Ours"))


@dataclass
class TransferReport:
    """Fine-tuning results: one row per method, one cell per epoch budget."""

    task: str
    results: dict = field(default_factory=dict)  # method -> {epochs: dice}

    def to_dict(self) -> dict:
        return {
            "kind": "transfer",
            "task": self.task,
            "results": {m: {str(e): v for e, v in sorted(r.items())} for m, r in self.results.items()},
        }

    @classmethod
    def from_dict(cls, d) -> "TransferReport":
        return cls(d["task"], {m: {int(e): v for e, v in r.items()} for m, r in d["results"].items()})


def evaluate_cases(
    preds: Sequence[PredictionMap],
    gts: Sequence[volumeio.Volume],
    manifest: datapool.PoolManifest,
    threshold: float = 0.5,
    method: str = "Ours",
    postprocess: bool = False,
) -> DiceReport:
    """Per (dataset, class) mean Dice over the dataset's cases.

    ``gts`` carry labels already remapped into pool ids. A prediction's
    ``case_id`` is the pool case index (as a string or int). Classes the case's
    source dataset does not annotate are skipped.
    """
    if len(preds) != len(gts):
        raise CaseMismatch(f"{len(preds)} predictions for {len(gts)} ground-truth cases")
    scores: dict = {}
    for pm, gt in zip(preds, gts):
        try:
            case = manifest.cases[int(pm.case_id)]
        except (ValueError, IndexError) as exc:
            raise CaseMismatch(f"prediction case id {pm.case_id!r} is not a pool case index") from exc
        if gt.labels is None or pm.probs.shape[1:] != gt.labels.shape:
            raise CaseMismatch(f"case {pm.case_id}: prediction {pm.probs.shape[1:]} vs labels "
                               f"{None if gt.labels is None else gt.labels.shape}")
        present = datapool.class_presence_mask(manifest, case.dataset_id)
        masks = binarize(pm, threshold)
        for c in range(1, len(present)):
            if not present[c]:
                continue
            m = largest_component(masks[c]) if postprocess else masks[c]
            scores.setdefault((case.dataset_id, c), []).append(dice(m, gt.labels == c))
    order = {s.dataset_id: i for i, s in enumerate(manifest.datasets)}
    rows = []
    for (d, c) in sorted(scores, key=lambda k: (order[k[0]], k[1])):
        vals = scores[(d, c)]
        name = manifest.remap.class_name(c)
        rows.append(DiceRow(d, name, float(np.mean(vals)), datapool.is_tumor_class(name), len(vals)))
    return DiceReport(rows, method)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.4f}"


def _md_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] * len(header)) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _csv_table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _table1(reports):
    columns = []
    for r in reports:
        for row in r.rows:
            key = (row.dataset_id, row.class_name)
            if key not in columns:
                columns.append(key)
    header = ["method"] + [f"{d}/{c}" for d, c in columns] + ["mean Dice for tumor"]
    body = []
    for r in reports:
        if not r.rows:
            continue
        by_key = {(row.dataset_id, row.class_name): row.dice for row in r.rows}
        body.append([r.method] + [_fmt(by_key.get(k)) for k in columns] + [_fmt(r.mean_tumor)])
    return header, body


def _transfer(reports):
    budgets = set(TRANSFER_BUDGETS)
    for r in reports:
        for res in r.results.values():
            budgets.update(res)
    budgets = sorted(budgets)
    header = ["method"] + [f"{b}epoch" for b in budgets]
    body = []
    for r in reports:
        for method, res in r.results.items():
            label = f"{r.task}: {method}" if len(reports) > 1 else method
            body.append([label] + [_fmt(res.get(b)) for b in budgets])
    return header, body


def render_report(report, style: str = "table1", fmt: str = "md") -> str:
    """Deterministic Markdown (``fmt='md'``) or CSV (``fmt='csv'``) rendering.

    ``report`` may be one report or a sequence of them (one table row per
    method). ``table1`` expects DiceReports; ``transfer`` expects TransferReports.
    """
    reports = list(report) if isinstance(report, (list, tuple)) else [report]
    if style == "table1":
        header, body = _table1(reports)
    elif style == "transfer":
        header, body = _transfer(reports)
    else:
        raise ValueError(f"unknown report style {style!r}")
    if fmt == "md":
        title = ""
        if style == "transfer" and len(reports) == 1:
            title = f"**{reports[0].task}**\n\n"
        return title + _md_table(header, body)
    if fmt == "csv":
        return _csv_table(header, body)
    raise ValueError(f"unknown format {fmt!r}")


def report_from_dict(d):
    return TransferReport.from_dict(d) if d.get("kind") == "transfer" else DiceReport.from_dict(d)
