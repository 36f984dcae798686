"""Fused multi-dataset training pool.

Datasets with their own label conventions are merged into one label space by
semantic name. Cases are drawn with probability proportional to
``1/sqrt(n)`` of their source dataset, so the dataset-level probability grows
as ``sqrt(n)`` rather than ``n``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from functools import cached_property
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import (
    ConflictingSemanticName,
    DuplicateDatasetId,
    EmptySpecList,
    PoolError,
    UnknownDatasetId,
    UnmappedLabelValue,
)

TUMOR_KEYWORDS = ("tumor", "tumour", "cancer", "lesion", "carcinoma", "metasta")


class Modality(str, Enum):
    CT = "CT"
    MR = "MR"
    OTHER = "other"

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, Modality):
            return value
        text = str(value).strip()
        for m in cls:
            if m.value.lower() == text.lower():
                return m
        raise PoolError(f"unknown modality {value!r}")


def normalize_name(name: str) -> str:
    return " ".join(str(name).strip().lower().split())


def is_tumor_class(name: str) -> bool:
    name = normalize_name(name)
    return any(key in name for key in TUMOR_KEYWORDS)


@dataclass(frozen=True)
class DatasetSpec:
    dataset_id: str
    modality: Modality
    case_paths: tuple
    original_labels: Mapping[int, str]

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality.parse(self.modality))
        object.__setattr__(self, "case_paths", tuple((str(i), str(l)) for i, l in self.case_paths))
        labels = {int(k): str(v) for k, v in dict(self.original_labels).items()}
        object.__setattr__(self, "original_labels", labels)
        if not self.dataset_id:
            raise PoolError("dataset_id must be non-empty")
        if len(self.case_paths) < 1:
            raise PoolError(f"dataset {self.dataset_id!r} has no cases")
        seen = set()
        for key, name in labels.items():
            if key <= 0:
                raise PoolError(f"dataset {self.dataset_id!r}: label keys must be positive, got {key}")
            norm = normalize_name(name)
            if not norm:
                raise PoolError(f"dataset {self.dataset_id!r}: empty semantic name for label {key}")
            if norm in seen:
                raise PoolError(f"dataset {self.dataset_id!r}: duplicate semantic name {name!r}")
            seen.add(norm)

    @property
    def n_cases(self) -> int:
        return len(self.case_paths)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "modality": self.modality.value,
            "case_paths": [list(p) for p in self.case_paths],
            "original_labels": {str(k): v for k, v in sorted(self.original_labels.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping, base_dir=None) -> "DatasetSpec":
        cases = d.get("case_paths", d.get("cases"))
        if cases is None:
            raise PoolError(f"dataset spec {d.get('dataset_id')!r} lists no cases")
        labels = d.get("original_labels", d.get("labels", {}))
        if base_dir is not None:
            base = Path(base_dir)
            cases = [tuple(_resolve(base, p) for p in pair) for pair in cases]
        return cls(
            dataset_id=str(d["dataset_id"]),
            modality=d.get("modality", "other"),
            case_paths=tuple(tuple(pair) for pair in cases),
            original_labels=labels,
        )


def _resolve(base: Path, p: str) -> str:
    path = Path(p)
    return (path if path.is_absolute() else base / path).as_posix()


@dataclass(frozen=True)
class LabelRemapTable:
    pool_classes: Mapping[int, str]
    entries: Mapping[tuple, int]

    @property
    def num_classes(self) -> int:
        return len(self.pool_classes)

    def class_name(self, pool_id: int) -> str:
        return "background" if pool_id == 0 else self.pool_classes[pool_id]

    def lut(self, dataset_id: str) -> np.ndarray:
        """Lookup array indexed by original label value; -1 marks unmapped values."""
        keys = [v for (d, v) in self.entries if d == dataset_id]
        size = max(keys, default=0) + 1
        lut = np.full(size, -1, dtype=np.int64)
        lut[0] = 0
        for (d, v), c in self.entries.items():
            if d == dataset_id:
                lut[v] = c
        return lut

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["dataset_id", "original_label", "pool_class_id", "semantic_name"])
        for (d, v), c in sorted(self.entries.items()):
            writer.writerow([d, v, c, self.pool_classes[c]])
        return buf.getvalue()


@dataclass(frozen=True)
class CaseRecord:
    case_index: int
    dataset_id: str
    image: str
    label: str


@dataclass(frozen=True)
class PoolManifest:
    datasets: tuple
    remap: LabelRemapTable
    cases: tuple
    case_weights: tuple
    seed: int = 0

    def dataset(self, dataset_id: str) -> DatasetSpec:
        for spec in self.datasets:
            if spec.dataset_id == dataset_id:
                return spec
        raise UnknownDatasetId(f"unknown dataset id {dataset_id!r}")

    @property
    def num_classes(self) -> int:
        return self.remap.num_classes

    @cached_property
    def cdf(self) -> np.ndarray:
        cdf = np.cumsum(np.asarray(self.case_weights, dtype=np.float64))
        return cdf / cdf[-1]

    def dataset_probabilities(self) -> dict:
        probs: dict = {}
        for case, w in zip(self.cases, self.case_weights):
            probs[case.dataset_id] = probs.get(case.dataset_id, 0.0) + w
        return probs

    def subset(self, case_indices: Iterable[int]) -> "PoolManifest":
        """Manifest restricted to some cases, re-indexed and re-weighted by the remaining counts."""
        keep = sorted(set(case_indices))
        picked = [self.cases[i] for i in keep]
        if not picked:
            raise PoolError("subset is empty")
        by_dataset: dict = {}
        for c in picked:
            by_dataset.setdefault(c.dataset_id, []).append((c.image, c.label))
        specs = []
        for spec in self.datasets:
            if spec.dataset_id in by_dataset:
                specs.append(
                    DatasetSpec(spec.dataset_id, spec.modality, tuple(by_dataset[spec.dataset_id]), spec.original_labels)
                )
        cases = tuple(CaseRecord(i, c.dataset_id, c.image, c.label) for i, c in enumerate(picked))
        # keep the parent's class ids so masks and heads stay compatible
        return PoolManifest(tuple(specs), self.remap, cases, tuple(_case_weights_for(cases, specs)), self.seed)

    def to_json(self) -> str:
        doc = {
            "datasets": [s.to_dict() for s in self.datasets],
            "pool_classes": {str(k): v for k, v in sorted(self.remap.pool_classes.items())},
            "entries": [
                {"dataset_id": d, "original_label": v, "pool_class_id": c}
                for (d, v), c in sorted(self.remap.entries.items())
            ],
            "cases": [
                {"case_index": c.case_index, "dataset_id": c.dataset_id, "image": c.image, "label": c.label}
                for c in self.cases
            ],
            "case_weights": list(self.case_weights),
            "seed": int(self.seed),
        }
        return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PoolManifest":
        doc = json.loads(text)
        datasets = tuple(DatasetSpec.from_dict(d) for d in doc["datasets"])
        remap = LabelRemapTable(
            pool_classes={int(k): v for k, v in doc["pool_classes"].items()},
            entries={(e["dataset_id"], int(e["original_label"])): int(e["pool_class_id"]) for e in doc["entries"]},
        )
        cases = tuple(CaseRecord(int(c["case_index"]), c["dataset_id"], c["image"], c["label"]) for c in doc["cases"])
        weights = tuple(float(w) for w in doc["case_weights"])
        if len(weights) != len(cases):
            raise PoolError("case_weights and cases differ in length")
        return cls(datasets, remap, cases, weights, int(doc.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PoolManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def case_weights(specs: Sequence[DatasetSpec]) -> list:
    """Per-case sampling probabilities, in spec order then case order."""
    z = sum(s.n_cases / math.sqrt(s.n_cases) for s in specs)
    weights = []
    for s in specs:
        w = (1.0 / math.sqrt(s.n_cases)) / z
        weights.extend([w] * s.n_cases)
    return weights


def _case_weights_for(cases, specs):
    z = sum(math.sqrt(s.n_cases) for s in specs)
    per_dataset = {s.dataset_id: (1.0 / math.sqrt(s.n_cases)) / z for s in specs}
    return [per_dataset[c.dataset_id] for c in cases]


def build_pool(
    specs: Sequence[DatasetSpec],
    alias_map: Mapping[str, str] | None = None,
    forbid_merge: Iterable[str] = (),
    seed: int = 0,
) -> PoolManifest:
    """Fuse dataset specs into one pool with a unified label space.

    Semantic names are case-normalized, then passed through ``alias_map``.
    Classes sharing a canonical name collapse to a single pool id; ids are
    assigned 1..C in sorted canonical-name order. Names listed in
    ``forbid_merge`` may be claimed by at most one dataset.
    """
    specs = list(specs)
    if not specs:
        raise EmptySpecList("no dataset specs given")
    ids = [s.dataset_id for s in specs]
    for d in ids:
        if ids.count(d) > 1:
            raise DuplicateDatasetId(f"duplicate dataset id {d!r}")

    aliases = {normalize_name(k): normalize_name(v) for k, v in (alias_map or {}).items()}
    for v in aliases.values():
        if v in aliases and aliases[v] != v:
            raise PoolError(f"alias target {v!r} is itself aliased; alias values must be canonical")
    forbid = {aliases.get(normalize_name(n), normalize_name(n)) for n in forbid_merge}

    canon: dict = {}
    claimed_by: dict = {}
    for s in specs:
        used = {}
        for v, name in sorted(s.original_labels.items()):
            c = aliases.get(normalize_name(name), normalize_name(name))
            if c in used:
                raise ConflictingSemanticName(
                    f"dataset {s.dataset_id!r}: labels {used[c]} and {v} both resolve to {c!r}"
                )
            used[c] = v
            canon[(s.dataset_id, v)] = c
            claimed_by.setdefault(c, set()).add(s.dataset_id)
    for c in sorted(forbid):
        if len(claimed_by.get(c, ())) > 1:
            raise ConflictingSemanticName(
                f"class {c!r} is claimed by datasets {sorted(claimed_by[c])} but is marked as not mergeable"
            )

    names = sorted(set(canon.values()))
    pool_id = {name: i + 1 for i, name in enumerate(names)}
    remap = LabelRemapTable(
        pool_classes={i + 1: name for i, name in enumerate(names)},
        entries={key: pool_id[name] for key, name in canon.items()},
    )
    cases = []
    for s in specs:
        for img, lbl in s.case_paths:
            cases.append(CaseRecord(len(cases), s.dataset_id, img, lbl))
    return PoolManifest(tuple(specs), remap, tuple(cases), tuple(case_weights(specs)), int(seed))


@dataclass(frozen=True)
class SamplerState:
    """Position in the deterministic draw sequence; draw k depends only on (seed, k)."""

    seed: int
    draw_count: int = 0


def uniform_draw(seed: int, k: int) -> float:
    """The k-th uniform variate in [0, 1) of the counter-based stream for ``seed``."""
    key = int(seed) & 0xFFFFFFFFFFFFFFFF
    return float(np.random.Generator(np.random.Philox(key=key, counter=int(k))).random())


def sample_case(state: SamplerState, manifest: PoolManifest):
    """Draw one case index by inverse CDF; returns ``(case_index, next_state)``."""
    cdf = manifest.cdf
    u = uniform_draw(state.seed, state.draw_count)
    idx = min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)
    return idx, SamplerState(state.seed, state.draw_count + 1)


def sample_cases(state: SamplerState, manifest: PoolManifest, n: int):
    """``n`` consecutive draws; identical to calling ``sample_case`` n times."""
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i], state = sample_case(state, manifest)
    return out, state


def class_presence_mask(manifest: PoolManifest, dataset_id: str) -> np.ndarray:
    manifest.dataset(dataset_id)
    mask = np.zeros(manifest.num_classes + 1, dtype=bool)
    mask[0] = True
    for (d, _), c in manifest.remap.entries.items():
        if d == dataset_id:
            mask[c] = True
    return mask


def remap_labels(label_grid: np.ndarray, table: LabelRemapTable, dataset_id: str) -> np.ndarray:
    """Map a dataset's label values into pool class ids (0 stays 0)."""
    grid = np.asarray(label_grid)
    lut = table.lut(dataset_id)
    if not np.issubdtype(grid.dtype, np.integer):
        if not np.all(np.equal(np.mod(grid, 1), 0)):
            raise PoolError("label grid contains non-integer values")
        grid = grid.astype(np.int64)
    if grid.size:
        lo, hi = int(grid.min()), int(grid.max())
        if lo < 0 or hi >= lut.size or np.any(lut[np.unique(grid)] < 0):
            values, counts = np.unique(grid, return_counts=True)
            for v, n in zip(values, counts):
                if v < 0 or v >= lut.size or lut[v] < 0:
                    raise UnmappedLabelValue(dataset_id, v, n)
    out = kernels.remap_lut(grid.astype(np.int64, copy=False), lut)
    dtype = np.uint8 if table.num_classes < 256 else np.uint16
    return out.astype(dtype)
