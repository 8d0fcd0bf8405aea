"""Manifest ingestion, RALE severity labelling and repeated stratified CV plans."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._util import SCHEMA_VERSION, canonical_json, dump_json, round_half_up, sha256_of
from .errors import InsufficientData, InvalidCombination, InvalidManifest, InvalidRale

LABELS = ("N", "P")
MANIFEST_COLUMNS = ("id", "path", "label", "severity", "rale_left", "rale_right", "pcr_positive", "view")
PLAN_RNG = "numpy.PCG64(SeedSequence)"


class SeverityLevel(str, Enum):
    NORMAL_PCR_PLUS = "NormalPcrPlus"
    MILD = "Mild"
    MODERATE = "Moderate"
    SEVERE = "Severe"
    NEGATIVE_CONTROL = "NegativeControl"

    @property
    def rank(self) -> int:
        """Ordering NormalPcrPlus < Mild < Moderate < Severe; NegativeControl is -1."""
        return _RANK[self]

    @classmethod
    def parse(cls, text: str) -> "SeverityLevel":
        key = text.strip().replace("-", "").replace("_", "").replace(" ", "").lower()
        for level in cls:
            if level.value.lower() == key:
                return level
        if key in ("normalpcr+", "normalpcrpositive", "normal"):
            return cls.NORMAL_PCR_PLUS
        if key in ("negative", "control", "none"):
            return cls.NEGATIVE_CONTROL
        raise ValueError(f"unknown severity level {text!r}")


_RANK = {
    SeverityLevel.NEGATIVE_CONTROL: -1,
    SeverityLevel.NORMAL_PCR_PLUS: 0,
    SeverityLevel.MILD: 1,
    SeverityLevel.MODERATE: 2,
    SeverityLevel.SEVERE: 3,
}
POSITIVE_LEVELS = (
    SeverityLevel.NORMAL_PCR_PLUS,
    SeverityLevel.MILD,
    SeverityLevel.MODERATE,
    SeverityLevel.SEVERE,
)


@dataclass(frozen=True)
class RaleScore:
    """Per-lung extent scores, each 0..4; `total` is their sum (0..8)."""

    left_lung: int
    right_lung: int

    def __post_init__(self):
        for side, value in (("left", self.left_lung), ("right", self.right_lung)):
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise InvalidRale(f"{side} lung score must be an integer, got {value!r}")
            if not 0 <= value <= 4:
                raise InvalidRale(f"{side} lung score {value} outside [0, 4]")

    @property
    def total(self) -> int:
        return int(self.left_lung) + int(self.right_lung)


def severity_from_rale(rale: RaleScore, pcr_positive: bool) -> SeverityLevel:
    """Map a RALE score of a PCR-confirmed case to its severity stage.

    0 -> Normal-PCR+ (only when PCR is positive), 1-2 Mild, 3-5 Moderate, 6-8 Severe.
    """
    if not isinstance(rale, RaleScore):
        left, right = rale
        rale = RaleScore(left, right)
    total = rale.total
    if total == 0:
        if not pcr_positive:
            raise InvalidCombination(
                "RALE total 0 with negative PCR is a negative control, not a positive severity"
            )
        return SeverityLevel.NORMAL_PCR_PLUS
    if total <= 2:
        return SeverityLevel.MILD
    if total <= 5:
        return SeverityLevel.MODERATE
    return SeverityLevel.SEVERE


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    label: str
    severity: SeverityLevel
    rale: RaleScore | None = None
    view: str = "PA"
    pcr_positive: bool | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "label": self.label,
            "severity": self.severity.value,
            "rale_left": None if self.rale is None else self.rale.left_lung,
            "rale_right": None if self.rale is None else self.rale.right_lung,
            "pcr_positive": self.pcr_positive,
            "view": self.view,
        }


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    root: Path = field(default_factory=Path)

    @property
    def n(self) -> int:
        return len(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def image_path(self, record: ImageRecord) -> Path:
        return Path(self.root) / record.path

    def class_counts(self) -> dict[str, int]:
        return {lab: sum(r.label == lab for r in self.records) for lab in LABELS}

    def exclude_normal_pcr(self) -> "DatasetManifest":
        """Drop Normal-PCR+ positives (the reduced-severity experiments)."""
        kept = tuple(r for r in self.records if r.severity is not SeverityLevel.NORMAL_PCR_PLUS)
        return DatasetManifest(kept, self.root)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "records": [r.to_dict() for r in self.records]}

    def data_hash(self) -> str:
        return sha256_of([r.to_dict() for r in self.records])


# -- parsing -----------------------------------------------------------------

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def _blank(value) -> bool:
    return value is None or (isinstance(value, str) and value.strip() == "")


def _parse_bool(value):
    if _blank(value):
        return None
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ValueError(f"pcr_positive must be a boolean, got {value!r}")


def _parse_int(value, name):
    if isinstance(value, bool):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if isinstance(value, int):
        return value
    text = str(value).strip()
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got {value!r}") from None


def _record_from_row(row: dict) -> ImageRecord:
    image_id = "" if _blank(row.get("id")) else str(row["id"]).strip()
    if not image_id:
        raise ValueError("empty id")
    path = "" if _blank(row.get("path")) else str(row["path"]).strip()
    if not path:
        raise ValueError("empty path")

    label = str(row.get("label") or "").strip().upper()
    if label not in LABELS:
        raise ValueError(f"label must be P or N, got {row.get('label')!r}")

    view = str(row.get("view") or "").strip().upper()
    if view != "PA":
        raise ValueError(f"only PA views are accepted, got {row.get('view')!r}")

    pcr = _parse_bool(row.get("pcr_positive"))

    left, right = row.get("rale_left"), row.get("rale_right")
    if _blank(left) and _blank(right):
        rale = None
    elif _blank(left) or _blank(right):
        raise ValueError("rale_left and rale_right must be given together")
    else:
        try:
            rale = RaleScore(_parse_int(left, "rale_left"), _parse_int(right, "rale_right"))
        except InvalidRale as exc:
            raise ValueError(f"invalid RALE score: {exc}") from None

    severity = None if _blank(row.get("severity")) else SeverityLevel.parse(str(row["severity"]))

    if label == "N":
        if severity not in (None, SeverityLevel.NEGATIVE_CONTROL):
            raise ValueError(f"severity/label mismatch: N record with severity {severity.value}")
        severity = SeverityLevel.NEGATIVE_CONTROL
    else:
        if severity is SeverityLevel.NEGATIVE_CONTROL:
            raise ValueError("severity/label mismatch: P record labelled NegativeControl")
        if rale is not None:
            try:
                derived = severity_from_rale(rale, True if pcr is None else pcr)
            except InvalidCombination as exc:
                raise ValueError(str(exc)) from None
            if severity is not None and severity is not derived:
                raise ValueError(
                    f"severity/label mismatch: severity {severity.value} but RALE total "
                    f"{rale.total} implies {derived.value}"
                )
            severity = derived
        if severity is None:
            raise ValueError("P record needs a severity or RALE scores")

    return ImageRecord(image_id, path, label, severity, rale, view, pcr)


def _build_manifest(rows: Iterable[tuple[int, dict]], root: Path, check_files: bool) -> DatasetManifest:
    records: list[ImageRecord] = []
    diagnostics: list[tuple[int, str]] = []
    seen: dict[str, int] = {}
    for rownum, row in rows:
        try:
            rec = _record_from_row(row)
        except ValueError as exc:
            diagnostics.append((rownum, str(exc)))
            continue
        if rec.id in seen:
            diagnostics.append((rownum, f"duplicate id {rec.id!r} (first seen at row {seen[rec.id]})"))
            continue
        seen[rec.id] = rownum
        if check_files and not (root / rec.path).is_file():
            diagnostics.append((rownum, f"image file not found for id {rec.id!r}: {rec.path}"))
            continue
        records.append(rec)
    if diagnostics:
        raise InvalidManifest(diagnostics)
    return DatasetManifest(tuple(records), root)


def load_manifest(path, root=None, check_files: bool = True) -> DatasetManifest:
    """Load and validate a manifest CSV (or JSON-lines when the suffix is .jsonl).

    Image paths are resolved against `root`, defaulting to the manifest's directory.
    Every offending row is reported in a single InvalidManifest.
    """
    path = Path(path)
    root = path.parent if root is None else Path(root)
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        return load_manifest_jsonl(path, root, check_files)
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise InvalidManifest(f"missing column(s): {', '.join(missing)}")
        reader.fieldnames = header
        # row numbers count the header as row 1, matching spreadsheet views
        rows = ((i + 2, row) for i, row in enumerate(reader))
        return _build_manifest(rows, root, check_files)


def load_manifest_jsonl(path, root=None, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    root = path.parent if root is None else Path(root)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            missing = [c for c in ("id", "path", "label", "view") if c not in obj]
            if missing:
                raise InvalidManifest([(lineno, f"missing field(s): {', '.join(missing)}")])
            rows.append((lineno, obj))
    return _build_manifest(rows, root, check_files)


def write_manifest_csv(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for rec in manifest.records:
            row = rec.to_dict()
            if rec.label == "N":
                row["severity"] = ""
            writer.writerow({k: "" if v is None else v for k, v in row.items()})


# -- cross-validation plans --------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    repeat: int
    fold: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class CvPlan:
    repeats: int
    folds: int
    seed: int
    val_fraction: float
    repeat_seeds: tuple[tuple[int, ...], ...]
    assignments: tuple[FoldAssignment, ...]

    def __len__(self) -> int:
        return len(self.assignments)

    def get(self, repeat: int, fold: int) -> FoldAssignment:
        for a in self.assignments:
            if a.repeat == repeat and a.fold == fold:
                return a
        raise KeyError((repeat, fold))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "rng": PLAN_RNG,
            "repeats": self.repeats,
            "folds": self.folds,
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "repeat_seeds": [list(s) for s in self.repeat_seeds],
            "assignments": [
                {"repeat": a.repeat, "fold": a.fold, "train": list(a.train), "val": list(a.val), "test": list(a.test)}
                for a in self.assignments
            ],
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CvPlan":
        return cls(
            repeats=int(d["repeats"]),
            folds=int(d["folds"]),
            seed=int(d["seed"]),
            val_fraction=float(d.get("val_fraction", 0.10)),
            repeat_seeds=tuple(tuple(s) for s in d.get("repeat_seeds", ())),
            assignments=tuple(
                FoldAssignment(int(a["repeat"]), int(a["fold"]), tuple(a["train"]), tuple(a["val"]), tuple(a["test"]))
                for a in d["assignments"]
            ),
        )


def validation_size(n_train_portion: int, val_fraction: float) -> int:
    return max(1, round_half_up(val_fraction * n_train_portion))


def _allocate(total: int, counts: Sequence[int]) -> list[int]:
    """Split `total` across groups proportionally to `counts` (largest remainder)."""
    n = sum(counts)
    exact = [total * c / n for c in counts]
    alloc = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def make_cv_plan(
    manifest: DatasetManifest,
    repeats: int = 5,
    folds: int = 5,
    val_fraction: float = 0.10,
    seed: int = 0,
    seeds: Sequence[int] | None = None,
) -> CvPlan:
    """Build `repeats` independent stratified k-fold partitions with a validation holdout.

    Each repeat shuffles with its own PCG64 stream: SeedSequence([seed, r]) by default,
    or SeedSequence(seeds[r]) when an explicit per-repeat seed list is given.
    """
    if folds < 2:
        raise InsufficientData(f"folds must be >= 2, got {folds}")
    if repeats < 1:
        raise InsufficientData(f"repeats must be >= 1, got {repeats}")
    if seeds is not None and len(seeds) != repeats:
        raise ValueError(f"expected {repeats} repeat seeds, got {len(seeds)}")

    position = {r.id: i for i, r in enumerate(manifest.records)}
    label_of = {r.id: r.label for r in manifest.records}
    by_class = {lab: [r.id for r in manifest.records if r.label == lab] for lab in LABELS}
    for lab, ids in by_class.items():
        if len(ids) < folds:
            raise InsufficientData(f"class {lab} has {len(ids)} records, fewer than {folds} folds")

    repeat_seeds = tuple((int(seeds[r]),) if seeds is not None else (int(seed), r) for r in range(repeats))
    assignments = []
    for r in range(repeats):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(repeat_seeds[r]))))
        fold_of: dict[str, int] = {}
        offset = 0
        for lab in LABELS:
            ids = by_class[lab]
            for i, j in enumerate(rng.permutation(len(ids))):
                fold_of[ids[j]] = (offset + i) % folds
            # continue dealing where the previous class stopped so fold totals stay balanced
            offset += len(ids)

        for f in range(folds):
            test = [i for i in manifest.ids if fold_of[i] == f]
            portion = [i for i in manifest.ids if fold_of[i] != f]
            n_val = validation_size(len(portion), val_fraction)
            per_class = {lab: [i for i in portion if label_of[i] == lab] for lab in LABELS}
            alloc = _allocate(n_val, [len(per_class[lab]) for lab in LABELS])
            val = set()
            for lab, k in zip(LABELS, alloc):
                pool = per_class[lab]
                picked = rng.choice(len(pool), size=k, replace=False) if k else []
                val.update(pool[j] for j in picked)
            train = [i for i in portion if i not in val]
            assignments.append(
                FoldAssignment(r, f, tuple(train), tuple(sorted(val, key=position.__getitem__)), tuple(test))
            )

    return CvPlan(repeats, folds, int(seed), float(val_fraction), repeat_seeds, tuple(assignments))


def save_plan(plan: CvPlan, path) -> None:
    dump_json(plan.to_dict(), path)


def load_plan(path) -> CvPlan:
    with open(path, encoding="utf-8") as fh:
        return CvPlan.from_dict(json.load(fh))


__all__ = [
    "LABELS",
    "MANIFEST_COLUMNS",
    "SeverityLevel",
    "POSITIVE_LEVELS",
    "RaleScore",
    "ImageRecord",
    "DatasetManifest",
    "severity_from_rale",
    "load_manifest",
    "load_manifest_jsonl",
    "write_manifest_csv",
    "FoldAssignment",
    "CvPlan",
    "make_cv_plan",
    "validation_size",
    "save_plan",
    "load_plan",
]
