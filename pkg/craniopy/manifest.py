"""Line-delimited JSON manifests: one sample record per line."""
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ManifestError
from .models import DatasetManifest, Landmark, Modality, SampleRecord, Split, View

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_REQUIRED_FIELDS = ("id", "modality", "view", "landmarks", "width", "height")
_OPTIONAL_REFS = ("image_ref", "patch_features_ref", "global_feature_ref")


def _resolve_ref(ref: Optional[str], base_dir: Optional[Path]) -> Optional[str]:
    if ref is None or base_dir is None:
        return ref
    return str((base_dir / ref).resolve())


def record_from_dict(data: dict, line: Optional[int] = None, base_dir: Optional[Path] = None) -> SampleRecord:
    """Build a record from one decoded manifest line.

    Relative file references are resolved against `base_dir` when given.
    """
    if not isinstance(data, dict):
        raise ManifestError("record must be a JSON object", line)
    missing = [name for name in _REQUIRED_FIELDS if name not in data]
    if missing:
        raise ManifestError(f"missing field(s): {', '.join(missing)}", line)

    try:
        modality = Modality(data["modality"])
    except ValueError:
        raise ManifestError(f"unknown modality {data['modality']!r}", line)
    try:
        view = View(data["view"])
    except ValueError:
        raise ManifestError(f"unknown view {data['view']!r}", line)

    width, height = float(data["width"]), float(data["height"])
    raw_landmarks = data["landmarks"]
    if not isinstance(raw_landmarks, list) or not raw_landmarks:
        raise ManifestError("landmarks must be a non-empty list of [x, y, v] triples", line)

    landmarks = []
    for i, triple in enumerate(raw_landmarks):
        if not isinstance(triple, (list, tuple)) or len(triple) != 3:
            raise ManifestError(f"landmark {i} is not an [x, y, v] triple", line)
        try:
            landmark = Landmark(float(triple[0]), float(triple[1]), int(triple[2]))
        except ManifestError as e:
            raise ManifestError(f"landmark {i}: {e}", line)
        if landmark.visible and not landmark.in_bounds(width, height):
            raise ManifestError(
                f"landmark {i} at ({landmark.x}, {landmark.y}) outside image bounds {width}x{height}",
                line,
            )
        landmarks.append(landmark)

    return SampleRecord(
        id=str(data["id"]),
        modality=modality,
        view=view,
        landmarks=landmarks,
        width=width,
        height=height,
        **{name: _resolve_ref(data.get(name), base_dir) for name in _OPTIONAL_REFS},
    )


def record_to_dict(record: SampleRecord, split: Split) -> dict:
    data = {
        "id": record.id,
        "modality": record.modality.value,
        "view": record.view.value,
        "split": split.value,
        "width": record.width,
        "height": record.height,
        "landmarks": [[lm.x, lm.y, lm.v] for lm in record.landmarks],
    }
    for name in _OPTIONAL_REFS:
        value = getattr(record, name)
        if value is not None:
            data[name] = value
    return data


def validate_records(records: Sequence[SampleRecord], lines: Optional[Sequence[int]] = None) -> Dict[View, int]:
    """Check landmark-count consistency and id uniqueness.

    Returns the landmark count per view.
    """
    counts: Dict[View, int] = {}
    seen = set()
    for i, record in enumerate(records):
        line = lines[i] if lines is not None else None
        expected = counts.setdefault(record.view, record.n_landmarks)
        if record.n_landmarks != expected:
            raise ManifestError(
                f"inconsistent landmark count: {record.n_landmarks} for {record.view.value} "
                f"record {record.id!r}, expected {expected}",
                line,
            )
        if record.key in seen:
            raise ManifestError(
                f"duplicate id {record.id!r} for modality {record.modality.value}, view {record.view.value}",
                line,
            )
        seen.add(record.key)
    return counts


def load_manifest(path: PathLike) -> DatasetManifest:
    """Load and validate a manifest file."""
    records: List[SampleRecord] = []
    lines: List[int] = []
    splits = set()
    base_dir = Path(path).parent

    with open(path, "r", encoding="utf-8") as handle:
        for line_no, text in enumerate(handle, start=1):
            if not text.strip():
                continue
            try:
                data = json.loads(text)
            except json.JSONDecodeError as e:
                raise ManifestError(f"parse error: {e.msg}", line_no)
            records.append(record_from_dict(data, line_no, base_dir))
            lines.append(line_no)
            if isinstance(data, dict) and "split" in data:
                try:
                    splits.add(Split(data["split"]))
                except ValueError:
                    raise ManifestError(f"unknown split {data['split']!r}", line_no)

    if not records:
        raise ManifestError(f"empty manifest: {path}")
    if len(splits) > 1:
        raise ManifestError(f"mixed splits in one manifest: {sorted(s.value for s in splits)}")

    counts = validate_records(records, lines)
    manifest = DatasetManifest(
        records=records,
        split=splits.pop() if splits else Split.TRAIN,
        n_landmarks_front=counts.get(View.FRONT),
        n_landmarks_side=counts.get(View.SIDE),
    )
    logger.debug(f"Loaded {len(records)} records from {path} ({manifest.split.value})")
    return manifest


def write_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in manifest.records:
            handle.write(json.dumps(record_to_dict(record, manifest.split), sort_keys=True))
            handle.write("\n")


def merge_manifests(manifests: Iterable[DatasetManifest]) -> DatasetManifest:
    manifests = list(manifests)
    if not manifests:
        raise ManifestError("no manifests to merge")
    splits = sorted({m.split.value for m in manifests})
    if len(splits) > 1:
        raise ManifestError(f"cannot merge manifests of different splits: {splits}")
    records = [r for m in manifests for r in m.records]
    counts = validate_records(records)
    return DatasetManifest(
        records=records,
        split=manifests[0].split,
        n_landmarks_front=counts.get(View.FRONT),
        n_landmarks_side=counts.get(View.SIDE),
    )


def check_disjoint(train: DatasetManifest, other: DatasetManifest) -> None:
    """Refuse an evaluation manifest that shares identities with the training one."""
    shared = sorted(set(train.ids()) & set(other.ids()))
    if shared:
        preview = ", ".join(shared[:5]) + (", ..." if len(shared) > 5 else "")
        raise ManifestError(
            f"{len(shared)} identities appear in both the training and the {other.split.value} manifests: {preview}"
        )


def pair_records(
    manifest: DatasetManifest, require_complete: bool = True
) -> Dict[View, List[Tuple[SampleRecord, SampleRecord]]]:
    """Group records into (A, B) pairs of the same identity, per view.

    Pairs are ordered by id. With `require_complete`, an identity present in
    only one modality is an error; otherwise it is skipped with a warning.
    """
    by_key: Dict[Tuple[View, str], Dict[Modality, SampleRecord]] = defaultdict(dict)
    for record in manifest.records:
        by_key[(record.view, record.id)][record.modality] = record

    pairs: Dict[View, List[Tuple[SampleRecord, SampleRecord]]] = defaultdict(list)
    for (view, identity), found in sorted(by_key.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        if len(found) != 2:
            present = next(iter(found))
            message = (
                f"unpaired identity {identity!r} ({view.value}): "
                f"present in modality {present.value} only"
            )
            if require_complete:
                raise ManifestError(message)
            logger.warning(message)
            continue
        pairs[view].append((found[Modality.A], found[Modality.B]))
    return dict(pairs)


def split_identities(
    ids: Sequence[str],
    ratios: Sequence[float] = (0.7, 0.2, 0.1),
    seed: int = 0,
    counts: Optional[Sequence[int]] = None,
) -> Dict[Split, List[str]]:
    """Assign identities to disjoint train/val/test splits.

    Either `ratios` (normalised) or explicit `counts` summing to len(ids).
    """
    unique = sorted(set(ids))
    rng = np.random.default_rng(seed)
    order = [unique[i] for i in rng.permutation(len(unique))]

    if counts is None:
        weights = np.asarray(ratios, dtype=np.float64)
        if weights.shape != (3,) or np.any(weights < 0) or weights.sum() <= 0:
            raise ManifestError(f"invalid split ratios {list(ratios)}")
        weights = weights / weights.sum()
        n_train = int(round(weights[0] * len(order)))
        n_val = int(round(weights[1] * len(order)))
        n_val = min(n_val, len(order) - n_train)
        counts = (n_train, n_val, len(order) - n_train - n_val)
    elif sum(counts) != len(order) or len(counts) != 3 or min(counts) < 0:
        raise ManifestError(f"split counts {list(counts)} do not cover {len(order)} identities")

    result: Dict[Split, List[str]] = {}
    start = 0
    for split, count in zip(Split, counts):
        result[split] = sorted(order[start:start + count])
        start += count
    return result
