"""JSON persistence for datasets and run records, COCO ingestion and CSV export."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import __version__
from .geometry import BBox
from .synthworld import Dataset, Scene, SceneObject

SCHEMA_VERSION = 1
CSV_COLUMNS = ("dataset", "seed", "N_star", "n_star", "tau", "sigma_px", "AP", "AP50", "AR")


class DataError(ValueError):
    """Input file is malformed or semantically invalid."""


class SchemaVersionError(DataError):
    pass


# ---------------------------------------------------------------------------
# low-level helpers


def dumps(obj: Any) -> str:
    """Canonical JSON: shortest round-trip floats, no NaN, trailing newline."""
    return json.dumps(obj, allow_nan=False, indent=1, sort_keys=False) + "\n"


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path: str | os.PathLike) -> Any:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 text ({exc.reason} at byte {exc.start})") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno} (offset {exc.pos}): {exc.msg}"
        ) from None


def _require(d: Any, key: str, where: str) -> Any:
    if not isinstance(d, dict):
        raise DataError(f"{where}: expected an object, got {type(d).__name__}")
    if key not in d:
        raise DataError(f"{where}: missing key {key!r}")
    return d[key]


def _check_version(doc: dict, where: str) -> None:
    version = _require(doc, "schema_version", where)
    if not isinstance(version, int):
        raise DataError(f"{where}: schema_version must be an integer")
    if version > SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{where}: schema version {version} is newer than supported version {SCHEMA_VERSION}"
        )
    if version < 1:
        raise SchemaVersionError(f"{where}: unknown schema version {version}")


def _box(values: Any, class_id: Any, where: str, score: float = 1.0) -> BBox:
    if not isinstance(values, (list, tuple)) or len(values) != 4:
        raise DataError(f"{where}: bbox must be a list of 4 numbers")
    try:
        box = BBox(*(float(v) for v in values), class_id=int(class_id), score=float(score))
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: bad bbox {values!r} ({exc})") from None
    if not box.is_valid():
        raise DataError(f"{where}: invalid bbox {list(values)!r}")
    return box


# ---------------------------------------------------------------------------
# datasets


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "meta": {
            "name": ds.name,
            "width": ds.width,
            "height": ds.height,
            "layout": ds.layout,
            "seed": ds.seed,
        },
        "scenes": [
            {
                "scene_id": s.scene_id,
                "width": s.width,
                "height": s.height,
                "structure": s.structure,
                "jitter": s.jitter,
                "objects": [
                    {
                        "bbox": [o.box.cx, o.box.cy, o.box.w, o.box.h],
                        "class_id": o.box.class_id,
                        "visibility": o.visibility,
                    }
                    for o in s.objects
                ],
            }
            for s in ds.scenes
        ],
    }


def dataset_from_dict(doc: dict, where: str = "dataset") -> Dataset:
    _check_version(doc, where)
    meta = _require(doc, "meta", where)
    for key in ("name", "width", "height", "layout", "seed"):
        _require(meta, key, f"{where}.meta")
    width, height = int(meta["width"]), int(meta["height"])
    if width <= 0 or height <= 0:
        raise DataError(f"{where}.meta: width and height must be positive")
    scenes = []
    for i, sd in enumerate(_require(doc, "scenes", where)):
        at = f"{where}.scenes[{i}]"
        objects = []
        for j, od in enumerate(_require(sd, "objects", at)):
            oat = f"{at}.objects[{j}]"
            box = _box(_require(od, "bbox", oat), od.get("class_id", 0), oat)
            vis = float(od.get("visibility", 1.0))
            if not 0.0 <= vis <= 1.0:
                raise DataError(f"{oat}: visibility {vis} outside [0, 1]")
            objects.append(SceneObject(box, vis))
        scenes.append(
            Scene(
                str(_require(sd, "scene_id", at)),
                int(sd.get("width", width)),
                int(sd.get("height", height)),
                tuple(objects),
                str(sd.get("structure", meta["layout"])),
                float(sd.get("jitter", 0.0)),
            )
        )
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise DataError(f"{where}: duplicate scene ids")
    return Dataset(str(meta["name"]), width, height, str(meta["layout"]), int(meta["seed"]), tuple(scenes))


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    atomic_write(path, dumps(dataset_to_dict(ds)))


def load_dataset(path: str | os.PathLike) -> Dataset:
    return dataset_from_dict(read_json(path), str(path))


def dataset_digest(ds: Dataset) -> str:
    blob = json.dumps(dataset_to_dict(ds), sort_keys=True, allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# COCO ingestion


def load_coco(path: str | os.PathLike) -> list[Scene]:
    """Read COCO-style annotations; boxes become center fractions of each image."""
    where = str(path)
    doc = read_json(path)
    for key in ("images", "annotations", "categories"):
        _require(doc, key, where)
    cats = sorted(int(_require(c, "id", f"{where}.categories[{i}]")) for i, c in enumerate(doc["categories"]))
    class_of = {cid: k for k, cid in enumerate(cats)}

    images: dict[int, dict] = {}
    order = []
    for i, im in enumerate(doc["images"]):
        at = f"{where}.images[{i}]"
        iid = int(_require(im, "id", at))
        w, h = _require(im, "width", at), _require(im, "height", at)
        if not (isinstance(w, (int, float)) and isinstance(h, (int, float))) or w <= 0 or h <= 0:
            raise DataError(f"{at}: image {iid} has zero or invalid dimensions {w}x{h}")
        if iid in images:
            raise DataError(f"{at}: duplicate image id {iid}")
        images[iid] = {"w": float(w), "h": float(h), "name": im.get("file_name", str(iid)), "objects": []}
        order.append(iid)

    if not doc["annotations"]:
        warnings.warn(f"{where}: annotations list is empty; scenes will have no objects", stacklevel=2)
    for i, ann in enumerate(doc["annotations"]):
        at = f"{where}.annotations[{i}]"
        iid = int(_require(ann, "image_id", at))
        if iid not in images:
            raise DataError(f"{at}: unknown image_id {iid}")
        cid = int(_require(ann, "category_id", at))
        if cid not in class_of:
            raise DataError(f"{at}: unknown category_id {cid}")
        bbox = _require(ann, "bbox", at)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise DataError(f"{at}: bbox must be [x, y, w, h]")
        x, y, bw, bh = (float(v) for v in bbox)
        im = images[iid]
        box = _box(
            [(x + bw / 2) / im["w"], (y + bh / 2) / im["h"], bw / im["w"], bh / im["h"]],
            class_of[cid],
            at,
        )
        im["objects"].append(SceneObject(box, 1.0))

    return [
        Scene(str(images[i]["name"]), int(images[i]["w"]), int(images[i]["h"]), tuple(images[i]["objects"]), "external")
        for i in order
    ]


# ---------------------------------------------------------------------------
# run records

_VOLATILE = ("created_at", "wall_clock_s", "run_id")


@dataclass(frozen=True)
class RunRecord:
    """Everything needed to audit and replay a sampling run."""

    config: dict
    dataset: dict
    runs: tuple = ()
    metrics: dict | None = None
    ellipses: dict | None = None
    status: str = "done"
    error: dict | None = None
    extra: dict = field(default_factory=dict)
    created_at: str = ""
    wall_clock_s: float = 0.0
    run_id: str | None = None
    artifact_version: str = __version__

    def to_dict(self) -> dict:
        from .experiment import SceneRun

        return {
            "schema_version": SCHEMA_VERSION,
            "artifact_version": self.artifact_version,
            "run_id": self.run_id,
            "status": self.status,
            "created_at": self.created_at,
            "wall_clock_s": self.wall_clock_s,
            "config": self.config,
            "dataset": self.dataset,
            "runs": [r.to_dict() if isinstance(r, SceneRun) else r for r in self.runs],
            "metrics": self.metrics,
            "ellipses": self.ellipses,
            "error": self.error,
            "extra": self.extra,
        }

    def canonical(self) -> dict:
        """The record without wall-clock dependent fields."""
        d = self.to_dict()
        for key in _VOLATILE:
            d.pop(key)
        return d

    @classmethod
    def from_dict(cls, doc: dict, where: str = "run record") -> "RunRecord":
        from .experiment import SceneRun

        _check_version(doc, where)
        try:
            runs = tuple(SceneRun.from_dict(r) for r in doc.get("runs", []))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{where}: malformed runs ({exc})") from None
        return cls(
            config=_require(doc, "config", where),
            dataset=_require(doc, "dataset", where),
            runs=runs,
            metrics=doc.get("metrics"),
            ellipses=doc.get("ellipses"),
            status=doc.get("status", "done"),
            error=doc.get("error"),
            extra=doc.get("extra", {}),
            created_at=doc.get("created_at", ""),
            wall_clock_s=float(doc.get("wall_clock_s", 0.0)),
            run_id=doc.get("run_id"),
            artifact_version=doc.get("artifact_version", __version__),
        )


def save_record(rec: RunRecord, path: str | os.PathLike) -> None:
    atomic_write(path, dumps(rec.to_dict()))


def load_record(path: str | os.PathLike) -> RunRecord:
    return RunRecord.from_dict(read_json(path), str(path))


def dataset_ref(ds: Dataset, entropy: float, path: str | None = None) -> dict:
    ref = {
        "name": ds.name,
        "layout": ds.layout,
        "seed": ds.seed,
        "num_scenes": len(ds.scenes),
        "digest": dataset_digest(ds),
        "entropy": entropy,
    }
    if path is not None:
        ref["path"] = str(path)
    return ref


def replay(rec: RunRecord, ds: Dataset) -> list:
    """Re-execute every scene of ``rec`` from its embedded config and exemplars."""
    from .experiment import ExperimentConfig, sample_scene

    if rec.dataset.get("digest") not in (None, dataset_digest(ds)):
        raise DataError("dataset does not match the record's digest")
    cfg = ExperimentConfig.from_dict(rec.config)
    index = {s.scene_id: i for i, s in enumerate(ds.scenes)}
    entropy = float(rec.dataset["entropy"])
    out = []
    for run in rec.runs:
        if run.scene_id not in index:
            raise DataError(f"scene {run.scene_id!r} not in dataset")
        i = index[run.scene_id]
        out.append(sample_scene(ds.scenes[i], i, cfg, entropy, run.exemplar_ids, run.exemplars))
    return out


def verify_replay(rec: RunRecord, ds: Dataset) -> bool:
    """True when replaying reproduces the stored detections bit-exactly."""
    fresh = replay(rec, ds)
    return [r.to_dict() for r in fresh] == [r.to_dict() for r in rec.runs]


# ---------------------------------------------------------------------------
# CSV


def write_csv(rows: Iterable[dict], path: str | os.PathLike | None, stream=None) -> None:
    """Write result rows with the fixed column order; ``path=None`` uses ``stream``."""
    rows = list(rows)
    if path is None:
        _write_rows(rows, stream)
        return
    import io as _io

    buf = _io.StringIO()
    _write_rows(rows, buf)
    atomic_write(path, buf.getvalue())


def _write_rows(rows: Sequence[dict], stream) -> None:
    writer = csv.DictWriter(stream, fieldnames=CSV_COLUMNS, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
