"""Dataset manifests: a JSON document ``{"records": [...]}`` whose paths are
relative to the manifest's directory."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..exceptions import ContractError, DataIOError

SPLITS = ("train", "val", "test")


@dataclass
class Record:
    id: str
    case_id: str
    image: str
    label: str
    split: str
    attn: str | None = None
    spacing: float = 1.0


@dataclass
class Manifest:
    records: list[Record]
    root: Path = field(default_factory=Path)
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def path(self, rel: str) -> Path:
        return self.root / rel

    def validate(self, check_files: bool = True):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ContractError("manifest record ids are not unique")
        for r in self.records:
            if r.split not in SPLITS:
                raise ContractError(f"record {r.id}: unknown split {r.split!r}")
            if check_files:
                for rel in (r.image, r.label, r.attn):
                    if rel is not None and not self.path(rel).exists():
                        raise DataIOError(f"record {r.id}: missing file {self.path(rel)}")
        return self

    def to_json(self) -> str:
        doc = dict(self.meta)
        doc["records"] = [asdict(r) for r in self.records]
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataIOError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataIOError(f"manifest {path} is not valid JSON: {e}") from e
    records = [Record(**r) for r in doc.pop("records")]
    return Manifest(records, path.parent, doc).validate(check_files)


def save_manifest(manifest: Manifest, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.to_json(), encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot write manifest {path}: {e}") from e


def rebase_record(r: Record, old_root, new_root, attn_rel: str | None) -> Record:
    """Copy of ``r`` with image/label paths made relative to ``new_root`` and
    the attention path replaced by ``attn_rel``."""
    old_root = Path(old_root).resolve()
    new_root = Path(new_root).resolve()

    def rel(p):
        return Path(os.path.relpath(old_root / p, new_root)).as_posix()

    return Record(id=r.id, case_id=r.case_id, image=rel(r.image), label=rel(r.label), split=r.split,
                  attn=attn_rel, spacing=r.spacing)
