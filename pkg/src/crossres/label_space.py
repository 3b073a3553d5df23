"""Source/target label spaces and the many-to-one class unification between them.

Source ids follow the listing order of the land-cover product classes starting
at 1; id 0 is a reserved no-data class that is never scored or supervised.
Target ids are contiguous from 0 so they can index a confusion matrix directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

SOURCE_IGNORE_ID = 0
TARGET_IGNORE_ID = 255

# (source class name, target class name) in listing order
_DEFAULT_ROWS: Tuple[Tuple[str, str], ...] = (
    ("Developed open space", "Built-up"),
    ("Developed low", "Built-up"),
    ("Developed medium", "Built-up"),
    ("Developed high", "Built-up"),
    ("Deciduous forest", "Tree canopy"),
    ("Evergreen forest", "Tree canopy"),
    ("Mixed forest", "Tree canopy"),
    ("Woody wetland", "Tree canopy"),
    ("Barren land", "Tree canopy"),
    ("Shrub/Scrub", "Low vegetation"),
    ("Grassland", "Low vegetation"),
    ("Pasture/Har", "Low vegetation"),
    ("Cultivated crops", "Low vegetation"),
    ("Herbaceous wetlands", "Water"),
    ("Open water", "Water"),
)
TARGET_NAMES: Tuple[str, ...] = ("Built-up", "Tree canopy", "Low vegetation", "Water")


class LabelError(ValueError):
    """Raised when a label raster contains values outside its label space."""


@dataclass(frozen=True)
class LabelSpace:
    name: str
    class_ids: Tuple[int, ...]
    class_names: Tuple[str, ...]
    ignore_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError(f"{self.name}: duplicate class ids")
        if any(c < 0 for c in self.class_ids):
            raise ValueError(f"{self.name}: class ids must be non-negative")
        if len(self.class_names) != len(self.class_ids):
            raise ValueError(f"{self.name}: class_names and class_ids differ in length")
        if self.ignore_id is not None and self.ignore_id in self.class_ids:
            raise ValueError(f"{self.name}: ignore_id {self.ignore_id} collides with a class id")

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def id_of(self, name: str) -> int:
        try:
            return self.class_ids[self.class_names.index(name)]
        except ValueError:
            raise KeyError(f"{self.name}: no class named {name!r}") from None

    def name_of(self, class_id: int) -> str:
        try:
            return self.class_names[self.class_ids.index(int(class_id))]
        except ValueError:
            raise KeyError(f"{self.name}: no class with id {class_id}") from None

    def check(self, labels: np.ndarray) -> None:
        """Raise LabelError naming the first pixel whose value is not in this space."""
        allowed = np.asarray(self.class_ids + ((self.ignore_id,) if self.ignore_id is not None else ()))
        bad = ~np.isin(labels, allowed)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise LabelError(
                f"label value {labels[idx]} at pixel {idx} is not in label space {self.name!r}"
            )

    def to_index(self, labels: np.ndarray, ignore_index: int = -1) -> np.ndarray:
        """Map class ids to contiguous positions 0..C-1 (ignore_id -> ignore_index)."""
        self.check(labels)
        lut_size = max(self.class_ids + ((self.ignore_id or 0),)) + 1
        lut = np.full(lut_size, ignore_index, dtype=np.int64)
        lut[list(self.class_ids)] = np.arange(self.num_classes)
        return lut[labels]

    def from_index(self, index: np.ndarray) -> np.ndarray:
        ids = np.asarray(self.class_ids, dtype=np.int64)
        return ids[index]


@dataclass(frozen=True)
class UnificationTable:
    source: LabelSpace
    target: LabelSpace
    mapping: Dict[int, int] = field(default_factory=dict)

    @property
    def name_mapping(self) -> Dict[str, str]:
        return {
            self.source.name_of(s): self.target.name_of(t) for s, t in self.mapping.items()
        }

    def preimage(self, target_id: int) -> List[int]:
        return [s for s in self.source.class_ids if self.mapping.get(s) == target_id]

    def lookup_table(self) -> np.ndarray:
        """Dense array lut with lut[source_id] = target_id (ignore -> target ignore)."""
        size = max(self.source.class_ids + ((self.source.ignore_id or 0),)) + 1
        fill = self.target.ignore_id if self.target.ignore_id is not None else -1
        lut = np.full(size, fill, dtype=np.int64)
        for s, t in self.mapping.items():
            lut[s] = t
        return lut

    def to_text(self) -> str:
        return "".join(
            f"{self.source.name_of(s)}\t{self.target.name_of(self.mapping[s])}\n"
            for s in self.source.class_ids
            if s in self.mapping
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def default_source_space() -> LabelSpace:
    names = [s for s, _ in _DEFAULT_ROWS]
    return LabelSpace("nlcd", tuple(range(1, len(names) + 1)), tuple(names), SOURCE_IGNORE_ID)


def default_target_space() -> LabelSpace:
    return LabelSpace("unified", tuple(range(len(TARGET_NAMES))), TARGET_NAMES, TARGET_IGNORE_ID)


def default_table() -> UnificationTable:
    source, target = default_source_space(), default_target_space()
    mapping = {source.id_of(s): target.id_of(t) for s, t in _DEFAULT_ROWS}
    return UnificationTable(source, target, mapping)


def table_from_text(text: str, target: Optional[LabelSpace] = None) -> UnificationTable:
    """Parse `source_name<TAB>target_name` lines.

    Source ids are assigned by line order from 1 (0 = no-data). Target ids
    follow `target` when given, otherwise first-appearance order from 0.
    """
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'source<TAB>target', got {line!r}")
        rows.append((parts[0].strip(), parts[1].strip()))
    if target is None:
        names: List[str] = []
        for _, t in rows:
            if t not in names:
                names.append(t)
        target = LabelSpace("unified", tuple(range(len(names))), tuple(names), TARGET_IGNORE_ID)
    source = LabelSpace(
        "source", tuple(range(1, len(rows) + 1)), tuple(s for s, _ in rows), SOURCE_IGNORE_ID
    )
    mapping = {source.id_of(s): target.id_of(t) for s, t in rows}
    return UnificationTable(source, target, mapping)


def load_table(path, target: Optional[LabelSpace] = None) -> UnificationTable:
    return table_from_text(Path(path).read_text(), target)


def validate_table(table: UnificationTable) -> Tuple[bool, List[str]]:
    violations = []
    for s in table.source.class_ids:
        t = table.mapping.get(s)
        if t is None:
            violations.append(f"unmapped: {table.source.name_of(s)}")
        elif t not in table.target.class_ids:
            violations.append(f"invalid target for {table.source.name_of(s)}: {t}")
    extra = set(table.mapping) - set(table.source.class_ids)
    violations += [f"unknown source id: {s}" for s in sorted(extra)]
    hit = set(table.mapping.values())
    violations += [
        f"unreached: {table.target.name_of(t)}" for t in table.target.class_ids if t not in hit
    ]
    return not violations, violations


def unify(labels: np.ndarray, table: UnificationTable) -> np.ndarray:
    """Map a source-space label raster to the target space, pixel by pixel."""
    labels = np.asarray(labels)
    table.source.check(labels)
    return table.lookup_table()[labels]


def inverse_unify(target_labels: np.ndarray, table: UnificationTable, seed) -> np.ndarray:
    """Replace every target class by a uniformly drawn member of its preimage."""
    target_labels = np.asarray(target_labels)
    table.target.check(target_labels)
    rng = np.random.default_rng(seed)
    fill = table.source.ignore_id if table.source.ignore_id is not None else -1
    out = np.full(target_labels.shape, fill, dtype=np.int64)
    # one draw per pixel regardless of class keeps the stream independent of the class layout
    u = rng.random(target_labels.shape)
    for t in table.target.class_ids:
        pre = table.preimage(t)
        sel = target_labels == t
        if not sel.any():
            continue
        if not pre:
            raise ValueError(f"target class {table.target.name_of(t)!r} has an empty preimage")
        pick = np.minimum((u[sel] * len(pre)).astype(np.int64), len(pre) - 1)
        out[sel] = np.asarray(pre)[pick]
    return out


def permute_target(table: UnificationTable, perm: Sequence[int]) -> UnificationTable:
    """Relabel target ids by `perm` (new_id = perm[old_position])."""
    ids = table.target.class_ids
    remap = {ids[i]: perm[i] for i in range(len(ids))}
    order = sorted(range(len(ids)), key=lambda i: perm[i])
    target = LabelSpace(
        table.target.name,
        tuple(perm[i] for i in order),
        tuple(table.target.class_names[i] for i in order),
        table.target.ignore_id,
    )
    return UnificationTable(table.source, target, {s: remap[t] for s, t in table.mapping.items()})
