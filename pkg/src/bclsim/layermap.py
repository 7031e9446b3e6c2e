"""Layer-space view of model parameters.

A model is an ordered list of named layers (weights and biases kept as
separate entries, the way ``fc1.weight`` / ``fc1.bias`` appear in a state
dict).  All attacks and defenses in this package move models around in this
representation, so the algebra here (substitution, linear combination,
flattening) is the common currency of the whole simulator.

Values are stored as flat float32 arrays and treated as immutable: every
operation returns a fresh LayerMap and never touches its inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ArchitectureError",
    "LayerEntry",
    "LayerMap",
    "SelectionMask",
    "substitute_layers",
    "linear_combine",
    "average_layermaps",
    "save_checkpoint",
    "load_checkpoint",
]


class ArchitectureError(ValueError):
    """Two LayerMaps (or a LayerMap and an architecture) do not line up."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32).reshape(-1)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class LayerEntry:
    """One named parameter tensor, stored flat."""

    name: str
    kind: str  # "weight" | "bias"
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "values", _frozen(self.values))
        if self.kind not in ("weight", "bias"):
            raise ValueError(f"unknown entry kind {self.kind!r}")
        if int(np.prod(self.shape)) != self.values.size:
            raise ValueError(
                f"entry {self.name!r}: shape {self.shape} does not match "
                f"{self.values.size} values"
            )

    def reshaped(self) -> np.ndarray:
        return self.values.reshape(self.shape)


class LayerMap:
    """Ordered, immutable collection of LayerEntry objects."""

    def __init__(self, arch_id: str, entries: Iterable[LayerEntry]):
        self.arch_id = arch_id
        self.entries: tuple[LayerEntry, ...] = tuple(entries)
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names in LayerMap")
        self._index = {n: i for i, n in enumerate(names)}

    # -- basic collection protocol ------------------------------------
    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, key) -> LayerEntry:
        if isinstance(key, str):
            return self.entries[self._index[key]]
        return self.entries[key]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    def index_of(self, name: str) -> int:
        return self._index[name]

    def num_params(self) -> int:
        return sum(e.values.size for e in self.entries)

    # -- conversions ---------------------------------------------------
    def arrays(self) -> list[np.ndarray]:
        """Per-entry views reshaped to their natural shapes (read-only)."""
        return [e.reshaped() for e in self.entries]

    def to_vector(self, dtype=np.float32) -> np.ndarray:
        return np.concatenate([e.values for e in self.entries]).astype(dtype, copy=False)

    def replace(self, name: str, values: np.ndarray) -> "LayerMap":
        entries = list(self.entries)
        i = self._index[name]
        old = entries[i]
        entries[i] = LayerEntry(old.name, old.kind, old.shape, values)
        return LayerMap(self.arch_id, entries)

    @classmethod
    def from_arrays(cls, template: "LayerMap", arrays: Sequence[np.ndarray]) -> "LayerMap":
        if len(arrays) != len(template):
            raise ArchitectureError("array count does not match template")
        entries = []
        for e, a in zip(template.entries, arrays):
            a = np.asarray(a)
            if a.size != e.values.size:
                raise ArchitectureError(
                    f"entry {e.name!r}: expected {e.values.size} values, got {a.size}"
                )
            entries.append(LayerEntry(e.name, e.kind, e.shape, a))
        return cls(template.arch_id, entries)

    @classmethod
    def from_vector(cls, template: "LayerMap", vec: np.ndarray) -> "LayerMap":
        vec = np.asarray(vec).reshape(-1)
        if vec.size != template.num_params():
            raise ArchitectureError("vector length does not match template")
        out, off = [], 0
        for e in template.entries:
            out.append(vec[off : off + e.values.size])
            off += e.values.size
        return cls.from_arrays(template, out)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerMap):
            return NotImplemented
        return (
            self.arch_id == other.arch_id
            and self.names == other.names
            and all(
                a.shape == b.shape and np.array_equal(a.values, b.values)
                for a, b in zip(self.entries, other.entries)
            )
        )

    def __repr__(self) -> str:
        return f"LayerMap({self.arch_id!r}, {len(self)} layers, {self.num_params()} params)"


def check_aligned(*maps: LayerMap) -> None:
    ref = maps[0]
    for m in maps[1:]:
        if m.arch_id != ref.arch_id or m.names != ref.names:
            raise ArchitectureError(
                f"misaligned LayerMaps: {ref.arch_id}/{len(ref)} vs {m.arch_id}/{len(m)}"
            )
        for a, b in zip(ref.entries, m.entries):
            if a.shape != b.shape:
                raise ArchitectureError(f"entry {a.name!r}: shape {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class SelectionMask:
    """Per-layer boolean selection vector, aligned to LayerMap order."""

    flags: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "flags", tuple(bool(f) for f in self.flags))

    @classmethod
    def none(cls, n_layers: int) -> "SelectionMask":
        return cls((False,) * n_layers)

    @classmethod
    def all(cls, n_layers: int) -> "SelectionMask":
        return cls((True,) * n_layers)

    @classmethod
    def from_names(cls, model: LayerMap, names: Iterable[str]) -> "SelectionMask":
        wanted = set(names)
        unknown = wanted - set(model.names)
        if unknown:
            raise ArchitectureError(f"mask names not in model: {sorted(unknown)}")
        return cls(tuple(n in wanted for n in model.names))

    def selected_names(self, model: LayerMap) -> list[str]:
        return [n for n, f in zip(model.names, self.flags) if f]

    def count(self) -> int:
        return sum(self.flags)

    def __len__(self) -> int:
        return len(self.flags)


def _check_mask(model: LayerMap, mask: SelectionMask) -> None:
    if len(mask) != len(model):
        raise ArchitectureError(
            f"mask has {len(mask)} flags for a {len(model)}-layer model"
        )


def substitute_layers(base: LayerMap, donor: LayerMap, mask: SelectionMask) -> LayerMap:
    """Layer j of the result comes from donor if mask[j] else from base."""
    check_aligned(base, donor)
    _check_mask(base, mask)
    entries = [
        donor.entries[j] if mask.flags[j] else base.entries[j]
        for j in range(len(base))
    ]
    return LayerMap(base.arch_id, entries)


def linear_combine(a: LayerMap, b: LayerMap, alpha: float, beta: float) -> LayerMap:
    """Per-parameter alpha*a + beta*b (accumulated in float64, stored float32)."""
    check_aligned(a, b)
    arrays = [
        (np.float64(alpha) * ea.values.astype(np.float64)
         + np.float64(beta) * eb.values.astype(np.float64)).astype(np.float32)
        for ea, eb in zip(a.entries, b.entries)
    ]
    return LayerMap.from_arrays(a, arrays)


def average_layermaps(models: Sequence[LayerMap]) -> LayerMap:
    """Per-parameter arithmetic mean of aligned models."""
    if not models:
        raise ValueError("cannot average an empty list of models")
    check_aligned(*models)
    arrays = []
    for j in range(len(models[0])):
        acc = np.zeros(models[0].entries[j].values.size, dtype=np.float64)
        for m in models:
            acc += m.entries[j].values
        arrays.append((acc / len(models)).astype(np.float32))
    return LayerMap.from_arrays(models[0], arrays)


# -- checkpoint format -------------------------------------------------
#
# magic "BCLM" | u32 version | u32 header length | header JSON (utf-8)
# | little-endian float32 payload.  The header records arch id plus
# (name, kind, shape, offset, size) per entry.  Round-trips bit-exactly.

_MAGIC = b"BCLM"
_VERSION = 1


def save_checkpoint(model: LayerMap, path) -> None:
    header = {
        "arch_id": model.arch_id,
        "entries": [
            {"name": e.name, "kind": e.kind, "shape": list(e.shape)}
            for e in model.entries
        ],
    }
    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(head)))
        f.write(head)
        for e in model.entries:
            f.write(e.values.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> LayerMap:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a bclsim checkpoint (magic {magic!r})")
        version, head_len = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(head_len).decode("utf-8"))
        entries = []
        for meta in header["entries"]:
            n = int(np.prod(meta["shape"])) if meta["shape"] else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError("truncated checkpoint payload")
            vals = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            entries.append(LayerEntry(meta["name"], meta["kind"], tuple(meta["shape"]), vals))
    return LayerMap(header["arch_id"], entries)
