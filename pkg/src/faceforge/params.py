"""Facial parameter layout: grouped continuous knobs plus one-hot styles."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class ParameterError(ValueError):
    """A vector violates its layout: range, simplex or dimension trouble."""


@dataclass(frozen=True)
class ParameterSpec:
    """Ordered continuous groups (name, dim) and discrete groups (name, cardinality)."""

    continuous_groups: tuple = (
        ("eyebrow", 6),
        ("eye", 10),
        ("nose", 6),
        ("mouth", 8),
        ("face", 12),
    )
    discrete_groups: tuple = (
        ("hair_style", 4),
        ("eyebrow_style", 3),
    )

    def __post_init__(self):
        names = [n for n, _ in self.continuous_groups] + [n for n, _ in self.discrete_groups]
        if len(set(names)) != len(names):
            raise ParameterError(f"duplicate group names in {names}")
        for name, d in list(self.continuous_groups) + list(self.discrete_groups):
            if d < 1:
                raise ParameterError(f"group {name!r} has non-positive size {d}")

    @property
    def cn(self) -> int:
        return sum(d for _, d in self.continuous_groups)

    @property
    def dn(self) -> int:
        return sum(c for _, c in self.discrete_groups)

    def continuous_slices(self):
        """name -> slice into the continuous vector, in declaration order."""
        out, pos = {}, 0
        for name, d in self.continuous_groups:
            out[name] = slice(pos, pos + d)
            pos += d
        return out

    def discrete_spans(self):
        """(start, end) spans into the discrete vector, in declaration order."""
        out, pos = [], 0
        for _, c in self.discrete_groups:
            out.append((pos, pos + c))
            pos += c
        return out

    def to_json_dict(self) -> dict:
        return {
            "continuous_groups": [[n, d] for n, d in self.continuous_groups],
            "discrete_groups": [[n, c] for n, c in self.discrete_groups],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ParameterSpec":
        return cls(
            continuous_groups=tuple((str(n), int(k)) for n, k in d["continuous_groups"]),
            discrete_groups=tuple((str(n), int(k)) for n, k in d["discrete_groups"]),
        )

    def digest(self) -> str:
        payload = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


DEFAULT_SPEC = ParameterSpec()

_SIMPLEX_TOL = 1e-5


@dataclass(frozen=True)
class ParameterVector:
    """Continuous values in [0,1] plus one simplex point per discrete group."""

    continuous: np.ndarray
    discrete: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "continuous", np.asarray(self.continuous, np.float64))
        object.__setattr__(self, "discrete", np.asarray(self.discrete, np.float64))

    def validate(self, spec: ParameterSpec) -> "ParameterVector":
        c, d = self.continuous, self.discrete
        if c.shape != (spec.cn,):
            raise ParameterError(f"continuous shape {c.shape}, expected ({spec.cn},)")
        if d.shape != (spec.dn,):
            raise ParameterError(f"discrete shape {d.shape}, expected ({spec.dn},)")
        if not np.isfinite(c).all() or not np.isfinite(d).all():
            raise ParameterError("non-finite parameter values")
        if c.min() < -_SIMPLEX_TOL or c.max() > 1 + _SIMPLEX_TOL:
            raise ParameterError(
                f"continuous values outside [0,1]: min={c.min():.4g} max={c.max():.4g}"
            )
        if d.min() < -_SIMPLEX_TOL:
            raise ParameterError(f"negative discrete weight {d.min():.4g}")
        for start, end in spec.discrete_spans():
            s = d[start:end].sum()
            if abs(s - 1.0) > _SIMPLEX_TOL:
                raise ParameterError(f"discrete group [{start},{end}) sums to {s:.6g}, not 1")
        return self

    def concat(self) -> np.ndarray:
        return np.concatenate([self.continuous, self.discrete])

    @classmethod
    def from_concat(cls, vec, spec: ParameterSpec) -> "ParameterVector":
        vec = np.asarray(vec, np.float64)
        if vec.shape != (spec.cn + spec.dn,):
            raise ParameterError(f"flat vector shape {vec.shape}, expected ({spec.cn + spec.dn},)")
        return cls(vec[: spec.cn], vec[spec.cn:])

    def group(self, spec: ParameterSpec, name: str) -> np.ndarray:
        return self.continuous[spec.continuous_slices()[name]]

    def choices(self, spec: ParameterSpec) -> dict:
        """Hard selection per discrete group: name -> argmax category."""
        out = {}
        for (name, _), (start, end) in zip(spec.discrete_groups, spec.discrete_spans()):
            out[name] = int(np.argmax(self.discrete[start:end]))
        return out

    def to_json_dict(self) -> dict:
        return {
            "continuous": [float(v) for v in self.continuous],
            "discrete": [float(v) for v in self.discrete],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ParameterVector":
        try:
            return cls(np.array(d["continuous"], np.float64), np.array(d["discrete"], np.float64))
        except (KeyError, TypeError) as e:
            raise ParameterError(f"malformed parameter JSON: {e}") from e


def one_hot(spec: ParameterSpec, choices) -> np.ndarray:
    """Build the discrete vector from per-group category indices.

    ``choices`` is either a dict keyed by group name or a sequence in group
    declaration order.
    """
    d = np.zeros(spec.dn, np.float64)
    for gi, ((name, card), (start, _end)) in enumerate(
        zip(spec.discrete_groups, spec.discrete_spans())
    ):
        idx = int(choices[name] if isinstance(choices, dict) else choices[gi])
        if not 0 <= idx < card:
            raise ParameterError(f"category {idx} out of range for group {name!r}")
        d[start + idx] = 1.0
    return d
