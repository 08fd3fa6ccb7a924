"""Trial data model: policy registry, validated trial records, and cell summaries.

Covariate and action codes are normalised to strings on the way in, so an
integer ``1`` in a JSON registry and the text ``1`` in a CSV column refer to
the same code. Everything is validated eagerly at construction time.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    EmptyDatasetError,
    RangeError,
    RegistryError,
    SchemaError,
)

RECORD_COLUMNS = ("unit_id", "cluster", "policy_id", "x", "a", "y")
ARM_PROB_TOL = 1e-9


def normalize_code(value: Any) -> str:
    """Map a JSON/CSV code (int or string) to its canonical string form."""
    if isinstance(value, bool):
        raise SchemaError(f"boolean is not a valid code: {value!r}")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if value.is_integer():
            return str(int(value))
        raise SchemaError(f"non-integer numeric code: {value!r}")
    if isinstance(value, str):
        code = value.strip()
        if not code:
            raise SchemaError("empty code")
        return code
    raise SchemaError(f"unsupported code type: {type(value).__name__}")


def code_sort_key(code: str) -> tuple:
    """Integers sort numerically and before any non-integer label."""
    try:
        return (0, int(code), "")
    except ValueError:
        return (1, 0, code)


def parse_action_map(raw: Mapping[Any, Any], support: Sequence[str], actions: Sequence[str] | None = None) -> dict[str, str]:
    """Expand an action map (with optional ``"default"`` key) to a total map over ``support``."""
    if not isinstance(raw, Mapping):
        raise SchemaError("action_map must be an object")
    explicit: dict[str, str] = {}
    default = None
    for key, value in raw.items():
        if key == "default":
            default = normalize_code(value)
            continue
        explicit[normalize_code(key)] = normalize_code(value)
    unknown = sorted(set(explicit) - set(support), key=code_sort_key)
    if unknown:
        raise RegistryError(f"action_map has covariate codes outside the support: {unknown}")
    total = {}
    for x in support:
        if x in explicit:
            total[x] = explicit[x]
        elif default is not None:
            total[x] = default
        else:
            raise RegistryError(f"action_map does not cover covariate value {x!r}")
    if actions is not None:
        bad = sorted({a for a in total.values() if a not in actions}, key=code_sort_key)
        if bad:
            raise RegistryError(f"action_map uses actions outside the action space: {bad}")
    return total


@dataclass(frozen=True)
class PolicySpec:
    """A trialed arm: a deterministic action map plus its scalar performance."""

    id: str
    action_map: dict[str, str]
    performance: float | None
    arm_prob: float

    def action(self, x: str) -> str:
        return self.action_map[x]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "performance": self.performance,
            "arm_prob": self.arm_prob,
            "action_map": dict(self.action_map),
        }


@dataclass(frozen=True)
class TrialRecord:
    unit_id: str
    cluster: str
    policy_id: str
    x: str
    a: str
    y: float


@dataclass(frozen=True)
class Registry:
    """Policy registry plus the outcome range and code spaces of a trial."""

    y_min: float
    y_max: float
    neutral_action: str | None
    covariate_support: tuple[str, ...]
    action_space: tuple[str, ...]
    policies: tuple[PolicySpec, ...]

    def __post_init__(self):
        if not (math.isfinite(self.y_min) and math.isfinite(self.y_max)) or self.y_min >= self.y_max:
            raise RegistryError(f"need finite y_min < y_max, got {self.y_min}, {self.y_max}")
        if not self.covariate_support:
            raise RegistryError("covariate_support must be non-empty")
        if len(set(self.covariate_support)) != len(self.covariate_support):
            raise RegistryError("covariate_support has duplicate codes")
        if not self.action_space or len(set(self.action_space)) != len(self.action_space):
            raise RegistryError("action_space must be non-empty with unique codes")
        if self.neutral_action is not None and self.neutral_action not in self.action_space:
            raise RegistryError(f"neutral action {self.neutral_action!r} is not in the action space")
        ids = [p.id for p in self.policies]
        if len(set(ids)) != len(ids):
            raise RegistryError("duplicate policy ids in registry")
        for p in self.policies:
            if set(p.action_map) != set(self.covariate_support):
                raise RegistryError(f"policy {p.id!r}: action_map must cover exactly the support")
            if any(a not in self.action_space for a in p.action_map.values()):
                raise RegistryError(f"policy {p.id!r}: action outside the action space")
            if not (0.0 < p.arm_prob <= 1.0):
                raise RegistryError(f"policy {p.id!r}: arm_prob must lie in (0, 1], got {p.arm_prob}")
            if p.performance is None:
                all_neutral = self.neutral_action is not None and all(
                    a == self.neutral_action for a in p.action_map.values()
                )
                if not all_neutral:
                    raise RegistryError(
                        f"policy {p.id!r}: performance may be null only for an all-neutral policy"
                    )
            elif not math.isfinite(p.performance):
                raise RegistryError(f"policy {p.id!r}: performance must be finite")
        if self.policies:
            total = math.fsum(p.arm_prob for p in self.policies)
            if abs(total - 1.0) > ARM_PROB_TOL:
                raise RegistryError(f"arm probabilities sum to {total!r}, not 1")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Registry":
        expected = {"y_min", "y_max", "neutral_action", "covariate_support", "action_space", "policies"}
        missing = expected - set(doc)
        if missing:
            raise SchemaError(f"registry is missing keys: {sorted(missing)}")
        extra = set(doc) - expected
        if extra:
            raise SchemaError(f"registry has unexpected keys: {sorted(extra)}")
        support = tuple(sorted({normalize_code(c) for c in doc["covariate_support"]}, key=code_sort_key))
        if len(support) != len(doc["covariate_support"]):
            raise RegistryError("covariate_support has duplicate codes")
        actions = tuple(normalize_code(c) for c in doc["action_space"])
        neutral = None if doc["neutral_action"] is None else normalize_code(doc["neutral_action"])
        policies = []
        for raw in doc["policies"]:
            for key in ("id", "arm_prob", "action_map"):
                if key not in raw:
                    raise SchemaError(f"policy entry is missing {key!r}")
            perf = raw.get("performance")
            policies.append(
                PolicySpec(
                    id=str(raw["id"]),
                    action_map=parse_action_map(raw["action_map"], support, actions),
                    performance=None if perf is None else float(perf),
                    arm_prob=float(raw["arm_prob"]),
                )
            )
        return cls(
            y_min=float(doc["y_min"]),
            y_max=float(doc["y_max"]),
            neutral_action=neutral,
            covariate_support=support,
            action_space=actions,
            policies=tuple(policies),
        )

    def to_dict(self) -> dict:
        return {
            "y_min": self.y_min,
            "y_max": self.y_max,
            "neutral_action": self.neutral_action,
            "covariate_support": list(self.covariate_support),
            "action_space": list(self.action_space),
            "policies": [p.to_dict() for p in self.policies],
        }

    @property
    def policy_ids(self) -> tuple[str, ...]:
        return tuple(p.id for p in self.policies)

    def policy(self, policy_id: str) -> PolicySpec:
        for p in self.policies:
            if p.id == policy_id:
                return p
        raise RegistryError(f"unknown policy id {policy_id!r}")

    def policy_index(self, policy_id: str) -> int:
        for i, p in enumerate(self.policies):
            if p.id == policy_id:
                return i
        raise RegistryError(f"unknown policy id {policy_id!r}")

    def with_arm_probs(self, probs: Mapping[str, float]) -> "Registry":
        policies = tuple(replace(p, arm_prob=float(probs[p.id])) for p in self.policies)
        return replace(self, policies=policies)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Immutable, validated trial records bound to their registry.

    Records are stored column-wise as index arrays into the registry's
    policies, covariate support and action space.
    """

    registry: Registry
    unit_ids: tuple[str, ...]
    clusters: tuple[str, ...]
    policy_idx: np.ndarray
    x_idx: np.ndarray
    a_idx: np.ndarray
    y: np.ndarray = field(repr=False)

    @classmethod
    def from_indices(
        cls,
        registry: Registry,
        unit_ids: Sequence[str],
        clusters: Sequence[str],
        policy_idx: Iterable[int],
        x_idx: Iterable[int],
        a_idx: Iterable[int],
        y: Iterable[float],
    ) -> "TrialDataset":
        policy_idx = np.array(policy_idx, dtype=np.int64)
        x_idx = np.array(x_idx, dtype=np.int64)
        a_idx = np.array(a_idx, dtype=np.int64)
        y = np.array(y, dtype=np.float64)
        n = len(y)
        if not (len(unit_ids) == len(clusters) == len(policy_idx) == len(x_idx) == len(a_idx) == n):
            raise SchemaError("record columns have different lengths")
        if registry.policies and n:
            bad = np.flatnonzero((policy_idx < 0) | (policy_idx >= len(registry.policies)))
            if bad.size:
                raise RegistryError(f"row {bad[0]}: unknown policy index")
        elif n:
            raise RegistryError("records present but the registry has no policies")
        if n:
            bad = np.flatnonzero((x_idx < 0) | (x_idx >= len(registry.covariate_support)))
            if bad.size:
                raise ConsistencyError(f"row {bad[0]}: covariate outside the support", row=int(bad[0]))
            table = action_index_table(registry)
            bad = np.flatnonzero(table[policy_idx, x_idx] != a_idx)
            if bad.size:
                i = int(bad[0])
                p = registry.policies[policy_idx[i]]
                x = registry.covariate_support[x_idx[i]]
                raise ConsistencyError(
                    f"row {i}: policy {p.id!r} takes action {p.action(x)!r} at x={x!r}, "
                    f"record has a={registry.action_space[a_idx[i]]!r}",
                    row=i,
                )
            bad = np.flatnonzero(~np.isfinite(y) | (y < registry.y_min) | (y > registry.y_max))
            if bad.size:
                i = int(bad[0])
                raise RangeError(
                    f"row {i}: y={y[i]!r} outside [{registry.y_min}, {registry.y_max}]", row=i
                )
        return cls(
            registry=registry,
            unit_ids=tuple(str(u) for u in unit_ids),
            clusters=tuple(str(c) for c in clusters),
            policy_idx=_readonly(policy_idx),
            x_idx=_readonly(x_idx),
            a_idx=_readonly(a_idx),
            y=_readonly(y),
        )

    @classmethod
    def from_records(cls, registry: Registry, records: Iterable[TrialRecord | Mapping[str, Any]]) -> "TrialDataset":
        pol_lookup = {p.id: i for i, p in enumerate(registry.policies)}
        x_lookup = {x: i for i, x in enumerate(registry.covariate_support)}
        a_lookup = {a: i for i, a in enumerate(registry.action_space)}
        cols: dict[str, list] = {c: [] for c in RECORD_COLUMNS}
        for row, rec in enumerate(records):
            if isinstance(rec, TrialRecord):
                rec = rec.__dict__
            pid = str(rec["policy_id"])
            if pid not in pol_lookup:
                raise RegistryError(f"row {row}: unknown policy_id {pid!r}")
            x = normalize_code(rec["x"])
            if x not in x_lookup:
                raise ConsistencyError(f"row {row}: x={x!r} is not in the covariate support", row=row)
            a = normalize_code(rec["a"])
            if a not in a_lookup:
                raise ConsistencyError(f"row {row}: a={a!r} is not in the action space", row=row)
            cols["unit_id"].append(str(rec["unit_id"]))
            cols["cluster"].append(str(rec["cluster"]))
            cols["policy_id"].append(pol_lookup[pid])
            cols["x"].append(x_lookup[x])
            cols["a"].append(a_lookup[a])
            cols["y"].append(float(rec["y"]))
        return cls.from_indices(
            registry, cols["unit_id"], cols["cluster"], cols["policy_id"], cols["x"], cols["a"], cols["y"]
        )

    def __len__(self) -> int:
        return len(self.y)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrialDataset):
            return NotImplemented
        return (
            self.registry == other.registry
            and self.unit_ids == other.unit_ids
            and self.clusters == other.clusters
            and np.array_equal(self.policy_idx, other.policy_idx)
            and np.array_equal(self.x_idx, other.x_idx)
            and np.array_equal(self.a_idx, other.a_idx)
            and self.y.tobytes() == other.y.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def y_min(self) -> float:
        return self.registry.y_min

    @property
    def y_max(self) -> float:
        return self.registry.y_max

    @property
    def neutral_action(self) -> str | None:
        return self.registry.neutral_action

    @property
    def covariate_support(self) -> tuple[str, ...]:
        return self.registry.covariate_support

    @property
    def policies(self) -> tuple[PolicySpec, ...]:
        return self.registry.policies

    def record(self, i: int) -> TrialRecord:
        reg = self.registry
        return TrialRecord(
            unit_id=self.unit_ids[i],
            cluster=self.clusters[i],
            policy_id=reg.policies[self.policy_idx[i]].id,
            x=reg.covariate_support[self.x_idx[i]],
            a=reg.action_space[self.a_idx[i]],
            y=float(self.y[i]),
        )

    @property
    def records(self) -> tuple[TrialRecord, ...]:
        return tuple(self.record(i) for i in range(self.n))

    @cached_property
    def cell_counts(self) -> np.ndarray:
        """Record counts indexed by (covariate index, policy index)."""
        nx, npol = len(self.covariate_support), len(self.policies)
        flat = self.x_idx * npol + self.policy_idx
        return _readonly(np.bincount(flat, minlength=nx * npol).reshape(nx, npol))

    @cached_property
    def cell_sums(self) -> np.ndarray:
        nx, npol = len(self.covariate_support), len(self.policies)
        flat = self.x_idx * npol + self.policy_idx
        return _readonly(np.bincount(flat, weights=self.y, minlength=nx * npol).reshape(nx, npol))

    def subset(self, mask: np.ndarray) -> "TrialDataset":
        idx = np.flatnonzero(mask)
        return TrialDataset.from_indices(
            self.registry,
            [self.unit_ids[i] for i in idx],
            [self.clusters[i] for i in idx],
            self.policy_idx[idx],
            self.x_idx[idx],
            self.a_idx[idx],
            self.y[idx],
        )


def action_index_table(registry: Registry) -> np.ndarray:
    """Integer table ``[policy, x] -> action index``."""
    a_lookup = {a: i for i, a in enumerate(registry.action_space)}
    return np.array(
        [[a_lookup[p.action(x)] for x in registry.covariate_support] for p in registry.policies],
        dtype=np.int64,
    ).reshape(len(registry.policies), len(registry.covariate_support))


def _read_text(source: Any) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8-sig")
    if isinstance(source, (str, os.PathLike)) and not (isinstance(source, str) and "\n" in source):
        with open(source, encoding="utf-8-sig", newline="") as fh:
            return fh.read()
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8-sig") if isinstance(data, bytes) else data


def load_registry(source: Any) -> Registry:
    """Load a registry from a mapping, a JSON path, JSON text or a file object."""
    if isinstance(source, Mapping):
        return Registry.from_dict(source)
    text = source if isinstance(source, str) and source.lstrip().startswith("{") else _read_text(source)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"registry is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("registry must be a JSON object")
    return Registry.from_dict(doc)


def load_dataset(records_source: Any, registry_source: Any) -> TrialDataset:
    """Parse and validate a records CSV against a registry.

    ``records_source`` may be a path, CSV text, bytes or a readable file.
    """
    registry = registry_source if isinstance(registry_source, Registry) else load_registry(registry_source)
    text = _read_text(records_source)
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("records CSV is empty (no header)") from None
    header = [h.strip() for h in header]
    if tuple(header) != RECORD_COLUMNS:
        missing = [c for c in RECORD_COLUMNS if c not in header]
        extra = [c for c in header if c not in RECORD_COLUMNS]
        raise SchemaError(
            f"header must be {','.join(RECORD_COLUMNS)}; missing={missing} extra={extra}"
        )
    rows = []
    for row_no, row in enumerate(reader):
        if not row:
            continue
        if len(row) != len(RECORD_COLUMNS):
            raise SchemaError(f"row {row_no}: expected {len(RECORD_COLUMNS)} fields, got {len(row)}")
        rec = dict(zip(RECORD_COLUMNS, row))
        try:
            rec["y"] = float(rec["y"])
        except ValueError:
            raise SchemaError(f"row {row_no}: y={rec['y']!r} is not a number") from None
        rows.append(rec)
    return TrialDataset.from_records(registry, rows)


def dataset_to_csv(dataset: TrialDataset) -> str:
    """Serialise records in the load format; ``repr`` keeps outcomes bit-exact."""
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    reg = dataset.registry
    for i in range(dataset.n):
        writer.writerow(
            [
                dataset.unit_ids[i],
                dataset.clusters[i],
                reg.policies[dataset.policy_idx[i]].id,
                reg.covariate_support[dataset.x_idx[i]],
                reg.action_space[dataset.a_idx[i]],
                repr(float(dataset.y[i])),
            ]
        )
    return buf.getvalue()


def registry_to_json(registry: Registry) -> str:
    return json.dumps(registry.to_dict(), indent=2) + "\n"


def arm_probability(dataset: TrialDataset | Registry, policy_ids: Iterable[str]) -> float:
    """Design probability that a unit was assigned to one of ``policy_ids``."""
    registry = dataset.registry if isinstance(dataset, TrialDataset) else dataset
    return math.fsum(registry.policy(pid).arm_prob for pid in set(policy_ids))


def empirical_conditional_mean(dataset: TrialDataset, x: Any, policy_ids: Iterable[str]) -> float | None:
    """Mean outcome among records at ``x`` from the given arms; None if there are none."""
    ids = set(policy_ids)
    if not ids:
        raise ValueError("policy_ids must be non-empty")
    x = normalize_code(x)
    try:
        xi = dataset.covariate_support.index(x)
    except ValueError:
        raise ConsistencyError(f"x={x!r} is not in the covariate support") from None
    cols = [dataset.registry.policy_index(pid) for pid in ids]
    count = int(dataset.cell_counts[xi, cols].sum())
    if count == 0:
        return None
    return math.fsum(dataset.cell_sums[xi, cols]) / count


def covariate_pmf(dataset: TrialDataset) -> dict[str, float]:
    """Empirical covariate frequencies over the full support (zero-mass values included)."""
    if dataset.n == 0:
        raise EmptyDatasetError("covariate_pmf needs at least one record")
    counts = np.bincount(dataset.x_idx, minlength=len(dataset.covariate_support))
    return {x: counts[i] / dataset.n for i, x in enumerate(dataset.covariate_support)}


def with_empirical_arm_probs(dataset: TrialDataset) -> TrialDataset:
    """Replace design arm probabilities by observed arm frequencies."""
    if dataset.n == 0:
        raise EmptyDatasetError("cannot estimate arm probabilities from an empty dataset")
    counts = np.bincount(dataset.policy_idx, minlength=len(dataset.policies))
    if np.any(counts == 0):
        empty = [p.id for p, c in zip(dataset.policies, counts) if c == 0]
        raise RegistryError(f"arms with no records cannot get an empirical probability: {empty}")
    warnings.warn(
        "replacing design arm probabilities with empirical arm frequencies", stacklevel=2
    )
    probs = {p.id: counts[i] / dataset.n for i, p in enumerate(dataset.policies)}
    return replace(dataset, registry=dataset.registry.with_arm_probs(probs))
