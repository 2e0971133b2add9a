"""
Datasets: CSV ingestion, synthetic generators with a known p* and splits
"""

import re
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from lossprobe.exceptions import ConfigError, DataError, LabelError, ParseError, SchemaError
from lossprobe.logger import child_logger


logger = child_logger(__name__)


@dataclass(frozen=True)
class Dataset:
    """
    Immutable labelled sample. `p_star` is only known for synthetic data;
    `representation` holds optional externally supplied embeddings
    """

    features: np.ndarray
    labels: np.ndarray
    subgroups: Mapping[str, np.ndarray] = field(default_factory=dict)
    feature_names: Tuple[str, ...] = ()
    p_star: np.ndarray | None = None
    representation: np.ndarray | None = None
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2:
            raise DataError("features must be an n x d matrix")
        if not np.all(np.isfinite(features)):
            raise DataError("features must be finite")
        n = features.shape[0]

        labels = np.asarray(self.labels)
        if labels.shape != (n,):
            raise DataError(f"expected {n} labels, got shape {labels.shape}")
        if np.any((labels != 0) & (labels != 1)):
            raise LabelError("labels must be 0 or 1")

        groups: Dict[str, np.ndarray] = {}
        for name, mask in self.subgroups.items():
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (n,):
                raise DataError(f"subgroup '{name}' mask has shape {mask.shape}, expected ({n},)")
            groups[name] = mask

        p_star = self.p_star
        if p_star is not None:
            p_star = np.asarray(p_star, dtype=float)
            if p_star.shape != (n,) or np.any(p_star < 0.0) or np.any(p_star > 1.0):
                raise DataError("p_star must hold one probability per row")

        representation = self.representation
        if representation is not None:
            representation = np.asarray(representation, dtype=float)
            if representation.ndim != 2 or representation.shape[0] != n:
                raise DataError("representation must be an n x k matrix")
            if not np.all(np.isfinite(representation)):
                raise DataError("representation must be finite")

        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(features.shape[1]))
        if len(names) != features.shape[1]:
            raise DataError("one feature name per column is required")

        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels.astype(int))
        object.__setattr__(self, "subgroups", groups)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "p_star", p_star)
        object.__setattr__(self, "representation", representation)
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def take(self, rows: np.ndarray, **provenance) -> "Dataset":
        """
        Row subset; masks, p_star and representation are sliced consistently
        """
        rows = np.asarray(rows)
        return replace(
            self,
            features=self.features[rows],
            labels=self.labels[rows],
            subgroups={name: mask[rows] for name, mask in self.subgroups.items()},
            p_star=None if self.p_star is None else self.p_star[rows],
            representation=None if self.representation is None else self.representation[rows],
            provenance={**self.provenance, **provenance},
        )


@dataclass(frozen=True)
class CsvSchema:
    """
    Which CSV columns hold the label, the features and the optional extras.
    Subgroup specs read `column=value` or `column in {a,b}` (`∈` also accepted)
    """

    label: str
    features: Tuple[str, ...]
    categorical: Tuple[str, ...] = ()
    subgroups: Mapping[str, str] = field(default_factory=dict)
    representation: Tuple[str, ...] = ()
    p_star: str | None = None

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "CsvSchema":
        if "label" not in doc or "features" not in doc:
            raise ConfigError("a CSV schema needs 'label' and 'features'")
        return cls(
            label=doc["label"],
            features=tuple(doc["features"]),
            categorical=tuple(doc.get("categorical", ())),
            subgroups=dict(doc.get("subgroups", {})),
            representation=tuple(doc.get("representation", ())),
            p_star=doc.get("p_star"),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "features": list(self.features),
            "categorical": list(self.categorical),
            "subgroups": dict(self.subgroups),
            "representation": list(self.representation),
            "p_star": self.p_star,
        }


SUBGROUP_SPEC = re.compile(r"^\s*(?P<column>[^=∈]+?)\s*(?P<op>=|∈|\sin\s)\s*(?P<values>.+?)\s*$")
SUBGROUP_OPERATORS = ("=", "∈", " in ")


def check_column_name(column: str) -> str:
    """
    Subgroup specs are split on their first operator, so a column whose name
    holds one cannot be addressed by a spec
    """
    for op in SUBGROUP_OPERATORS:
        if op in column:
            raise SchemaError(f"column '{column}' contains '{op.strip()}' and cannot be used in a subgroup spec")
    return column


def parse_subgroup_spec(spec: str) -> Tuple[str, List[str]]:
    """
    'education=primary' -> ('education', ['primary']);
    'education in {primary,secondary}' -> ('education', ['primary', 'secondary'])
    """
    match = SUBGROUP_SPEC.match(spec)
    if match is None:
        raise ConfigError(f"cannot parse subgroup spec '{spec}'")
    column, op, values = match.group("column"), match.group("op"), match.group("values")
    if op == "=":
        return column, [values]
    if not (values.startswith("{") and values.endswith("}")):
        raise ConfigError(f"set subgroup spec '{spec}' needs braces")
    return column, [v.strip() for v in values[1:-1].split(",") if v.strip()]


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    out = np.empty(len(frame), dtype=float)
    for i, raw in enumerate(frame[column]):
        if raw == "":
            raise ParseError(i + 1, column, "missing value")
        try:
            out[i] = float(raw)
        except ValueError as e:
            raise ParseError(i + 1, column, f"cannot parse '{raw}' as a number") from e
        if not np.isfinite(out[i]):
            raise ParseError(i + 1, column, f"non-finite value '{raw}'")
    return out


def load_csv(path: str, schema: CsvSchema | Mapping[str, Any]) -> Dataset:
    """
    Reads a headed UTF-8 CSV file. Numeric features are parsed as reals,
    categorical ones are one-hot encoded in lexicographic category order.
    Missing values are rejected, there is no imputation
    """
    if not isinstance(schema, CsvSchema):
        schema = CsvSchema.from_dict(schema)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as e:
        raise DataError(f"no such file: {path}") from e
    except pd.errors.ParserError as e:
        raise ParseError(0, "", str(e)) from e
    frame = frame.apply(lambda col: col.str.strip())

    wanted = [schema.label, *schema.features, *schema.representation]
    if schema.p_star is not None:
        wanted.append(schema.p_star)
    for spec in schema.subgroups.values():
        column = parse_subgroup_spec(spec)[0]
        for other in frame.columns:
            # a longer header that the spec was cut out of
            if other != column and other.startswith(column) and spec.strip().startswith(other):
                check_column_name(other)
        wanted.append(column)
    missing = sorted({c for c in wanted if c not in frame.columns})
    if missing:
        raise SchemaError(f"{path} is missing columns {missing}")

    raw_labels = frame[schema.label]
    labels = np.zeros(len(frame), dtype=int)
    for i, raw in enumerate(raw_labels):
        try:
            value = float(raw)
        except ValueError as e:
            raise LabelError(f"row {i + 1}: label '{raw}' is not 0/1") from e
        if value not in (0.0, 1.0):
            raise LabelError(f"row {i + 1}: label '{raw}' is not 0/1")
        labels[i] = int(value)

    columns: List[np.ndarray] = []
    names: List[str] = []
    for column in schema.features:
        if column in schema.categorical:
            values = frame[column]
            empty = np.flatnonzero(values.to_numpy() == "")
            if len(empty):
                raise ParseError(int(empty[0]) + 1, column, "missing value")
            for category in sorted(values.unique()):
                columns.append((values == category).to_numpy(dtype=float))
                names.append(f"{column}={category}")
        else:
            columns.append(_numeric_column(frame, column))
            names.append(column)
    features = np.column_stack(columns) if columns else np.zeros((len(frame), 0))

    subgroups = {}
    for name, spec in schema.subgroups.items():
        column, values = parse_subgroup_spec(spec)
        subgroups[name] = frame[column].isin(values).to_numpy()

    representation = None
    if schema.representation:
        representation = np.column_stack([_numeric_column(frame, c) for c in schema.representation])
    p_star = None if schema.p_star is None else _numeric_column(frame, schema.p_star)

    logger.info("loaded %s: %d rows, %d features", path, len(frame), len(names))
    return Dataset(
        features=features,
        labels=labels,
        subgroups=subgroups,
        feature_names=tuple(names),
        p_star=p_star,
        representation=representation,
        provenance={"source": "csv", "path": str(path)},
    )


def export_csv(data: Dataset, path: str) -> CsvSchema:
    """
    Writes the dataset as CSV and returns the schema that loads it back.
    Floats are written with 17 significant digits so the round trip is exact
    """
    frame = pd.DataFrame(data.features, columns=list(data.feature_names))
    frame["label"] = data.labels
    group_columns = {}
    for name, mask in sorted(data.subgroups.items()):
        column = check_column_name(f"group:{name}")
        frame[column] = mask.astype(int)
        group_columns[name] = f"{column}=1"
    repr_columns: List[str] = []
    if data.representation is not None:
        for k in range(data.representation.shape[1]):
            frame[f"repr:{k}"] = data.representation[:, k]
            repr_columns.append(f"repr:{k}")
    if data.p_star is not None:
        frame["p_star"] = data.p_star
    frame.to_csv(path, index=False, float_format="%.17g")
    return CsvSchema(
        label="label",
        features=tuple(data.feature_names),
        subgroups=group_columns,
        representation=tuple(repr_columns),
        p_star="p_star" if data.p_star is not None else None,
    )


@dataclass(frozen=True)
class SynthSpec:
    """
    Synthetic task description. `p_star_form` is one of
    logistic (sigmoid(w.x)), interaction (adds gamma * x0 * x1, which a
    linear model cannot fit) or constant (p* = base_rate everywhere)
    """

    n: int
    d: int = 4
    theta: float = 0.0
    p_star_form: str = "logistic"
    gamma: float = 2.0
    base_rate: float = 0.5
    weight_scale: float = 1.0
    representation_dims: int = 0

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SynthSpec":
        known = set(cls.__dataclass_fields__.keys())  # pylint: disable=no-member
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys {unknown}")
        if "n" not in doc:
            raise ConfigError("synthetic spec needs 'n'")
        return cls(**doc)


P_STAR_FORMS = ("logistic", "interaction", "constant")


def synth_generate(spec: SynthSpec | Mapping[str, Any], seed: int) -> Dataset:
    """
    Standard-normal features, p*(x) from the requested form with weights drawn
    from `seed`, labels y ~ Ber(p*(x)) and four subgroups given by the sign
    patterns of the first two features
    """
    if not isinstance(spec, SynthSpec):
        spec = SynthSpec.from_dict(spec)
    if spec.n < 1:
        raise ConfigError("n must be at least 1")
    if spec.d < 2:
        raise ConfigError("d must be at least 2 (subgroups use the first two features)")
    if not 0.0 <= spec.theta <= 1.0:
        raise ConfigError("theta must lie in [0, 1]")
    if spec.p_star_form not in P_STAR_FORMS:
        raise ConfigError(f"unknown p_star_form '{spec.p_star_form}', options are {P_STAR_FORMS}")
    if not 0.0 <= spec.base_rate <= 1.0:
        raise ConfigError("base_rate must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    features = rng.standard_normal((spec.n, spec.d))
    weights = rng.standard_normal(spec.d) * spec.weight_scale
    margin = features @ weights
    if spec.p_star_form == "interaction":
        margin = margin + spec.gamma * features[:, 0] * features[:, 1]
    if spec.p_star_form == "constant":
        p_star = np.full(spec.n, spec.base_rate)
    else:
        p_star = expit(margin)
    labels = (rng.random(spec.n) < p_star).astype(int)

    representation = None
    if spec.representation_dims > 0:
        noise = rng.standard_normal((spec.n, spec.representation_dims)) * 0.5
        representation = margin[:, None] + noise

    subgroups = {}
    for s0, first in (("+", True), ("-", False)):
        for s1, second in (("+", True), ("-", False)):
            subgroups[f"x0{s0}x1{s1}"] = ((features[:, 0] >= 0) == first) & (
                (features[:, 1] >= 0) == second
            )

    return Dataset(
        features=features,
        labels=labels,
        subgroups=subgroups,
        p_star=p_star,
        representation=representation,
        provenance={
            "source": "synthetic",
            "seed": seed,
            "theta": spec.theta,
            "p_star_form": spec.p_star_form,
        },
    )


def split(data: Dataset, fractions: Sequence[float], seed: int) -> Tuple[Dataset, ...]:
    """
    Seeded permutation split into len(fractions) parts
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) < 2 or any(f <= 0.0 for f in fractions):
        raise ConfigError("split needs at least two positive fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    order = np.random.default_rng(seed).permutation(data.n)
    bounds = np.round(np.cumsum(fractions) * data.n).astype(int)
    bounds[-1] = data.n
    parts = []
    start = 0
    for k, stop in enumerate(bounds):
        parts.append(data.take(order[start:stop], split_seed=seed, split_part=k))
        start = stop
    return tuple(parts)
