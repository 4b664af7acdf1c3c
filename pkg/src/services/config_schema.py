"""
Analysis configuration schema.

Configs are JSON documents validated by pydantic in strict mode: unknown keys
are rejected, coefficient expressions are parsed while validating, and every
violation found is reported at once through ConfigError.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Any, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import Config
from errors import ConfigError, ExpressionError
from services.expression_service import parse_expression

AnalysisName = Literal[
    "norms", "decompose", "quasilocality", "smoothing", "limits", "lower-norms", "parametrix", "fredholm"
]
NEEDS_DIRECTIONS = ("limits", "parametrix", "fredholm")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSpaceConfig(StrictModel):
    kind: Literal["grid"]
    dim: int = Field(ge=1)
    lo: list[int]
    hi: list[int]
    metric: Literal["l1", "linf"] = "l1"

    @model_validator(mode="after")
    def _check_bounds(self):
        if len(self.lo) != self.dim or len(self.hi) != self.dim:
            raise ValueError(f"lo and hi need {self.dim} components")
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty window: lo={self.lo} is not <= hi={self.hi}")
        return self


class TableSpaceConfig(StrictModel):
    """Explicit metric space: a CSV of distances or inline labels and table."""

    kind: Literal["table"]
    path: str | None = None
    points: list[str] | None = None
    distances: list[list[Union[float, str]]] | None = None

    @model_validator(mode="after")
    def _check_source(self):
        inline = self.points is not None or self.distances is not None
        if (self.path is None) == (not inline):
            raise ValueError("give either path or points + distances")
        if inline and (self.points is None or self.distances is None):
            raise ValueError("inline tables need both points and distances")
        return self


SpaceConfig = Annotated[Union[GridSpaceConfig, TableSpaceConfig], Field(discriminator="kind")]


class TermConfig(StrictModel):
    offset: list[int]
    coefficient: Union[str, float]

    @field_validator("coefficient")
    @classmethod
    def _parse_coefficient(cls, value):
        if isinstance(value, str):
            try:
                parse_expression(value)
            except ExpressionError as e:
                raise ValueError(f"cannot parse {value!r}: {e}") from None
        return value

    @property
    def node_count(self) -> int:
        if isinstance(self.coefficient, str):
            return parse_expression(self.coefficient).node_count
        return 1


class OperatorConfig(StrictModel):
    """Offset terms on a grid window, or a COO file for any space."""

    label: str = "A"
    terms: list[TermConfig] | None = None
    coo_path: str | None = None

    @model_validator(mode="after")
    def _check_source(self):
        if (self.terms is None) == (self.coo_path is None):
            raise ValueError("give exactly one of terms or coo_path")
        if self.terms is not None and not self.terms:
            raise ValueError("terms must not be empty")
        return self


class DirectionConfig(StrictModel):
    label: str | None = None
    ray: list[int] | None = None
    points: list[list[int]] | None = None

    @model_validator(mode="after")
    def _check_kind(self):
        if (self.ray is None) == (self.points is None):
            raise ValueError("give exactly one of ray or points")
        if self.points is not None and self.label is None:
            raise ValueError("explicit point sequences need a label")
        return self


class TailConfig(StrictModel):
    start: int = Field(default=1000, ge=0)
    stop: int = 10000
    samples: int = Field(default=8, ge=3)

    @model_validator(mode="after")
    def _check_order(self):
        if self.stop <= self.start:
            raise ValueError(f"stop ({self.stop}) must exceed start ({self.start})")
        return self


class TolerancesConfig(StrictModel):
    richness: float = Field(default=Config.RICHNESS_TOL, gt=0)
    residual: float = Field(default=Config.RESIDUAL_TOL, gt=0)
    delta: float = Field(default=0.4, gt=0)
    max_buffer: float = Field(default=8, ge=0)
    slack: float = Field(default=0.0, ge=0)


class QuasilocalityConfig(StrictModel):
    eps: float = Field(default=0.5, gt=0)
    L_values: list[Annotated[float, Field(ge=0)]] = [0.001, 0.01, 0.1, 1.0]


class SmoothingConfig(StrictModel):
    n_values: list[Annotated[int, Field(ge=1)]] = [1, 2, 4, 8, 16, 32, 64]
    eps: float = Field(default=1.0, gt=0)


class LowerNormsConfig(StrictModel):
    radius: int | None = Field(default=None, ge=0)
    delta_values: list[Annotated[float, Field(gt=0)]] = [0.1, 0.4, 1.0]
    allow_sampling: bool = True


class OutputConfig(StrictModel):
    dir: str | None = None
    csv: bool = True


class AnalysisConfig(StrictModel):
    label: str = "analysis"
    space: SpaceConfig
    operator: OperatorConfig
    regime: Literal["p1", "pinf", "p0"] = "pinf"
    analyses: list[AnalysisName] = Field(min_length=1)
    directions: list[DirectionConfig] | None = None
    coordinate_rays: bool = False
    tail: TailConfig = TailConfig()
    reference_radius: int | None = Field(default=None, ge=1)
    tolerances: TolerancesConfig = TolerancesConfig()
    quasilocality: QuasilocalityConfig = QuasilocalityConfig()
    smoothing: SmoothingConfig = SmoothingConfig()
    lower_norms: LowerNormsConfig = LowerNormsConfig()
    output: OutputConfig = OutputConfig()
    seed: int = Field(default=Config.DEFAULT_SEED, ge=0)
    threads: int = Field(default=Config.DEFAULT_THREADS, ge=1)

    @field_validator("analyses")
    @classmethod
    def _unique(cls, value):
        duplicates = sorted({a for a in value if value.count(a) > 1})
        if duplicates:
            raise ValueError(f"analyses listed twice: {duplicates}")
        return value

    @property
    def dim(self) -> int | None:
        return self.space.dim if isinstance(self.space, GridSpaceConfig) else None

    def node_counts(self) -> list[int]:
        return [t.node_count for t in self.operator.terms or []]


def _cross_field_violations(cfg: AnalysisConfig) -> list[str]:
    """Checks that need more than one section of the document."""
    violations = []
    needing = [a for a in cfg.analyses if a in NEEDS_DIRECTIONS]
    if needing and not cfg.directions and not cfg.coordinate_rays:
        violations.append(
            f"directions: required by {', '.join(needing)} (give directions or set coordinate_rays)"
        )
    dim = cfg.dim
    if dim is None:
        if cfg.operator.terms is not None:
            violations.append("operator.terms: offset terms need a grid space; use coo_path for tables")
        grid_only = [a for a in cfg.analyses if a in NEEDS_DIRECTIONS]
        if grid_only:
            violations.append(f"analyses: {', '.join(grid_only)} need a grid space")
        return violations

    for i, term in enumerate(cfg.operator.terms or []):
        if len(term.offset) != dim:
            violations.append(f"operator.terms.{i}.offset: expected {dim} components, got {len(term.offset)}")
        if isinstance(term.coefficient, str):
            axis = parse_expression(term.coefficient).max_axis
            if axis >= dim:
                violations.append(f"operator.terms.{i}.coefficient: uses x{axis} in a {dim}-dimensional space")
    for i, direction in enumerate(cfg.directions or []):
        vectors = [direction.ray] if direction.ray is not None else direction.points
        if any(len(v) != dim for v in vectors):
            violations.append(f"directions.{i}: vectors need {dim} components")
        if direction.ray is not None and not any(direction.ray):
            violations.append(f"directions.{i}.ray: must be nonzero")
        if direction.points is not None and len(direction.points) < 3:
            violations.append(f"directions.{i}.points: need at least 3 points")
    if cfg.operator.terms is None and any(a in NEEDS_DIRECTIONS for a in cfg.analyses):
        violations.append("operator.coo_path: limit operators need offset terms with coefficient expressions")
    return violations


def _format_error(error: dict[str, Any]) -> str:
    location = ".".join(str(part) for part in error["loc"]) or "<root>"
    message = error["msg"]
    if message.startswith("Value error, "):
        message = message[len("Value error, "):]
    return f"{location}: {message}"


def parse_config(text: str | bytes | dict) -> AnalysisConfig:
    """
    Validate a JSON analysis config.

    Raises:
        ConfigError: with every violation found, each naming its field.
    """
    if isinstance(text, dict):
        document = text
    else:
        try:
            document = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError([f"<document>: invalid JSON ({e})"]) from None
    if not isinstance(document, dict):
        raise ConfigError(["<document>: expected a JSON object"])
    try:
        cfg = AnalysisConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError([_format_error(err) for err in e.errors()]) from None
    violations = _cross_field_violations(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


def load_config(path: Path | str) -> AnalysisConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError([f"<document>: cannot read {path} ({e.strerror})"]) from None
    return parse_config(text)
