from __future__ import annotations

import enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class CIMethod(str, enum.Enum):
    RANGE = "range"
    BOOTSTRAP = "bootstrap"


class ScalingPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    K: int = Field(ge=1)
    mean: float = Field(ge=0, le=1)
    std: float = Field(ge=0)
    ci_low: float
    ci_high: float


class ScalingCurve(BaseModel):
    """Best-of-N success rate against the sample budget ``K``.

    Success at ``K`` means at least one fast_1 sample among ``K`` draws.
    """

    model_config = ConfigDict(frozen=True)

    points: List[ScalingPoint]
    ci_method: CIMethod = CIMethod.RANGE
    seeds: int = Field(default=1, ge=1)
    tasks: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_points(self) -> ScalingCurve:
        ks = [p.K for p in self.points]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("K values must be strictly increasing")
        means = [p.mean for p in self.points]
        if any(b < a - 1e-12 for a, b in zip(means, means[1:])):
            raise ValueError("success must be non-decreasing in K")
        return self

    @property
    def ks(self) -> List[int]:
        return [p.K for p in self.points]

    @property
    def means(self) -> List[float]:
        return [p.mean for p in self.points]

    def at(self, K: int) -> ScalingPoint:
        for point in self.points:
            if point.K == K:
                return point
        raise KeyError(f"K={K} is not on the curve")


class EquivalentKKind(str, enum.Enum):
    VALUE = "value"
    BELOW_K1 = "below_k1"
    ABOVE_KMAX = "above_kmax"


class EquivalentK(BaseModel):
    """Where a success rate falls on a scaling curve.

    ``K`` is set only for ``VALUE``.
    """

    model_config = ConfigDict(frozen=True)

    kind: EquivalentKKind
    target: float
    K: Optional[float] = None

    @model_validator(mode="after")
    def _check_value(self) -> EquivalentK:
        if (self.kind == EquivalentKKind.VALUE) != (self.K is not None):
            raise ValueError("K is set exactly when kind is 'value'")
        return self
