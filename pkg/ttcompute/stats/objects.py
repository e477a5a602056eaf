from __future__ import annotations

import enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Sidedness(str, enum.Enum):
    ONE_SIDED = "one_sided"
    TWO_SIDED = "two_sided"


class Transform(str, enum.Enum):
    IDENTITY = "identity"
    LOG_RATIO = "log_ratio"


class Correlation(BaseModel):
    """A rank correlation and its two-sided p-value."""

    model_config = ConfigDict(frozen=True)

    rho: float = Field(ge=-1, le=1)
    p: float = Field(ge=0, le=1)
    n: int = Field(ge=0)
    exact: bool = False


class WilcoxonResult(BaseModel):
    """Signed-rank test of ``a - b``.

    ``statistic`` is ``min(W+, W-)``; ``p_one_sided`` is ``P(W+ >= observed)``
    under the null, the alternative being that ``a`` exceeds ``b``.
    """

    model_config = ConfigDict(frozen=True)

    statistic: float = Field(ge=0)
    w_plus: float = Field(ge=0)
    w_minus: float = Field(ge=0)
    n: int = Field(ge=1)
    p_one_sided: float = Field(ge=0, le=1)
    p_two_sided: float = Field(ge=0, le=1)
    exact: bool


class PairedComparison(BaseModel):
    """Per-unit values of two strategies.

    ``wins_a`` counts discordant units where only ``a`` succeeded.
    """

    model_config = ConfigDict(frozen=True)

    pairs: List[Tuple[str, float, float]]
    wins_a: int = Field(ge=0)
    discordant: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_counts(self) -> PairedComparison:
        if not self.wins_a <= self.discordant <= len(self.pairs):
            raise ValueError(
                f"need wins_a <= discordant <= pairs, got {self.wins_a}, "
                f"{self.discordant}, {len(self.pairs)}"
            )
        return self

    @property
    def wins_b(self) -> int:
        return self.discordant - self.wins_a


class LengthControl(BaseModel):
    """Logprob, length and speedup correlations over correct samples."""

    model_config = ConfigDict(frozen=True)

    logprob_speedup: Correlation
    logprob_speedup_given_length: Optional[Correlation]
    length_speedup: Optional[Correlation]
    n: int


class ProbeStep(BaseModel):
    model_config = ConfigDict(frozen=True)

    step: int = Field(ge=0)
    checkpoint_id: str
    rho_all: float = Field(ge=-1, le=1)
    p_all: float
    rho_tail: float = Field(ge=-1, le=1)
    p_tail: float
    mean_nll: float
    rho_tail_speedup: Optional[float] = None
    p_tail_speedup: Optional[float] = None


class ProbeResult(BaseModel):
    """Rank correlation of NLL and speedup over a fixed sample set, per step.

    ``tail`` is the ``tail_fraction`` of samples with the highest NLL under
    each checkpoint; ``tail_speedup`` is the same fraction with the lowest
    speedup.
    """

    model_config = ConfigDict(frozen=True)

    per_step: List[ProbeStep]
    tail_fraction: float = Field(gt=0, le=1)
    sample_count: int = Field(ge=0)
    nll: List[List[float]] = Field(default_factory=list, repr=False)

    @model_validator(mode="after")
    def _check_steps(self) -> ProbeResult:
        steps = [row.step for row in self.per_step]
        if any(b < a for a, b in zip(steps, steps[1:])):
            raise ValueError("probe steps must be ascending")
        return self
