from pydantic import BaseModel, Field, model_validator
from dataclasses import dataclass
from typing import List, Optional, Dict


@dataclass(slots=True)
class EstimatorSample:
    """One Monte Carlo draw.

    weight is the discounted payoff contribution; base_weight is the same draw
    with the payoff replaced by one (used by the self-normalized estimator);
    control is the control-variate value when the sampler provides one.
    """
    weight: float
    accepted: bool = True
    poisson_count: int = 0
    retries: int = 0
    skeleton_size: int = 0
    base_weight: Optional[float] = None
    control: Optional[float] = None
    clamped: int = 0


class RunResult(BaseModel):
    method: str = Field(..., description="Pricing method that produced the estimate")
    price: float
    std_error: float = Field(..., ge=0.0)
    ci_low: float
    ci_high: float
    n: int = Field(..., ge=0, description="Number of samples")
    acceptance_rate: Optional[float] = Field(None, ge=0.0, le=1.0)
    attempts: Optional[int] = None
    wall_seconds: float = 0.0
    estimator: str = "delta1"
    diagnostics: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_interval(self) -> "RunResult":
        if not (self.ci_low <= self.price <= self.ci_high):
            raise ValueError("confidence interval must contain the price")
        return self

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_high - self.ci_low)

    def overlaps(self, other: "RunResult") -> bool:
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high


# heavy-tail report thresholds
DOMINANCE_SHARE = 0.5
STABLE_RATIO = (0.7, 1.4)


class HeavyTailReport(BaseModel):
    estimator: str
    n: int = 0
    mean: Optional[float] = None
    running_means: List[float] = Field(default_factory=list)
    checkpoints: List[int] = Field(default_factory=list)
    variance_ratio: Optional[float] = Field(None, description="Variance estimate at 2n over variance at n")
    max_share: Optional[float] = Field(None, description="Largest |sample| over sum of |samples|")
    dominated: bool = Field(False, description="One sample carries more than DOMINANCE_SHARE of the total")
    stable: Optional[bool] = Field(None, description="variance_ratio lies within STABLE_RATIO")


class TableRow(BaseModel):
    table: str
    label: str
    metric: str
    value: float
    std_error: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    reference: Optional[float] = None
    tolerance: Optional[float] = None
    passed: bool = True
    samples: int = 0
    wall_seconds: float = 0.0
