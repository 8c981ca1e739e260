from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Optional
from enum import Enum
import math


class OptionType(str, Enum):
    CALL = "call"
    PUT = "put"


class StrikeStyle(str, Enum):
    FIXED = "fixed"
    FLOATING = "floating"


class ModelParams(BaseModel):
    """Black-Scholes dynamics and the weights of the option underlying
    alpha*S_T + beta*int_0^T S_t dt."""
    model_config = ConfigDict(frozen=True)

    S0: float = Field(100.0, gt=0.0, description="Spot price")
    r: float = Field(0.05, ge=0.0, description="Short rate (per year)")
    delta: float = Field(0.0, ge=0.0, description="Dividend yield (per year)")
    sigma: float = Field(0.3, gt=0.0, description="Volatility")
    T: float = Field(1.0, gt=0.0, description="Maturity (years)")
    alpha: float = Field(0.6, ge=0.0, description="Weight of S_T")
    beta: float = Field(0.4, ge=0.0, description="Weight of the running integral of S")
    K: float = Field(100.0, ge=0.0, description="Strike")
    gamma_override: Optional[float] = Field(
        None, description="Log-drift replacing r - delta - sigma^2/2 (numeraire-changed problems)"
    )

    @model_validator(mode="after")
    def _check_underlying(self) -> "ModelParams":
        if self.alpha == 0.0 and self.beta == 0.0:
            raise ValueError("alpha and beta cannot both be zero")
        return self

    @property
    def gamma(self) -> float:
        if self.gamma_override is not None:
            return self.gamma_override
        return self.r - self.delta - 0.5 * self.sigma ** 2

    @property
    def discount(self) -> float:
        return math.exp(-self.r * self.T)

    def with_ratio(self, ratio: float, total: float = 1.0) -> "ModelParams":
        """Copy with alpha/(alpha+beta) = ratio and alpha+beta = total."""
        return self.model_copy(update={"alpha": ratio * total, "beta": (1.0 - ratio) * total})


class PayoffSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    option_type: OptionType = Field(OptionType.CALL, description="Call or put")
    style: StrikeStyle = Field(StrikeStyle.FIXED, description="Fixed strike or floating strike")
    strike: float = Field(100.0, ge=0.0, description="Fixed strike (ignored for floating)")

    def value(self, underlying: float) -> float:
        if self.option_type == OptionType.CALL:
            return max(underlying - self.strike, 0.0)
        return max(self.strike - underlying, 0.0)

    def __call__(self, underlying: float) -> float:
        return self.value(underlying)


class HybridConfig(BaseModel):
    """Knobs of the hybrid pseudo-exact alpha=0 sampler."""
    model_config = ConfigDict(frozen=True)

    J: int = Field(9, ge=0, description="Deepest dyadic interval index; threshold eps = T/2^(J+1)")
    eta: float = Field(0.1, gt=0.0, lt=0.25, description="Tail exponent parameter")
    c_p: float = Field(1.0, gt=0.0, description="Poisson rate of the negative-part product")
    retry_cap: int = Field(10_000_000, ge=1, description="Cap on thinning points per trajectory")

    def epsilon(self, T: float) -> float:
        return T / 2 ** (self.J + 1)


class GridSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    M: int = Field(50, ge=1, description="Number of time steps")
    scheme: str = Field("trapezoidal", pattern="^trapezoidal$")
