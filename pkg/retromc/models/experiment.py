from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Optional
from enum import Enum
from retromc.models.params import ModelParams, PayoffSpec, HybridConfig, GridSpec


class Method(str, Enum):
    TRAP_KV = "trap-kv"
    EXACT = "exact"
    UE_BOUND = "ue-bound"
    UE_FREE = "ue-free"
    HYBRID = "hybrid"


class Estimator(str, Enum):
    DELTA1 = "delta1"
    DELTA2 = "delta2"


class UEKnobs(BaseModel):
    model_config = ConfigDict(frozen=True)

    c_P: Optional[float] = Field(None, gt=0.0, description="Poisson rate; None means 1/T")
    c: Optional[float] = Field(None, description="Shift; None means c = c_P")
    estimator: Estimator = Estimator.DELTA1


class ExperimentConfig(BaseModel):
    """Declarative description of one pricing run."""
    method: Method = Method.EXACT
    params: ModelParams = Field(default_factory=ModelParams)
    payoff: PayoffSpec = Field(default_factory=PayoffSpec)
    n: int = Field(100_000, ge=2, description="Number of samples")
    grid: GridSpec = Field(default_factory=GridSpec)
    ue: UEKnobs = Field(default_factory=UEKnobs)
    hybrid: HybridConfig = Field(default_factory=HybridConfig)
    control_variate: bool = True
    fitted_lambda: bool = False
    seed: int = Field(42, ge=0)
    workers: int = Field(1, ge=1)
    csv: Optional[str] = None
    bins: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _check_method_knobs(self) -> "ExperimentConfig":
        if self.method in (Method.EXACT, Method.UE_BOUND, Method.UE_FREE) and self.params.alpha <= 0.0:
            raise ValueError(f"method {self.method.value} requires alpha > 0")
        if self.method == Method.HYBRID and self.params.alpha != 0.0:
            raise ValueError("method hybrid requires alpha = 0")
        if self.payoff.style.value == "floating" and self.method not in (Method.HYBRID, Method.TRAP_KV):
            raise ValueError("floating strike is only priced by hybrid and trap-kv")
        if self.payoff.strike != self.params.K:
            if self.payoff.style.value == "fixed" and "strike" in self.payoff.model_fields_set:
                raise ValueError(f"payoff strike {self.payoff.strike} conflicts with K={self.params.K}")
            self.payoff = self.payoff.model_copy(update={"strike": self.params.K})
        return self


# key=value names accepted in experiment files, mapped to (section, field)
FLAT_KEYS = {
    "method": (None, "method"),
    "n": (None, "n"),
    "samples": (None, "n"),
    "seed": (None, "seed"),
    "workers": (None, "workers"),
    "csv": (None, "csv"),
    "bins": (None, "bins"),
    "control_variate": (None, "control_variate"),
    "fitted_lambda": (None, "fitted_lambda"),
    "S0": ("params", "S0"),
    "r": ("params", "r"),
    "delta": ("params", "delta"),
    "sigma": ("params", "sigma"),
    "T": ("params", "T"),
    "alpha": ("params", "alpha"),
    "beta": ("params", "beta"),
    "K": ("params", "K"),
    "option_type": ("payoff", "option_type"),
    "style": ("payoff", "style"),
    "M": ("grid", "M"),
    "c_P": ("ue", "c_P"),
    "c": ("ue", "c"),
    "estimator": ("ue", "estimator"),
    "J": ("hybrid", "J"),
    "eta": ("hybrid", "eta"),
    "c_p": ("hybrid", "c_p"),
    "retry_cap": ("hybrid", "retry_cap"),
}
