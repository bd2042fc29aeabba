from dataclasses import dataclass, field


@dataclass
class ColumnRoles:
    response: str
    group: str
    covariates: list[str] | str = "all"
    random: list[str] | str = "all"


@dataclass
class TruthRecord:
    family: str
    seed: int
    sigma: float
    beta_true: list[float]
    covariate_names: list[str]
    fixed_positions: list[int]
    random_positions: list[int]
    group_sizes: list[int]


@dataclass
class SelectionScore:
    tp_fixef: int
    fp_fixef: int
    tp_ranef: int
    fp_ranef: int
    beta_hat: list[float] = field(default_factory=list)
    wall_time: float = 0.0
