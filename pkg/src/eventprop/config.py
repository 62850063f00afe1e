"""Run configuration: one JSON document, every key optional."""
import dataclasses
import json
from dataclasses import dataclass, field

from .core import ADJOINT_VARIANTS, LayerParams
from .exceptions import ConfigurationError
from .loss import LossConfig
from .optim import REDUCTIONS, AdamState

ENGINES = ("reference", "fabric")


@dataclass
class RunConfig:
    # network and neuron model
    net_dims: list = field(default_factory=lambda: [5, 120, 3])
    n_steps: int = 28
    dt: float = 1.0
    tau_s: float = 10.0
    tau_m: float = 40.0
    adjoint_variant: str = "exponential_euler"
    singularity_eps: float = 1e-6
    init_scales: list = field(default_factory=lambda: [[3.2, 3.2], [5.2, 2.8]])
    # loss
    tau_0: float = 1.5
    tau_1: float = 100.0
    alpha_reg: float = 0.01
    reg_sign: float = -1.0
    # optimiser
    lr: float = 0.002
    gamma: float = 0.93
    weight_decay: float = 6.5e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_reduction: str = "sum"
    decoupled_wd: bool = False
    # schedule
    batch_size: int = 22
    epochs: int = 40
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # data
    n_train: int = 5000
    n_test: int = 1000
    data_seed: int = 1234
    test_seed: int = 98765
    t_min: int = 2
    t_max: int = 27
    train_path: str = None
    test_path: str = None
    # execution
    engine: str = "reference"
    n_workers: int = 1
    n_total_systicks: int = None
    trace_events: str = None
    output_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(self.net_dims) < 2 or min(self.net_dims) < 1:
            raise ConfigurationError(f"net_dims must list >= 2 positive widths: {self.net_dims}")
        if len(self.init_scales) != len(self.net_dims) - 1:
            raise ConfigurationError("init_scales needs one (s_mu, s_sigma) pair per layer")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")
        if not 0 <= self.t_min < self.t_max <= self.n_steps - 1:
            raise ConfigurationError("need 0 <= t_min < t_max <= n_steps - 1")
        if self.engine not in ENGINES:
            raise ConfigurationError(f"engine must be one of {ENGINES}")
        if self.adjoint_variant not in ADJOINT_VARIANTS:
            raise ConfigurationError(f"adjoint_variant must be one of {sorted(ADJOINT_VARIANTS)}")
        if self.grad_reduction not in REDUCTIONS:
            raise ConfigurationError(f"grad_reduction must be one of {REDUCTIONS}")
        if self.n_workers < 1:
            raise ConfigurationError("n_workers must be >= 1")
        if not self.seeds:
            raise ConfigurationError("seeds must not be empty")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("n_train and n_test must be >= 1")
        # the component configs raise on anything else out of range
        self.layer_params()
        self.loss_config()
        self.adam_state()

    def layer_params(self):
        return LayerParams(self.tau_s, self.tau_m, self.dt,
                           adjoint_variant=self.adjoint_variant,
                           singularity_eps=self.singularity_eps)

    def loss_config(self):
        return LossConfig(self.tau_0, self.tau_1, self.alpha_reg, self.dt,
                          self.net_dims[-1], self.n_steps, self.reg_sign)

    def adam_state(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps,
                         self.weight_decay, self.gamma, self.decoupled_wd)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def load(cls, path, **overrides):
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)
