# acrkn/domain/models.py

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from domain.errors import DataError
from utils.layers import Layer
from utils.params import ParamStore
from utils.tensor import Parameter, Tensor

SYSTEM_KINDS = ("pendulum-lag", "antagonistic-backlash", "linear-integrator")
CONTROL_KINDS = ("linear", "locally-linear", "nonlinear", "none")


# ---------- cell ----------

@dataclass
class FactorizedBelief:
    """
    Gaussian belief over the latent state z = [upper; lower], batched on the first axis.
    The covariance is the 2x2 block-of-diagonals [[σu, σs], [σs, σl]].
    """
    z_upper: Tensor  # (B, m)
    z_lower: Tensor  # (B, m)
    sigma_u: Tensor
    sigma_l: Tensor
    sigma_s: Tensor

    @property
    def m(self) -> int:
        return self.z_upper.shape[-1]


@dataclass
class LatentObservation:
    w: Tensor  # (B, m)
    sigma_obs: Tensor  # (B, m), > 0


@dataclass
class KalmanGain:
    q_u: Tensor
    q_l: Tensor


@dataclass
class TransitionBank:
    m: int
    num_basis: int
    bandwidth: int
    basis: Parameter  # (K, n, n), zero outside the four band blocks
    alpha_weight: Parameter  # (n, K)
    alpha_bias: Parameter  # (K,)
    sigma_trans_raw: Parameter  # (n,)
    clamp_count: int = 0

    @property
    def n(self) -> int:
        return 2 * self.m


# ---------- control ----------

@dataclass
class ControlModel:
    kind: str
    action_dim: int
    latent_dim: int  # n
    matrix: Optional[Parameter] = None  # linear: (n, d_a)
    basis: Optional[Parameter] = None  # locally-linear: (K_c, n, d_a)
    beta_weight: Optional[Parameter] = None  # locally-linear: (n, K_c)
    beta_bias: Optional[Parameter] = None
    layers: List[Layer] = field(default_factory=list)  # nonlinear
    hidden: List[int] = field(default_factory=list)


# ---------- codecs ----------

@dataclass
class EncoderNet:
    input_dim: int
    latent_dim: int  # m
    hidden: List[Layer]
    mean_head: Layer
    var_head: Layer


@dataclass
class DecoderNet:
    input_dim: int
    output_dim: int
    layers: List[Layer]
    positive: bool = False  # output passed through elu_plus_one


# ---------- models ----------

@dataclass
class ForwardModel:
    params: ParamStore
    obs_dim: int
    action_dim: int
    m: int
    encoder: EncoderNet
    bank: TransitionBank
    control: ControlModel
    obs_decoder: DecoderNet
    var_decoder: Optional[DecoderNet] = None
    init_var: float = 10.0
    action_as_observation: bool = False

    @property
    def n(self) -> int:
        return 2 * self.m


@dataclass
class InverseModel:
    forward: ForwardModel
    action_decoder: DecoderNet
    lam: float
    action_feedback: bool = True

    @property
    def params(self) -> ParamStore:
        return self.forward.params


@dataclass
class RolloutTrace:
    """
    Per-step record of a rollout. At step t:
      posteriors[t]  belief after (possibly skipped) update with o_t
      priors[t]      belief predicted for t+1
      memory[t]      o_t if observed, else the previous prediction
      predictions[t] ô_{t+1} = memory[t] + deltas[t]
      variances[t]   predictive variance of the delta (variance head only)
      actions[t]     â_t (inverse models only)
    """
    posteriors: List[FactorizedBelief] = field(default_factory=list)
    priors: List[FactorizedBelief] = field(default_factory=list)
    memory: List[Tensor] = field(default_factory=list)
    deltas: List[Tensor] = field(default_factory=list)
    predictions: List[Tensor] = field(default_factory=list)
    variances: List[Tensor] = field(default_factory=list)
    actions: List[Tensor] = field(default_factory=list)
    mask: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.posteriors)


# ---------- data ----------

@dataclass
class SyntheticSystem:
    kind: str = "pendulum-lag"
    gravity: float = 9.81
    length: float = 1.0
    mass: float = 1.0
    damping: float = 0.3
    tau: float = 0.25
    dt: float = 0.02
    noise_std: float = 0.0
    backlash: float = 0.2
    gain: float = 1.0  # linear-integrator only
    action_limit: float = 2.0
    switch_prob: float = 0.05
    smoothing: float = 0.3

    def __post_init__(self):
        if self.kind not in SYSTEM_KINDS:
            raise DataError(f"Unknown system kind: {self.kind}. Expected one of {SYSTEM_KINDS}")
        if self.dt <= 0:
            raise DataError(f"dt must be positive, got {self.dt}")
        if self.tau <= 0:
            raise DataError(f"tau must be positive, got {self.tau}")


@dataclass
class TrajectorySchema:
    obs_dim: int
    action_dim: int

    @property
    def obs_columns(self) -> List[str]:
        return [f"o_{i}" for i in range(1, self.obs_dim + 1)]

    @property
    def action_columns(self) -> List[str]:
        return [f"a_{i}" for i in range(1, self.action_dim + 1)]

    @property
    def columns(self) -> List[str]:
        return ["episode", "t"] + self.obs_columns + self.action_columns


@dataclass
class Episodes:
    """Ragged collection of trajectories: observations[i] is (T_i, d_o), actions[i] is (T_i, d_a)."""
    observations: List[np.ndarray]
    actions: List[np.ndarray]
    episode_ids: List[int]

    def __len__(self) -> int:
        return len(self.episode_ids)

    @property
    def obs_dim(self) -> int:
        return self.observations[0].shape[-1]

    @property
    def action_dim(self) -> int:
        return self.actions[0].shape[-1]

    def subset(self, ids: List[int]) -> "Episodes":
        index = {eid: i for i, eid in enumerate(self.episode_ids)}
        missing = [eid for eid in ids if eid not in index]
        if missing:
            raise DataError(f"Unknown episode ids: {missing}")
        return Episodes(
            observations=[self.observations[index[eid]] for eid in ids],
            actions=[self.actions[index[eid]] for eid in ids],
            episode_ids=list(ids),
        )


@dataclass(frozen=True)
class SequenceBatch:
    observations: np.ndarray  # (E, T, d_o), normalized
    actions: np.ndarray  # (E, T, d_a), normalized
    obs_mask: np.ndarray  # (E, T) bool, True = observed
    target_next_obs: np.ndarray  # (E, T, d_o), o_{t+1}; last step repeats o_{T-1}
    target_mask: np.ndarray  # (E, T) bool, True where o_{t+1} exists
    episode_ids: np.ndarray  # (E,)

    @property
    def num_episodes(self) -> int:
        return self.observations.shape[0]

    @property
    def length(self) -> int:
        return self.observations.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[2]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[2]

    def with_mask(self, obs_mask: np.ndarray) -> "SequenceBatch":
        return replace(self, obs_mask=np.asarray(obs_mask, dtype=bool))


@dataclass
class NormStats:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray

    def to_dict(self) -> Dict[str, List[float]]:
        return {k: getattr(self, k).tolist() for k in ("obs_mean", "obs_std", "act_mean", "act_std")}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "NormStats":
        return cls(**{k: np.asarray(data[k], dtype=np.float64)
                      for k in ("obs_mean", "obs_std", "act_mean", "act_std")})


# ---------- training / evaluation ----------

@dataclass
class GradCheckReport:
    tol: float
    eps: float
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    # name -> [(index, analytic, numeric, relative error)]
    flagged: Dict[str, List[Tuple[Tuple[int, ...], float, float, float]]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.flagged


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    wall_ms: int


@dataclass
class TrainResult:
    metrics: List[EpochMetrics]
    best_epoch: int
    best_val_loss: float
    best_params: Dict[str, np.ndarray]


@dataclass
class EvaluationRow:
    model: str
    horizon: int
    rmse: float
    nll: Optional[float] = None
