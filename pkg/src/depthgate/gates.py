"""Stochastic binary gates with exact probability mass at 0 and 1.

Each maskable block carries a learnable location parameter log_alpha. During
training a gate value is sampled by pushing clamped uniform noise through a
scaled logistic, stretching the result from (0,1) to (l,r), and clipping back
to [0,1]; the stretch makes the endpoints reachable with finite probability,
so a closed form exists for P(gate == 0) and the sparsity level is
differentiable. At inference the gates are binarized by ranking log_alpha so
the requested zero count is met exactly.

The sampling formula scales only the logistic noise by 1/beta and leaves
log_alpha unscaled; the variant that divides the whole logit by beta would
differ only by a reparameterization of log_alpha.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from depthgate.errors import ConfigError, ContractError
from depthgate.tensor import Tensor

BETA = 1.5
STRETCH_LOW = -0.1
STRETCH_HIGH = 1.1
UNIFORM_EPS = 1e-6
# Gates start slightly open (about 1.3% expected zeros) instead of saturated:
# far from the clip regions, log_alpha still receives usable gradient.
INIT_LOG_ALPHA = 0.5


@dataclass
class GateParams:
    """Learnable gate state for one mask; log_alpha is the trained tensor."""
    log_alpha: Tensor
    beta: float = BETA
    stretch_low: float = STRETCH_LOW
    stretch_high: float = STRETCH_HIGH
    epsilon: float = UNIFORM_EPS

    def __post_init__(self):
        if not (self.stretch_low < 0.0 < 1.0 < self.stretch_high):
            raise ConfigError("stretch interval must satisfy l < 0 < 1 < r, "
                              "got l=%g r=%g" % (self.stretch_low, self.stretch_high))
        if self.beta <= 0.0:
            raise ConfigError("beta must be positive, got %g" % self.beta)
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigError("epsilon must lie in (0, 0.5), got %g" % self.epsilon)
        if self.log_alpha.data.ndim != 1:
            raise ConfigError("log_alpha must be 1-D, got shape %s"
                              % (self.log_alpha.data.shape,))
        if not np.all(np.isfinite(self.log_alpha.data)):
            raise ConfigError("log_alpha must be finite")

    @classmethod
    def create(cls, num_gates, init_log_alpha=INIT_LOG_ALPHA, **kwargs):
        if num_gates <= 0:
            raise ConfigError("num_gates must be positive, got %d" % num_gates)
        la = Tensor(np.full(num_gates, init_log_alpha, dtype=np.float32),
                    requires_grad=True)
        return cls(log_alpha=la, **kwargs)

    @property
    def num_gates(self):
        return self.log_alpha.data.shape[0]

    def sample_soft_mask(self, rng):
        return sample_soft_mask(self, rng)

    def expected_sparsity(self):
        return expected_sparsity(self.log_alpha.data, self.beta,
                                 self.stretch_low, self.stretch_high)

    def expected_sparsity_t(self):
        return expected_sparsity_t(self.log_alpha, self.beta,
                                   self.stretch_low, self.stretch_high)

    def binarize(self, target_sparsity):
        return binarize(self.log_alpha.data, target_sparsity)


def draw_uniform(rng, size, epsilon=UNIFORM_EPS):
    """Uniform draws clamped away from {0,1} so the logit stays finite."""
    u = rng.uniform(size=size)
    return np.clip(u, epsilon, 1.0 - epsilon)


def soft_mask_from_uniform(log_alpha, u, beta=BETA,
                           l=STRETCH_LOW, r=STRETCH_HIGH):
    """Differentiable gate values for fixed noise `u`; tape flows to log_alpha."""
    u = np.asarray(u, dtype=np.float32)
    noise = (np.log(u / (1.0 - u)) / beta).astype(np.float32)
    s = (log_alpha + noise).sigmoid()
    return (s * (r - l) + l).clip01()


def sample_soft_mask(gate, rng):
    """One stochastic soft mask (values in [0,1]) from `gate`'s distribution."""
    u = draw_uniform(rng, gate.num_gates, gate.epsilon)
    return soft_mask_from_uniform(gate.log_alpha, u, gate.beta,
                                  gate.stretch_low, gate.stretch_high)


def _zero_logit_shift(beta, l, r):
    # P(gate == 0) = sigmoid(-beta * (log_alpha + log(-r/l))).
    return math.log(-r / l)


def expected_sparsity(log_alpha, beta=BETA, l=STRETCH_LOW, r=STRETCH_HIGH):
    """Closed-form mean P(gate == 0) over the gate vector."""
    la = np.asarray(log_alpha, dtype=np.float64)
    z = -beta * (la + _zero_logit_shift(beta, l, r))
    return float(np.mean(np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                                  np.exp(z) / (1.0 + np.exp(z)))))


def expected_sparsity_t(log_alpha, beta=BETA, l=STRETCH_LOW, r=STRETCH_HIGH):
    """Tape variant of expected_sparsity; scalar tensor, grads to log_alpha."""
    shift = _zero_logit_shift(beta, l, r)
    return ((log_alpha + shift) * (-beta)).sigmoid().mean()


def binarize(log_alpha, target_sparsity):
    """Deterministic 0/1 mask with exactly round(target * B) zeros.

    Gates with the smallest log_alpha are zeroed first; on ties the higher
    flat index is zeroed, keeping lower-index blocks open.
    """
    la = np.asarray(log_alpha)
    if la.ndim != 1:
        raise ContractError("log_alpha must be 1-D, got shape %s" % (la.shape,))
    if not 0.0 <= target_sparsity < 1.0:
        raise ContractError("target_sparsity must lie in [0, 1), got %g"
                            % target_sparsity)
    b = la.shape[0]
    num_zeros = int(math.floor(target_sparsity * b + 0.5))
    mask = np.ones(b, dtype=np.int8)
    if num_zeros:
        order = np.lexsort((-np.arange(b), la))
        mask[order[:num_zeros]] = 0
    return mask


@dataclass
class MaskCandidate:
    """A trained mask for one cluster, ready for the library."""
    cluster_id: int
    centroid: np.ndarray
    log_alpha: np.ndarray
    binary_mask: np.ndarray
    achieved_sparsity: float = field(default=None)

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=np.float32)
        self.log_alpha = np.asarray(self.log_alpha, dtype=np.float32)
        self.binary_mask = np.asarray(self.binary_mask, dtype=np.int8)
        if not np.all((self.binary_mask == 0) | (self.binary_mask == 1)):
            raise ContractError("binary_mask entries must be 0 or 1")
        if self.binary_mask.shape != self.log_alpha.shape:
            raise ContractError("binary_mask shape %s != log_alpha shape %s"
                                % (self.binary_mask.shape, self.log_alpha.shape))
        want = float(np.mean(self.binary_mask == 0))
        if self.achieved_sparsity is None:
            self.achieved_sparsity = want
        elif abs(self.achieved_sparsity - want) > 1e-9:
            raise ContractError("achieved_sparsity %g inconsistent with mask "
                                "(%g zeros)" % (self.achieved_sparsity, want))
