"""Node-level differentially private gradient release.

Per-sample gradients are clipped to norm C, summed over the batch, and
perturbed with Gaussian noise; privacy is tracked with a Renyi accountant
of fixed order alpha and converted to (epsilon, delta) at reporting time:

    clip:        w * min(1, C / ||w||)
    sensitivity: 2 * (d_max + 1) * C     (node-level, single-hop model)
                 C                       (whole-graph samples)
    per release: gamma = alpha * sens^2 / (2 * sigma^2)
    conversion:  epsilon = gamma_total + ln(1/delta) / (alpha - 1)

Calibration picks the grid alpha that meets a target epsilon over T
releases with the smallest sigma. Privacy amplification by subsampling is
NOT applied; the accounting composes plain Gaussian releases, which is a
conservative upper bound, and reports flag this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InfeasibleBudgetError, PrivacyContractError
from .seeding import rng_for

ALPHA_GRID_DEFAULT = (1.5, 2.0, 3.0, 4.0, 8.0, 16.0, 32.0, 64.0)


@dataclass
class DPConfig:
    clip_norm: float
    epsilon: float
    delta: float
    rounds: int
    alpha_grid: tuple[float, ...] = ALPHA_GRID_DEFAULT
    sensitivity_rule: str = "node_level"  # node_level | graph_sample
    d_max: int | None = None  # resolved from the data in node_level mode

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if any(a <= 1.0 for a in self.alpha_grid):
            raise ConfigError("every alpha must exceed 1")
        if self.sensitivity_rule not in ("node_level", "graph_sample"):
            raise ConfigError(f"unknown sensitivity rule {self.sensitivity_rule!r}")

    def sensitivity(self) -> float:
        if self.sensitivity_rule == "graph_sample":
            return self.clip_norm
        if self.d_max is None:
            raise ConfigError("node_level sensitivity needs d_max")
        return node_sensitivity(self.d_max, self.clip_norm)


@dataclass
class RDPAccountant:
    """Accumulated Renyi budget at a fixed order."""

    alpha: float
    gamma: float = 0.0
    steps: int = 0

    def record(self, gamma_step: float) -> None:
        if gamma_step < 0:
            raise ConfigError("gamma must be >= 0")
        self.gamma += gamma_step
        self.steps += 1

    def epsilon(self, delta: float) -> float:
        return rdp_to_dp(self.alpha, self.gamma, delta)


def clip_vector(w: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale w onto the C-ball: w * min(1, C / ||w||_2)."""
    if clip_norm <= 0:
        raise ConfigError("clip_norm must be positive")
    norm = float(np.linalg.norm(w))
    if norm <= clip_norm:
        return np.asarray(w, dtype=np.float64).copy()
    return np.asarray(w, dtype=np.float64) * (clip_norm / norm)


def node_sensitivity(d_max: int, clip_norm: float) -> float:
    """L2 sensitivity of a clipped gradient sum when one node (and its
    edges) may appear or vanish: 2 * (d_max + 1) * C."""
    if clip_norm <= 0:
        raise ConfigError("clip_norm must be positive")
    if d_max < 0:
        raise ConfigError("d_max must be >= 0")
    return 2.0 * (d_max + 1) * clip_norm


def gaussian_perturb(v: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Add iid N(0, sigma^2) noise per coordinate, seeded."""
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if sigma == 0:
        return np.asarray(v, dtype=np.float64).copy()
    rng = rng_for(seed, "gaussian_mech")
    return np.asarray(v, dtype=np.float64) + rng.normal(0.0, sigma, size=np.shape(v))


def rdp_of_gaussian(alpha: float, delta2: float, sigma: float) -> float:
    """Renyi budget of one Gaussian release: alpha * delta2^2 / (2 sigma^2)."""
    if alpha <= 1.0:
        raise ConfigError("alpha must exceed 1")
    if delta2 == 0:
        return 0.0
    if sigma <= 0:
        raise InfeasibleBudgetError("sigma = 0 spends an infinite budget")
    return alpha * delta2 * delta2 / (2.0 * sigma * sigma)


def rdp_to_dp(alpha: float, gamma_total: float, delta: float) -> float:
    """Convert an (alpha, gamma) guarantee to (epsilon, delta)."""
    if alpha <= 1.0:
        raise ConfigError("alpha must exceed 1")
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    return gamma_total + math.log(1.0 / delta) / (alpha - 1.0)


@dataclass
class Calibration:
    sigma: float
    alpha: float
    gamma_round: float


def calibrate_sigma(dp: DPConfig) -> Calibration:
    """Smallest noise scale over the alpha grid that spends exactly the
    target epsilon across `rounds` releases."""
    delta2 = dp.sensitivity()
    best: Calibration | None = None
    for alpha in dp.alpha_grid:
        gamma_round = (dp.epsilon - math.log(1.0 / dp.delta) / (alpha - 1.0)) / dp.rounds
        if gamma_round <= 0:
            continue
        if delta2 == 0.0:
            sigma = 0.0
        else:
            sigma = delta2 * math.sqrt(alpha / (2.0 * gamma_round))
        if best is None or sigma < best.sigma:
            best = Calibration(sigma, alpha, gamma_round)
    if best is None:
        raise InfeasibleBudgetError(
            f"epsilon={dp.epsilon} with delta={dp.delta} is unreachable for any "
            f"alpha in {list(dp.alpha_grid)}"
        )
    return best


def dp_release(
    grad_sum: np.ndarray,
    dp: DPConfig,
    sigma: float,
    seed,
    accountant: RDPAccountant | None = None,
) -> np.ndarray:
    """Perturb a clipped per-sample gradient sum with N(0, sigma^2 I) and
    advance the accountant one step. sigma = 0 is a transparency mode for
    testing and must not carry an accountant."""
    out = gaussian_perturb(grad_sum, sigma, seed)
    if accountant is not None:
        accountant.record(rdp_of_gaussian(accountant.alpha, dp.sensitivity(), sigma))
    elif sigma == 0:
        pass  # non-private passthrough
    return out


def ensure_dp_compatible(propagation_steps: int, dp: DPConfig) -> None:
    """Node-level accounting covers single-hop models only."""
    if dp.sensitivity_rule == "node_level" and propagation_steps > 1:
        raise PrivacyContractError(
            f"node-level DP requires propagation k <= 1, got k={propagation_steps}"
        )


def clipped_gradient_sum(
    W: np.ndarray,
    b: np.ndarray,
    X: np.ndarray,
    labels_or_targets: np.ndarray,
    rows: np.ndarray,
    clip_norm: float,
    regression: bool = False,
) -> np.ndarray:
    """Sum of per-sample clipped gradients of the unregularized fit loss,
    flattened as (W||b).

    For one sample the gradient factors as outer(x, e), so its norm is
    ||e|| * sqrt(||x||^2 + 1) and clipping never materializes per-sample
    parameter matrices.
    """
    Xb = X[rows]
    if regression:
        E = ((Xb @ W + b).ravel() - labels_or_targets[rows])[:, None]
    else:
        y = labels_or_targets[rows]
        Z = Xb @ W + b
        shift = Z - Z.max(axis=1, keepdims=True)
        expz = np.exp(shift)
        E = expz / expz.sum(axis=1, keepdims=True)
        E[np.arange(rows.size), y] -= 1.0
    norms = np.linalg.norm(E, axis=1) * np.sqrt((Xb * Xb).sum(axis=1) + 1.0)
    scale = np.ones_like(norms)
    over = norms > clip_norm
    scale[over] = clip_norm / norms[over]
    Es = E * scale[:, None]
    gW = Xb.T @ Es
    gb = Es.sum(axis=0)
    return np.concatenate([gW.ravel(), gb.ravel()])
