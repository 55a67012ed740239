"""Training objectives: sparsity, diversity, reconstruction, and their mix.

All evaluation-path functions take plain numpy arrays and return floats.
The *_graph variants build the same quantities on autodiff Tensors so the
trainer can differentiate them; the graph diversity term guards log with a
1e-12 additive epsilon (the eval version uses the exact 0*log(0) = 0
convention instead).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError

KL_FLOOR = 1e-8
_LOG_GUARD = 1e-12


def _check_prob_vector(name, p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 1:
        raise ContractError("%s: expected a probability vector" % name)
    if np.any(p < 0.0) or not np.all(np.isfinite(p)):
        raise ContractError("%s: components must be finite and >= 0" % name)
    if abs(p.sum() - 1.0) > 1e-6:
        raise ContractError("%s: components must sum to 1 (got %.9f)" % (name, p.sum()))
    return p


def kl_divergence(p, q):
    """KL(p || q) with q floored at 1e-8 then renormalized; 0*log(0/q) = 0."""
    p = _check_prob_vector("kl_divergence p", p)
    q = _check_prob_vector("kl_divergence q", q)
    if p.shape != q.shape:
        raise ContractError("kl_divergence: length mismatch %d vs %d"
                            % (p.shape[0], q.shape[0]))
    qf = np.maximum(q, KL_FLOOR)
    qf = qf / qf.sum()
    mask = p > 0.0
    val = float(np.sum(p[mask] * np.log(p[mask] / qf[mask])))
    if val < 0.0 and val > -1e-12:
        val = 0.0
    return val


def sparsity_loss(sigma):
    """1 - max component: zero for one-hot rows, largest for uniform rows."""
    sigma = _check_prob_vector("sparsity_loss", sigma)
    return float(1.0 - sigma.max())


def diversity_loss(sigmas):
    """Mean over rows of KL(row || uniform)."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.ndim != 2 or sigmas.shape[0] < 1:
        raise ContractError("diversity_loss: expected a nonempty (m, n) matrix")
    n = sigmas.shape[1]
    uniform = np.full(n, 1.0 / n)
    return float(np.mean([kl_divergence(row, uniform) for row in sigmas]))


def reconstruction_loss(predicted, target):
    """Mean squared error over all entries."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ContractError("reconstruction_loss: shapes %s and %s differ"
                            % (predicted.shape, target.shape))
    if predicted.size == 0:
        raise ContractError("reconstruction_loss: empty input")
    diff = predicted - target
    return float(np.mean(diff * diff))


@dataclass(frozen=True)
class LossWeights:
    reconstruction_weight: float = 1.0
    sparsity_weight: float = 0.0
    diversity_weight: float = 100.0

    def __post_init__(self):
        if self.reconstruction_weight <= 0.0:
            raise ContractError("LossWeights: reconstruction_weight must be > 0")
        if self.sparsity_weight < 0.0 or self.diversity_weight < 0.0:
            raise ContractError("LossWeights: weights must be >= 0")


def total_loss(recon, sparsity, diversity, weights):
    return (weights.reconstruction_weight * recon
            + weights.sparsity_weight * sparsity
            + weights.diversity_weight * diversity)


def reconstruction_loss_graph(predicted, target):
    """MSE as a Tensor; target may be a constant array."""
    if not isinstance(target, ad.Tensor):
        target = ad.Tensor(target)
    if predicted.data.shape != target.data.shape:
        raise ContractError("reconstruction_loss_graph: shapes %s and %s differ"
                            % (predicted.data.shape, target.data.shape))
    return ad.mul(ad.square_error(predicted, target), 1.0 / predicted.data.size)


def diversity_loss_graph(sigmas):
    """Mean KL(row || uniform) on a Tensor of posteriors, log guarded at 1e-12."""
    if sigmas.data.ndim != 2 or sigmas.data.shape[0] < 1:
        raise ContractError("diversity_loss_graph: expected a nonempty (m, n) Tensor")
    n = sigmas.data.shape[1]
    plogp = ad.mul(sigmas, ad.log(ad.add(sigmas, _LOG_GUARD)))
    return ad.add(ad.mean(ad.total(plogp, axis=1)), float(np.log(n)))


def sparsity_loss_graph(sigmas):
    """Mean over rows of (1 - max component) on a Tensor of posteriors."""
    if sigmas.data.ndim != 2 or sigmas.data.shape[0] < 1:
        raise ContractError("sparsity_loss_graph: expected a nonempty (m, n) Tensor")
    ones = ad.Tensor(np.ones((sigmas.data.shape[0], 1)))
    return ad.mean(ad.sub(ones, ad.rowmax(sigmas)))
