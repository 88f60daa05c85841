"""STAPLE binário: EM sobre sensibilidade (p) e especificidade (q) de cada avaliador.

O E-step acumula em log (produtos sobre dezenas de avaliadores estouram em
escala linear). p, q e os pesos W ficam presos em [1e-6, 1 - 1e-6] a cada
iteração; denominadores degenerados nunca levantam erro.
"""
from dataclasses import dataclass, field

import numpy as np

from core.exceptions import InvalidArgumentError

PROB_EPS = 1e-6
PRIOR_EPS = 1e-3
DEFAULT_INIT = 0.99
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 100


@dataclass(frozen=True, eq=False)
class RaterStack:
    decisions: np.ndarray
    prior: float

    def __post_init__(self):
        decisions = np.asarray(self.decisions)
        if decisions.ndim != 2 or decisions.shape[0] < 1 or decisions.shape[1] < 1:
            raise InvalidArgumentError(f'decisions must be (raters, voxels) with both >= 1, got {decisions.shape}')
        if not np.isin(decisions, (0, 1)).all():
            raise InvalidArgumentError('decisions must be binary')
        if not 0.0 < self.prior < 1.0:
            raise InvalidArgumentError(f'prior must be in (0, 1), got {self.prior}')
        object.__setattr__(self, 'decisions', decisions.astype(np.uint8))

    @classmethod
    def from_masks(cls, masks, prior=None):
        """Empilha máscaras de mesma forma; sem ``prior``, usa a fração média de frente."""
        decisions = np.stack([np.asarray(mask).reshape(-1) for mask in masks])
        if prior is None:
            prior = float(np.clip(decisions.mean(), PRIOR_EPS, 1.0 - PRIOR_EPS))
        return cls(decisions=decisions, prior=prior)

    @property
    def raters(self):
        return self.decisions.shape[0]


@dataclass
class StapleEstimate:
    weights: np.ndarray
    sensitivities: np.ndarray
    specificities: np.ndarray
    iterations: int
    converged: bool
    log_likelihoods: list = field(default_factory=list)

    @property
    def mask(self):
        return (self.weights >= 0.5).astype(np.uint8)

    def summary(self):
        return {
            'sensitivities': self.sensitivities.tolist(),
            'specificities': self.specificities.tolist(),
            'iterations': self.iterations,
            'converged': self.converged,
        }


def _clip(values):
    return np.clip(values, PROB_EPS, 1.0 - PROB_EPS)


def _log_terms(decisions, prior, p, q):
    """log a_i e log b_i (frente e fundo) para cada voxel."""
    agree = decisions.T
    disagree = 1.0 - agree
    log_a = np.log(prior) + agree @ np.log(p) + disagree @ np.log1p(-p)
    log_b = np.log1p(-prior) + disagree @ np.log(q) + agree @ np.log1p(-q)
    return log_a, log_b


def _e_step(decisions, prior, p, q):
    log_a, log_b = _log_terms(decisions, prior, p, q)
    log_total = np.logaddexp(log_a, log_b)
    return _clip(np.exp(log_a - log_total)), float(log_total.sum())


def _m_step(decisions, weights):
    tiny = np.finfo(np.float64).tiny
    p = decisions @ weights / max(weights.sum(), tiny)
    q = (1.0 - decisions) @ (1.0 - weights) / max((1.0 - weights).sum(), tiny)
    return _clip(p), _clip(q)


def observed_log_likelihood(stack, p, q):
    return _e_step(stack.decisions.astype(np.float64), stack.prior, _clip(p), _clip(q))[1]


def staple_fuse(stack, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS, init=DEFAULT_INIT):
    decisions = stack.decisions.astype(np.float64)
    raters = stack.raters

    if (decisions == decisions[0]).all():
        # avaliadores unânimes (inclui R = 1): o consenso é a própria decisão
        weights = _clip(decisions[0].copy())
        p, q = _m_step(decisions, weights)
        return StapleEstimate(
            weights=weights, sensitivities=p, specificities=q,
            iterations=1, converged=True,
            log_likelihoods=[_e_step(decisions, stack.prior, p, q)[1]],
        )

    p = np.full(raters, init, dtype=np.float64)
    q = np.full(raters, init, dtype=np.float64)
    history = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        weights, log_likelihood = _e_step(decisions, stack.prior, p, q)
        history.append(log_likelihood)
        p_new, q_new = _m_step(decisions, weights)
        change = max(np.abs(p_new - p).max(), np.abs(q_new - q).max())
        p, q = p_new, q_new
        if change < tol:
            converged = True
            break

    weights, log_likelihood = _e_step(decisions, stack.prior, p, q)
    history.append(log_likelihood)
    return StapleEstimate(
        weights=weights, sensitivities=p, specificities=q,
        iterations=iterations, converged=converged, log_likelihoods=history,
    )
