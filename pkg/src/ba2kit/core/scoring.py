"""
Decathlon-style scoring.

Each domain contributes alpha * max(0, E_max - E)^2 with alpha = 1000 / E_max^2,
so a perfect domain scores exactly 1000 and a domain at or above its baseline
error scores 0.
"""

import logging
from typing import Iterable, Optional, Sequence, Tuple

from .errors import ConfigError
from .models import DomainResult, DomainScore, ScoreReport

PERFECT_DOMAIN_SCORE = 1000.0
BASELINE_ERROR_FACTOR = 2.0

logger = logging.getLogger(__name__)


def baseline_error(finetune_error: float) -> float:
    """E_max: twice the fine-tuned model's error, left uncapped."""
    if not (0.0 <= finetune_error <= 1.0):
        raise ConfigError(f"Fine-tune error must be in [0, 1], got {finetune_error}")
    return BASELINE_ERROR_FACTOR * finetune_error


def partial_score(error: float, e_max: float) -> Tuple[float, float]:
    """Return (alpha, partial score) for one domain."""
    if not (0.0 <= error <= 1.0):
        raise ConfigError(f"Test error must be in [0, 1], got {error}")
    if e_max <= 0.0:
        raise ConfigError("Baseline error E_max must be positive; the baseline is degenerate")
    alpha = PERFECT_DOMAIN_SCORE / (e_max * e_max)
    gap = max(0.0, e_max - error)
    return alpha, PERFECT_DOMAIN_SCORE * (gap / e_max) ** 2


def decathlon_score(
    results: Iterable[Tuple[float, float]],
    domains: Optional[Sequence[DomainResult]] = None,
) -> ScoreReport:
    """
    Score (E, E_max) pairs.

    ``domains`` optionally supplies the matching per-domain results so the
    report carries their ids, budgets and costs.
    """
    scores = []
    for i, (error, e_max) in enumerate(results):
        alpha, partial = partial_score(error, e_max)
        info = domains[i] if domains is not None else None
        score = DomainScore(
            domain=info.domain if info else str(i),
            budget=info.budget if info else 1.0,
            error=error,
            e_max=e_max,
            alpha=alpha,
            partial=partial,
            flop_fraction=info.flop_fraction if info else 1.0,
            param_bits=info.param_bits if info else 0,
            compliant=info.compliant if info else True,
        )
        if score.baseline_flagged:
            logger.warning(
                f"Baseline error {e_max:.4f} for domain '{score.domain}' exceeds 1",
                extra={"event": "baseline_above_one", "domain": score.domain},
            )
        scores.append(score)
    return ScoreReport(domains=scores)


def efficiency_scores(score: float, rel_flop: float, rel_params: float) -> Tuple[float, float]:
    """(S_O, S_P) = (S / relative FLOP, S / relative parameters)."""
    if rel_flop <= 0 or rel_params <= 0:
        raise ConfigError(
            f"Relative FLOP and parameters must be positive, got {rel_flop} and {rel_params}"
        )
    return score / rel_flop, score / rel_params
