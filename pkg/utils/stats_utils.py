import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats
from statsmodels.stats.multitest import multipletests

from components import dependencies
from components.exceptions import ContractError

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.stats_utils')

SHAPIRO_MIN_N = 3
SHAPIRO_MAX_N = 5000


@dataclass(frozen=True)
class StatTestResult:
    statistic: float
    p_value: float
    n_effective: int
    reject: Optional[bool] = None
    alpha: float = 0.05
    computable: bool = True
    details: Dict[str, float] = field(default_factory=dict)


def shapiro_wilk(sample: Sequence[float], alpha: float = 0.05) -> StatTestResult:
    """
    Shapiro-Wilk normality test.

    Args:
        sample (Sequence[float]): Between 3 and 5000 observations.
        alpha (float): Level at which normality is rejected.

    Returns:
        StatTestResult: W and p; a constant sample is reported as not computable.
    """
    values = np.asarray(sample, dtype=float)
    if not SHAPIRO_MIN_N <= values.size <= SHAPIRO_MAX_N:
        raise ContractError(f"Shapiro-Wilk needs {SHAPIRO_MIN_N}..{SHAPIRO_MAX_N} observations, got {values.size}")
    if np.ptp(values) == 0:
        logger.warning("Shapiro-Wilk on a constant sample is undefined")
        return StatTestResult(float("nan"), float("nan"), values.size, None, alpha, computable=False)
    w, p = stats.shapiro(values)
    return StatTestResult(float(w), float(p), values.size, bool(p < alpha), alpha)


def wilcoxon_signed_rank(paired_a: Sequence[float], paired_b: Sequence[float], alpha: float = 0.05) -> StatTestResult:
    """
    Two-sided Wilcoxon signed-rank test with the tie- and continuity-corrected
    normal approximation (`scipy.stats.wilcoxon`). Zero differences are dropped.

    Args:
        paired_a (Sequence[float]): First sample.
        paired_b (Sequence[float]): Paired second sample.
        alpha (float): Significance level for the decision.

    Returns:
        StatTestResult: statistic = min(W+, W-); details hold the z-score.
    """
    a = np.asarray(paired_a, dtype=float)
    b = np.asarray(paired_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ContractError("paired samples must be non-empty and of equal length")
    n = int(np.count_nonzero(a - b))
    if n == 0:
        return StatTestResult(0.0, 1.0, 0, False, alpha, details={"z": 0.0})

    with warnings.catch_warnings():
        # small samples: scipy warns about the normal approximation
        warnings.simplefilter("ignore", UserWarning)
        res = stats.wilcoxon(a, b, zero_method="wilcox", correction=True, alternative="two-sided", method="approx")
    p = float(res.pvalue)
    return StatTestResult(float(res.statistic), p, n, bool(p <= alpha), alpha,
                          details={"z": float(getattr(res, "zstatistic", float("nan")))})


def holm_bonferroni(p_values: Sequence[float], alpha: float = 0.05) -> List[bool]:
    """
    Holm step-down decisions in the original order of `p_values`.

    Raises:
        ContractError: If any p-value lies outside [0, 1].
    """
    values = np.asarray(p_values, dtype=float)
    if values.size == 0:
        return []
    if np.any((values < 0) | (values > 1)) or np.any(np.isnan(values)):
        raise ContractError("p-values must lie in [0, 1]")
    reject, _, _, _ = multipletests(values, alpha=alpha, method="holm")
    return [bool(r) for r in reject]
