"""Training objectives: cross-entropy, correlation adversary and baselines."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

VARIANTS = ("vanilla", "br_net", "multi_task", "adv_mse", "zafar")
ADVERSARIAL = ("br_net", "adv_mse")
DEFAULT_EPS_STD = 1e-8


def canonical_variant(name: str) -> str:
    """Accept ``br-net`` style spellings on the command line."""
    key = name.strip().lower().replace("-", "_")
    if key not in VARIANTS:
        raise ContractViolation(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return key


@dataclass(frozen=True)
class LossVariant:
    name: str = "br_net"
    lam: float = 1.0
    eps_std: float = DEFAULT_EPS_STD

    def __post_init__(self):
        object.__setattr__(self, "name", canonical_variant(self.name))
        if not self.lam >= 0:
            raise ContractViolation(f"lambda must be >= 0, got {self.lam}")
        if not self.eps_std > 0:
            raise ContractViolation(f"eps_std must be > 0, got {self.eps_std}")

    @property
    def adversarial(self) -> bool:
        return self.name in ADVERSARIAL


def classification_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-mean cross-entropy of integer labels."""
    onehot = np.eye(logits.shape[1])[np.asarray(labels, dtype=int)]
    return ad.softmax_cross_entropy(logits, Tensor(onehot), reduction="mean")


def pearson_corr_sq(b: Tensor, b_hat: Tensor, eps_std: float = DEFAULT_EPS_STD) -> Tensor:
    """Squared batch correlation, with ``eps_std`` added to both variances."""
    if b.data.ndim != 1 or b.shape != b_hat.shape:
        raise ContractViolation(f"pearson_corr_sq needs matching 1-D batches, got {b.shape}, {b_hat.shape}")
    if b.shape[0] < 2:
        raise ContractViolation("pearson_corr_sq needs at least 2 samples")
    mb, sb = ad.batch_stats(b, eps_std)
    mh, sh = ad.batch_stats(b_hat, eps_std)
    cov = ad.mean_all((b - mb) * (b_hat - mh))
    return ad.square(cov) / (ad.square(sb) * ad.square(sh))


def _check_pair(b: Tensor, b_hat: Tensor, op: str) -> None:
    if b.data.ndim != 2 or b.shape != b_hat.shape:
        raise ContractViolation(f"{op}: b {b.shape} and b_hat {b_hat.shape} must both be [B,k]")


def sum_corr_sq(b: Tensor, b_hat: Tensor, eps_std: float = DEFAULT_EPS_STD) -> Tensor:
    _check_pair(b, b_hat, "sum_corr_sq")
    total = None
    for j in range(b.shape[1]):
        term = pearson_corr_sq(ad.column(b, j), ad.column(b_hat, j), eps_std)
        total = term if total is None else total + term
    return total


def adv_corr_loss(b: Tensor, b_hat: Tensor, eps_std: float = DEFAULT_EPS_STD) -> Tensor:
    """Negative sum over protected variables of squared correlation; in [-k, 0]."""
    return -sum_corr_sq(b, b_hat, eps_std)


def adv_mse_loss(b: Tensor, b_hat: Tensor) -> Tensor:
    _check_pair(b, b_hat, "adv_mse_loss")
    return ad.mean_all(ad.square(b_hat - b))


def zafar_penalty(b: Tensor, logits: Tensor, eps_std: float = DEFAULT_EPS_STD) -> Tensor:
    """Squared correlation of each protected variable with the binary logit."""
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ContractViolation(f"zafar_penalty needs binary logits [B,2], got {logits.shape}")
    if b.data.ndim != 2 or b.shape[0] != logits.shape[0]:
        raise ContractViolation(f"b {b.shape} does not match logits {logits.shape}")
    diff = ad.column(logits, 1) - ad.column(logits, 0)
    total = None
    for j in range(b.shape[1]):
        term = pearson_corr_sq(ad.column(b, j), diff, eps_std)
        total = term if total is None else total + term
    return total


def rl_adversarial_term(variant: LossVariant, adv: Tensor, lam: Optional[float] = None) -> Tensor:
    """What the feature extractor minimizes against a frozen bias predictor.

    ``adv`` is the bias predictor's own loss (``adv_corr_loss`` or
    ``adv_mse_loss``); the extractor minimizes ``-lam * adv``.
    """
    lam = variant.lam if lam is None else lam
    return adv * (-lam)


def total_objective(
    variant: LossVariant, loss_c: Tensor, adv: Optional[Tensor], lam: Optional[float] = None
) -> tuple[Tensor, Optional[Tensor]]:
    """(loss for the extractor and classifier, loss for the bias predictor).

    Every returned loss is minimized.  For ``br_net`` and ``adv_mse`` ``adv``
    is the bias predictor's loss and the first entry is ``L_c - lam * adv``.
    For ``multi_task`` ``adv`` is the bias head's MSE and for ``zafar`` the
    correlation penalty; both join ``L_c`` in a single minimization.
    """
    lam = variant.lam if lam is None else lam
    if variant.name == "vanilla" or adv is None:
        return loss_c, None
    if variant.adversarial:
        return loss_c + rl_adversarial_term(variant, adv, lam), adv
    return loss_c + adv * lam, None
