"""Model-generated denoising objectives.

Pipeline per batch: choose mask positions M, train the auxiliary model with
MLM on M, replace every position in M with a sample from the auxiliary's
softmax, and train the main model on the corrupted sequence with replaced
token detection (optionally plus a corrective LM loss on M).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .encoder import MASK_ID, PAD_ID, SPECIAL_IDS
from .errors import ConfigError, DataError
from .tensor import Tensor

OBJECTIVES = ("rtd_only", "rtd_plus_sclm", "replace_mlm")


@dataclass
class ObjectiveConfig:
    mask_rate: float = 0.15
    loss_lambda: float = 50.0
    main_objective: str = "rtd_plus_sclm"

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must be in (0, 1), got {self.mask_rate}", "objective.mask_rate")
        if self.loss_lambda < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.loss_lambda}", "objective.lambda")
        if self.main_objective not in OBJECTIVES:
            raise ConfigError(f"main_objective must be one of {OBJECTIVES}", "objective.main_objective")

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("loss_lambda")
        return d


@dataclass
class CorruptionBatch:
    x_orig: np.ndarray
    x_mask: np.ndarray
    mask_set: list[np.ndarray]
    pad_mask: np.ndarray
    x_noise: np.ndarray | None = None
    replaced_flags: np.ndarray | None = None
    _flat: np.ndarray | None = field(default=None, repr=False)

    @property
    def flat_mask(self) -> np.ndarray:
        """Masked positions as sorted flat indices into B*L."""
        if self._flat is None:
            l = self.x_orig.shape[1]
            self._flat = np.concatenate([b * l + m for b, m in enumerate(self.mask_set)]).astype(np.int64)
        return self._flat

    @property
    def n_tokens(self) -> int:
        return int((~self.pad_mask).sum())


def maskable(x_orig: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
    return ~np.isin(x_orig, SPECIAL_IDS) & ~pad_mask


def mask_count(rate: float, n: int) -> int:
    """ceil(rate * n), immune to float noise such as 0.15 * 20 = 3.0000000000000004."""
    return max(1, math.ceil(round(rate * n, 9)))


def select_masks(x_orig, pad_mask, mask_rate, rng) -> CorruptionBatch:
    """Pick ``ceil(mask_rate * maskable)`` positions per sequence, uniformly without replacement."""
    x_orig = np.asarray(x_orig)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    ok = maskable(x_orig, pad_mask)
    x_mask = x_orig.copy()
    mask_set = []
    for b in range(x_orig.shape[0]):
        cand = np.flatnonzero(ok[b])
        if cand.size == 0:
            raise DataError(f"sequence {b} has no maskable tokens")
        chosen = np.sort(rng.choice(cand, size=mask_count(mask_rate, cand.size), replace=False))
        x_mask[b, chosen] = MASK_ID
        mask_set.append(chosen)
    return CorruptionBatch(x_orig=x_orig, x_mask=x_mask, mask_set=mask_set, pad_mask=pad_mask)


def _rows(logits: Tensor, positions: np.ndarray) -> tuple[Tensor, np.ndarray | None]:
    """Normalize MLM logits to [n x V] plus the positions to score.

    Full [B x L x V] logits are flattened and scored at ``positions``; logits
    that are already [|M| x V] are taken to be aligned with ``positions``.
    """
    if logits.data.ndim == 3:
        b, l, v = logits.shape
        return T.reshape(logits, (b * l, v)), positions
    return logits, None


def _masked_ce(logits: Tensor, x_orig, positions) -> Tensor:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        raise DataError("empty mask set")
    rows, sel = _rows(logits, positions)
    flat = np.asarray(x_orig).ravel()
    if sel is None:
        return T.cross_entropy(rows, flat[positions])
    return T.cross_entropy(rows, flat, sel)


def aux_mlm_loss(aux_mlm_logits: Tensor, x_orig, positions) -> Tensor:
    """Mean cross-entropy of the original tokens over the masked positions."""
    return _masked_ce(aux_mlm_logits, x_orig, positions)


def sclm_loss(main_mlm_logits: Tensor, x_orig, positions) -> Tensor:
    """Corrective LM restricted to the masked positions, no copy mechanism."""
    return _masked_ce(main_mlm_logits, x_orig, positions)


replace_mlm_loss = sclm_loss


def sample_corruption(aux_mlm_logits, batch: CorruptionBatch, rng) -> CorruptionBatch:
    """Replace every masked position with a draw from the auxiliary softmax.

    ``aux_mlm_logits`` may be a Tensor or array, [B x L x V] or [|M| x V]
    aligned with ``batch.flat_mask``. The draw is discrete, so nothing is
    recorded on the tape.
    """
    data = aux_mlm_logits.data if isinstance(aux_mlm_logits, Tensor) else np.asarray(aux_mlm_logits)
    pos = batch.flat_mask
    rows = data.reshape(-1, data.shape[-1])[pos] if data.ndim == 3 else data
    draws = categorical(rows, rng)
    x_noise = batch.x_orig.copy()
    x_noise.ravel()[pos] = draws
    batch.x_noise = x_noise
    batch.replaced_flags = x_noise != batch.x_orig
    return batch


def categorical(logits: np.ndarray, rng) -> np.ndarray:
    """One draw per row from softmax(logits), temperature 1, by inverse CDF."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    cdf = np.cumsum(np.exp(z), axis=1)
    u = rng.random(z.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, z.shape[1] - 1)


def rtd_labels(batch: CorruptionBatch) -> np.ndarray:
    """1 where the token is original (including lucky samples), 0 where replaced."""
    return (~batch.replaced_flags).astype(np.int64)


def rtd_loss(main_rtd_logits: Tensor, batch: CorruptionBatch) -> Tensor:
    """Binary cross-entropy over all non-pad positions; the logit scores "original"."""
    keep = np.flatnonzero(~batch.pad_mask.ravel())
    return T.binary_cross_entropy_with_logits(
        T.reshape(main_rtd_logits, (-1,)) if main_rtd_logits.data.ndim > 1 else main_rtd_logits,
        rtd_labels(batch).ravel(),
        keep,
    )


def total_loss(l_aux, l_rtd, l_sclm, lam: float, objective: str):
    """Combine component losses; works on Tensors and on plain floats."""
    if objective == "rtd_only":
        return l_aux + T.mul(l_rtd, lam) if isinstance(l_rtd, Tensor) else l_aux + lam * l_rtd
    if objective == "rtd_plus_sclm":
        if l_sclm is None:
            raise ValueError("rtd_plus_sclm needs the s-CLM loss")
        main = T.mul(l_rtd, lam) if isinstance(l_rtd, Tensor) else lam * l_rtd
        return l_aux + main + l_sclm
    if objective == "replace_mlm":
        if l_sclm is None:
            raise ValueError("replace_mlm needs the masked-position LM loss")
        return l_aux + l_sclm
    raise ConfigError(f"unknown objective {objective!r}", "objective.main_objective")


def curriculum_metrics(batch: CorruptionBatch, main_rtd_logits) -> dict[str, float]:
    """Replace rate over all non-pad tokens; detection accuracy on replaced ones.

    Accuracy is NaN when nothing was replaced.
    """
    n = batch.n_tokens
    if n == 0:
        raise DataError("batch has no non-pad tokens")
    flags = batch.replaced_flags & ~batch.pad_mask
    n_rep = int(flags.sum())
    z = main_rtd_logits.data if isinstance(main_rtd_logits, Tensor) else np.asarray(main_rtd_logits)
    z = z.reshape(flags.shape)
    # sigmoid(z) < 0.5  <=>  z < 0
    acc = float((z[flags] < 0).mean()) if n_rep else float("nan")
    return {"replace_rate": n_rep / n, "replace_accuracy": acc}


def pad_mask_of(x) -> np.ndarray:
    return np.asarray(x) == PAD_ID
