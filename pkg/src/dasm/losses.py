"""Cross-entropy, domain-supervised contrastive loss, and their sum with the gap term."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import EncoderClassifier, normalize_rows
from .modulator import DomainCenterBank, GapState, adgm_loss, compute_gaps, inactive_state


@dataclass
class LabeledBatch:
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        if not len(self.y) == len(self.d) == len(self.x):
            raise ValueError("x, y and d must have the same length")
        if np.any((self.y == 0) != (self.d == 0)):
            raise ValueError("cover samples (y=0) must carry domain 0 and only they may")

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class LossBreakdown:
    ce: Tensor
    dscl: Tensor
    adgm: Tensor
    total: Tensor
    dscl_anchors: int = 0
    gap_state: GapState | None = None

    def values(self) -> dict[str, float]:
        return {"ce": self.ce.item(), "dscl": self.dscl.item(),
                "adgm": self.adgm.item(), "total": self.total.item()}


def cross_entropy(logits, y) -> Tensor:
    """Mean ``-log softmax(logits)[y]`` with a (constant) row-max shift."""
    logits = ad.as_tensor(logits)
    y = np.asarray(y, dtype=np.int64)
    b, c = logits.shape
    shift = logits.data.max(axis=1, keepdims=True)
    shifted = ad.sub(logits, np.broadcast_to(shift, (b, c)))
    lse = ad.log(ad.reduce_sum(ad.exp(shifted), axis=1))
    onehot = np.zeros((b, c))
    onehot[np.arange(b), y] = 1.0
    picked = ad.reduce_sum(ad.mul(shifted, onehot), axis=1)
    return ad.reduce_mean(ad.sub(lse, picked))


def contrastive_masks(d) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = np.asarray(d)
    same = d[:, None] == d[None, :]
    pos = same & ~np.eye(len(d), dtype=bool)
    neg = ~same
    anchors = np.flatnonzero(pos.any(axis=1))
    return pos.astype(np.float64), neg.astype(np.float64), anchors


def dscl(z, d, tau: float) -> tuple[Tensor, int]:
    """Domain-supervised InfoNCE over the batch.

    Returns ``(loss, n_anchors)``. Anchors without a same-domain partner are left
    out of the average; with no usable anchor the loss is exactly 0 and
    ``n_anchors == 0`` flags it.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = ad.as_tensor(z)
    pos, neg, anchors = contrastive_masks(d)
    if anchors.size == 0:
        return Tensor(0.0), 0
    b = z.shape[0]
    sim = ad.scale(ad.matmul(z, ad.transpose(z)), 1.0 / tau)
    # per-row constant shift; cancels in S+/(S+ + S-)
    off = np.where(np.eye(b, dtype=bool), -np.inf, sim.data)
    shift = np.broadcast_to(off.max(axis=1, keepdims=True), (b, b))
    e = ad.exp(ad.sub(sim, shift))
    s_pos = ad.take(ad.reduce_sum(ad.mul(e, pos), axis=1), anchors)
    s_neg = ad.take(ad.reduce_sum(ad.mul(e, neg), axis=1), anchors)
    terms = ad.sub(ad.log(ad.add(s_pos, s_neg)), ad.log(s_pos))
    return ad.reduce_mean(terms), int(anchors.size)


def total_loss(model: EncoderClassifier, batch: LabeledBatch, bank: DomainCenterBank | None,
               tau: float, *, use_dscl: bool = True, use_adgm: bool = True,
               update_bank: bool = False, frozen=None) -> LossBreakdown:
    """One forward pass and the unit-weighted sum CE + DSCL + ADGM.

    ``update_bank`` feeds the detached normalized features of this pass into the
    EMA centers before the gaps are formed. ``frozen`` reuses weights from an
    earlier evaluation in the same step.
    """
    z_raw, logits = model.forward(batch.x)
    ce = cross_entropy(logits, batch.y)
    zero = Tensor(0.0)
    need_z = use_dscl or (use_adgm and bank is not None)
    z = normalize_rows(z_raw) if need_z else None
    anchors = 0
    if use_dscl:
        l_dscl, anchors = dscl(z, batch.d, tau)
    else:
        l_dscl = zero
    state = None
    if use_adgm and bank is not None:
        if update_bank:
            bank.update(z.data, batch.d)
        state = compute_gaps(bank, z, batch.d, frozen=frozen)
        l_adgm = adgm_loss(state)
    else:
        l_adgm = zero
        if use_adgm:
            state = inactive_state()
    total = ad.add(ad.add(ce, l_dscl), l_adgm)
    return LossBreakdown(ce, l_dscl, l_adgm, total, anchors, state)
