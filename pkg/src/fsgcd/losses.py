"""Training objectives with values and exact input gradients.

All functions take unit-norm embedding rows (float64) and return the loss
value together with gradients w.r.t. every embedding argument, so they can be
chained through the encoder's backward pass.  Losses that sample (the known
triplet loss and the knowledge transfer loss) consume the supplied generator
for index draws only, never for values, so a replayed generator reproduces the
same triplets regardless of the embedding contents.

Anchors that lack a valid positive or negative are skipped and counted; a
batch in which every anchor is skipped raises :class:`DegenerateBatchError`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError, DegenerateDataError

ALL_COMPONENTS = frozenset({"asl", "ktl", "al"})


@dataclass
class LossConfig:
    """Hyperparameters of the combined objective.

    ``balance`` weighs the supervised contrastive term against the
    unsupervised one; the transfer and affinity terms enter unweighted.
    """

    margin: float = 0.3
    tau_s: float = 0.07
    tau_u: float = 1.0
    balance: float = 0.35
    include_positives_in_denominator: bool = False

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.tau_s <= 0 or self.tau_u <= 0:
            raise ValueError("temperatures must be > 0")
        if not (0 <= self.balance <= 1):
            raise ValueError("balance must be in [0, 1]")


def triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray, margin: float):
    """Hinge on squared distances: ``max(|a-p|^2 - |a-n|^2 + margin, 0)``.

    Returns ``(value, (d_a, d_p, d_n))``; gradients are zero when the hinge
    is inactive.
    """
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if not (a.shape == p.shape == n.shape):
        raise ValueError("anchor, positive, and negative must share a shape")
    ap = a - p
    an = a - n
    value = float((ap * ap).sum() - (an * an).sum() + margin)
    if value <= 0.0:
        zero = np.zeros_like(a)
        return 0.0, (zero, zero.copy(), zero.copy())
    return value, (2.0 * (n - p), -2.0 * ap, 2.0 * an)


def _triplet_rows(anchors, positives, negatives, margin):
    """Vectorized hinge terms for stacked triplets.

    Returns per-row values plus per-row gradients for the three stacks.
    """
    ap = anchors - positives
    an = anchors - negatives
    raw = (ap * ap).sum(axis=1) - (an * an).sum(axis=1) + margin
    active = (raw > 0.0).astype(np.float64)[:, None]
    values = np.maximum(raw, 0.0)
    d_a = active * 2.0 * (negatives - positives)
    d_p = active * -2.0 * ap
    d_n = active * 2.0 * an
    return values, d_a, d_p, d_n


def known_triplet_loss(emb: np.ndarray, labels: np.ndarray, margin: float,
                       rng: np.random.Generator):
    """Mean triplet hinge over a fully labeled batch.

    For each anchor the positive is drawn uniformly from same-class members
    (excluding the anchor) and the negative uniformly from other-class
    members; anchors without both are skipped.

    Returns ``(value, d_emb, info)`` where ``info`` records the sampled
    triplets for replay-style verification.
    """
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if (labels < 0).any():
        raise ValueError("known triplet loss requires a fully labeled batch")
    b = emb.shape[0]
    anchor_idx, pos_idx, neg_idx = [], [], []
    skipped = 0
    for i in range(b):
        same = np.flatnonzero((labels == labels[i]))
        same = same[same != i]
        diff = np.flatnonzero(labels != labels[i])
        if same.size == 0 or diff.size == 0:
            skipped += 1
            continue
        anchor_idx.append(i)
        pos_idx.append(int(rng.choice(same)))
        neg_idx.append(int(rng.choice(diff)))
    if not anchor_idx:
        raise DegenerateBatchError("every anchor skipped: no usable triplets in batch")

    ai = np.asarray(anchor_idx)
    pi = np.asarray(pos_idx)
    ni = np.asarray(neg_idx)
    values, d_a, d_p, d_n = _triplet_rows(emb[ai], emb[pi], emb[ni], margin)
    m = float(len(ai))
    d_emb = np.zeros_like(emb)
    np.add.at(d_emb, ai, d_a / m)
    np.add.at(d_emb, pi, d_p / m)
    np.add.at(d_emb, ni, d_n / m)
    info = {"anchor_idx": ai, "pos_idx": pi, "neg_idx": ni, "skipped": skipped}
    return float(values.mean()), d_emb, info


def _logsumexp_rows(z: np.ndarray, mask: np.ndarray):
    """Row-wise logsumexp over masked entries plus the softmax weights."""
    neg_inf = np.full_like(z, -np.inf)
    masked = np.where(mask, z, neg_inf)
    zmax = masked.max(axis=1, keepdims=True)
    expz = np.where(mask, np.exp(masked - zmax), 0.0)
    total = expz.sum(axis=1, keepdims=True)
    lse = (zmax + np.log(total))[:, 0]
    return lse, expz / total


def affinity_supervised_loss(emb: np.ndarray, labels: np.ndarray, tau: float,
                             include_positives: bool = False):
    """Supervised contrastive pull over labeled and pseudo-labeled rows.

    For each anchor ``i`` with a label, ``P`` holds same-label rows other than
    ``i``; the per-anchor term is the mean over ``p in P`` of
    ``-log(exp(z_ip) / sum_n exp(z_in))`` with the denominator ranging over
    rows outside ``P`` and distinct from the anchor (set ``include_positives``
    to widen it to all other rows).  Because the denominator excludes the
    positives by default, per-anchor terms are unbounded below; that is the
    documented behavior, not a bug.

    ``labels`` uses ``-1`` for absent; unlabeled rows only ever serve in the
    denominator.  Returns ``(value, d_emb, info)``.
    """
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = emb.shape[0]
    anchors = np.flatnonzero(labels >= 0)
    if anchors.size == 0:
        raise DegenerateBatchError("no labeled rows for the supervised contrastive loss")
    z = (emb @ emb.T) / tau

    d_emb = np.zeros_like(emb)
    total = 0.0
    used = 0
    skipped = 0
    for i in anchors:
        pos_mask = (labels == labels[i])
        pos_mask[i] = False
        if include_positives:
            den_mask = np.ones(b, dtype=bool)
            den_mask[i] = False
        else:
            den_mask = ~pos_mask
            den_mask[i] = False
        n_pos = int(pos_mask.sum())
        if n_pos == 0 or not den_mask.any():
            skipped += 1
            continue
        lse, soft = _logsumexp_rows(z[None, i], den_mask[None, :])
        term = float(lse[0] - z[i, pos_mask].mean())
        total += term
        used += 1
        # d z_in = soft_n ; d z_ip = -1/|P| ; z_ij = <v_i, v_j> / tau
        coeff = soft[0].copy()
        coeff[pos_mask] -= 1.0 / n_pos
        d_emb[i] += (coeff @ emb) / tau
        d_emb += np.outer(coeff, emb[i]) / tau
    if used == 0:
        raise DegenerateBatchError("every supervised anchor skipped")
    scale = 1.0 / used
    return total * scale, d_emb * scale, {"anchors_used": used, "skipped": skipped}


def knowledge_transfer_loss(emb: np.ndarray, unlabeled_pos: np.ndarray,
                            partner_emb: np.ndarray, margin: float,
                            rng: np.random.Generator):
    """Triplet hinge transferring learned structure onto unlabeled anchors.

    Anchors are the unlabeled batch rows, positives their affinity-retrieved
    partners, negatives a uniform draw over batch rows distinct from the
    anchor.  Requires at least two unlabeled anchors.

    Returns ``(value, d_emb, d_partner, info)``.
    """
    emb = np.asarray(emb, dtype=np.float64)
    partner_emb = np.asarray(partner_emb, dtype=np.float64)
    unlabeled_pos = np.asarray(unlabeled_pos, dtype=np.int64)
    b = emb.shape[0]
    u = unlabeled_pos.size
    if u < 2:
        raise DegenerateBatchError(f"knowledge transfer needs >= 2 unlabeled anchors, got {u}")
    if partner_emb.shape[0] != u:
        raise ValueError("one partner embedding per unlabeled anchor is required")

    neg_idx = np.empty(u, dtype=np.int64)
    for row, i in enumerate(unlabeled_pos):
        draw = int(rng.integers(b - 1))
        neg_idx[row] = draw + 1 if draw >= i else draw
    values, d_a, d_p, d_n = _triplet_rows(emb[unlabeled_pos], partner_emb, emb[neg_idx], margin)
    d_emb = np.zeros_like(emb)
    np.add.at(d_emb, unlabeled_pos, d_a / u)
    np.add.at(d_emb, neg_idx, d_n / u)
    d_partner = d_p / u
    return float(values.mean()), d_emb, d_partner, {"neg_idx": neg_idx}


def _cosine_rows(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine similarity and its gradients w.r.t. both stacks."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na < 1e-12).any() or (nb < 1e-12).any():
        raise DegenerateDataError("zero-norm vector: cosine similarity undefined")
    ahat = a / na[:, None]
    bhat = b / nb[:, None]
    cos = (ahat * bhat).sum(axis=1)
    d_a = (bhat - cos[:, None] * ahat) / na[:, None]
    d_b = (ahat - cos[:, None] * bhat) / nb[:, None]
    return cos, d_a, d_b


def affinity_loss(anchor: np.ndarray, anchor_view: np.ndarray,
                  partner: np.ndarray, partner_view: np.ndarray):
    """Cross-view cosine pull between anchors and their retrieved partners.

    ``(1/2u) * sum_i [(1 - cos(anchor_i, partner_view_i))
                      + (1 - cos(anchor_view_i, partner_i))]``

    Returns ``(value, (d_anchor, d_anchor_view, d_partner, d_partner_view))``.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    anchor_view = np.asarray(anchor_view, dtype=np.float64)
    partner = np.asarray(partner, dtype=np.float64)
    partner_view = np.asarray(partner_view, dtype=np.float64)
    u = anchor.shape[0]
    if u == 0:
        raise DegenerateBatchError("affinity loss needs at least one unlabeled anchor")
    cos1, d1_a, d1_pv = _cosine_rows(anchor, partner_view)
    cos2, d2_av, d2_p = _cosine_rows(anchor_view, partner)
    value = float(((1.0 - cos1) + (1.0 - cos2)).sum() / (2.0 * u))
    scale = -1.0 / (2.0 * u)
    return value, (scale * d1_a, scale * d2_av, scale * d2_p, scale * d1_pv)


def unsupervised_contrastive_loss(emb: np.ndarray, view_emb: np.ndarray, tau: float):
    """Instance-discrimination loss against each row's augmented view.

    ``-(1/b) * sum_i log(exp(<v_i, v_i'>/tau) / sum_{j != i} exp(<v_i, v_j>/tau))``
    with the denominator over the distinct original rows.

    Returns ``(value, d_emb, d_view)``.
    """
    emb = np.asarray(emb, dtype=np.float64)
    view_emb = np.asarray(view_emb, dtype=np.float64)
    b = emb.shape[0]
    if b < 2:
        raise DegenerateBatchError(f"unsupervised contrastive loss needs >= 2 rows, got {b}")
    if view_emb.shape != emb.shape:
        raise ValueError("one view embedding per row is required")

    z = (emb @ emb.T) / tau
    off_diag = ~np.eye(b, dtype=bool)
    lse, soft = _logsumexp_rows(z, off_diag)
    pos = (emb * view_emb).sum(axis=1) / tau
    value = float((lse - pos).mean())

    d_emb = (soft @ emb - view_emb) / tau        # anchor role
    d_emb += soft.T @ emb / tau                  # denominator role
    d_view = -emb / tau
    return value, d_emb / b, d_view / b


def total_loss(emb, view_emb, partner_emb, partner_view_emb,
               member_labels, is_labeled, partner_labels,
               cfg: LossConfig, rng: np.random.Generator,
               components: frozenset = ALL_COMPONENTS):
    """Combined objective over an assembled minibatch.

    value = balance * supervised + (1 - balance) * unsupervised
            + transfer + affinity

    Inputs are four aligned stacks (members, member views, partners, partner
    views) plus label metadata: ``member_labels`` carries true or inherited
    pseudo-labels (-1 absent), ``is_labeled`` marks true-labeled members, and
    ``partner_labels`` carries each partner's resolved pseudo-label.  The
    supervised pool is the members plus the partners of true-labeled members;
    the transfer and affinity terms run over unlabeled members; the
    unsupervised term runs over all members.

    Components whose preconditions fail contribute zero and are reported in
    the returned ``parts`` mapping as ``None``; only if every enabled
    component degenerates is the error raised.  The generator is consumed by
    the transfer term only.

    Returns ``(value, (d_emb, d_view, d_partner, d_partner_view), parts, info)``.
    """
    emb = np.asarray(emb, dtype=np.float64)
    view_emb = np.asarray(view_emb, dtype=np.float64)
    partner_emb = np.asarray(partner_emb, dtype=np.float64)
    partner_view_emb = np.asarray(partner_view_emb, dtype=np.float64)
    member_labels = np.asarray(member_labels, dtype=np.int64)
    is_labeled = np.asarray(is_labeled, dtype=bool)
    partner_labels = np.asarray(partner_labels, dtype=np.int64)

    d_emb = np.zeros_like(emb)
    d_view = np.zeros_like(view_emb)
    d_partner = np.zeros_like(partner_emb)
    d_partner_view = np.zeros_like(partner_view_emb)
    parts: dict[str, float | None] = {"asl": None, "ucl": None, "ktl": None, "al": None}
    info: dict[str, object] = {"skips": []}
    unlabeled_pos = np.flatnonzero(~is_labeled)
    b = emb.shape[0]

    if "asl" in components:
        lab_pos = np.flatnonzero(is_labeled)
        stack = np.concatenate([emb, partner_emb[lab_pos]], axis=0)
        stack_labels = np.concatenate([member_labels, partner_labels[lab_pos]])
        try:
            asl, d_stack, asl_info = affinity_supervised_loss(
                stack, stack_labels, cfg.tau_s,
                include_positives=cfg.include_positives_in_denominator)
            parts["asl"] = asl
            info["asl"] = asl_info
            d_emb += cfg.balance * d_stack[:b]
            np.add.at(d_partner, lab_pos, cfg.balance * d_stack[b:])
        except DegenerateBatchError as exc:
            info["skips"].append(f"asl: {exc}")

    try:
        ucl, d_e, d_v = unsupervised_contrastive_loss(emb, view_emb, cfg.tau_u)
        parts["ucl"] = ucl
        d_emb += (1.0 - cfg.balance) * d_e
        d_view += (1.0 - cfg.balance) * d_v
    except DegenerateBatchError as exc:
        info["skips"].append(f"ucl: {exc}")

    if "ktl" in components:
        try:
            ktl, d_e, d_p, ktl_info = knowledge_transfer_loss(
                emb, unlabeled_pos, partner_emb[unlabeled_pos], cfg.margin, rng)
            parts["ktl"] = ktl
            info["ktl"] = ktl_info
            d_emb += d_e
            np.add.at(d_partner, unlabeled_pos, d_p)
        except DegenerateBatchError as exc:
            info["skips"].append(f"ktl: {exc}")

    if "al" in components:
        try:
            al, (d_a, d_av, d_p, d_pv) = affinity_loss(
                emb[unlabeled_pos], view_emb[unlabeled_pos],
                partner_emb[unlabeled_pos], partner_view_emb[unlabeled_pos])
            parts["al"] = al
            np.add.at(d_emb, unlabeled_pos, d_a)
            np.add.at(d_view, unlabeled_pos, d_av)
            np.add.at(d_partner, unlabeled_pos, d_p)
            np.add.at(d_partner_view, unlabeled_pos, d_pv)
        except DegenerateBatchError as exc:
            info["skips"].append(f"al: {exc}")

    if all(v is None for v in parts.values()):
        raise DegenerateBatchError("every loss component degenerated on this batch")

    value = 0.0
    if parts["asl"] is not None:
        value += cfg.balance * parts["asl"]
    if parts["ucl"] is not None:
        value += (1.0 - cfg.balance) * parts["ucl"]
    if parts["ktl"] is not None:
        value += parts["ktl"]
    if parts["al"] is not None:
        value += parts["al"]
    return value, (d_emb, d_view, d_partner, d_partner_view), parts, info
