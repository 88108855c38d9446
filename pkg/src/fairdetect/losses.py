"""Loss terms for disentanglement training and the bi-level fairness objective.

The fairness objective is a tail-risk (CVaR) construction at two levels:
an inner per-subgroup tail mean over sample losses and an outer tail mean
over the per-subgroup values. Both levels are convex piecewise-linear in
their threshold, solved exactly by bisection on the subgradient sign with
breakpoint snapping; `cvar_oracle` enumerates every breakpoint and is the
independent reference the solver is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .data import SubgroupStats
from .model import Detector, DisentangledFeatures, adain_fuse


class LossError(ValueError):
    """Raised for invalid loss configuration or degenerate inputs."""


@dataclass(frozen=True)
class LossConfig:
    """All scalar loss hyperparameters in one validated record."""

    domain_head_weight: float = 0.1       # weight of the per-domain head term
    demographic_head_weight: float = 0.1  # weight of the subgroup-margin term
    contrastive_weight: float = 0.05
    reconstruction_weight: float = 0.3
    contrastive_margin: float = 3.0
    margin_scale: float = 2.89            # numerator of the subgroup margin
    group_tail_fraction: float = 0.5      # outer CVaR level, in (0, 1]
    sample_tail_fraction: float = 0.5     # inner CVaR level, in (0, 1]
    fairness_weight: float = 1.0
    perturb_radius: float = 0.05
    learning_rate: float = 5e-4

    def __post_init__(self):
        problems = []
        for name in (
            "domain_head_weight",
            "demographic_head_weight",
            "contrastive_weight",
            "reconstruction_weight",
            "contrastive_margin",
            "margin_scale",
            "fairness_weight",
            "perturb_radius",
        ):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                problems.append(f"{name} must be nonnegative and finite, got {v}")
        for name in ("group_tail_fraction", "sample_tail_fraction"):
            v = getattr(self, name)
            if not (0 < v <= 1):
                problems.append(f"{name} must lie in (0, 1], got {v}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            problems.append(f"learning_rate must be positive, got {self.learning_rate}")
        if problems:
            raise LossError("invalid loss config: " + "; ".join(problems))


@dataclass(frozen=True)
class MarginTable:
    """Per-subgroup logit margins, aligned with a subgroup vocabulary."""

    subgroups: tuple[str, ...]
    deltas: np.ndarray

    def __getitem__(self, subgroup: str) -> float:
        try:
            return float(self.deltas[self.subgroups.index(subgroup)])
        except ValueError:
            raise LossError(
                f"subgroup {subgroup!r} outside margin vocabulary {self.subgroups}"
            ) from None


def compute_margins(stats: SubgroupStats, margin_scale: float) -> MarginTable:
    """Margin per subgroup: margin_scale / count ** (1/4)."""
    if margin_scale < 0:
        raise LossError(f"margin scale must be nonnegative, got {margin_scale}")
    subgroups = tuple(stats.counts)
    counts = np.array([stats.counts[g] for g in subgroups], dtype=np.float64)
    if np.any(counts < 1):
        raise LossError("every subgroup in the stats must have at least one example")
    return MarginTable(subgroups=subgroups, deltas=margin_scale / counts**0.25)


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Stabilized softmax negative log-likelihood.

    Accepts a single logit vector with an integer label (returns a scalar)
    or an (N, K) batch with N labels (returns a length-N tensor).
    """
    return ad.logsumexp(logits) - ad.pick_last(logits, label)


def _margin_indices(subgroup, margins: MarginTable, vocabulary: tuple[str, ...]):
    if isinstance(subgroup, (str, int, np.integer)):
        subgroup = [subgroup]
        single = True
    else:
        single = False
    columns = []
    deltas = []
    for s in subgroup:
        if isinstance(s, (int, np.integer)):
            if not 0 <= int(s) < len(vocabulary):
                raise LossError(f"subgroup index {s} outside vocabulary of size {len(vocabulary)}")
            name = vocabulary[int(s)]
            columns.append(int(s))
        else:
            name = s
            try:
                columns.append(vocabulary.index(s))
            except ValueError:
                raise LossError(f"subgroup {s!r} outside vocabulary {vocabulary}") from None
        deltas.append(margins[name])
    return np.array(columns), np.array(deltas), single


def margin_loss(logits: Tensor, subgroup, margins: MarginTable, vocabulary=None) -> Tensor:
    """Softmax loss with the true-class logit lowered by the subgroup margin.

    With all-zero margins this is exactly `cross_entropy`. `vocabulary`
    fixes the logit column order; it defaults to the margin table's own
    subgroup order.
    """
    vocabulary = tuple(vocabulary) if vocabulary is not None else margins.subgroups
    columns, deltas, single = _margin_indices(subgroup, margins, vocabulary)
    if logits.ndim == 1:
        if not single:
            raise LossError("margin_loss: single logit vector needs a single subgroup")
        width = logits.shape[0]
    else:
        width = logits.shape[1]
    if width != len(vocabulary):
        raise LossError(
            f"margin_loss: logit width {width} does not match vocabulary size {len(vocabulary)}"
        )
    adjust = np.zeros((len(columns), width))
    adjust[np.arange(len(columns)), columns] = deltas
    if logits.ndim == 1:
        return cross_entropy(logits - ad.constant(adjust[0]), int(columns[0]))
    return cross_entropy(logits - ad.constant(adjust), columns)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance; rowwise for 2-D inputs, scalar for vectors."""
    diff = a - b
    if diff.ndim == 1:
        return ad.sqrt((diff * diff).sum())
    return ad.sqrt((diff * diff).sum(axis=tuple(range(1, diff.ndim))))


def contrastive_loss(f_anchor: Tensor, f_plus: Tensor, f_minus: Tensor, margin: float) -> Tensor:
    """Triplet hinge: [margin + d(anchor, pos) - d(anchor, neg)]_+."""
    if f_anchor.shape != f_plus.shape or f_anchor.shape != f_minus.shape:
        raise LossError(
            f"contrastive_loss: shapes {f_anchor.shape}, {f_plus.shape}, {f_minus.shape} differ"
        )
    return ad.relu(margin + l2_distance(f_anchor, f_plus) - l2_distance(f_anchor, f_minus))


def reconstruction_loss(x: Tensor, self_rec: Tensor, cross_rec: Tensor) -> Tensor:
    """Sum of the two entrywise L1 reconstruction errors.

    Batched (NCHW) inputs give one value per sample; single images a scalar.
    """
    if x.shape != self_rec.shape or x.shape != cross_rec.shape:
        raise LossError(
            f"reconstruction_loss: shapes {x.shape}, {self_rec.shape}, {cross_rec.shape} differ"
        )
    axes = tuple(range(1, x.ndim)) if x.ndim == 4 else None
    return ad.absolute(x - self_rec).sum(axis=axes) + ad.absolute(x - cross_rec).sum(axis=axes)


def classification_loss(
    feats: DisentangledFeatures,
    y,
    a,
    d,
    model: Detector,
    params: ParameterStore,
    margins: MarginTable,
    domain_head_weight: float,
    demographic_head_weight: float,
    vocabulary=None,
) -> Tensor:
    """Per-sample weighted sum of the three head losses.

    `y`, `a`, `d` are integer targets (binary, domain index, subgroup index).
    Zero-weight terms are skipped entirely, so the zero-weight case reduces
    bit-exactly to the real/fake head alone.
    """
    rows = cross_entropy(model.head_forward(params, "agnostic", feats.f_g), y)
    if domain_head_weight:
        rows = rows + domain_head_weight * cross_entropy(
            model.head_forward(params, "specific", feats.f_a), a
        )
    if demographic_head_weight:
        rows = rows + demographic_head_weight * margin_loss(
            model.head_forward(params, "demographic", feats.d), d, margins, vocabulary
        )
    return rows


def _first_index(sources: Sequence, k: int, want_same: bool) -> int:
    n = len(sources)
    for step in range(1, n):
        j = (k + step) % n
        if (sources[j] == sources[k]) == want_same:
            return j
    return -1


def _contrastive_pool_sum(pool: Tensor, sources: Sequence, n_anchors: int, margin: float):
    """Sum of triplet hinges over anchors that have both a positive and a negative.

    Counterparts are picked deterministically: the next pool entry (cyclic
    scan) with the same source is the positive, with a different source the
    negative. Anchors lacking either contribute nothing.
    """
    triplets = []
    for k in range(n_anchors):
        pos = _first_index(sources, k, True)
        neg = _first_index(sources, k, False)
        if pos >= 0 and neg >= 0:
            triplets.append((k, pos, neg))
    if not triplets:
        return None
    ks, ps, ns = (list(t) for t in zip(*triplets))
    rows = contrastive_loss(
        ad.gather_rows(pool, ks), ad.gather_rows(pool, ps), ad.gather_rows(pool, ns), margin
    )
    return rows.sum()


@dataclass
class BatchGraph:
    """Loss graph pieces for one batch of fake/real pairs."""

    dis: Tensor                      # scalar disentanglement loss
    fused_rows: Tensor | None        # per-anchor fused-head loss, when requested
    anchor_subgroups: list[str]


def batch_losses(
    pairs: Sequence[tuple],
    model: Detector,
    params: ParameterStore,
    margins: MarginTable,
    vocab,
    cfg: LossConfig,
    want_fused: bool = False,
) -> BatchGraph:
    """Assemble the disentanglement loss (and optionally fused-head losses).

    `pairs` holds (anchor, partner) samples with opposite targets; `vocab`
    supplies subgroup/domain vocabularies (a Dataset works). Contrastive
    counterparts are drawn from anchors and partners together; partner
    images are only encoded when the contrastive or reconstruction term is
    active.
    """
    if not pairs:
        raise LossError("batch_losses: empty batch")
    anchors = [p[0] for p in pairs]
    partners = [p[1] for p in pairs]
    n = len(anchors)
    y = np.array([s.y for s in anchors])
    a_idx = np.array([vocab.domain_index(s.a) for s in anchors])
    d_idx = np.array([vocab.subgroup_index(s.d) for s in anchors])

    x_anchor = ad.constant(np.stack([s.x.data for s in anchors]))
    feats = model.encode(params, x_anchor)

    need_partners = cfg.contrastive_weight > 0 or cfg.reconstruction_weight > 0
    feats_partner = None
    if need_partners:
        x_partner = ad.constant(np.stack([s.x.data for s in partners]))
        feats_partner = model.encode(params, x_partner)

    total = classification_loss(
        feats,
        y,
        a_idx,
        d_idx,
        model,
        params,
        margins,
        cfg.domain_head_weight,
        cfg.demographic_head_weight,
        tuple(vocab.subgroups),
    ).sum()

    if cfg.contrastive_weight > 0:
        feat_size = model.cfg.feature_size
        pool_specific = ad.concat(
            [ad.reshape(feats.f_a, (n, feat_size)), ad.reshape(feats_partner.f_a, (n, feat_size))],
            axis=0,
        )
        pool_agnostic = ad.concat(
            [ad.reshape(feats.f_g, (n, feat_size)), ad.reshape(feats_partner.f_g, (n, feat_size))],
            axis=0,
        )
        sources_specific = [s.a for s in anchors] + [s.a for s in partners]
        sources_agnostic = [s.y for s in anchors] + [s.y for s in partners]
        for pool, sources in (
            (pool_specific, sources_specific),
            (pool_agnostic, sources_agnostic),
        ):
            term = _contrastive_pool_sum(pool, sources, n, cfg.contrastive_margin)
            if term is not None:
                total = total + cfg.contrastive_weight * term

    if cfg.reconstruction_weight > 0:
        self_rec = model.decode(params, feats.c, feats.forgery, feats.d)
        cross_rec = model.decode(params, feats.c, feats_partner.forgery, feats.d)
        total = total + cfg.reconstruction_weight * reconstruction_loss(
            x_anchor, self_rec, cross_rec
        ).sum()

    dis = total / float(n)

    fused_rows = None
    if want_fused:
        fused = adain_fuse(feats.f_g, feats.d, eps=model.cfg.adain_eps)
        fused_rows = cross_entropy(model.head_forward(params, "fused", fused), y)

    return BatchGraph(dis=dis, fused_rows=fused_rows, anchor_subgroups=[s.d for s in anchors])


def disentanglement_loss(
    pairs: Sequence[tuple],
    model: Detector,
    params: ParameterStore,
    margins: MarginTable,
    vocab,
    cfg: LossConfig,
) -> Tensor:
    """Mean over the batch of classification + contrastive + reconstruction."""
    return batch_losses(pairs, model, params, margins, vocab, cfg, want_fused=False).dis


# -- tail-risk (CVaR) machinery ------------------------------------------------


def _cvar_objective(arr: np.ndarray, tail_fraction: float, eta: float) -> float:
    return float(eta + np.maximum(arr - eta, 0.0).sum() / (tail_fraction * arr.size))


def cvar_inner(losses, tail_fraction: float) -> tuple[float, float]:
    """Exact tail mean of the worst `tail_fraction` of losses, via bisection.

    Returns (value, threshold). The objective eta + mean([l - eta]_+) /
    tail_fraction is convex piecewise-linear in eta, so bisection on the
    subgradient sign localizes the minimizing breakpoint; neighbors are then
    compared by objective value. A tail thinner than one sample degenerates
    to the maximum; tail_fraction == 1 gives the plain mean.
    """
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise LossError("cvar_inner: empty loss list")
    if not (0 < tail_fraction <= 1):
        raise LossError(f"cvar_inner: tail fraction must lie in (0, 1], got {tail_fraction}")
    m = arr.size
    if tail_fraction == 1.0:
        return float(arr.mean()), float(arr.min())
    if tail_fraction * m < 1.0:
        worst = float(arr.max())
        return worst, worst

    def right_derivative(eta: float) -> float:
        return 1.0 - np.count_nonzero(arr > eta) / (tail_fraction * m)

    lo, hi = float(arr.min()), float(arr.max())
    if right_derivative(lo) >= 0.0:
        return _cvar_objective(arr, tail_fraction, lo), lo
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        if right_derivative(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    breakpoints = np.unique(arr)
    candidates = breakpoints[(breakpoints > lo) & (breakpoints <= hi)]
    if candidates.size == 0:
        candidates = breakpoints
    best_value, best_eta = np.inf, hi
    for eta in candidates:
        value = _cvar_objective(arr, tail_fraction, float(eta))
        if value < best_value:
            best_value, best_eta = value, float(eta)
    return best_value, best_eta


def cvar_oracle(losses, tail_fraction: float) -> float:
    """Brute-force reference: the objective minimum over every breakpoint.

    The minimum of a convex piecewise-linear function sits at a breakpoint,
    so evaluating at every loss value is exact. Kept deliberately literal.
    """
    values = [float(v) for v in losses]
    if not values:
        raise LossError("cvar_oracle: empty loss list")
    m = len(values)
    best = None
    for eta in values:
        tail = 0.0
        for l in values:
            if l > eta:
                tail += l - eta
        objective = eta + tail / (tail_fraction * m)
        if best is None or objective < best:
            best = objective
    return best


@dataclass(frozen=True)
class FairnessSolution:
    """Solved bi-level fairness loss: value, thresholds, per-subgroup tails."""

    value: float
    eta: float
    eta_by_subgroup: dict[str, float] = field(default_factory=dict)
    l_by_subgroup: dict[str, float] = field(default_factory=dict)


def fairness_loss(
    losses_by_subgroup: Mapping[str, Sequence[float]],
    group_tail_fraction: float,
    sample_tail_fraction: float,
) -> FairnessSolution:
    """Solve the bi-level tail objective over per-subgroup sample losses.

    Subgroups with no samples are skipped and the outer level runs over the
    present subgroups only.
    """
    present = {j: np.asarray(v, dtype=np.float64) for j, v in losses_by_subgroup.items() if len(v)}
    if not present:
        raise LossError("fairness_loss: no samples in any subgroup")
    eta_by: dict[str, float] = {}
    l_by: dict[str, float] = {}
    for j, arr in present.items():
        l_by[j], eta_by[j] = cvar_inner(arr, sample_tail_fraction)
    value, eta = cvar_inner(np.array(list(l_by.values())), group_tail_fraction)
    return FairnessSolution(value=value, eta=eta, eta_by_subgroup=eta_by, l_by_subgroup=l_by)


def cvar_node(values: Tensor, tail_fraction: float, eta: float) -> Tensor:
    """Differentiable tail objective with the threshold held constant.

    Matches `cvar_inner`'s value bit-for-bit at the solved threshold. The
    degenerate cases keep exact gradients: the full-tail case is the mean
    node and the thinner-than-one-sample case is the worst element itself.

    The samples sitting exactly at the threshold are the quantile atoms of
    the tail distribution; they carry the fractional tail mass
    (tail_fraction * m - #above) / (tail_fraction * m). The hinge alone
    would drop their gradient (its subgradient at the kink is 0), so they
    are added back as an exactly-zero-valued term with that weight.
    """
    m = values.shape[0]
    if tail_fraction == 1.0:
        return values.mean()
    if tail_fraction * m < 1.0:
        worst = int(np.argmax(values.data))
        return ad.narrow(values, 0, worst, 1).sum()
    scale = tail_fraction * m
    node = eta + ad.relu(values - eta).sum() / scale
    at_kink = np.nonzero(values.data == eta)[0]
    if at_kink.size:
        above = int(np.count_nonzero(values.data > eta))
        kink_weight = (scale - above) / (scale * at_kink.size)
        if kink_weight > 0:
            node = node + kink_weight * (ad.gather_rows(values, at_kink) - eta).sum()
    return node


def fairness_loss_node(
    sample_losses: Tensor,
    subgroups: Sequence[str],
    solution: FairnessSolution,
    group_tail_fraction: float,
    sample_tail_fraction: float,
) -> Tensor:
    """Rebuild the solved bi-level objective as a graph over sample losses.

    Thresholds come from `solution` and are treated as constants, so the
    gradient is the standard tail-samples envelope gradient.
    """
    inner_nodes = []
    for j in solution.l_by_subgroup:
        idx = [i for i, s in enumerate(subgroups) if s == j]
        if not idx:
            raise LossError(f"fairness_loss_node: solution subgroup {j!r} missing from batch")
        rows = ad.gather_rows(sample_losses, idx)
        inner = cvar_node(rows, sample_tail_fraction, solution.eta_by_subgroup[j])
        inner_nodes.append(ad.reshape(inner, (1,)))
    values = ad.concat(inner_nodes, axis=0)
    return cvar_node(values, group_tail_fraction, solution.eta)
