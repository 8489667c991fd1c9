"""
Triplet losses on global and local features, their closed-form gradients and a central-difference
gradient check.

Losses are evaluated on detached features. Gradients with respect to the features are returned
explicitly (mutual-match selections held fixed) and carried to the parameters with
`torch.autograd.backward`.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from vprtk.config import GradcheckConfiguration, LossConfiguration
from vprtk.matching import MatchSet, mutual_nn_matches, similarity_matrix
from vprtk.utils import get_logger

logger = get_logger(__name__)


class GradcheckError(RuntimeError):
    """Raised when the loss is not finite at a perturbed point."""


def hinge(x: float) -> float:
    return max(x, 0.0)


@dataclass
class FeatureSample:
    """
    ## Attributes:
    * `global_feature` (`torch.Tensor`): `(C,)` global descriptor.
    * `local_grid` (`torch.Tensor`): `(h', w', C_l)` local grid.
    """

    global_feature: torch.Tensor
    local_grid: torch.Tensor


@dataclass
class TripletBatch:
    query: FeatureSample
    positive: FeatureSample
    negatives: List[FeatureSample]

    def __post_init__(self):
        if len(self.negatives) < 1:
            raise ValueError("A triplet needs at least one negative.")


@dataclass
class FeatureGradient:
    global_feature: torch.Tensor
    local_grid: torch.Tensor

    @classmethod
    def zeros_like(cls, sample: FeatureSample) -> "FeatureGradient":
        return cls(
            torch.zeros_like(sample.global_feature.detach()),
            torch.zeros_like(sample.local_grid.detach()),
        )


@dataclass
class LossOutput:
    """
    ## Attributes:
    * `value` (`float`): `L_g + weight * L_l`.
    * `global_value` (`float`): The global triplet loss `L_g`.
    * `local_value` (`float`): The local loss `L_l`.
    * `query`, `positive`, `negatives`: Gradients of `value` with respect to each sample's features.
    * `hinge_arguments` (`list`): Every hinge argument, global terms first.
    * `match_signature` (`tuple`): The selected match pairs, used to detect selection changes.
    """

    value: float
    global_value: float
    local_value: float
    query: FeatureGradient
    positive: FeatureGradient
    negatives: List[FeatureGradient]
    hinge_arguments: List[float] = field(default_factory=list)
    match_signature: tuple = ()


def _distance(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(torch.linalg.vector_norm(a - b))


def global_loss(batch: TripletBatch, margin: float = 0.1) -> float:
    """`sum_j hinge(d(q, p) + margin - d(q, n_j))` with Euclidean `d`."""
    q = batch.query.global_feature.detach()
    d_qp = _distance(q, batch.positive.global_feature.detach())
    return sum(
        hinge(d_qp + margin - _distance(q, n.global_feature.detach()))
        for n in batch.negatives
    )


def _match_average(matches: MatchSet) -> float:
    # an empty match set neither attracts nor repels
    return float(matches.similarities.mean()) if len(matches) else 0.0


def _local_terms(batch: TripletBatch):
    q = batch.query.local_grid.detach()
    positive_matches = mutual_nn_matches(
        similarity_matrix(q, batch.positive.local_grid.detach())
    )
    negative_matches = [
        mutual_nn_matches(similarity_matrix(q, n.local_grid.detach()))
        for n in batch.negatives
    ]
    positive_average = _match_average(positive_matches)
    arguments = [-positive_average + _match_average(m) for m in negative_matches]
    return positive_matches, negative_matches, arguments


def local_loss(batch: TripletBatch) -> float:
    """
    `sum_j hinge(-avg_M s_qp + avg_M'_j s_qn_j)` where `M` and `M'_j` are the mutual nearest
    neighbour matches of the query with the positive and the j-th negative.
    """
    _, _, arguments = _local_terms(batch)
    return sum(hinge(a) for a in arguments)


def _accumulate_match_gradient(
    grad_q: torch.Tensor,
    grad_c: torch.Tensor,
    q: torch.Tensor,
    c: torch.Tensor,
    matches: MatchSet,
    sign: float,
):
    # d/dq_u and d/dc_v of sign * mean_{(u, v) in M} q_u . c_v, on flattened grids
    if not len(matches):
        return
    u, v = matches.query_indices, matches.candidate_indices
    weight = sign / len(matches)
    grad_q.index_add_(0, u, weight * c[v])
    grad_c.index_add_(0, v, weight * q[u])


def combined_loss(batch: TripletBatch, loss_cfg: LossConfiguration) -> LossOutput:
    """
    `L = L_g + weight * L_l` with closed-form gradients for every feature in the triplet.

    Gradients treat the match sets as constants. Hinges at exactly zero take the zero subgradient.

    ## Args:
    * `batch` (`TripletBatch`): One query with its positive and negatives.
    * `loss_cfg` (`LossConfiguration`): Margin and local weight.
    """
    margin, weight = loss_cfg.margin, loss_cfg.weight
    grad_query = FeatureGradient.zeros_like(batch.query)
    grad_positive = FeatureGradient.zeros_like(batch.positive)
    grad_negatives = [FeatureGradient.zeros_like(n) for n in batch.negatives]

    # global triplet term
    q = batch.query.global_feature.detach()
    diff_p = q - batch.positive.global_feature.detach()
    d_qp = float(torch.linalg.vector_norm(diff_p))
    unit_p = diff_p / d_qp if d_qp > 0 else torch.zeros_like(diff_p)
    global_value, hinge_arguments = 0.0, []
    for n, grad_n in zip(batch.negatives, grad_negatives):
        diff_n = q - n.global_feature.detach()
        d_qn = float(torch.linalg.vector_norm(diff_n))
        argument = d_qp + margin - d_qn
        hinge_arguments.append(argument)
        if argument <= 0:
            continue
        global_value += argument
        unit_n = diff_n / d_qn if d_qn > 0 else torch.zeros_like(diff_n)
        grad_query.global_feature += unit_p - unit_n
        grad_positive.global_feature -= unit_p
        grad_n.global_feature += unit_n

    # local term
    positive_matches, negative_matches, local_arguments = _local_terms(batch)
    hinge_arguments.extend(local_arguments)
    local_value = sum(hinge(a) for a in local_arguments)
    if weight > 0 and local_value > 0:
        q_flat = rearrange(batch.query.local_grid.detach(), "h w c -> (h w) c")
        p_flat = rearrange(batch.positive.local_grid.detach(), "h w c -> (h w) c")
        gq = torch.zeros_like(q_flat)
        gp = torch.zeros_like(p_flat)
        for argument, n, grad_n, matches in zip(
            local_arguments, batch.negatives, grad_negatives, negative_matches
        ):
            if argument <= 0:
                continue
            n_flat = rearrange(n.local_grid.detach(), "h w c -> (h w) c")
            gn = torch.zeros_like(n_flat)
            _accumulate_match_gradient(gq, gp, q_flat, p_flat, positive_matches, -weight)
            _accumulate_match_gradient(gq, gn, q_flat, n_flat, matches, weight)
            grad_n.local_grid += gn.reshape(grad_n.local_grid.shape)
        grad_query.local_grid += gq.reshape(grad_query.local_grid.shape)
        grad_positive.local_grid += gp.reshape(grad_positive.local_grid.shape)

    signature = (positive_matches.signature(),) + tuple(
        m.signature() for m in negative_matches
    )
    return LossOutput(
        value=global_value + weight * local_value,
        global_value=global_value,
        local_value=local_value,
        query=grad_query,
        positive=grad_positive,
        negatives=grad_negatives,
        hinge_arguments=hinge_arguments,
        match_signature=signature,
    )


@dataclass
class TripletImages:
    """
    ## Attributes:
    * `query` (`torch.Tensor`): `(B, H, W, 3)` query images.
    * `positive` (`torch.Tensor`): `(B, H, W, 3)` positive images.
    * `negatives` (`torch.Tensor`): `(B, J, H, W, 3)` hard negative images.
    """

    query: torch.Tensor
    positive: torch.Tensor
    negatives: torch.Tensor

    def __len__(self) -> int:
        return self.query.shape[0]


@dataclass
class BatchLossOutput:
    """The mean combined loss over a batch of triplets, with the features it was computed from."""

    value: float
    global_value: float
    local_value: float
    global_features: torch.Tensor
    local_features: torch.Tensor
    global_gradients: torch.Tensor
    local_gradients: torch.Tensor
    hinge_arguments: List[float]
    match_signature: tuple

    def backward(self):
        """Propagates the feature gradients into the model parameters."""
        if not self.global_features.requires_grad:
            return
        torch.autograd.backward(
            [self.global_features, self.local_features],
            grad_tensors=[self.global_gradients, self.local_gradients],
        )


def model_triplet_loss(
    model: nn.Module, images: TripletImages, loss_cfg: LossConfiguration
) -> BatchLossOutput:
    """
    Runs one forward pass over every image of the batch and averages `combined_loss` over triplets.
    """
    batch_size, num_negatives = images.negatives.shape[:2]
    stacked = torch.cat(
        [
            images.query,
            images.positive,
            rearrange(images.negatives, "b j h w c -> (b j) h w c"),
        ]
    )
    out = model(stacked)
    g, l = out.global_features, out.local_features

    def sample(i: int) -> FeatureSample:
        return FeatureSample(g[i].detach(), l[i].detach())

    def negative_row(b: int, j: int) -> int:
        return 2 * batch_size + b * num_negatives + j

    grad_g = torch.zeros_like(g.detach())
    grad_l = torch.zeros_like(l.detach())
    values, global_values, local_values = [], [], []
    hinge_arguments, signature = [], ()
    for b in range(batch_size):
        rows = [b, batch_size + b] + [negative_row(b, j) for j in range(num_negatives)]
        result = combined_loss(
            TripletBatch(
                query=sample(rows[0]),
                positive=sample(rows[1]),
                negatives=[sample(r) for r in rows[2:]],
            ),
            loss_cfg,
        )
        values.append(result.value)
        global_values.append(result.global_value)
        local_values.append(result.local_value)
        hinge_arguments.extend(result.hinge_arguments)
        signature += result.match_signature
        for row, grad in zip(rows, [result.query, result.positive, *result.negatives]):
            grad_g[row] += grad.global_feature / batch_size
            grad_l[row] += grad.local_grid / batch_size

    return BatchLossOutput(
        value=float(np.mean(values)),
        global_value=float(np.mean(global_values)),
        local_value=float(np.mean(local_values)),
        global_features=g,
        local_features=l,
        global_gradients=grad_g,
        local_gradients=grad_l,
        hinge_arguments=hinge_arguments,
        match_signature=signature,
    )


@dataclass
class GradcheckReport:
    """
    ## Attributes:
    * `max_relative_error` (`float`): Worst relative error over the checked coordinates.
    * `checked` (`int`): Coordinates compared.
    * `skipped` (`int`): Coordinates skipped at hinge kinks or match-set changes.
    """

    max_relative_error: float
    checked: int
    skipped: int

    def passed(self, tolerance: float) -> bool:
        return self.max_relative_error < tolerance


def _evaluate(loss_fn: Callable) -> tuple:
    out = loss_fn()
    if isinstance(out, (LossOutput, BatchLossOutput)):
        return float(out.value), np.asarray(out.hinge_arguments), out.match_signature
    return float(out), np.zeros(0), ()


def finite_diff_gradcheck(
    loss_fn: Callable[[], Union[float, LossOutput, BatchLossOutput]],
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    step: float = 1e-5,
    samples: int = 200,
    kink_tolerance: float = 1e-3,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradcheckReport:
    """
    Compares analytic gradients to `(L(theta + h) - L(theta - h)) / 2h` on sampled coordinates.

    `params` are perturbed in place and restored exactly. A coordinate is skipped when a hinge argument
    lies within `kink_tolerance` of zero or changes side, or when a match set changes, between the two
    perturbed evaluations.

    ## Args:
    * `loss_fn` (`Callable`): Evaluates the loss at the current `params`. May return a plain float.
    * `params` (`Sequence[torch.Tensor]`): Tensors to perturb.
    * `grads` (`Sequence[torch.Tensor]`): Analytic gradients, shaped like `params`.
    * `step` (`float`, optional): The step `h`. Defaults to `1e-5`.
    * `samples` (`int`, optional): Number of coordinates. Defaults to `200`.
    * `kink_tolerance` (`float`, optional): Hinge proximity treated as a kink. Defaults to `1e-3`.
    * `seed` (`int`, optional): Seed of the coordinate sample. Defaults to `0`.
    * `abs_floor` (`float`, optional): Lower bound of the relative error denominator. Defaults to `1e-6`.

    ## Raises:
    * `GradcheckError`: If the loss is not finite at a perturbed point.
    """
    if step <= 0:
        raise ValueError(f"Step must be positive, got {step}.")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients.")
    sizes = np.array([p.numel() for p in params], dtype=np.int64)
    total = int(sizes.sum())
    if total == 0:
        return GradcheckReport(0.0, 0, 0)
    rng = np.random.default_rng(seed)
    coordinates = rng.choice(total, size=min(samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst, checked, skipped = 0.0, 0, 0
    with torch.no_grad():
        for coordinate in np.sort(coordinates):
            which = int(np.searchsorted(offsets, coordinate, side="right") - 1)
            local = int(coordinate - offsets[which])
            flat = params[which].view(-1)
            original = flat[local].clone()

            flat[local] = original + step
            plus, plus_args, plus_signature = _evaluate(loss_fn)
            flat[local] = original - step
            minus, minus_args, minus_signature = _evaluate(loss_fn)
            flat[local] = original

            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise GradcheckError(
                    f"Loss is not finite at coordinate {local} of parameter {which}."
                )
            near_kink = bool(
                np.any(np.abs(plus_args) < kink_tolerance)
                or np.any(np.abs(minus_args) < kink_tolerance)
                or np.any((plus_args > 0) != (minus_args > 0))
            )
            if near_kink or plus_signature != minus_signature:
                skipped += 1
                continue

            numeric = (plus - minus) / (2 * step)
            analytic = float(grads[which].reshape(-1)[local])
            error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
            worst = max(worst, error)
            checked += 1

    logger.info(
        f"Gradient check: {checked} coordinates checked, {skipped} skipped, max relative error {worst:.3e}."
    )
    return GradcheckReport(max_relative_error=worst, checked=checked, skipped=skipped)


def check_model_gradients(
    model: nn.Module,
    images: TripletImages,
    loss_cfg: LossConfiguration,
    gradcheck_cfg: GradcheckConfiguration,
) -> GradcheckReport:
    """
    End-to-end check: closed-form feature gradients carried through autograd to every tunable
    parameter, against central differences of the full batch loss.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    model_triplet_loss(model, images, loss_cfg).backward()
    grads = [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for p in params
    ]

    def loss_fn() -> BatchLossOutput:
        return model_triplet_loss(model, images, loss_cfg)

    return finite_diff_gradcheck(
        loss_fn,
        params,
        grads,
        step=gradcheck_cfg.step,
        samples=gradcheck_cfg.samples,
        kink_tolerance=gradcheck_cfg.kink_tolerance,
        seed=gradcheck_cfg.seed,
    )
