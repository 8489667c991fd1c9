"""
Mutual-nearest-neighbour matching of dense local features and match-count re-ranking.

There is no geometric verification: the re-rank score is the number of mutual matches.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from einops import rearrange

from vprtk.utils import get_logger

logger = get_logger(__name__)


@dataclass
class MatchSet:
    """
    ## Attributes:
    * `query_indices` (`torch.Tensor`): Flattened query locations `u`, ascending.
    * `candidate_indices` (`torch.Tensor`): Flattened candidate locations `v` paired with `u`.
    * `similarities` (`torch.Tensor`): `s(u, v)` of every pair.
    """

    query_indices: torch.Tensor
    candidate_indices: torch.Tensor
    similarities: torch.Tensor

    def __len__(self) -> int:
        return int(self.query_indices.numel())

    def pairs(self) -> list:
        return list(zip(self.query_indices.tolist(), self.candidate_indices.tolist()))

    def signature(self) -> tuple:
        """Hashable identity of the selected pairs."""
        return tuple(self.pairs())


@dataclass
class RerankResult:
    """
    ## Attributes:
    * `order` (`np.ndarray`): Positions into the input candidate list, best first.
    * `scores` (`np.ndarray`): Match count of every input candidate, in input order.
    """

    order: np.ndarray
    scores: np.ndarray


def _flatten(grid: torch.Tensor) -> torch.Tensor:
    if grid.ndim == 2:
        return grid
    if grid.ndim != 3:
        raise ValueError(f"Expected a (h, w, C) local grid, got shape {tuple(grid.shape)}.")
    return rearrange(grid, "h w c -> (h w) c")


def similarity_matrix(fq: torch.Tensor, fc: torch.Tensor) -> torch.Tensor:
    """
    Inner products between every query and candidate location, `s(i, j) = fq(i) . fc(j)`, over
    row-major flattened grids. With unit-norm features this is the cosine similarity.

    ## Args:
    * `fq` (`torch.Tensor`): Query grid `(h, w, C)` or flattened `(N', C)`.
    * `fc` (`torch.Tensor`): Candidate grid `(h, w, C)` or flattened `(N', C)`.

    ## Returns:
    * `torch.Tensor`: `(N'_q, N'_c)` similarities.
    """
    fq, fc = _flatten(fq), _flatten(fc)
    if fq.shape[-1] != fc.shape[-1]:
        raise ValueError(
            f"Channel mismatch: query grid has {fq.shape[-1]}, candidate grid has {fc.shape[-1]}."
        )
    return fq @ fc.T


def mutual_nn_matches(s: torch.Tensor) -> MatchSet:
    """
    Pairs `(u, v)` where `v` is the best column of row `u` and `u` is the best row of column `v`.
    `argmax` returns the first maximal index, so ties go to the lowest index.
    """
    if s.ndim != 2 or s.numel() == 0:
        raise ValueError(f"Expected a non-empty 2D similarity matrix, got shape {tuple(s.shape)}.")
    best_col = s.argmax(dim=1)
    best_row = s.argmax(dim=0)
    rows = torch.arange(s.shape[0], device=s.device)
    mutual = best_row[best_col] == rows
    u = rows[mutual]
    v = best_col[mutual]
    return MatchSet(query_indices=u, candidate_indices=v, similarities=s[u, v])


def rerank_score(q: torch.Tensor, c: torch.Tensor) -> int:
    """Number of mutual nearest-neighbour matches between two local grids."""
    return len(mutual_nn_matches(similarity_matrix(q, c)))


def rerank_candidates(
    query_local: torch.Tensor,
    candidate_locals: Sequence[torch.Tensor],
    global_distances: Sequence[float],
    workers: int = 1,
) -> RerankResult:
    """
    Re-orders global-retrieval candidates by descending match count. Ties keep ascending global
    distance, then the original position.

    ## Args:
    * `query_local` (`torch.Tensor`): The query's local grid.
    * `candidate_locals` (`Sequence[torch.Tensor]`): Candidate grids in global-retrieval order.
    * `global_distances` (`Sequence[float]`): Global-feature distance of every candidate.
    * `workers` (`int`, optional): Threads scoring candidates concurrently. Defaults to `1`.
    """
    if len(candidate_locals) != len(global_distances):
        raise ValueError(
            f"{len(candidate_locals)} candidate grids but {len(global_distances)} global distances."
        )
    if len(candidate_locals) == 0:
        return RerankResult(order=np.zeros(0, dtype=np.int64), scores=np.zeros(0, dtype=np.int64))

    def score(candidate: torch.Tensor) -> int:
        return rerank_score(query_local, candidate)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, candidate_locals))
    else:
        scores = [score(candidate) for candidate in candidate_locals]

    scores = np.asarray(scores, dtype=np.int64)
    distances = np.asarray(global_distances, dtype=np.float64)
    positions = np.arange(len(scores))
    # lexsort sorts by the last key first
    order = np.lexsort((positions, distances, -scores))
    return RerankResult(order=order, scores=scores)
