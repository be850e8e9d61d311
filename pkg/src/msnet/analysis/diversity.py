"""Inter-branch feature diversity.

    D = 1/(N_m * N_d * N_b) * sum_d sum_m sum_{i<j} ||f_i - f_j||_2 / L

over images ``d``, blocks ``m`` and unordered branch pairs, where ``f`` is
a flattened branch output of length ``L``. Branches of unequal length (the
first, untouched group next to widened SIBM branches) cannot be compared
elementwise; such pairs are skipped and counted in the report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Sequence

import numpy as np

from ..blocks import MSBlock
from ..core.nn import Module
from ..core.tensor import Tensor, no_grad


@dataclass
class DiversityReport:
    D: float
    n_images: int
    n_blocks: int
    n_branches: int
    blocks: List[dict] = field(default_factory=list)
    skipped_pairs: List[list] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "D": self.D,
            "n_images": self.n_images,
            "n_blocks": self.n_blocks,
            "n_branches": self.n_branches,
            "blocks": self.blocks,
            "skipped_pairs": self.skipped_pairs,
        }


def diversity_metric(features: Sequence[Sequence[Sequence[np.ndarray]]],
                     block_names: Sequence[str] = ()) -> DiversityReport:
    """Evaluate D on ``features[image][block][branch]``."""
    n_d = len(features)
    if n_d == 0:
        raise ValueError("no images")
    n_m = len(features[0])
    if n_m == 0:
        raise ValueError("no blocks")
    n_b = len(features[0][0])
    if n_b < 2:
        raise ValueError(f"need at least 2 branches, got {n_b}")
    names = list(block_names) or [f"block{m}" for m in range(n_m)]

    per_block = np.zeros(n_m)
    pair_sums: Dict[int, Dict[str, float]] = {m: {} for m in range(n_m)}
    skipped = set()
    for d, blocks in enumerate(features):
        if len(blocks) != n_m:
            raise ValueError(f"image {d} has {len(blocks)} blocks, expected {n_m}")
        for m, branches in enumerate(blocks):
            if len(branches) != n_b:
                raise ValueError(f"image {d} block {m} has {len(branches)} branches, expected {n_b}")
            flat = [np.asarray(f, dtype=np.float64).ravel() for f in branches]
            for i, j in combinations(range(n_b), 2):
                if flat[i].size != flat[j].size:
                    skipped.add((m, i, j))
                    continue
                term = float(np.linalg.norm(flat[i] - flat[j])) / flat[i].size
                per_block[m] += term
                key = f"{i}-{j}"
                pair_sums[m][key] = pair_sums[m].get(key, 0.0) + term

    scale = 1.0 / (n_m * n_d * n_b)
    report = DiversityReport(D=float(per_block.sum() * scale), n_images=n_d,
                             n_blocks=n_m, n_branches=n_b)
    for m in range(n_m):
        report.blocks.append({
            "name": names[m],
            "contribution": float(per_block[m] * scale),
            "pairs": {k: v / n_d for k, v in sorted(pair_sums[m].items())},
        })
    report.skipped_pairs = [[names[m], i, j] for m, i, j in sorted(skipped)]
    return report


def collect_branch_features(model: Module, images: Sequence[np.ndarray],
                            forward=None) -> tuple:
    """Run ``images`` through ``model`` and capture every block's branch outputs.

    Returns ``(features[image][block][branch], block_names)``.
    """
    blocks = [(n, m) for n, m in model.named_modules() if isinstance(m, MSBlock)]
    if not blocks:
        raise ValueError("model contains no multi-branch blocks")
    forward = forward or (lambda mod, x: mod(x))
    model.eval()
    features: List[list] = []
    try:
        for _, b in blocks:
            b._recorder = []
        for image in images:
            image = np.asarray(image)
            if image.ndim == 3:
                image = image[None]
            for _, b in blocks:
                b._recorder.clear()
            with no_grad():
                forward(model, Tensor(image))
            for k in range(image.shape[0]):
                features.append([[o[k] for o in b._recorder[-1]] for _, b in blocks])
    finally:
        for _, b in blocks:
            b._recorder = None
    return features, [n for n, _ in blocks]


def branch_diversity(model: Module, images: Sequence[np.ndarray], forward=None) -> DiversityReport:
    features, names = collect_branch_features(model, images, forward)
    return diversity_metric(features, names)
