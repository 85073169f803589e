"""Representation-space diagnostics on the unit sphere.

alignment: mean squared distance between aligned cross-modal pairs (0 is
perfect, 4 is antipodal). uniformity: log mean Gaussian kernel
exp(-2 |x_i - x_j|^2) over ordered distinct pairs within one modality; 0 for
a collapsed batch, more negative the more uniformly spread. asymmetry:
Frobenius norm of S - S^T of the cross-modal cosine matrix, divided by N.
mean_pairwise_cosine: a cheap anisotropy proxy.

Pair expectations are exact averages over all ordered distinct pairs up to
4096 rows; above that a seeded sample of 4096^2 pairs is used so results
stay deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import encoders
from .errors import BatchTooSmall, DimensionMismatch, EmptyInput
from .tensor import as_matrix, make_rng

EXACT_PAIR_LIMIT = 4096
_SUBSAMPLE_SEED = 170601


def _matrix(batch) -> np.ndarray:
    return as_matrix(getattr(batch, "matrix", batch))


def alignment(img, txt) -> float:
    """Mean over aligned pairs of the squared L2 gap between the two views."""
    a, b = _matrix(img), _matrix(txt)
    if a.shape != b.shape:
        raise DimensionMismatch(f"paired batches differ in shape: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise EmptyInput("alignment needs at least one pair")
    return float(((a - b) ** 2).sum(axis=1).mean())


def _kernel_mean_exact(x: np.ndarray, chunk: int = 512) -> float:
    """Mean of exp(-2 d^2) over ordered distinct pairs, chunked by rows."""
    n = x.shape[0]
    sq = (x ** 2).sum(axis=1)
    total = 0.0
    for start in range(0, n, chunk):
        rows = x[start : start + chunk]
        d2 = sq[start : start + chunk, None] + sq[None, :] - 2.0 * rows @ x.T
        np.maximum(d2, 0.0, out=d2)
        # self pairs land on the clamped zero diagonal and contribute exactly 1
        total += np.exp(-2.0 * d2).sum() - rows.shape[0]
    return total / (n * (n - 1))


def _kernel_mean_sampled(x: np.ndarray) -> float:
    n = x.shape[0]
    rng = make_rng(_SUBSAMPLE_SEED)
    want = EXACT_PAIR_LIMIT ** 2
    total = 0.0
    count = 0
    while count < want:
        m = min(want - count, 1_000_000)
        i = rng.integers(0, n, size=m)
        j = rng.integers(0, n, size=m)
        keep = i != j
        i, j = i[keep], j[keep]
        d2 = ((x[i] - x[j]) ** 2).sum(axis=1)
        total += np.exp(-2.0 * d2).sum()
        count += i.size
    return total / count


def uniformity(batch) -> float:
    """log E exp(-2 |x_i - x_j|^2) over distinct pairs; always <= 0 for
    unit-norm inputs, equal to 0 iff all rows coincide."""
    x = _matrix(batch)
    if x.shape[0] < 2:
        raise BatchTooSmall("uniformity needs at least two rows")
    if x.shape[0] <= EXACT_PAIR_LIMIT:
        mean = _kernel_mean_exact(x)
    else:
        mean = _kernel_mean_sampled(x)
    return float(math.log(mean))


def asymmetry(img, txt) -> float:
    """|S - S^T|_F / N for the cross-modal cosine matrix S."""
    a, b = _matrix(img), _matrix(txt)
    if a.shape != b.shape:
        raise DimensionMismatch(f"batch shapes differ: {a.shape} vs {b.shape}")
    sims = a @ b.T
    return float(np.linalg.norm(sims - sims.T) / a.shape[0])


def mean_pairwise_cosine(batch) -> float:
    """Mean over ordered distinct pairs of <x_i, x_j>, computed exactly via
    the sum trick (|sum x|^2 - sum |x|^2) / (N (N-1))."""
    x = _matrix(batch)
    n = x.shape[0]
    if n < 2:
        raise BatchTooSmall("mean_pairwise_cosine needs at least two rows")
    s = x.sum(axis=0)
    return float((s @ s - (x * x).sum()) / (n * (n - 1)))


@dataclass
class GeometryReport:
    align: float
    uniform_text: float
    uniform_other: float
    asymmetry: float
    mean_pairwise_cosine: float
    n_pairs: int

    def to_json(self) -> dict:
        return {
            "align": self.align,
            "uniform_text": self.uniform_text,
            "uniform_other": self.uniform_other,
            "asymmetry": self.asymmetry,
            "mean_pairwise_cosine": self.mean_pairwise_cosine,
            "n_pairs": self.n_pairs,
        }

    def csv_row(self, run_id: str = "", variant: str = "", seed: str = "") -> str:
        return ",".join(
            [
                run_id,
                variant,
                str(seed),
                repr(self.align),
                repr(self.uniform_text),
                repr(self.uniform_other),
                repr(self.asymmetry),
                repr(self.mean_pairwise_cosine),
            ]
        )


CSV_HEADER = "run_id,variant,seed,align,uniform_text,uniform_other,asymmetry,mean_cos"


def report_from_embeddings(txt_emb, other_emb, pairs_txt=None, pairs_other=None) -> GeometryReport:
    """Build the report from already-encoded batches.

    ``txt_emb``/``other_emb`` are the per-modality populations used for the
    uniformity and anisotropy scores; the optional pair arguments override
    the matrices used for alignment/asymmetry when the populations are not
    themselves aligned row-for-row (multi-caption data).
    """
    pt = _matrix(pairs_txt) if pairs_txt is not None else _matrix(txt_emb)
    po = _matrix(pairs_other) if pairs_other is not None else _matrix(other_emb)
    return GeometryReport(
        align=alignment(po, pt),
        uniform_text=uniformity(txt_emb),
        uniform_other=uniformity(other_emb),
        asymmetry=asymmetry(po, pt),
        mean_pairwise_cosine=mean_pairwise_cosine(txt_emb),
        n_pairs=pt.shape[0],
    )


def geometry_report(model: encoders.Model, records) -> GeometryReport:
    """Encode a paired dataset with dropout disabled and score its geometry.

    Feature rows are deduplicated by base item id so repeated captions of one
    item do not inject zero-distance pairs into the uniformity average.
    """
    from .datagen import base_id  # local import to avoid a cycle

    if not records:
        raise EmptyInput("geometry_report needs a non-empty dataset")
    captions = [r.caption for r in records]
    txt = encoders.encode_captions(model, captions)

    seen: dict[str, int] = {}
    unique_rows = []
    for r in records:
        b = base_id(r.id)
        if b not in seen:
            seen[b] = len(unique_rows)
            unique_rows.append(r.features)
    items = encoders.encode_feature_rows(model, np.asarray(unique_rows))

    pair_other = items.matrix[[seen[base_id(r.id)] for r in records]]
    return report_from_embeddings(
        txt_emb=txt,
        other_emb=items,
        pairs_txt=txt.matrix,
        pairs_other=pair_other,
    )
