"""Training objectives and their analytic gradients.

Five terms over unit-norm embedding batches, each returning its scalar value
together with exact gradients w.r.t. its direct inputs:

* contrastive: symmetric InfoNCE over temperature-scaled cosine logits,
  averaged per row and over both directions so the magnitude is independent
  of batch size.
* cross_cyclic: mean squared asymmetry of the cross-modal similarity matrix,
  (1/N^2) sum_jk (<I_j,T_k> - <I_k,T_j>)^2 on raw cosines.
* in_modal_cyclic: mean squared disagreement between the two in-modality
  similarity matrices, (1/N^2) sum_jk (<I_j,I_k> - <T_j,T_k>)^2.
* sentence_unsup: InfoNCE between two dropout views of the same sentences at
  a fixed temperature.
* sentence_nli: InfoNCE with entailments as positives and all in-batch
  entailments plus contradictions as candidates.

The contrastive temperature is a trainable logit scale l with logits
exp(l) * cos, clamped to [0, 4.6052]; the sentence temperature is a fixed
constant, never trained.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    BatchTooSmall,
    DimensionMismatch,
    InactiveInputWarning,
    InvalidConfig,
    MissingInput,
)
from .tensor import as_matrix, log_softmax_rows

LOGIT_SCALE_MIN = 0.0
LOGIT_SCALE_MAX = 4.6052
INIT_TEMPERATURE = 0.07
INIT_LOGIT_SCALE = float(np.log(1.0 / INIT_TEMPERATURE))

VARIANTS = ("CLIP", "CLIPs", "CLIPn", "CLIPe", "CyCLIP", "CyCLIPs", "CyCLIPn", "CyCLIPe")

TERM_ORDER = (
    "contrastive",
    "cross_cyclic",
    "in_modal_cyclic",
    "sentence_unsup",
    "sentence_nli",
)

_VARIANT_TERMS = {
    "CLIP": ("contrastive",),
    "CLIPs": ("contrastive", "sentence_unsup"),
    "CLIPn": ("contrastive", "sentence_nli"),
    "CLIPe": ("contrastive", "sentence_unsup"),
    "CyCLIP": ("contrastive", "cross_cyclic", "in_modal_cyclic"),
    "CyCLIPs": ("contrastive", "cross_cyclic", "in_modal_cyclic", "sentence_unsup"),
    "CyCLIPn": ("contrastive", "cross_cyclic", "in_modal_cyclic", "sentence_nli"),
    "CyCLIPe": ("contrastive", "cross_cyclic", "in_modal_cyclic", "sentence_unsup"),
}


@dataclass
class LogitScale:
    """Log inverse temperature for the contrastive logits."""

    value: float = INIT_LOGIT_SCALE
    trainable: bool = True

    def clamp(self) -> None:
        self.value = float(min(max(self.value, LOGIT_SCALE_MIN), LOGIT_SCALE_MAX))


@dataclass
class ObjectiveConfig:
    """Variant selection plus term weights and the fixed sentence temperature."""

    variant: str = "CLIP"
    lambda_contra: float = 1.0
    lambda_c_cyclic: float = 0.25
    lambda_i_cyclic: float = 0.25
    lambda_s: float = 0.1
    lambda_n: float = 0.1
    tau_s: float = 0.05
    sentence_corpus: str = "captions"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfig(
                f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}"
            )
        for name in ("lambda_contra", "lambda_c_cyclic", "lambda_i_cyclic", "lambda_s", "lambda_n"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")
        if self.tau_s <= 0:
            raise InvalidConfig("tau_s must be positive")
        if self.sentence_corpus not in ("captions", "external"):
            raise InvalidConfig("sentence_corpus must be 'captions' or 'external'")
        external = self.variant.endswith("e")
        if external and self.sentence_corpus != "external":
            self.sentence_corpus = "external"
        if not external and self.sentence_corpus == "external":
            raise InvalidConfig(
                "sentence_corpus='external' is only valid for the 'e' variants"
            )
        active = self.active_terms()
        if "sentence_unsup" in active and "sentence_nli" in active:
            raise InvalidConfig("a variant may not train both sentence objectives")

    def active_terms(self) -> tuple[str, ...]:
        return _VARIANT_TERMS[self.variant]

    def weight(self, term: str) -> float:
        return {
            "contrastive": self.lambda_contra,
            "cross_cyclic": self.lambda_c_cyclic,
            "in_modal_cyclic": self.lambda_i_cyclic,
            "sentence_unsup": self.lambda_s,
            "sentence_nli": self.lambda_n,
        }[term]


@dataclass
class LossTerm:
    """Scalar loss plus gradients w.r.t. its direct inputs."""

    value: float
    grad_a: np.ndarray
    grad_b: np.ndarray | None = None
    grad_c: np.ndarray | None = None
    grad_logit_scale: float | None = None


def _pair(a, b, min_n=1):
    a = as_matrix(getattr(a, "matrix", a))
    b = as_matrix(getattr(b, "matrix", b))
    if a.shape != b.shape:
        raise DimensionMismatch(f"batch shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < min_n:
        raise BatchTooSmall(f"need at least {min_n} rows, got {a.shape[0]}")
    return a, b


def contrastive_loss(img, txt, scale: LogitScale) -> LossTerm:
    """Symmetric InfoNCE on logits exp(l) * (img @ txt^T).

    Value is the mean of the per-row cross entropies, averaged over the two
    softmax directions. Gradients cover both embedding matrices and l.
    """
    img, txt = _pair(img, txt, min_n=2)
    n = img.shape[0]
    alpha = np.exp(scale.value)
    sims = img @ txt.T
    logits = alpha * sims

    row_ls = log_softmax_rows(logits)
    col_ls = log_softmax_rows(logits.T).T
    diag = np.arange(n)
    value = -0.5 * (row_ls[diag, diag].mean() + col_ls[diag, diag].mean())

    eye = np.eye(n)
    g_logits = (np.exp(row_ls) - eye + np.exp(col_ls) - eye) / (2.0 * n)
    g_sims = alpha * g_logits
    return LossTerm(
        value=float(value),
        grad_a=g_sims @ txt,
        grad_b=g_sims.T @ img,
        grad_logit_scale=float((g_logits * logits).sum()),
    )


def cross_cyclic_loss(img, txt) -> LossTerm:
    """Mean squared asymmetry of the raw cross-modal similarity matrix."""
    img, txt = _pair(img, txt)
    n = img.shape[0]
    sims = img @ txt.T
    asym = sims - sims.T
    value = float((asym ** 2).sum() / (n * n))
    g_sims = (4.0 / (n * n)) * asym
    return LossTerm(value=value, grad_a=g_sims @ txt, grad_b=g_sims.T @ img)


def in_modal_cyclic_loss(img, txt) -> LossTerm:
    """Mean squared gap between the two in-modality similarity matrices."""
    img, txt = _pair(img, txt)
    n = img.shape[0]
    gap = img @ img.T - txt @ txt.T
    value = float((gap ** 2).sum() / (n * n))
    coeff = 4.0 / (n * n)
    return LossTerm(
        value=value,
        grad_a=coeff * gap @ img,
        grad_b=-coeff * gap @ txt,
    )


def simcse_unsup_loss(t, t_plus, tau_s: float) -> LossTerm:
    """InfoNCE between twin dropout views of the same sentences.

    The positive for row j is its own second view; all other second views in
    the batch are negatives. The temperature is a fixed constant.
    """
    t, t_plus = _pair(t, t_plus, min_n=2)
    n = t.shape[0]
    logits = (t @ t_plus.T) / tau_s
    ls = log_softmax_rows(logits)
    diag = np.arange(n)
    value = float(-ls[diag, diag].mean())
    g_logits = (np.exp(ls) - np.eye(n)) / n
    return LossTerm(
        value=value,
        grad_a=(g_logits @ t_plus) / tau_s,
        grad_b=(g_logits.T @ t) / tau_s,
    )


def nli_sup_loss(premise, entail, contra, tau_s: float) -> LossTerm:
    """Supervised sentence InfoNCE: entailment positive, contradictions as
    extra hard negatives alongside all in-batch entailments."""
    premise, entail = _pair(premise, entail)
    _, contra = _pair(premise, contra)
    n = premise.shape[0]
    logits = np.hstack([premise @ entail.T, premise @ contra.T]) / tau_s
    ls = log_softmax_rows(logits)
    diag = np.arange(n)
    value = float(-ls[diag, diag].mean())
    g = np.exp(ls) / n
    g[diag, diag] -= 1.0 / n
    g_e, g_c = g[:, :n], g[:, n:]
    return LossTerm(
        value=value,
        grad_a=(g_e @ entail + g_c @ contra) / tau_s,
        grad_b=(g_e.T @ premise) / tau_s,
        grad_c=(g_c.T @ premise) / tau_s,
    )


@dataclass
class CompositeLoss:
    """Weighted sum of the active terms with per-term bookkeeping.

    ``breakdown`` maps each active term to its unweighted value; gradient
    slots are None when the corresponding input is unused by the variant.
    """

    value: float
    breakdown: dict[str, float]
    grad_img: np.ndarray
    grad_txt: np.ndarray
    grad_txt_plus: np.ndarray | None = None
    grad_ext: np.ndarray | None = None
    grad_ext_plus: np.ndarray | None = None
    grad_premise: np.ndarray | None = None
    grad_entail: np.ndarray | None = None
    grad_contra: np.ndarray | None = None
    grad_logit_scale: float = 0.0


def composite_loss(
    config: ObjectiveConfig,
    scale: LogitScale,
    img,
    txt,
    txt_plus=None,
    nli_triple=None,
    ext_pair=None,
) -> CompositeLoss:
    """Evaluate every term the variant activates and sum with its weights.

    's' variants need ``txt_plus`` (second dropout view of the captions);
    'n' variants need ``nli_triple`` = (premise, entail, contra); 'e'
    variants need ``ext_pair`` = twin views of external sentences. Supplying
    an input the variant ignores raises an InactiveInputWarning.
    """
    active = config.active_terms()
    needs_ext = config.sentence_corpus == "external"

    if "sentence_unsup" in active and not needs_ext and txt_plus is None:
        raise MissingInput("variant requires txt_plus (second caption view)")
    if "sentence_unsup" in active and needs_ext and ext_pair is None:
        raise MissingInput("variant requires ext_pair (external sentence views)")
    if "sentence_nli" in active and nli_triple is None:
        raise MissingInput("variant requires nli_triple (premise, entail, contra)")
    if "sentence_unsup" not in active and txt_plus is not None:
        warnings.warn("txt_plus supplied but unused by this variant", InactiveInputWarning)
    if "sentence_nli" not in active and nli_triple is not None:
        warnings.warn("nli_triple supplied but unused by this variant", InactiveInputWarning)
    if (needs_ext is False or "sentence_unsup" not in active) and ext_pair is not None:
        warnings.warn("ext_pair supplied but unused by this variant", InactiveInputWarning)

    img_m = as_matrix(getattr(img, "matrix", img))
    txt_m = as_matrix(getattr(txt, "matrix", txt))
    out = CompositeLoss(
        value=0.0,
        breakdown={},
        grad_img=np.zeros_like(img_m),
        grad_txt=np.zeros_like(txt_m),
    )

    for term in TERM_ORDER:
        if term not in active:
            continue
        w = config.weight(term)
        if term == "contrastive":
            lt = contrastive_loss(img_m, txt_m, scale)
            out.grad_img += w * lt.grad_a
            out.grad_txt += w * lt.grad_b
            out.grad_logit_scale += w * lt.grad_logit_scale
        elif term == "cross_cyclic":
            lt = cross_cyclic_loss(img_m, txt_m)
            out.grad_img += w * lt.grad_a
            out.grad_txt += w * lt.grad_b
        elif term == "in_modal_cyclic":
            lt = in_modal_cyclic_loss(img_m, txt_m)
            out.grad_img += w * lt.grad_a
            out.grad_txt += w * lt.grad_b
        elif term == "sentence_unsup":
            if needs_ext:
                ext, ext_plus = ext_pair
                lt = simcse_unsup_loss(ext, ext_plus, config.tau_s)
                out.grad_ext = w * lt.grad_a
                out.grad_ext_plus = w * lt.grad_b
            else:
                lt = simcse_unsup_loss(txt_m, txt_plus, config.tau_s)
                out.grad_txt += w * lt.grad_a
                out.grad_txt_plus = w * lt.grad_b
        else:  # sentence_nli
            premise, entail, contra = nli_triple
            lt = nli_sup_loss(premise, entail, contra, config.tau_s)
            out.grad_premise = w * lt.grad_a
            out.grad_entail = w * lt.grad_b
            out.grad_contra = w * lt.grad_c
        out.breakdown[term] = lt.value
        out.value += w * lt.value

    return out
