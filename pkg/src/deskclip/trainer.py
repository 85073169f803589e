"""Deterministic training loop: Adam/AdamW, warmup+cosine schedule, logit
scale clamping, and validation-based checkpoint selection.

All randomness (parameter init, epoch shuffles, dropout masks) flows from one
seeded generator in a fixed order, so identical config and seed reproduce the
run bit for bit. Validation scores the mean of the two directional R@1
values on a dropout-free encoding of the held-out pairs; the best-scoring
snapshot is returned alongside the final parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import encoders, objectives, retrieval
from .datagen import NliRecord, PairedRecord, base_id, nli_sentence_pool
from .encoders import EncoderParams, Model, TextInput
from .errors import (
    EmptyDataset,
    InvalidConfig,
    InvalidSchedule,
    MissingInput,
    NumericFailure,
    OverlapLeak,
    ShapeMismatch,
)
from .objectives import LOGIT_SCALE_MAX, LOGIT_SCALE_MIN, LogitScale, ObjectiveConfig
from .tensor import make_rng


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    peak_lr: float = 5e-4
    warmup_steps: int = 100
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float | None = None
    seed: int = 0
    eval_every: int = 0          # 0: evaluate at epoch ends only
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    # encoder architecture
    token_dim: int = 32
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 32
    text_dropout: float = 0.1
    feat_dropout: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.batch_size < 2:
            raise InvalidConfig("batch_size must be >= 2")
        if self.peak_lr <= 0:
            raise InvalidConfig("peak_lr must be > 0")
        if self.warmup_steps < 0:
            raise InvalidConfig("warmup_steps must be >= 0")
        if self.optimizer not in ("adam", "adamw"):
            raise InvalidConfig("optimizer must be 'adam' or 'adamw'")
        if isinstance(self.hidden_dims, list):
            self.hidden_dims = tuple(self.hidden_dims)
        if isinstance(self.objective, dict):
            self.objective = ObjectiveConfig(**self.objective)

    @property
    def effective_weight_decay(self) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 0.01 if self.optimizer == "adamw" else 0.0


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear ramp to peak over the warmup, then half-cosine down to zero."""
    if total_steps <= config.warmup_steps:
        raise InvalidSchedule(
            f"warmup_steps {config.warmup_steps} must be < total steps {total_steps}"
        )
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    progress = (step - config.warmup_steps) / (total_steps - config.warmup_steps)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Bias-corrected first/second moment accumulators per parameter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def optimizer_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    config: TrainConfig,
) -> None:
    """Adam update in place; AdamW adds decoupled decay to everything except
    the logit scale, which is re-clamped after the step."""
    state.step += 1
    bc1 = 1.0 - config.beta1 ** state.step
    bc2 = 1.0 - config.beta2 ** state.step
    wd = config.effective_weight_decay
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"grad for {name} has shape {g.shape}, want {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        if config.optimizer == "adamw" and wd and name != "logit_scale":
            p *= 1.0 - lr * wd
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if name == "logit_scale":
            np.clip(p, LOGIT_SCALE_MIN, LOGIT_SCALE_MAX, out=p)


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------

def build_vocab(
    datasets: list[list[PairedRecord]], nli: list[NliRecord] | None = None
) -> list[str]:
    tokens: set[str] = set()
    for records in datasets:
        for r in records:
            tokens.update(encoders.tokenize(r.caption))
    if nli:
        for s in nli_sentence_pool(nli):
            tokens.update(encoders.tokenize(s))
    return sorted(tokens)


def init_model(rng: np.random.Generator, vocab: list[str], feature_dim: int,
               config: TrainConfig) -> Model:
    table = rng.normal(0.0, 1.0, size=(len(vocab), config.token_dim))
    text_dims = [config.token_dim, *config.hidden_dims, config.embed_dim]
    feat_dims = [feature_dim, *config.hidden_dims, config.embed_dim]
    text_mlp = encoders.init_encoder(rng, text_dims, config.text_dropout)
    feat_mlp = encoders.init_encoder(rng, feat_dims, config.feat_dropout)
    return Model(
        vocab=vocab,
        token_table=table,
        text_mlp=text_mlp,
        feat_mlp=feat_mlp,
        logit_scale=objectives.INIT_LOGIT_SCALE,
    )


def model_params(model: Model) -> dict[str, np.ndarray]:
    """Flat name -> array view over the trainable parameters. The logit
    scale lives in a one-element array written back after each step."""
    params: dict[str, np.ndarray] = {"table": model.token_table}
    for prefix, mlp in (("text", model.text_mlp), ("feat", model.feat_mlp)):
        for k in range(len(mlp.weights)):
            params[f"{prefix}.w{k}"] = mlp.weights[k]
            params[f"{prefix}.b{k}"] = mlp.biases[k]
    params["logit_scale"] = np.array([model.logit_scale])
    return params


def _zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(p) for k, p in params.items()}


def _accumulate(grads: dict[str, np.ndarray], prefix: str, pg: encoders.ParamGrads) -> None:
    for k in range(len(pg.weights)):
        grads[f"{prefix}.w{k}"] += pg.weights[k]
        grads[f"{prefix}.b{k}"] += pg.biases[k]
    if pg.table is not None:
        grads["table"] += pg.table


@dataclass
class _TokenizedSet:
    ids: list[str]
    token_ids: list[list[int]]
    features: np.ndarray


def _tokenize_records(model: Model, records: list[PairedRecord]) -> _TokenizedSet:
    text = encoders.captions_to_ids(model, [r.caption for r in records])
    return _TokenizedSet(
        ids=[r.id for r in records],
        token_ids=text.token_ids,
        features=np.asarray([r.features for r in records], dtype=np.float64),
    )


def _cycle_batch(pointer: int, size: int, total: int) -> tuple[list[int], int]:
    idx = [(pointer + i) % total for i in range(size)]
    return idx, (pointer + size) % total


def validation_scores(model: Model, records: list[PairedRecord]) -> dict[str, float]:
    """Dropout-free R@1 in both directions plus their mean."""
    bases = [base_id(r.id) for r in records]
    _, text_rel, other_rel = retrieval.paired_relevance(bases)
    txt = encoders.encode_captions(model, [r.caption for r in records])

    seen: dict[str, int] = {}
    rows = []
    for r in records:
        b = base_id(r.id)
        if b not in seen:
            seen[b] = len(rows)
            rows.append(r.features)
    items = encoders.encode_feature_rows(model, np.asarray(rows, dtype=np.float64))

    text_rank = retrieval.rank_gallery(items, txt)
    other_rank = retrieval.rank_gallery(txt, items)
    text_r1 = retrieval.recall_at_k(text_rank, text_rel, 1)
    other_r1 = retrieval.recall_at_k(other_rank, other_rel, 1)
    return {
        "val_text_r1": text_r1,
        "val_other_r1": other_r1,
        "score": 0.5 * (text_r1 + other_r1),
    }


@dataclass
class TrainResult:
    best_model: Model
    final_model: Model
    history: list[dict]
    train_log: list[dict]
    best_entry: dict | None


def _needs(config: ObjectiveConfig) -> tuple[bool, bool, bool]:
    active = config.active_terms()
    unsup = "sentence_unsup" in active
    return (
        unsup and config.sentence_corpus == "captions",   # twin caption views
        unsup and config.sentence_corpus == "external",   # external sentence views
        "sentence_nli" in active,                         # nli triple
    )


def train(
    config: TrainConfig,
    data: list[PairedRecord],
    val: list[PairedRecord],
    nli: list[NliRecord] | None = None,
) -> TrainResult:
    """Run the optimization loop and return best/final models plus history.

    ``nli`` supplies the triples for 'n' variants and the sentence pool for
    'e' variants; both cycle through their corpus independently of the
    paired batches, one mini-batch per step.
    """
    if not data:
        raise EmptyDataset("training set is empty")
    if not val:
        raise EmptyDataset("validation set is empty")
    shared = {r.id for r in data} & {r.id for r in val}
    if shared:
        raise OverlapLeak(f"{len(shared)} ids appear in both train and val")

    need_twin, need_ext, need_nli = _needs(config.objective)
    if (need_nli or need_ext) and not nli:
        raise MissingInput(
            f"variant {config.objective.variant} requires NLI records"
        )

    rng = make_rng(config.seed)
    vocab = build_vocab([data, val], nli if (need_nli or need_ext) else None)
    feature_dim = len(data[0].features)
    model = init_model(rng, vocab, feature_dim, config)

    train_set = _tokenize_records(model, data)
    nli_sets = None
    ext_ids: list[list[int]] | None = None
    if need_nli:
        def ids_of(sentences):
            return encoders.captions_to_ids(model, sentences).token_ids
        nli_sets = (
            ids_of([r.premise for r in nli]),
            ids_of([r.entailment for r in nli]),
            ids_of([r.contradiction for r in nli]),
        )
    if need_ext:
        ext_ids = encoders.captions_to_ids(model, nli_sentence_pool(nli)).token_ids

    params = model_params(model)
    opt = OptimizerState.for_params(params)

    n_train = len(data)
    batch_bounds = [
        (s, min(s + config.batch_size, n_train))
        for s in range(0, n_train, config.batch_size)
    ]
    batch_bounds = [(s, e) for s, e in batch_bounds if e - s >= 2]
    total_steps = config.epochs * len(batch_bounds)

    history: list[dict] = []
    train_log: list[dict] = []
    best_entry: dict | None = None
    best_model = model.copy()
    last_eval_step = -1
    nli_ptr = 0
    ext_ptr = 0
    step = 0

    def evaluate(epoch: int) -> None:
        nonlocal best_entry, best_model, last_eval_step
        if step == last_eval_step:
            return
        last_eval_step = step
        scores = validation_scores(model, val)
        entry = {"step": step, "epoch": epoch, **scores}
        history.append(entry)
        if best_entry is None or entry["score"] > best_entry["score"]:
            best_entry = entry
            best_model = model.copy()

    for epoch in range(config.epochs):
        perm = rng.permutation(n_train)
        for start, end in batch_bounds:
            idx = perm[start:end]
            n = idx.size
            lr = lr_at(config, step, total_steps)

            feat_masks = encoders.make_masks(rng, model.feat_mlp, n)
            img, img_trace = encoders.embed_features(
                model.feat_mlp, train_set.features[idx], feat_masks
            )
            batch_tokens = [train_set.token_ids[i] for i in idx]
            text_in = TextInput(batch_tokens, len(vocab))
            txt_masks = encoders.make_masks(rng, model.text_mlp, n)
            txt, txt_trace = encoders.embed_text(
                model.text_mlp, model.token_table, text_in, txt_masks
            )

            txt_plus = txt_plus_trace = None
            if need_twin:
                plus_masks = encoders.make_masks(rng, model.text_mlp, n)
                txt_plus, txt_plus_trace = encoders.embed_text(
                    model.text_mlp, model.token_table, text_in, plus_masks
                )

            ext_pair = None
            ext_traces = None
            if need_ext:
                ids, ext_ptr = _cycle_batch(ext_ptr, config.batch_size, len(ext_ids))
                ext_in = TextInput([ext_ids[i] for i in ids], len(vocab))
                views = []
                ext_traces = []
                for _ in range(2):
                    masks = encoders.make_masks(rng, model.text_mlp, config.batch_size)
                    emb, tr = encoders.embed_text(
                        model.text_mlp, model.token_table, ext_in, masks
                    )
                    views.append(emb)
                    ext_traces.append(tr)
                ext_pair = (views[0], views[1])

            nli_triple = None
            nli_traces = None
            if need_nli:
                ids, nli_ptr = _cycle_batch(nli_ptr, config.batch_size, len(nli_sets[0]))
                embs, nli_traces = [], []
                for role_ids in nli_sets:
                    role_in = TextInput([role_ids[i] for i in ids], len(vocab))
                    masks = encoders.make_masks(rng, model.text_mlp, config.batch_size)
                    emb, tr = encoders.embed_text(
                        model.text_mlp, model.token_table, role_in, masks
                    )
                    embs.append(emb)
                    nli_traces.append(tr)
                nli_triple = tuple(embs)

            scale = LogitScale(float(params["logit_scale"][0]))
            loss = objectives.composite_loss(
                config.objective,
                scale,
                img,
                txt,
                txt_plus=txt_plus,
                nli_triple=nli_triple,
                ext_pair=ext_pair,
            )

            for term, value in loss.breakdown.items():
                if not math.isfinite(value):
                    raise NumericFailure(f"step {step}: term {term} is non-finite")
            if not math.isfinite(loss.value):
                raise NumericFailure(f"step {step}: composite loss is non-finite")

            grads = _zero_grads(params)
            _accumulate(grads, "feat", encoders.backward(model.feat_mlp, img_trace, loss.grad_img))
            _accumulate(grads, "text", encoders.backward(model.text_mlp, txt_trace, loss.grad_txt))
            if need_twin:
                _accumulate(
                    grads, "text",
                    encoders.backward(model.text_mlp, txt_plus_trace, loss.grad_txt_plus),
                )
            if need_ext:
                for tr, g in zip(ext_traces, (loss.grad_ext, loss.grad_ext_plus)):
                    _accumulate(grads, "text", encoders.backward(model.text_mlp, tr, g))
            if need_nli:
                role_grads = (loss.grad_premise, loss.grad_entail, loss.grad_contra)
                for tr, g in zip(nli_traces, role_grads):
                    _accumulate(grads, "text", encoders.backward(model.text_mlp, tr, g))
            grads["logit_scale"][0] = loss.grad_logit_scale

            optimizer_step(opt, params, grads, lr, config)
            model.logit_scale = float(params["logit_scale"][0])

            entry = {"step": step, "lr": lr}
            for term in objectives.TERM_ORDER:
                if term in loss.breakdown:
                    entry[term] = loss.breakdown[term]
            entry["composite"] = loss.value
            entry["logit_scale"] = model.logit_scale
            train_log.append(entry)

            step += 1
            if config.eval_every and step % config.eval_every == 0:
                evaluate(epoch)
        evaluate(epoch)

    return TrainResult(
        best_model=best_model,
        final_model=model,
        history=history,
        train_log=train_log,
        best_entry=best_entry,
    )
