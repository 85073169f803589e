"""Small differentiable encoders with hand-written backward passes.

Both encoders are MLPs with tanh between layers and nothing after the last
layer, followed by row-wise L2 normalization onto the unit sphere. The text
encoder prepends a bag-of-tokens mean over a learned embedding table; the
feature encoder consumes raw per-modality vectors. Dropout (inverted, hidden
activations only) provides the stochastic twin views used by the sentence
objectives.

Backward computes the gradient of ``sum(grad_out * output)`` with respect to
every weight, bias, and the token table. Through the normalization y = v/|v|
the pullback is (g - <g, y> y)/|v| per row.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidConfig,
    InvalidRate,
    TraceMismatch,
    UnknownToken,
    ZeroRow,
)
from .tensor import NORM_EPS, as_matrix, dropout_mask, l2_normalize_rows


@dataclass
class EncoderParams:
    """Stacked affine layers; weights are (out x in), biases (out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_rate: float = 0.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise DimensionMismatch("weights and biases must pair up")
        if not self.weights:
            raise DimensionMismatch("encoder needs at least one layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidRate(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimensionMismatch(f"layer {k} weight/bias shapes disagree")
            if k > 0 and self.weights[k - 1].shape[0] != w.shape[1]:
                raise DimensionMismatch(
                    f"layer {k - 1} out dim {self.weights[k - 1].shape[0]} "
                    f"!= layer {k} in dim {w.shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.dropout_rate,
        )


@dataclass
class EmbeddingBatch:
    """N x d matrix of unit-norm rows tagged with its modality."""

    matrix: np.ndarray
    modality: str = "text"

    def __post_init__(self):
        self.matrix = as_matrix(self.matrix)
        norms = np.linalg.norm(self.matrix, axis=1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-6:
            raise DimensionMismatch("embedding rows must be unit norm within 1e-6")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class TextInput:
    """Whitespace-tokenized captions as vocabulary indices."""

    token_ids: list[list[int]]
    vocab_size: int

    def __post_init__(self):
        for i, ids in enumerate(self.token_ids):
            if not ids:
                raise DimensionMismatch(f"caption {i} is empty")
            for t in ids:
                if not 0 <= t < self.vocab_size:
                    raise UnknownToken(str(t))


@dataclass
class ForwardTrace:
    """Everything backward needs: layer inputs, tanh outputs, masks, norms."""

    kind: str                      # "text" or "features"
    layer_inputs: list[np.ndarray]
    tanh_outputs: list[np.ndarray]
    masks: list[np.ndarray | None]
    prenorm: np.ndarray
    norms: np.ndarray
    output: np.ndarray
    token_ids: list[list[int]] | None = None
    table_shape: tuple[int, int] | None = None


@dataclass
class ParamGrads:
    """Gradients shaped like EncoderParams plus (for text) the token table."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    table: np.ndarray | None = None


def init_encoder(
    rng: np.random.Generator,
    dims: list[int],
    dropout_rate: float = 0.0,
    scale: float | None = None,
) -> EncoderParams:
    """Gaussian init with 1/sqrt(fan_in) scale; dims chain in -> ... -> out."""
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        s = scale if scale is not None else 1.0 / np.sqrt(d_in)
        weights.append(rng.normal(0.0, s, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return EncoderParams(weights, biases, dropout_rate)


def make_masks(
    rng: np.random.Generator, params: EncoderParams, n_rows: int
) -> list[np.ndarray] | None:
    """Fresh dropout masks for each hidden layer, or None when rate is 0."""
    if params.dropout_rate == 0.0 or params.n_hidden == 0:
        return None
    return [
        dropout_mask(rng, n_rows, params.weights[k].shape[0], params.dropout_rate)
        for k in range(params.n_hidden)
    ]


def _check_masks(params: EncoderParams, masks, n_rows: int) -> list[np.ndarray | None]:
    if masks is None:
        return [None] * params.n_hidden
    if len(masks) != params.n_hidden:
        raise DimensionMismatch(
            f"expected {params.n_hidden} masks, got {len(masks)}"
        )
    for k, m in enumerate(masks):
        want = (n_rows, params.weights[k].shape[0])
        if m is not None and m.shape != want:
            raise DimensionMismatch(f"mask {k} shape {m.shape} != {want}")
    return list(masks)


def _mlp_forward(params: EncoderParams, x: np.ndarray, masks) -> ForwardTrace:
    masks = _check_masks(params, masks, x.shape[0])
    layer_inputs, tanh_outputs = [], []
    h = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        if h.shape[1] != w.shape[1]:
            raise DimensionMismatch(
                f"layer {k} expects in dim {w.shape[1]}, got {h.shape[1]}"
            )
        layer_inputs.append(h)
        z = h @ w.T + b
        if k < params.n_hidden:
            a = np.tanh(z)
            tanh_outputs.append(a)
            h = a if masks[k] is None else a * masks[k]
        else:
            h = z
    norms = np.linalg.norm(h, axis=1)
    bad = np.flatnonzero(norms <= NORM_EPS)
    if bad.size:
        raise ZeroRow(int(bad[0]))
    out = h / norms[:, None]
    return ForwardTrace(
        kind="features",
        layer_inputs=layer_inputs,
        tanh_outputs=tanh_outputs,
        masks=masks,
        prenorm=h,
        norms=norms,
        output=out,
    )


def embed_features(
    params: EncoderParams,
    features,
    masks: list[np.ndarray] | None = None,
    modality: str = "image",
) -> tuple[EmbeddingBatch, ForwardTrace]:
    """Encode raw feature rows to unit-norm embeddings."""
    x = as_matrix(features)
    trace = _mlp_forward(params, x, masks)
    return EmbeddingBatch(trace.output, modality), trace


def bag_of_tokens(table: np.ndarray, token_ids: list[list[int]]) -> np.ndarray:
    """Mean of the embedding-table rows of each caption's tokens."""
    rows = np.empty((len(token_ids), table.shape[1]))
    for i, ids in enumerate(token_ids):
        rows[i] = table[ids].mean(axis=0)
    return rows


def embed_text(
    params: EncoderParams,
    table: np.ndarray,
    text: TextInput,
    masks: list[np.ndarray] | None = None,
) -> tuple[EmbeddingBatch, ForwardTrace]:
    """Encode token-bag captions: table lookup mean, then the MLP."""
    if text.vocab_size != table.shape[0]:
        raise DimensionMismatch(
            f"vocab size {text.vocab_size} != table rows {table.shape[0]}"
        )
    x = bag_of_tokens(table, text.token_ids)
    trace = _mlp_forward(params, x, masks)
    trace.kind = "text"
    trace.token_ids = text.token_ids
    trace.table_shape = table.shape
    return EmbeddingBatch(trace.output, "text"), trace


def backward(params: EncoderParams, trace: ForwardTrace, grad_out) -> ParamGrads:
    """Gradient of sum(grad_out * output) w.r.t. all parameters.

    Returns zero-filled table gradients for feature traces' ``table`` slot
    (None), and scatters bag-mean gradients back into the token table for
    text traces.
    """
    g = as_matrix(grad_out)
    if g.shape != trace.output.shape:
        raise TraceMismatch(
            f"grad_out shape {g.shape} != output shape {trace.output.shape}"
        )
    if len(trace.layer_inputs) != len(params.weights):
        raise TraceMismatch("trace was produced by a different encoder")

    # Normalization pullback: y = v/|v|, dv = (g - <g, y> y)/|v|.
    y = trace.output
    g = (g - (g * y).sum(axis=1, keepdims=True) * y) / trace.norms[:, None]

    d_weights = [np.empty(0)] * len(params.weights)
    d_biases = [np.empty(0)] * len(params.biases)
    for k in range(len(params.weights) - 1, -1, -1):
        if k < params.n_hidden:
            if trace.masks[k] is not None:
                g = g * trace.masks[k]
            g = g * (1.0 - trace.tanh_outputs[k] ** 2)
        h = trace.layer_inputs[k]
        d_weights[k] = g.T @ h
        d_biases[k] = g.sum(axis=0)
        g = g @ params.weights[k]

    d_table = None
    if trace.kind == "text":
        d_table = np.zeros(trace.table_shape)
        for i, ids in enumerate(trace.token_ids):
            np.add.at(d_table, ids, g[i] / len(ids))
    return ParamGrads(d_weights, d_biases, d_table)


def _iter_param_arrays(params: EncoderParams, table: np.ndarray | None):
    for k in range(len(params.weights)):
        yield f"w{k}", params.weights[k]
        yield f"b{k}", params.biases[k]
    if table is not None:
        yield "table", table


def _forward_for_check(params, table, inputs):
    if table is not None:
        emb, trace = embed_text(params, table, inputs, masks=None)
    else:
        emb, trace = embed_features(params, inputs, masks=None)
    return emb.matrix, trace


def analytic_gradients(params: EncoderParams, inputs, loss_fn, table=None):
    """Loss value and parameter gradients via the hand-written backward."""
    out, trace = _forward_for_check(params, table, inputs)
    value, grad_out = loss_fn(out)
    grads = backward(params, trace, grad_out)
    named = {}
    for k in range(len(params.weights)):
        named[f"w{k}"] = grads.weights[k]
        named[f"b{k}"] = grads.biases[k]
    if table is not None:
        named["table"] = grads.table
    return value, named


def numeric_gradients(params: EncoderParams, inputs, loss_fn, table=None, h=1e-5):
    """Central finite differences over every parameter entry."""
    grads = {}
    for name, arr in _iter_param_arrays(params, table):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus, _ = loss_fn(_forward_for_check(params, table, inputs)[0])
            flat[i] = orig - h
            minus, _ = loss_fn(_forward_for_check(params, table, inputs)[0])
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
        grads[name] = g
    return grads


def max_rel_error(analytic: dict, numeric: dict) -> float:
    """max over entries of |a - n| / max(|a|, |n|, 1e-8)."""
    worst = 0.0
    for name in numeric:
        a = np.asarray(analytic[name], dtype=np.float64)
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        err = np.abs(a - n) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def gradient_check(params: EncoderParams, inputs, loss_fn, table=None, h=1e-5) -> float:
    """Compare analytic vs central-difference gradients, dropout disabled.

    ``loss_fn`` maps the embedding matrix to ``(scalar, grad_wrt_embedding)``
    and must be deterministic. Returns the max relative error over all
    parameters; 0.0 by convention when there is nothing to check.
    """
    _, analytic = analytic_gradients(params, inputs, loss_fn, table)
    numeric = numeric_gradients(params, inputs, loss_fn, table, h)
    return max_rel_error(analytic, numeric)


# ---------------------------------------------------------------------------
# Full model container and checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "deskclip-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Model:
    """Both encoders plus the token table and the trainable logit scale."""

    vocab: list[str]
    token_table: np.ndarray
    text_mlp: EncoderParams
    feat_mlp: EncoderParams
    logit_scale: float
    logit_scale_trainable: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.token_table.shape[0] != len(self.vocab):
            raise DimensionMismatch("token table rows must match vocab size")
        if self.text_mlp.output_dim != self.feat_mlp.output_dim:
            raise DimensionMismatch("encoders must share the output dimension")

    @property
    def embed_dim(self) -> int:
        return self.text_mlp.output_dim

    @property
    def token_to_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.vocab)}

    def copy(self) -> "Model":
        return Model(
            list(self.vocab),
            self.token_table.copy(),
            self.text_mlp.copy(),
            self.feat_mlp.copy(),
            float(self.logit_scale),
            self.logit_scale_trainable,
            dict(self.meta),
        )


def tokenize(caption: str) -> list[str]:
    return caption.split()


def captions_to_ids(model: Model, captions: list[str]) -> TextInput:
    lookup = model.token_to_id
    ids = []
    for caption in captions:
        row = []
        for tok in tokenize(caption):
            if tok not in lookup:
                raise UnknownToken(tok)
            row.append(lookup[tok])
        ids.append(row)
    return TextInput(ids, len(model.vocab))


def encode_captions(model: Model, captions: list[str]) -> EmbeddingBatch:
    """Deterministic (dropout-free) caption encoding."""
    emb, _ = embed_text(model.text_mlp, model.token_table, captions_to_ids(model, captions))
    return emb


def encode_feature_rows(model: Model, features, modality: str = "image") -> EmbeddingBatch:
    """Deterministic (dropout-free) feature encoding."""
    x = as_matrix(features)
    if x.shape[1] != model.feat_mlp.in_dim:
        raise DimensionMismatch(
            f"feature dim {x.shape[1]} != encoder input dim {model.feat_mlp.in_dim}"
        )
    emb, _ = embed_features(model.feat_mlp, x, masks=None, modality=modality)
    return emb


def _encoder_to_json(params: EncoderParams) -> dict:
    return {
        "dropout_rate": params.dropout_rate,
        "layers": [
            {"weight": w.tolist(), "bias": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
    }


def _encoder_from_json(obj: dict) -> EncoderParams:
    weights = [np.asarray(layer["weight"], dtype=np.float64) for layer in obj["layers"]]
    biases = [np.asarray(layer["bias"], dtype=np.float64) for layer in obj["layers"]]
    return EncoderParams(weights, biases, float(obj["dropout_rate"]))


def model_to_json(model: Model) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "embed_dim": model.embed_dim,
        "vocab": model.vocab,
        "token_table": model.token_table.tolist(),
        "text_mlp": _encoder_to_json(model.text_mlp),
        "feat_mlp": _encoder_to_json(model.feat_mlp),
        "logit_scale": {
            "value": float(model.logit_scale),
            "trainable": model.logit_scale_trainable,
        },
        "meta": model.meta,
    }


def model_from_json(obj: dict) -> Model:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise InvalidConfig(f"not a {CHECKPOINT_FORMAT} document")
    return Model(
        vocab=list(obj["vocab"]),
        token_table=np.asarray(obj["token_table"], dtype=np.float64),
        text_mlp=_encoder_from_json(obj["text_mlp"]),
        feat_mlp=_encoder_from_json(obj["feat_mlp"]),
        logit_scale=float(obj["logit_scale"]["value"]),
        logit_scale_trainable=bool(obj["logit_scale"]["trainable"]),
        meta=dict(obj.get("meta", {})),
    )


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: Model, path: str) -> None:
    atomic_write_text(path, json.dumps(model_to_json(model)) + "\n")


def load_checkpoint(path: str) -> Model:
    with open(path, encoding="utf-8") as fh:
        return model_from_json(json.load(fh))
