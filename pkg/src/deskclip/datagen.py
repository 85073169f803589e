"""Synthetic paired datasets, NLI triples, prompt files, and their loaders.

Items are drawn around per-class latent unit centers; features are a fixed
random linear map of (center + Gaussian noise). Captions are whitespace
token bags assembled from a class-reserved vocabulary band plus shared
filler tokens. Each class band is disjoint and every caption carries its
class anchor token, so two same-class captions always share a band token and
cross-class captions never do. A subset of band tokens additionally encodes
the signs of the item's latent noise coordinates, which gives captions
instance-level information a bag encoder can exploit.

File formats: JSONL with one record per line for pairs and NLI triples, a
plain-text prompt file with one template per line ('#' comments allowed,
exactly one '{label}' placeholder per template), and a split manifest
listing train/val ids. All writers are atomic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoders import atomic_write_text
from .errors import MissingPlaceholder, NeedTwoClasses, ParseError, SpecInvalid
from .tensor import make_rng

ID_SUFFIX = "#"


@dataclass
class PairedRecord:
    id: str
    caption: str
    features: list[float]
    class_label: str | None = None


@dataclass
class NliRecord:
    premise: str
    entailment: str
    contradiction: str


@dataclass
class GenSpec:
    n_classes: int = 8
    pairs_per_class: int = 64
    latent_dim: int = 12
    feature_dim: int = 32
    vocab_size: int = 160
    caption_len: int = 8
    noise_sigma: float = 0.25
    captions_per_item: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise SpecInvalid(f"n_classes must be >= 2, got {self.n_classes}")
        if self.pairs_per_class < 1:
            raise SpecInvalid("pairs_per_class must be >= 1")
        if self.latent_dim < 2 or self.feature_dim < 2:
            raise SpecInvalid("latent_dim and feature_dim must be >= 2")
        if self.caption_len < 1:
            raise SpecInvalid("caption_len must be >= 1")
        if self.noise_sigma < 0:
            raise SpecInvalid("noise_sigma must be >= 0")
        if self.captions_per_item < 1:
            raise SpecInvalid("captions_per_item must be >= 1")
        if self.band_size < 1 or self.n_filler < 1:
            raise SpecInvalid(
                f"vocab_size={self.vocab_size} is too small for "
                f"{self.n_classes} class bands plus filler tokens"
            )

    # vocabulary layout: one band per class, the remainder is shared filler
    @property
    def band_size(self) -> int:
        return self.vocab_size // (self.n_classes + 1)

    @property
    def n_filler(self) -> int:
        return self.vocab_size - self.n_classes * self.band_size

    @property
    def n_sign_tokens(self) -> int:
        """Latent sign bits a caption can encode, limited by band capacity."""
        return min(self.latent_dim, self.caption_len - 1, (self.band_size - 1) // 2)

    def class_label(self, c: int) -> str:
        return f"class{c}"

    def band_tokens(self, c: int) -> list[str]:
        anchor = [self.class_label(c)]
        return anchor + [f"c{c}tok{j}" for j in range(1, self.band_size)]

    def filler_tokens(self) -> list[str]:
        return [f"fill{j}" for j in range(self.n_filler)]

    def vocab(self) -> list[str]:
        out: list[str] = []
        for c in range(self.n_classes):
            out.extend(self.band_tokens(c))
        out.extend(self.filler_tokens())
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "GenSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise SpecInvalid(f"unknown generator fields: {', '.join(sorted(extra))}")
        return cls(**obj)


def base_id(record_id: str) -> str:
    """Item id of a (possibly per-caption suffixed) record id."""
    return record_id.split(ID_SUFFIX, 1)[0]


def _make_caption(spec: GenSpec, rng, band: list[str], filler: list[str], latent_noise) -> str:
    """Anchor + latent-sign tokens + random band/filler padding, shuffled."""
    n_sign = spec.n_sign_tokens
    tokens = [band[0]]
    for j in range(n_sign):
        bit = 1 if latent_noise[j] >= 0 else 0
        tokens.append(band[1 + 2 * j + bit])
    while len(tokens) < spec.caption_len:
        pool = filler if (rng.random() < 0.5 or len(band) <= 1) else band[1:]
        tokens.append(pool[int(rng.integers(0, len(pool)))])
    order = rng.permutation(len(tokens))
    return " ".join(tokens[i] for i in order)


def generate(spec: GenSpec) -> tuple[list[PairedRecord], list[PairedRecord], list[str]]:
    """Sample the paired dataset and split it 90/10 by a seeded shuffle."""
    rng = make_rng(spec.seed)
    centers = rng.normal(size=(spec.n_classes, spec.latent_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    feature_map = rng.normal(
        0.0, 1.0 / np.sqrt(spec.latent_dim), size=(spec.feature_dim, spec.latent_dim)
    )
    filler = spec.filler_tokens()

    records: list[PairedRecord] = []
    item = 0
    for c in range(spec.n_classes):
        band = spec.band_tokens(c)
        for _ in range(spec.pairs_per_class):
            noise = rng.normal(size=spec.latent_dim) * spec.noise_sigma
            latent = centers[c] + noise
            features = feature_map @ latent
            base = f"p{item:05d}"
            for k in range(spec.captions_per_item):
                rid = base if spec.captions_per_item == 1 else f"{base}{ID_SUFFIX}{k}"
                records.append(
                    PairedRecord(
                        id=rid,
                        caption=_make_caption(spec, rng, band, filler, noise),
                        features=[float(v) for v in features],
                        class_label=spec.class_label(c),
                    )
                )
            item += 1

    # split whole items, never separating the captions of one item
    bases = sorted({base_id(r.id) for r in records})
    perm = rng.permutation(len(bases))
    n_val = max(1, len(bases) // 10)
    val_bases = {bases[i] for i in perm[:n_val]}
    train = [r for r in records if base_id(r.id) not in val_bases]
    val = [r for r in records if base_id(r.id) in val_bases]
    classes = [spec.class_label(c) for c in range(spec.n_classes)]
    return train, val, classes


def generate_nli(spec: GenSpec, base: list[PairedRecord]) -> list[NliRecord]:
    """One triple per source record: the caption as premise, a same-class
    token resample as entailment, and a different-class caption as the
    contradiction."""
    if not base:
        raise SpecInvalid("base dataset is empty")
    labels = {r.class_label for r in base}
    if len(labels) < 2:
        raise NeedTwoClasses("NLI triples need captions from at least two classes")

    rng = make_rng(spec.seed + 1)
    by_label: dict[str, list[PairedRecord]] = {}
    for r in base:
        by_label.setdefault(r.class_label, []).append(r)
    label_list = sorted(by_label)
    label_to_class = {spec.class_label(c): c for c in range(spec.n_classes)}
    filler = spec.filler_tokens()

    out: list[NliRecord] = []
    for r in base:
        if r.class_label not in label_to_class:
            raise SpecInvalid(f"record {r.id} has label {r.class_label!r} outside the spec")
        band = spec.band_tokens(label_to_class[r.class_label])
        fresh_noise = rng.normal(size=spec.latent_dim)
        entail = _make_caption(spec, rng, band, filler, fresh_noise)
        others = [l for l in label_list if l != r.class_label]
        other = others[int(rng.integers(0, len(others)))]
        pool = by_label[other]
        contra = pool[int(rng.integers(0, len(pool)))].caption
        out.append(NliRecord(premise=r.caption, entailment=entail, contradiction=contra))
    return out


DEFAULT_PROMPT_TEMPLATES = [
    "{label}",
    "fill0 {label}",
    "fill0 fill1 {label}",
    "{label} fill2",
]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def pairs_to_jsonl(records: list[PairedRecord]) -> str:
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {
                    "id": r.id,
                    "caption": r.caption,
                    "features": r.features,
                    "class_label": r.class_label,
                }
            )
        )
    return "\n".join(lines) + "\n" if lines else ""


def nli_to_jsonl(records: list[NliRecord]) -> str:
    lines = [
        json.dumps(
            {
                "premise": r.premise,
                "entailment": r.entailment,
                "contradiction": r.contradiction,
            }
        )
        for r in records
    ]
    return "\n".join(lines) + "\n" if lines else ""


def write_pairs(path: str, records: list[PairedRecord]) -> None:
    atomic_write_text(path, pairs_to_jsonl(records))


def write_nli(path: str, records: list[NliRecord]) -> None:
    atomic_write_text(path, nli_to_jsonl(records))


def write_split(path: str, train: list[PairedRecord], val: list[PairedRecord]) -> None:
    doc = {"train": [r.id for r in train], "val": [r.id for r in val]}
    atomic_write_text(path, json.dumps(doc) + "\n")


def write_prompts(path: str, templates: list[str]) -> None:
    atomic_write_text(path, "".join(t + "\n" for t in templates))


def write_classes(path: str, classes: list[str]) -> None:
    atomic_write_text(path, "".join(c + "\n" for c in classes))


def load_pairs(path: str) -> list[PairedRecord]:
    records: list[PairedRecord] = []
    seen_ids: set[str] = set()
    feature_dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, ln, f"invalid JSON: {exc.msg}") from exc
            for key in ("id", "caption", "features"):
                if key not in obj:
                    raise ParseError(path, ln, f"missing field {key!r}")
            if not isinstance(obj["caption"], str) or not obj["caption"].split():
                raise ParseError(path, ln, "caption must be a non-empty string")
            if obj["id"] in seen_ids:
                raise ParseError(path, ln, f"duplicate id {obj['id']!r}")
            seen_ids.add(obj["id"])
            feats = obj["features"]
            if not isinstance(feats, list) or not feats:
                raise ParseError(path, ln, "features must be a non-empty list")
            if feature_dim is None:
                feature_dim = len(feats)
            elif len(feats) != feature_dim:
                raise ParseError(
                    path, ln, f"feature dim {len(feats)} != first record's {feature_dim}"
                )
            records.append(
                PairedRecord(
                    id=str(obj["id"]),
                    caption=obj["caption"],
                    features=[float(v) for v in feats],
                    class_label=obj.get("class_label"),
                )
            )
    return records


def load_nli(path: str) -> list[NliRecord]:
    out: list[NliRecord] = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, ln, f"invalid JSON: {exc.msg}") from exc
            for key in ("premise", "entailment", "contradiction"):
                if not isinstance(obj.get(key), str) or not obj[key].split():
                    raise ParseError(path, ln, f"field {key!r} must be a non-empty string")
            out.append(NliRecord(obj["premise"], obj["entailment"], obj["contradiction"]))
    return out


def load_split(path: str) -> tuple[list[str], list[str]]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(path, exc.lineno, f"invalid JSON: {exc.msg}") from exc
    if "train" not in doc or "val" not in doc:
        raise ParseError(path, 1, "split manifest needs 'train' and 'val' id lists")
    return [str(i) for i in doc["train"]], [str(i) for i in doc["val"]]


def load_prompts(path: str) -> list[str]:
    """Prompt templates, one per line; each must contain exactly one
    '{label}' placeholder."""
    templates: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.count("{label}") != 1:
                raise MissingPlaceholder(
                    f"{path}:{ln}: template must contain exactly one '{{label}}'"
                )
            templates.append(line)
    if not templates:
        raise MissingPlaceholder(f"{path}: no templates found")
    return templates


def expand_prompt(template: str, label: str) -> str:
    return template.replace("{label}", label)


def nli_sentence_pool(records: list[NliRecord]) -> list[str]:
    """Unique sentences across all three roles, first-appearance order."""
    seen: set[str] = set()
    out: list[str] = []
    for r in records:
        for s in (r.premise, r.entailment, r.contradiction):
            if s not in seen:
                seen.add(s)
                out.append(s)
    return out
