"""Synthetic captioning world: attribute-vector images and grammar captions.

An image is a set of categorical attributes (object, color, size, scene).
Its feature vector concatenates one one-hot block per attribute plus seeded
Gaussian jitter. Reference captions are rendered from a small grammar with
synonyms, optional modifiers and two clause orders, so the human captions
for one image differ from each other in wording and in how much they say.
"""

from __future__ import annotations

import hashlib
import json
import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .numeric import SeededRng

START, END, PAD, UNK = "<start>", "<end>", "<pad>", "<unk>"
RESERVED = (START, END, PAD, UNK)
START_ID, END_ID, PAD_ID, UNK_ID = 0, 1, 2, 3

FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed, truncated or incompatible dataset input."""


# attribute -> value -> surface forms, most common first
DEFAULT_SCHEMA = {
    "object": {
        "cat": ["cat", "kitten", "kitty"],
        "dog": ["dog", "puppy", "hound"],
        "car": ["car", "automobile", "vehicle"],
        "boat": ["boat", "ship", "vessel"],
    },
    "color": {
        "red": ["red", "crimson", "scarlet"],
        "blue": ["blue", "navy", "azure"],
        "green": ["green", "emerald"],
        "white": ["white", "pale", "ivory"],
    },
    "size": {
        "small": ["small", "little"],
        "large": ["large", "big"],
        "tiny": ["tiny", "minuscule"],
        "huge": ["huge", "giant", "enormous"],
    },
    "scene": {
        "park": ["park", "garden", "lawn"],
        "beach": ["beach", "shore", "seaside"],
        "street": ["street", "road", "avenue"],
        "kitchen": ["kitchen"],
    },
}

# {x} slots are attribute phrases; "mod" is the optional size/color run
DEFAULT_TEMPLATES = [
    "a {mod} {object} {verb} {prep} the {scene}",
    "{prep} the {scene} a {mod} {object} is {verb}",
    "there is a {mod} {object} {prep} the {scene}",
    "a {mod} {object}",
]

VERBS = ["sitting", "resting", "waiting", "standing"]
PREPS = ["in", "near", "by", "at"]


@dataclass
class WorldConfig:
    n_images: int = 700
    captions_per_image: int = 5
    t_max: int = 12
    split: tuple = (500 / 700, 100 / 700, 100 / 700)
    jitter: float = 0.1
    seed: int = 7
    schema: dict = field(default_factory=lambda: DEFAULT_SCHEMA)
    templates: list = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    template_weights: list | None = None
    mention_prob: dict = field(default_factory=lambda: {"size": 0.35, "color": 0.45})
    # relative frequency of successive synonyms: form r is drawn with weight decay**r
    synonym_decay: float = 0.5
    verbs: list = field(default_factory=lambda: list(VERBS))
    preps: list = field(default_factory=lambda: list(PREPS))
    # feature scale of each attribute block; a heavier scene block makes
    # scenes the dominant clusters under k-means
    salience: dict = field(default_factory=lambda: {"scene": 2.0})
    max_vocab: int = 200

    def validate(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.n_images < 1 or self.captions_per_image < 1:
            raise ValueError("need at least one image and one caption per image")
        longest = max(len(_render_max(t, self)) for t in self.templates)
        if self.t_max < longest + 1:
            raise ValueError(f"t_max={self.t_max} shorter than the longest template ({longest} words + END)")

    @property
    def d_img(self) -> int:
        return sum(len(v) for v in self.schema.values())


def _render_max(template, cfg):
    # worst-case word count: every optional modifier present, longest forms
    words = []
    for tok in template.split():
        if tok == "{mod}":
            words += ["x"] * len([a for a in ("size", "color") if a in cfg.schema])
        else:
            words.append(tok)
    return words


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, words) -> list[int]:
        return [START_ID] + [self.id(w) for w in words] + [END_ID]

    def decode(self, ids, strip=True) -> list[str]:
        out = []
        for i in ids:
            if strip and i in (START_ID, PAD_ID):
                continue
            if strip and i == END_ID:
                break
            out.append(self.tokens[i])
        return out

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


def build_vocabulary(sentences, threshold=1, max_size=None) -> Vocabulary:
    """Vocabulary over whitespace-split sentences.

    Tokens seen fewer than ``threshold`` times are left out (they map to
    UNK). Order is frequency descending, then lexicographic.
    """
    counts = Counter(w for s in sentences for w in (s.split() if isinstance(s, str) else s))
    for r in RESERVED:
        counts.pop(r, None)
    kept = sorted((w for w, c in counts.items() if c >= threshold), key=lambda w: (-counts[w], w))
    vocab = Vocabulary(list(RESERVED) + kept)
    if max_size is not None and len(vocab) > max_size:
        raise DataError(f"vocabulary size {len(vocab)} exceeds the configured maximum {max_size}")
    return vocab


@dataclass
class ImageRecord:
    image_id: str
    features: np.ndarray
    captions: list
    cluster_hint: str | None = None

    def __eq__(self, other):
        return (
            isinstance(other, ImageRecord)
            and self.image_id == other.image_id
            and np.array_equal(self.features, other.features)
            and self.captions == other.captions
            and self.cluster_hint == other.cluster_hint
        )


@dataclass
class Dataset:
    vocab: Vocabulary
    train: list
    val: list
    test: list
    d_img: int
    t_max: int
    attributes: dict = field(default_factory=dict)

    def split(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.vocab == other.vocab
            and (self.train, self.val, self.test) == (other.train, other.val, other.test)
            and (self.d_img, self.t_max) == (other.d_img, other.t_max)
        )


def render_caption(attrs, cfg: WorldConfig, rng: SeededRng) -> list[str]:
    """One grammar rendering of an attribute assignment."""
    weights = cfg.template_weights or [1.0] * len(cfg.templates)
    cum = np.cumsum(weights) / np.sum(weights)
    template = cfg.templates[int(np.searchsorted(cum, rng.uniform(), side="right"))]

    def form(attr):
        forms = cfg.schema[attr][attrs[attr]]
        w = np.cumsum(cfg.synonym_decay ** np.arange(len(forms)))
        return forms[min(int(np.searchsorted(w / w[-1], rng.uniform(), side="right")), len(forms) - 1)]

    words = []
    for tok in template.split():
        if tok == "{mod}":
            for attr in ("size", "color"):
                if attr in attrs and rng.uniform() < cfg.mention_prob.get(attr, 1.0):
                    words.append(form(attr))
        elif tok == "{verb}":
            words.append(cfg.verbs[rng.integer(len(cfg.verbs))])
        elif tok == "{prep}":
            words.append(cfg.preps[rng.integer(len(cfg.preps))])
        elif tok.startswith("{"):
            words.append(form(tok[1:-1]))
        else:
            words.append(tok)
    return words


def parse_caption(words, cfg: WorldConfig):
    """Recover the attribute values a caption mentions, or None if invalid.

    A caption is valid when it matches one of the templates with each slot
    filled by a surface form of the right attribute.
    """
    surface = {}
    for attr, values in cfg.schema.items():
        for value, forms in values.items():
            for f in forms:
                surface[f] = (attr, value)
    for template in cfg.templates:
        found = _match(template.split(), list(words), surface, cfg, {})
        if found is not None:
            return found
    return None


def _match(pattern, words, surface, cfg, found):
    if not pattern:
        return dict(found) if not words else None
    head, rest = pattern[0], pattern[1:]
    if head == "{mod}":
        # zero, one or two modifiers, size before color
        options = [[]]
        for attr in ("size", "color"):
            options += [o + [attr] for o in options if attr in cfg.schema]
        for opt in sorted(options, key=len, reverse=True):
            if len(words) < len(opt):
                continue
            ok = all(surface.get(w, (None,))[0] == a for w, a in zip(words, opt))
            if ok:
                sub = dict(found)
                sub.update({a: surface[w][1] for w, a in zip(words, opt)})
                r = _match(rest, words[len(opt):], surface, cfg, sub)
                if r is not None:
                    return r
        return None
    if not words:
        return None
    w = words[0]
    if head == "{verb}":
        ok = w in cfg.verbs
    elif head == "{prep}":
        ok = w in cfg.preps
    elif head.startswith("{"):
        attr = head[1:-1]
        ok = surface.get(w, (None,))[0] == attr
        if ok:
            found = dict(found)
            found[attr] = surface[w][1]
    else:
        ok = w == head
    return _match(rest, words[1:], surface, cfg, found) if ok else None


def _features(attrs, cfg, rng):
    blocks = []
    for attr, values in cfg.schema.items():
        onehot = np.zeros(len(values))
        onehot[list(values).index(attrs[attr])] = cfg.salience.get(attr, 1.0)
        blocks.append(onehot)
    f = np.concatenate(blocks)
    return f + cfg.jitter * rng.normal(f.shape)


def generate_world(cfg: WorldConfig | None = None, vocab_threshold=1) -> Dataset:
    """Deterministic synthetic dataset for ``cfg``; same seed, same bytes."""
    cfg = cfg or WorldConfig()
    cfg.validate()
    rng = SeededRng(cfg.seed)
    attr_rng, feat_rng, cap_rng, split_rng = (rng.child(i) for i in range(4))

    # cycle through shuffled passes over every attribute combination, so
    # images repeat a combination only once all of them have been used
    combos = list(itertools.product(*(list(vals) for vals in cfg.schema.values())))
    names = list(cfg.schema)
    attributes, sentences = [], []
    while len(attributes) < cfg.n_images:
        for j in attr_rng.permutation(len(combos))[:cfg.n_images - len(attributes)]:
            attributes.append(dict(zip(names, combos[j])))
    feats = [_features(a, cfg, feat_rng) for a in attributes]
    for attrs in attributes:
        sentences.append([render_caption(attrs, cfg, cap_rng) for _ in range(cfg.captions_per_image)])

    vocab = build_vocabulary([w for caps in sentences for w in caps], vocab_threshold, cfg.max_vocab)
    width = len(str(cfg.n_images - 1))
    records = []
    for i, (attrs, f, caps) in enumerate(zip(attributes, feats, sentences)):
        records.append(ImageRecord(
            image_id=f"img{i:0{width}d}",
            features=f,
            captions=[vocab.encode(c) for c in caps],
            cluster_hint=attrs.get("scene"),
        ))
    order = split_rng.permutation(len(records))
    n_train = int(round(cfg.split[0] * len(records)))
    n_val = int(round(cfg.split[1] * len(records)))
    pick = lambda idx: sorted((records[i] for i in idx), key=lambda r: r.image_id)
    ds = Dataset(
        vocab=vocab,
        train=pick(order[:n_train]),
        val=pick(order[n_train:n_train + n_val]),
        test=pick(order[n_train + n_val:]),
        d_img=cfg.d_img,
        t_max=cfg.t_max,
        attributes={r.image_id: a for r, a in zip(records, attributes)},
    )
    return ds


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    """One mini-batch: image features and one human caption per image.

    For image i the unrelated captions are the human captions of every
    other member of the batch.
    """

    image_ids: list
    features: np.ndarray
    captions: np.ndarray
    records: list = field(repr=False, default_factory=list)

    def __len__(self):
        return len(self.image_ids)

    def unrelated(self, i):
        return [j for j in range(len(self)) if j != i]


def pad_captions(captions, t_max) -> np.ndarray:
    """Stack captions into an int matrix of width ``t_max + 1``, PAD-filled."""
    out = np.full((len(captions), t_max + 1), PAD_ID, dtype=np.int64)
    for i, c in enumerate(captions):
        if len(c) > t_max + 1:
            raise DataError(f"caption longer than t_max: {c}")
        out[i, :len(c)] = c
    return out


def batch_iter(records, batch_size, rng: SeededRng, t_max):
    """One shuffled epoch of batches; the trailing partial batch is dropped."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2 so every image has an unrelated caption")
    if len(records) < batch_size:
        raise DataError(f"dataset of {len(records)} images is smaller than batch_size={batch_size}")
    order = rng.permutation(len(records))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        members = [records[i] for i in order[start:start + batch_size]]
        caps = [r.captions[rng.integer(len(r.captions))] for r in members]
        yield Batch(
            image_ids=[r.image_id for r in members],
            features=np.stack([r.features for r in members]),
            captions=pad_captions(caps, t_max),
            records=members,
        )


# ------------------------------------------------------------------ file IO


def save_dataset(ds: Dataset, path):
    lines = [json.dumps({
        "kind": "header",
        "version": FORMAT_VERSION,
        "vocab": ds.vocab.tokens,
        "d_img": ds.d_img,
        "t_max": ds.t_max,
    })]
    for split in ("train", "val", "test"):
        for r in ds.split(split):
            rec = {
                "kind": "image",
                "image_id": r.image_id,
                "features": [float(x) for x in r.features],
                "captions": r.captions,
                "cluster_hint": r.cluster_hint,
                "split": split,
            }
            if r.image_id in ds.attributes:
                rec["attributes"] = ds.attributes[r.image_id]
            lines.append(json.dumps(rec))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    splits = {"train": [], "val": [], "test": []}
    attributes = {}
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            kind = rec.get("kind")
            if lineno == 1:
                if kind != "header":
                    raise DataError(f"{path}:1: first record must be the header")
                if rec.get("version") != FORMAT_VERSION:
                    raise DataError(f"{path}:1: unsupported dataset version {rec.get('version')!r}")
                header = rec
                vocab = Vocabulary(rec["vocab"])
                continue
            if kind != "image":
                raise DataError(f"{path}:{lineno}: unexpected record kind {kind!r}")
            try:
                features = np.array(rec["features"], dtype=np.float64)
                caps = [list(map(int, c)) for c in rec["captions"]]
                r = ImageRecord(rec["image_id"], features, caps, rec.get("cluster_hint"))
                split = rec.get("split", "train")
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad image record ({exc})") from None
            if features.shape != (header["d_img"],) or not np.all(np.isfinite(features)):
                raise DataError(f"{path}:{lineno}: features must be {header['d_img']} finite values")
            for c in caps:
                if not c or c[0] != START_ID or c[-1] != END_ID or len(c) > header["t_max"] + 1:
                    raise DataError(f"{path}:{lineno}: caption violates START/END/t_max framing")
                if any(not 0 <= t < len(vocab) for t in c):
                    raise DataError(f"{path}:{lineno}: caption id outside the vocabulary")
            splits[split].append(r)
            if "attributes" in rec:
                attributes[r.image_id] = rec["attributes"]
    if header is None:
        raise DataError(f"{path}: empty dataset file")
    return Dataset(vocab, splits["train"], splits["val"], splits["test"],
                   header["d_img"], header["t_max"], attributes)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
