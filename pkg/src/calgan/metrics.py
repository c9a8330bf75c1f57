"""Caption evaluation: embedding-covariance diversity, n-gram scores,
retrieval recall, k-means categories and positional word frequencies."""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import END, END_ID, PAD, PAD_ID, START, START_ID
from .numeric import SeededRng, no_grad, sym_eigenvalues

_SPECIAL_STR = {START, END, PAD}
_SPECIAL_ID = {START_ID, END_ID, PAD_ID}


class EncoderMismatch(ValueError):
    pass


# ----------------------------------------------------------------- diversity


@dataclass
class DiversityReport:
    sigma_hat: float
    spectrum: np.ndarray
    m: int
    n: int
    encoder_hash: str = ""
    covariance: str = "sample (1/(m-1)), mean-centred"

    def __post_init__(self):
        self.sigma_hat = float(self.sigma_hat)


def sample_covariance(a):
    a = np.asarray(a, dtype=np.float64)
    centred = a - a.mean(axis=0)
    return centred.T @ centred / (a.shape[0] - 1)


def diversity_sigma(a, encoder_hash="") -> DiversityReport:
    """l1 norm of the singular values of the caption-embedding covariance.

    The covariance is symmetric PSD, so its singular values are its
    eigenvalues; they come from the Jacobi solver.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ValueError("need at least two embedding rows")
    if not np.all(np.isfinite(a)):
        raise ValueError("embedding matrix has non-finite entries")
    m, n = a.shape
    if np.all(np.abs(a - a[0]) <= 1e-12):
        return DiversityReport(0.0, np.zeros(n), m, n, encoder_hash)
    spectrum = sym_eigenvalues(sample_covariance(a), psd=True)
    return DiversityReport(float(np.sum(np.abs(spectrum))), spectrum, m, n, encoder_hash)


def check_same_encoder(reports):
    hashes = {r.encoder_hash for r in reports}
    if len(hashes) > 1:
        raise EncoderMismatch(f"diversity reports come from different encoders: {sorted(hashes)}")


def encode_captions(encoder, captions):
    """Embed captions with a discriminator's text encoder (no gradients)."""
    with no_grad():
        return encoder.embed_captions(np.asarray(captions)).data


def encoder_hash(encoder):
    return encoder.params.hash()


# ------------------------------------------------------------------- n-grams


def caption_tokens(caption, vocab=None):
    """Body tokens of a caption (START/END/PAD removed).

    Accepts an id sequence, optionally decoded with ``vocab``, or a sequence
    of strings.
    """
    if isinstance(caption, str):
        caption = caption.split()
    items = list(caption)
    if items and not isinstance(items[0], str):
        ids = [int(x) for x in items]
        if END_ID in ids:
            ids = ids[:ids.index(END_ID)]
        ids = [i for i in ids if i not in _SPECIAL_ID]
        return vocab.decode(ids) if vocab is not None else ids
    if END in items:
        items = items[:items.index(END)]
    return [w for w in items if w not in _SPECIAL_STR]


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(captions, n):
    if n < 1:
        raise ValueError("n must be at least 1")
    grams = []
    for c in captions:
        grams.extend(_ngrams(caption_tokens(c), n))
    if not grams:
        raise ValueError(f"no caption has {n} or more tokens")
    return len(set(grams)) / len(grams)


def bleu4(candidate, references):
    """Sentence BLEU-4, uniform weights, brevity penalty against the closest reference.

    Zero clipped counts for n >= 2 are smoothed to (0 + 1) / (total + 1).
    """
    refs = [caption_tokens(r) for r in references]
    if not refs:
        raise ValueError("need at least one reference")
    cand = caption_tokens(candidate)
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        counts = Counter(_ngrams(cand, n))
        total = sum(counts.values())
        best = Counter()
        for r in refs:
            for g, k in Counter(_ngrams(r, n)).items():
                best[g] = max(best[g], k)
        hit = sum(min(k, best[g]) for g, k in counts.items())
        if n == 1 and hit == 0:
            return 0.0
        if hit == 0 or total == 0:
            hit, total = hit + 1, total + 1
        log_p += math.log(hit / total) / 4
    c = len(cand)
    r = min((len(x) for x in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


# ----------------------------------------------------------------- retrieval


def retrieval_recall(image_ids, scores, ks=(1, 5, 10), true_index=None):
    """Recall@k for caption-to-image ranking.

    ``scores[i, j]`` scores caption i against image j; caption i belongs to
    image ``true_index[i]`` (default i). Ties rank the smaller image id first.
    """
    s = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(image_ids)
    n_caps, n_img = s.shape
    truth = np.arange(n_caps) if true_index is None else np.asarray(true_index)
    ranks = np.empty(n_caps, dtype=np.int64)
    for i in range(n_caps):
        own = s[i, truth[i]]
        better = s[i] > own
        tie = (s[i] == own) & (ids < ids[truth[i]])
        ranks[i] = int(better.sum() + tie.sum())
    return {int(k): float(np.mean(ranks < k)) for k in ks}


def discriminator_scores(disc, captions, features):
    """Caption x image similarity under a discriminator."""
    with no_grad():
        e = disc.embed_captions(np.asarray(captions))
        f = disc.embed_image(features)
        return disc.similarity(e, f).data


def random_scores(n_caps, n_img, rng: SeededRng):
    return rng.uniform((n_caps, n_img))


# ------------------------------------------------------------------ clusters


def kmeans_cluster(x, k, seed=0, max_iter=100, retries=10):
    """Lloyd's algorithm with k-means++ seeding; returns (labels, centroids).

    When the remaining points all coincide with chosen centres, the next
    centre is drawn uniformly among unchosen points (up to ``retries``
    draws looking for a distinct one).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError("k must be between 1 and the number of points")
    rng = SeededRng(seed, 101)
    chosen = [rng.integer(n)]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    while len(chosen) < k:
        if d2.sum() > 0:
            cdf = np.cumsum(d2 / d2.sum())
            j = min(int(np.searchsorted(cdf, rng.uniform(), side="right")), n - 1)
        else:
            free = [i for i in range(n) if i not in chosen]
            j = free[rng.integer(len(free))]
            for _ in range(retries):
                if not np.all(x[j] == x[chosen], axis=1).any():
                    break
                j = free[rng.integer(len(free))]
        chosen.append(j)
        d2 = np.minimum(d2, np.sum((x - x[j]) ** 2, axis=1))
    centres = x[chosen].copy()
    labels = None
    for _ in range(max_iter):
        dist = np.sum((x[:, None, :] - centres[None]) ** 2, axis=2)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = x[labels == c]
            if len(members):
                centres[c] = members.mean(axis=0)
    return labels, centres


def category_diversity_report(features, caption_sets, encoder, k, seed=0, labels=None):
    """σ̂ per k-means image cluster and over all images, for each caption source.

    ``caption_sets`` maps a model name to one caption per image (row-aligned
    with ``features``). Rows: dicts with cluster, model, sigma_hat, m, n,
    encoder_hash; the whole-set row has cluster ``All*``.
    """
    if labels is None:
        labels, _ = kmeans_cluster(features, k, seed)
    h = encoder_hash(encoder)
    rows = []
    for model, caps in caption_sets.items():
        caps = np.asarray(caps)
        if len(caps) != len(features):
            raise ValueError(f"{model}: need one caption per image")
        emb = encode_captions(encoder, caps)
        for c in range(k):
            idx = np.flatnonzero(labels == c)
            if len(idx) < 2:
                warnings.warn(f"cluster {c} has fewer than 2 images; skipped", RuntimeWarning)
                continue
            r = diversity_sigma(emb[idx], h)
            rows.append({"cluster": str(c), "model": model, "sigma_hat": r.sigma_hat, "m": r.m, "n": r.n,
                         "encoder_hash": h})
        r = diversity_sigma(emb, h)
        rows.append({"cluster": "All*", "model": model, "sigma_hat": r.sigma_hat, "m": r.m, "n": r.n,
                     "encoder_hash": h})
    return rows


# ----------------------------------------------------------- word frequencies


def word_frequency_table(captions, position_limit=None, threshold=0.005):
    """Per-position token frequencies; rare tokens pooled under ``*``.

    Captions are token sequences starting with START (ids are fine as well
    as strings); a plain string is read as its words between START and END.
    Positions after a caption's END contribute nothing, and a position no
    caption reaches is omitted.
    """
    captions = [[START, *c.split(), END] if isinstance(c, str) else list(c) for c in captions]
    if not captions:
        raise ValueError("empty corpus")
    counts = {}
    for cap in captions:
        for t, tok in enumerate(cap):
            if position_limit is not None and t > position_limit:
                break
            if tok in (PAD, PAD_ID) and not isinstance(tok, bool):
                break
            counts.setdefault(t, Counter())[tok] += 1
            if tok == END or (not isinstance(tok, str) and tok == END_ID):
                break
    table = {}
    for t in sorted(counts):
        c = counts[t]
        total = sum(c.values())
        row, tail = {}, 0
        for tok, k in sorted(c.items(), key=lambda kv: (-kv[1], str(kv[0]))):
            if k / total < threshold:
                tail += k
            else:
                row[tok] = k / total
        if tail:
            row["*"] = tail / total
        table[t] = row
    return table


# ----------------------------------------------------------------- CSV output


def write_diversity_csv(path, rows):
    fields = ["cluster", "model", "sigma_hat", "m", "n", "encoder_hash"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in fields})


def write_wordfreq_csv(path, table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["position", "token", "frequency"])
        for t, row in table.items():
            for tok, p in row.items():
                w.writerow([t, tok, repr(p)])
