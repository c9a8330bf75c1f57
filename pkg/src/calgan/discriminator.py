"""Comparative-relevance and binary discriminators.

Both share one architecture: a tanh image projection and an LSTM text
encoder whose final hidden state is the caption embedding. The
comparative discriminator scores a caption by a softmax of
``gamma * cos(e_c, f_I)`` over a comparison set; the binary one by
``sigmoid(e_c . f_I)`` on its own.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import END_ID, PAD_ID, START_ID
from .numeric import SeededRng, no_grad
from .numeric import tape as T
from .params import ParameterStore, uniform_init

D_CLAMP = 1e-12


class SaturationWarning(RuntimeWarning):
    """A discriminator probability hit the log-clamp."""


@dataclass
class DiscriminatorConfig:
    vocab_size: int
    d_img: int = 16
    d_emb: int = 32
    d_e: int = 32
    gamma: float = 10.0
    kind: str = "cal"  # "cal" or "binary"
    init_scale: float = 0.08

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.kind not in ("cal", "binary"):
            raise ValueError(f"unknown discriminator kind {self.kind!r}")


@dataclass
class ComparisonSet:
    """Captions compared against one image; ``candidate`` indexes ``members``."""

    features: np.ndarray
    members: list
    candidate: int = 0
    human: int = 1
    source_ids: list = field(default_factory=list)

    @classmethod
    def build(cls, features, candidate, human, unrelated, unrelated_ids=None, image_id=None):
        """Set {candidate, human, *unrelated}; ``candidate=None`` scores the human caption."""
        if len(unrelated) < 1:
            raise ValueError("a comparison set needs at least one unrelated caption")
        if unrelated_ids is not None and image_id in unrelated_ids:
            raise ValueError("unrelated captions must come from other images")
        if candidate is None:  # scoring the human caption itself
            members, cand, hum = [human, *unrelated], 0, 0
        else:
            members, cand, hum = [candidate, human, *unrelated], 0, 1
        return cls(np.asarray(features, dtype=np.float64), list(members), cand, hum, list(unrelated_ids or []))


@dataclass
class CrScore:
    value: float
    similarities: np.ndarray
    scores: np.ndarray


def _as_matrix(captions, width):
    rows = []
    for c in captions:
        c = list(np.asarray(c, dtype=np.int64))
        if len(c) > width:
            raise ValueError("caption longer than the encoder width")
        rows.append(c + [PAD_ID] * (width - len(c)))
    return np.array(rows, dtype=np.int64)


class Discriminator:
    def __init__(self, config: DiscriminatorConfig, params: ParameterStore):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: DiscriminatorConfig, rng: SeededRng):
        c = config
        shapes = {
            "img_w": (c.d_img, c.d_emb),
            "img_b": (c.d_emb,),
            "embed": (c.vocab_size, c.d_e),
            "lstm_w": (c.d_e + c.d_emb, 4 * c.d_emb),
            "lstm_b": (4 * c.d_emb,),
        }
        return cls(config, ParameterStore(uniform_init(shapes, rng, c.init_scale)))

    def config_dict(self):
        return asdict(self.config)

    @property
    def gamma(self):
        return self.config.gamma

    # ------------------------------------------------------------- encoders

    def embed_image(self, features):
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if f.shape[1] != self.config.d_img:
            raise ValueError(f"image features must have dimension {self.config.d_img}, got {f.shape[1]}")
        return T.tanh(T.add(T.matmul(f, self.params["img_w"]), self.params["img_b"]))

    def embed_captions(self, captions):
        """Final LSTM hidden state over tokens after START, through END.

        PAD positions leave the state untouched, so trailing padding never
        changes an embedding.
        """
        caps = np.asarray(captions, dtype=np.int64)
        if caps.ndim == 1:
            caps = caps[None, :]
        n = caps.shape[0]
        if np.any(caps[:, 0] != START_ID):
            raise ValueError("captions must begin with START")
        p, d = self.params, self.config.d_emb
        h = T.Tensor(np.zeros((n, d)))
        c = T.Tensor(np.zeros((n, d)))
        active_cols = np.flatnonzero((caps[:, 1:] != PAD_ID).any(axis=0))
        last = int(active_cols.max()) + 1 if active_cols.size else 0
        for t in range(1, last + 1):
            tok = caps[:, t]
            live = tok != PAD_ID
            x = T.take_rows(p["embed"], np.where(live, tok, END_ID))
            h_new, c_new = T.split_state(T.lstm_cell(x, h, c, p["lstm_w"], p["lstm_b"]))
            if live.all():
                h, c = h_new, c_new
            else:
                h, c = T.blend(live, h_new, h), T.blend(live, c_new, c)
        return h

    def embed_caption(self, caption):
        with no_grad():
            return self.embed_captions(np.asarray(caption)[None, :]).data[0]

    # --------------------------------------------------------------- scoring

    def similarity(self, text_emb, img_emb):
        """Caption x image similarity matrix used for ranking."""
        if self.config.kind == "cal":
            s, _ = T.cosine_matrix(text_emb, img_emb)
            return s
        return T.matmul(text_emb, T.transpose(img_emb))

    def cr_score(self, cset: ComparisonSet) -> CrScore:
        """Comparative relevance score of the candidate within its set."""
        with no_grad():
            width = max(len(m) for m in cset.members)
            e = self.embed_captions(_as_matrix(cset.members, width))
            f = self.embed_image(cset.features)
            s, flagged = T.cosine_matrix(e, f)
        if flagged:
            warnings.warn("zero-norm embedding in cr_score; similarity set to 0", RuntimeWarning, stacklevel=2)
        sims = s.data[:, 0]
        scores = comparative_scores(sims, self.gamma)
        return CrScore(float(scores[cset.candidate]), sims, scores)

    def binary_score(self, caption, features) -> float:
        with no_grad():
            e = self.embed_captions(np.asarray(caption)[None, :])
            f = self.embed_image(features)
            logit = float(np.dot(e.data[0], f.data[0]))
        return float(T._sigmoid(np.array([logit]))[0])

    # ----------------------------------------------------------------- losses

    def loss_cal(self, features, human_caps, gen_caps):
        """Comparative objective over a batch, negated for minimisation.

        For image i the set is {h_i, g_i} plus every other image's human
        caption; the loss is -mean_i[log D(h_i) + log(1 - D(g_i))].
        """
        B = len(human_caps)
        e = self.embed_captions(np.concatenate([human_caps, gen_caps], axis=0))
        f = self.embed_image(features)
        sim, flagged = T.cosine_matrix(f, e)  # (B images, 2B captions)
        if flagged:
            warnings.warn("zero-norm embedding in discriminator loss", RuntimeWarning, stacklevel=2)
        rows = np.arange(B)
        human = T.index(sim, (slice(None), slice(0, B)))
        gen = T.reshape(T.index(sim, (rows, B + rows)), (B, 1))
        logits = T.mul(T.concat([human, gen], axis=1), self.gamma)
        lse_all = T.logsumexp(logits, axis=1)
        log_dh = T.sub(T.index(logits, (rows, rows)), lse_all)
        # 1 - D(g) is the mass of every other member: stable without clamping
        others = T.index(logits, (slice(None), slice(0, B)))
        log_1m_dg = _clamp_log(T.sub(T.logsumexp(others, axis=1), lse_all))
        return T.mul(T.sum(T.add(log_dh, log_1m_dg)), -1.0 / B), {
            "d_human": np.exp(log_dh.data),
            "d_gen": 1.0 - np.exp(log_1m_dg.data),
        }

    def loss_binary(self, features, human_caps, gen_caps, unrelated_caps=None):
        """Binary objective, negated; the mismatch term is used when given."""
        B = len(human_caps)
        parts = [human_caps, gen_caps] + ([unrelated_caps] if unrelated_caps is not None else [])
        e = self.embed_captions(np.concatenate(parts, axis=0))
        f = self.embed_image(features)
        rows = np.arange(B)
        logits = _row_dots(e, f, len(parts))
        lh = T.log_sigmoid(T.index(logits, (0, rows)))
        lg = T.log_sigmoid(T.mul(T.index(logits, (1, rows)), -1.0))
        total = T.add(lh, lg)
        if unrelated_caps is not None:
            total = T.add(total, T.log_sigmoid(T.mul(T.index(logits, (2, rows)), -1.0)))
        return T.mul(T.sum(total), -1.0 / B), {
            "d_human": T._sigmoid(logits.data[0]),
            "d_gen": T._sigmoid(logits.data[1]),
        }


def comparative_scores(similarities, gamma):
    """Softmax of ``gamma * similarities``: every member's cr-score in its set."""
    x = gamma * np.asarray(similarities, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def _clamp_log(log_q):
    """Floor log(1 - D) at log(1e-12), warning when the floor is hit."""
    floor = np.log(D_CLAMP)
    hit = log_q.data < floor
    if not hit.any():
        return log_q
    warnings.warn("discriminator saturated; clamping 1 - D to 1e-12", SaturationWarning, stacklevel=3)
    return T.blend(~hit, log_q, np.full(log_q.shape, floor))


def _row_dots(e, f, groups):
    """(groups, B) matrix of e[g*B + i] . f[i]."""
    B = f.shape[0]
    e3 = T.reshape(e, (groups, B, e.shape[1]))
    prod = T.mul(e3, T.reshape(f, (1, B, f.shape[1])))
    return T.sum(prod, axis=2)
