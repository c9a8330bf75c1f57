"""Desk experiment: one seeded world, an MLE generator and three adversarial variants.

Variants share the MLE-pretrained generator as their starting point:
``cal`` (comparative discriminator), ``ggan`` (binary discriminator with
the mismatch term) and ``ggan_noreg`` (binary, no mismatch term).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .corpus import WorldConfig, generate_world, pad_captions
from .metrics import (diversity_sigma, discriminator_scores, encode_captions, encoder_hash,
                      random_scores, retrieval_recall)
from .numeric import SeededRng
from .trainer import Trainer, TrainerConfig, select_best_caption

VARIANTS = {
    "cal": {"discriminator": "cal"},
    "ggan": {"discriminator": "binary", "binary_reg": True},
    "ggan_noreg": {"discriminator": "binary", "binary_reg": False},
}

ABLATION_ARMS = ("bs", "samp", "samp+noise", "samp+noise+compa")
# fixed order so that every source draws from its own rng stream
SOURCES = ("human", "mle", "cal", "ggan", "ggan_noreg", *ABLATION_ARMS)


@dataclass
class Experiment:
    dataset: object
    config: TrainerConfig
    mle: Trainer
    models: dict = field(default_factory=dict)

    def test_arrays(self):
        recs = self.dataset.test
        return np.stack([r.features for r in recs]), [r.image_id for r in recs]


def train_variants(dataset, config: TrainerConfig, variants=tuple(VARIANTS), progress=None):
    mle = Trainer(config, dataset)
    mle.pretrain_generator()
    start = mle.gen.params.copy()
    exp = Experiment(dataset, config, mle)
    for name in variants:
        cfg = dataclasses.replace(config, **VARIANTS[name])
        tr = Trainer(cfg, dataset)
        tr.gen.params = start.copy()
        tr.stage = "g_pretrain"
        tr.pretrain_discriminator()
        tr.pretrained_disc = tr.disc.params.copy()
        for _ in tr.adversarial():
            pass
        exp.models[name] = tr
        if progress:
            progress(name, tr)
    return exp


def human_captions(dataset, rng: SeededRng):
    """One reference per test image, picked uniformly."""
    caps = [r.captions[rng.integer(len(r.captions))] for r in dataset.test]
    return pad_captions(caps, dataset.t_max)


def decode_arm(exp: Experiment, arm, rng: SeededRng):
    """Test captions for one ablation arm (one per test image)."""
    f, _ = exp.test_arrays()
    c = exp.config
    if arm == "mle":
        return exp.mle.gen.beam(f, width=c.beam_width)
    if arm == "bs":
        return exp.models["ggan"].gen.beam(f, width=c.beam_width)
    if arm == "samp":
        m = exp.models["ggan"]
        return select_best_caption(f, m.gen, m.disc, c.n_test_samples, rng, noise_on=False)
    if arm == "samp+noise":
        m = exp.models["ggan"]
        return select_best_caption(f, m.gen, m.disc, c.n_test_samples, rng, noise_on=True)
    if arm in ("samp+noise+compa", "cal", "ggan", "ggan_noreg"):
        m = exp.models["cal" if arm == "samp+noise+compa" else arm]
        return select_best_caption(f, m.gen, m.disc, c.n_test_samples, rng, noise_on=True)
    raise ValueError(f"unknown arm {arm!r}")


def shared_encoder(exp: Experiment):
    """Frozen text encoder used for every diversity comparison."""
    return exp.models["cal"].disc


def source_captions(exp: Experiment, name, root: SeededRng, draw=0):
    """Captions of one source for one draw, on that source's own stream."""
    rng = root.child(1000 * SOURCES.index(name) + draw)
    return human_captions(exp.dataset, rng) if name == "human" else decode_arm(exp, name, rng)


def source_sigma(exp: Experiment, name, root: SeededRng, draws=1):
    """Mean σ̂ under the shared encoder, plus the first draw's captions."""
    enc = shared_encoder(exp)
    h = encoder_hash(enc)
    vals, first = [], None
    for d in range(draws):
        caps = source_captions(exp, name, root, d)
        first = caps if first is None else first
        vals.append(diversity_sigma(encode_captions(enc, caps), h).sigma_hat)
    return float(np.mean(vals)), first


def evaluate(exp: Experiment, seed=0, draws=1):
    """σ̂ (shared encoder), R@k and ablation σ̂ for every caption source.

    σ̂ of sampled sources is averaged over ``draws`` independent decodes.
    """
    f, ids = exp.test_arrays()
    root = SeededRng(seed, 77)
    out = {"encoder_hash": encoder_hash(shared_encoder(exp)), "sigma": {}, "recall": {}}
    first = {}
    for name in SOURCES:
        out["sigma"][name], first[name] = source_sigma(exp, name, root, draws)
    scorers = {"cal": "cal", "ggan": "ggan", "ggan_noreg": "ggan_noreg", "mle": "ggan"}
    for name, judge in scorers.items():
        s = discriminator_scores(exp.models[judge].disc, first[name], f)
        out["recall"][name] = retrieval_recall(ids, s, ks=(1, 5, 10))
    out["recall"]["random"] = retrieval_recall(ids, random_scores(len(ids), len(ids), root.child(999)), ks=(1, 5, 10))
    out["captions"] = first
    return out


def ablation_rows(exp: Experiment, seed=0, draws=5):
    """One row per decoding arm; needs the ``ggan`` and ``cal`` models."""
    root = SeededRng(seed, 77)
    enc = shared_encoder(exp)
    rows = []
    for arm in ABLATION_ARMS:
        sigma, caps = source_sigma(exp, arm, root, draws)
        rows.append({"arm": arm, "sigma_hat": sigma, "m": len(caps), "n": encode_captions(enc, caps[:1]).shape[1],
                     "encoder_hash": encoder_hash(enc), "draws": draws})
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("arm,sigma_hat,m,n,draws,encoder_hash\n")
        for r in rows:
            fh.write(f"{r['arm']},{r['sigma_hat']!r},{r['m']},{r['n']},{r['draws']},{r['encoder_hash']}\n")


def run_seed(seed, world=None, config=None, draws=1, progress=None):
    world = world or WorldConfig(seed=seed)
    config = config or TrainerConfig(seed=seed)
    ds = generate_world(world)
    exp = train_variants(ds, config, progress=progress)
    return exp, evaluate(exp, seed, draws)
