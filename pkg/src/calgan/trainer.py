"""Adversarial training: pretraining, Monte Carlo rollouts, policy gradient.

The generator is updated by REINFORCE. Intermediate token rewards come from
K rollouts that complete each prefix with the current policy and score the
completions with the frozen discriminator; the final token is scored
exactly. Every ``d_ratio`` discriminator steps are followed by one
generator step.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .corpus import END_ID, PAD_ID, Dataset, batch_iter
from .discriminator import ComparisonSet, Discriminator, DiscriminatorConfig
from .generator import DecoderState, Generator, GeneratorConfig
from .numeric import NonFiniteError, SeededRng, no_grad, sample_categorical_rows
from .numeric import tape as T
from .params import make_optimizer

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ModeCollapseWarning(RuntimeWarning):
    pass


DECODE_MODES = ("best", "sample", "beam", "greedy")


@dataclass
class TrainerConfig:
    seed: int = 0
    k: int = 16
    gamma: float = 10.0
    lr: float = 0.005
    optimizer: str = "adam"
    batch_size: int = 16
    g_pretrain_epochs: int = 50
    d_pretrain_epochs: int = 20
    d_ratio: int = 5
    adv_epochs: int = 5
    discriminator: str = "cal"
    binary_reg: bool = True
    noise: bool = True
    baseline: bool = True
    baseline_decay: float = 0.9
    pg_form: str = "log"
    temperature: float = 1.0
    n_test_samples: int = 5
    beam_width: int = 3
    decode: str = "best"  # best-of-n | sample | beam | greedy
    test_noise: bool = True
    d_h: int = 32
    d_e: int = 32
    d_z: int = 8
    d_emb: int = 32
    init_scale: float = 0.08
    snapshot_every: int = 50

    def validate(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.d_ratio < 1:
            raise ValueError("d_ratio must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.discriminator not in ("cal", "binary"):
            raise ValueError(f"unknown discriminator {self.discriminator!r}")
        if self.decode not in DECODE_MODES:
            raise ValueError(f"unknown decode mode {self.decode!r}")
        if self.n_test_samples < 1 or self.beam_width < 1 or self.batch_size < 2:
            raise ValueError("n_test_samples and beam_width must be >= 1, batch_size >= 2")
        if self.pg_form not in ("log", "prob"):
            raise ValueError(f"unknown pg_form {self.pg_form!r}")
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw).validate()


@dataclass
class RewardEstimate:
    q: np.ndarray          # (n, t_max) Q for target indices 1..t_max
    rollouts: np.ndarray   # (n, t_max) rollouts used per entry; 0 = exact
    mask: np.ndarray


# ------------------------------------------------------------------ rollouts


def rollout_batch(gen: Generator, h, c, pos, tokens, rng: SeededRng):
    """Complete many prefixes at once.

    Row r has tokens up to index ``pos[r]`` fixed; ``(h, c)`` is the state
    after consuming indices ``0..pos[r]-1``. Each row is sampled forward at
    temperature 1 until END or the forced END at ``t_max``.
    """
    tm = gen.config.t_max
    out = tokens.copy()
    pos = pos.astype(np.int64).copy()
    n = len(pos)
    for r in range(n):
        out[r, pos[r] + 1:] = PAD_ID
    done = out[np.arange(n), pos] == END_ID
    state = DecoderState(T.Tensor(h), T.Tensor(c), np.minimum(pos, tm - 1))
    with no_grad():
        while not done.all():
            feed = out[np.arange(n), np.minimum(pos, tm)]
            state.t = np.where(done, np.minimum(state.t, tm - 1), pos)
            logp, state = gen.decoder_step(state, np.where(done, END_ID, feed))
            nxt = sample_categorical_rows(np.exp(logp.data), rng)
            live = ~done
            rows = np.flatnonzero(live)
            out[rows, pos[rows] + 1] = nxt[rows]
            pos[rows] += 1
            done |= live & (nxt == END_ID)
    return out


def rollout_complete(prefix, features, gen: Generator, rng: SeededRng, noise=None):
    """Complete one prefix ``[START, g1..gt]`` by sampling from ``gen``.

    A prefix that already ends in END is returned unchanged.
    """
    prefix = [int(x) for x in prefix]
    tm = gen.config.t_max
    out = np.full((1, tm + 1), PAD_ID, dtype=np.int64)
    out[0, :len(prefix)] = prefix
    if prefix[-1] == END_ID:
        return out[0]
    t = len(prefix) - 1
    if t >= tm:
        raise ValueError("prefix already at t_max")
    with no_grad():
        state = gen.init_state(np.atleast_2d(features), None if noise is None else np.atleast_2d(noise))
        for s in range(t):
            _, state = gen.decoder_step(state, out[:, s])
    return rollout_batch(gen, state.h.data, state.c.data, np.array([t]), out, rng)[0]


def _cal_scores(disc: Discriminator, cand_caps, img_emb, human_emb_sims):
    """cr-score of each candidate against its image's fixed set members.

    ``img_emb``: (n, d) image embedding per candidate; ``human_emb_sims``:
    (n, m) similarities of the set's other members to that image.
    """
    e = disc.embed_captions(cand_caps)
    s = np.clip(np.sum(_unit(e.data) * _unit(img_emb), axis=1), -1.0, 1.0)
    logits = disc.gamma * np.concatenate([s[:, None], human_emb_sims], axis=1)
    m = logits.max(axis=1, keepdims=True)
    w = np.exp(logits - m)
    return w[:, 0] / w.sum(axis=1)


def _unit(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n == 0, 0.0, x / np.where(n == 0, 1.0, n))


def _binary_scores(disc: Discriminator, cand_caps, img_emb):
    e = disc.embed_captions(cand_caps)
    return T._sigmoid(np.sum(e.data * img_emb, axis=1))


def terminal_rewards(disc: Discriminator, features, humans, captions):
    """Exact discriminator reward of complete captions, one per image."""
    with no_grad():
        f = disc.embed_image(features).data
        if disc.config.kind == "binary":
            return _binary_scores(disc, captions, f)
        he = disc.embed_captions(humans).data
        hs = np.clip(_unit(f) @ _unit(he).T, -1.0, 1.0)
        return _cal_scores(disc, captions, f, hs)


def estimate_rewards(gen: Generator, disc: Discriminator, features, humans, captions, states, k, rng,
                     noise=None) -> RewardEstimate:
    """Q values for every emitted token of a batch of sampled captions.

    The comparison set for image i holds the candidate plus every human
    caption in the batch (h_i and the unrelated u's). Prefix states come
    from ``Generator.sample(return_states=True)``.
    """
    n, width = captions.shape
    tm = width - 1
    mask = captions[:, 1:] != PAD_ID
    lengths = mask.sum(axis=1)  # index of END
    q = np.zeros((n, tm))
    counts = np.zeros((n, tm), dtype=np.int64)
    with no_grad():
        f = disc.embed_image(features).data
        if disc.config.kind == "cal":
            he = disc.embed_captions(humans).data
            hs = np.clip(_unit(f) @ _unit(he).T, -1.0, 1.0)
        q[np.arange(n), lengths - 1] = terminal_rewards(disc, features, humans, captions)
        pairs = [(i, t) for i in range(n) for t in range(1, lengths[i])]
        if pairs:
            rows = np.repeat(np.array([i for i, _ in pairs]), k)
            ts = np.repeat(np.array([t for _, t in pairs]), k)
            h0, c0 = _states_before(gen, features, noise, states, rows, ts)
            done = rollout_batch(gen, h0, c0, ts, captions[rows], rng)
            if disc.config.kind == "cal":
                r = _cal_scores(disc, done, f[rows], hs[rows])
            else:
                r = _binary_scores(disc, done, f[rows])
            r = r.reshape(len(pairs), k).mean(axis=1)
            for (i, t), v in zip(pairs, r):
                q[i, t - 1] = v
                counts[i, t - 1] = k
    return RewardEstimate(q, counts, mask)


def _states_before(gen, features, noise, states, rows, ts):
    """State having consumed indices 0..t-1 for each (row, t)."""
    with no_grad():
        init = gen.init_state(features, noise)
    h_all = [init.h.data] + [s[0] for s in states]
    c_all = [init.c.data] + [s[1] for s in states]
    h = np.stack([h_all[t][r] for r, t in zip(rows, ts)])
    c = np.stack([c_all[t][r] for r, t in zip(rows, ts)])
    return h, c


def estimate_q(prefix, features, human, unrelated, disc: Discriminator, gen: Generator, k, rng,
               noise=None) -> float:
    """Q of the last token of ``prefix`` for one image.

    A complete caption (ending in END) is scored exactly with no rollout;
    otherwise the mean cr-score of ``k`` rollout completions.
    """
    prefix = [int(x) for x in prefix]
    if prefix[-1] == END_ID:
        return score_one(disc, prefix, features, human, unrelated)
    total = 0.0
    for _ in range(k):
        done = rollout_complete(prefix, features, gen, rng, noise)
        total += score_one(disc, done, features, human, unrelated)
    return total / k


def score_one(disc: Discriminator, caption, features, human, unrelated):
    if disc.config.kind == "binary":
        return disc.binary_score(caption, features)
    return disc.cr_score(ComparisonSet.build(features, caption, human, unrelated)).value


# ----------------------------------------------------------------- training


class Trainer:
    """Holds both models, their optimizers, RNG streams and the schedule counters."""

    def __init__(self, config: TrainerConfig, dataset: Dataset, gen=None, disc=None):
        self.config = config.validate()
        self.dataset = dataset
        root = SeededRng(config.seed)
        self.rngs = {name: root.child(i) for i, name in
                     enumerate(("init_g", "init_d", "batches", "noise", "sample", "rollout", "mismatch", "eval"))}
        V = len(dataset.vocab)
        c = config
        self.gen = gen or Generator.create(
            GeneratorConfig(V, dataset.d_img, c.d_h, c.d_e, c.d_z, dataset.t_max, c.init_scale), self.rngs["init_g"])
        self.disc = disc or Discriminator.create(
            DiscriminatorConfig(V, dataset.d_img, c.d_emb, c.d_e, c.gamma, c.discriminator, c.init_scale),
            self.rngs["init_d"])
        self.g_opt = make_optimizer(c.optimizer, c.lr)
        self.d_opt = make_optimizer(c.optimizer, c.lr)
        self.step = 0
        self.baseline = None
        self.history = {"g_pretrain": [], "d_pretrain": [], "adversarial": []}
        self._collapse_run = 0
        self._batches = None
        # where the running epoch started and how far it got, so a
        # checkpoint can resume mid-epoch with the same batches
        self._epoch_start = None
        self._epoch_pos = 0
        self.stage = "init"

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_batches"] = None  # live iterators do not pickle
        return state

    # ---------------------------------------------------------------- utils

    def _noise(self, n):
        return self.gen.sample_noise(n, self.rngs["noise"]) if self.config.noise else None

    def _epoch(self):
        return batch_iter(self.dataset.train, self.config.batch_size, self.rngs["batches"], self.dataset.t_max)

    def _next_batch(self):
        while True:
            if self._batches is None:
                self._epoch_start = self.rngs["batches"].get_state()
                self._epoch_pos = 0
                self._batches = self._epoch()
            try:
                batch = next(self._batches)
            except StopIteration:
                self._batches, self._epoch_start = None, None
                continue
            self._epoch_pos += 1
            return batch

    def resume_epoch(self, epoch_start, pos):
        """Rebuild a running epoch from its starting RNG state and position."""
        self.rngs["batches"] = SeededRng.from_state(epoch_start)
        self._epoch_start = epoch_start
        self._batches = self._epoch()
        for _ in range(pos):
            next(self._batches)
        self._epoch_pos = pos

    def _apply(self, opt, params, loss, ascent=False):
        params.zero_grad()
        loss.backward()
        grads = params.grads()
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            warnings.warn(f"non-finite gradient at step {self.step}; update rejected", RuntimeWarning)
            params.zero_grad()
            return False
        opt.step(params, grads, ascent=ascent)
        params.zero_grad()
        return True

    # ------------------------------------------------------------ pretraining

    def pretrain_generator(self, epochs=None):
        """MLE on human captions; returns per-epoch mean loss."""
        epochs = self.config.g_pretrain_epochs if epochs is None else epochs
        self.stage = "g_pretrain"
        for _ in range(epochs):
            losses = []
            snapshot = self.gen.params.copy()
            for batch in self._epoch():
                try:
                    loss = self.gen.mle_loss(batch.features, batch.captions, self._noise(len(batch)))
                except NonFiniteError as exc:
                    self.gen.params = snapshot
                    raise TrainingDiverged(f"MLE pretraining diverged: {exc}", self.checkpoint()) from exc
                self._apply(self.g_opt, self.gen.params, loss)
                losses.append(loss.item())
                self.step += 1
            self.history["g_pretrain"].append(float(np.mean(losses)))
        return self.history["g_pretrain"]

    def discriminator_step(self, batch):
        with no_grad():
            gen_caps = self.gen.sample(batch.features, self.rngs["sample"], noise=self._noise(len(batch)))
        if self.disc.config.kind == "cal":
            loss, stats = self.disc.loss_cal(batch.features, batch.captions, gen_caps)
        else:
            u = None
            if self.config.binary_reg:
                r = self.rngs["mismatch"]
                pick = [batch.unrelated(i)[r.integer(len(batch) - 1)] for i in range(len(batch))]
                u = batch.captions[pick]
            loss, stats = self.disc.loss_binary(batch.features, batch.captions, gen_caps, u)
        self._apply(self.d_opt, self.disc.params, loss)
        return loss.item(), stats

    def pretrain_discriminator(self, epochs=None):
        epochs = self.config.d_pretrain_epochs if epochs is None else epochs
        self.stage = "d_pretrain"
        for _ in range(epochs):
            losses = []
            for batch in self._epoch():
                try:
                    losses.append(self.discriminator_step(batch)[0])
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"discriminator pretraining diverged: {exc}", self.checkpoint()) from exc
                self.step += 1
            self.history["d_pretrain"].append(float(np.mean(losses)))
        return self.history["d_pretrain"]

    # -------------------------------------------------------- adversarial

    def generator_step(self, batch):
        """One REINFORCE update; returns (mean reward, surrogate loss)."""
        c = self.config
        noise = self._noise(len(batch))
        caps, states, _ = self.gen.sample(batch.features, self.rngs["sample"], noise=noise, return_states=True)
        est = estimate_rewards(self.gen, self.disc, batch.features, batch.captions, caps, states, c.k,
                               self.rngs["rollout"], noise)
        mean_reward = float(est.q[est.mask].mean())
        b = 0.0
        if c.baseline:
            b = mean_reward if self.baseline is None else self.baseline
        adv = (est.q - b) * est.mask
        surrogate = self.gen.pg_surrogate(batch.features, caps, adv, noise, c.pg_form)
        self._apply(self.g_opt, self.gen.params, surrogate, ascent=True)
        if c.baseline:
            self.baseline = mean_reward if self.baseline is None else (
                c.baseline_decay * self.baseline + (1 - c.baseline_decay) * mean_reward)
        self._check_collapse(caps)
        return mean_reward, -surrogate.item()

    def _check_collapse(self, caps):
        same = bool(np.all(caps == caps[0]))
        self._collapse_run = self._collapse_run + 1 if same else 0
        if self._collapse_run >= 3:
            warnings.warn("generator emitted identical captions for 3 consecutive batches (mode collapse)",
                          ModeCollapseWarning)

    def adversarial(self, epochs=None, metrics_path=None):
        """Alternate ``d_ratio`` D steps with one G step; yields checkpoints.

        An epoch is one G step per training batch. ``epochs`` is the total
        target: G steps already in the history (a resumed run) count toward
        it. A checkpoint (with a metric snapshot) is yielded every
        ``snapshot_every`` G steps and at the end.
        """
        c = self.config
        epochs = c.adv_epochs if epochs is None else epochs
        self.stage = "adversarial"
        total = epochs * (len(self.dataset.train) // c.batch_size)
        n_g = max(0, total - len(self.history["adversarial"]))
        d_losses = []
        for _, kind in zip(range(n_g * (c.d_ratio + 1)), schedule(n_g * c.d_ratio, c.d_ratio)):
            if kind == "D":
                d_losses.append(self.discriminator_step(self._next_batch())[0])
                continue
            reward, g_loss = self.generator_step(self._next_batch())
            self.step += 1
            row = {"step": self.step, "mean_reward": reward,
                   "d_loss": float(np.mean(d_losses)) if d_losses else float("nan"), "g_loss": g_loss}
            d_losses = []
            self.history["adversarial"].append(row)
            if metrics_path is not None:
                append_metrics(metrics_path, row)
            g_count = len(self.history["adversarial"])
            if g_count % c.snapshot_every == 0 or g_count == total:
                yield self.checkpoint()

    def fit(self):
        """Full pipeline: MLE, D pretraining, adversarial; returns final checkpoint."""
        self.pretrain_generator()
        self.pretrain_discriminator()
        last = None
        for last in self.adversarial():
            pass
        return last or self.checkpoint()

    # ------------------------------------------------------------------ misc

    def checkpoint(self):
        from .checkpoint import make_checkpoint
        return make_checkpoint(self)


def schedule(d_steps, ratio):
    """Event order for ``d_steps`` D updates: each block of ``ratio`` D's then one G.

    The number of G events is ``d_steps // ratio``.
    """
    for i in range(1, d_steps + 1):
        yield "D"
        if i % ratio == 0:
            yield "G"


def append_metrics(path, row):
    import os
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write("step,mean_reward,d_loss,g_loss\n")
        fh.write(f"{row['step']},{row['mean_reward']!r},{row['d_loss']!r},{row['g_loss']!r}\n")


# ----------------------------------------------------------- test-time decode


def select_best_caption(features, gen: Generator, disc: Discriminator, n_samples, rng: SeededRng,
                        noise_on=True, return_scores=False):
    """Sample ``n_samples`` captions per image and keep the best-scored one.

    Samples use fresh noise each. With the comparative discriminator a
    sample's score is its cr-score in the set of all ``n_samples`` samples;
    with the binary one, its logistic score. Ties go to the lowest index.

    Noise and token draws come from separate substreams of ``rng``, so calls
    that differ only in ``noise_on`` share their token randomness.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    f = np.atleast_2d(features)
    m = f.shape[0]
    rep = np.repeat(f, n_samples, axis=0)
    noise = gen.sample_noise(len(rep), rng.child(0)) if noise_on else None
    caps = gen.sample(rep, rng.child(1), noise=noise)
    with no_grad():
        img = disc.embed_image(f).data
        emb = disc.embed_captions(caps).data.reshape(m, n_samples, -1)
    if disc.config.kind == "cal":
        sims = np.clip(np.einsum("mkd,md->mk", _unit(emb), _unit(img)), -1.0, 1.0)
        logits = disc.gamma * sims
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        scores = w / w.sum(axis=1, keepdims=True)
    else:
        scores = T._sigmoid(np.einsum("mkd,md->mk", emb, img).ravel()).reshape(m, n_samples)
    best = np.argmax(scores, axis=1)
    out = caps.reshape(m, n_samples, -1)[np.arange(m), best]
    if return_scores:
        return out, scores
    return out


def decode_test(features, gen: Generator, disc: Discriminator, config: TrainerConfig, rng: SeededRng):
    """Test-time captions under the config's decode flags."""
    c = config
    if c.decode == "best":
        return select_best_caption(features, gen, disc, c.n_test_samples, rng, noise_on=c.test_noise)
    if c.decode == "beam":
        return gen.beam(features, width=c.beam_width, noise_on=c.test_noise, rng=rng)
    return gen.decode(features, c.decode, rng=rng, noise_on=c.test_noise, temperature=c.temperature)
