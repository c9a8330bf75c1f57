"""Hand-set policies for tests that need exact, enumerable distributions."""

import itertools

import numpy as np

from calgan.corpus import END_ID, START_ID, UNK_ID, pad_captions
from calgan.discriminator import Discriminator, DiscriminatorConfig
from calgan.generator import DecoderState, Generator, GeneratorConfig
from calgan.numeric import SeededRng
from calgan.numeric import tape as T


class TablePolicy(Generator):
    """Markov policy: next-token logits depend only on the last token.

    ``table[v]`` holds the logits after token ``v``. The usual step mask
    still applies, so START/PAD are never emitted and END is forced at
    the last index.
    """

    def __init__(self, table, t_max, banned=(), d_img=1):
        table = np.asarray(table, dtype=np.float64)
        cfg = GeneratorConfig(table.shape[1], d_img=d_img, d_h=1, d_e=1, d_z=1, t_max=t_max, banned=tuple(banned))
        base = Generator.create(cfg, SeededRng(0))
        super().__init__(cfg, base.params)
        self.table = table

    def logits(self, state, tokens):
        out = T.Tensor(self.table[np.asarray(tokens, dtype=np.int64)])
        return out, DecoderState(state.h, state.c, state.t + 1)


def enumerate_captions(gen, features, noise=None):
    """Every caption ``gen`` can emit for one image, with its log-probability."""
    from calgan.numeric import no_grad

    out = []

    def walk(seq, lp, state):
        with no_grad():
            logp, nxt = gen.decoder_step(state, np.array([seq[-1]]))
        dist = logp.data[0]
        for v in np.flatnonzero(np.isfinite(dist)):
            step = (seq + (int(v),), lp + dist[v])
            if v == END_ID:
                out.append(step)
            else:
                walk(*step, nxt)

    with no_grad():
        state = gen.init_state(np.atleast_2d(features), None if noise is None else np.atleast_2d(noise))
    walk((START_ID,), 0.0, state)
    return out


def fixed_length_captions(tokens, length):
    """All [START, w1..w_length, END] id tuples over ``tokens``."""
    return [(START_ID, *w, END_ID) for w in itertools.product(tokens, repeat=length)]


def small_policy(seed, vocab_tokens=2, t_max=3, banned=(UNK_ID,), d_img=16, scale=1.0):
    cfg = GeneratorConfig(4 + vocab_tokens, d_img=d_img, d_h=4, d_e=4, d_z=2, t_max=t_max, init_scale=scale,
                          banned=banned)
    return Generator.create(cfg, SeededRng(seed))


def small_disc(seed, V, kind="cal", d_img=16):
    return Discriminator.create(DiscriminatorConfig(V, d_img, 6, 6, 10.0, kind, 1.0), SeededRng(seed))


def flat_grad(params):
    return np.concatenate([g.ravel() for g in params.grads().values()])


def exact_policy_gradient(gen, f, seqs, rewards):
    """grad of sum_s pi(s) R(s), by differentiating the enumerated objective."""
    caps = pad_captions(seqs, gen.config.t_max)
    gen.params.zero_grad()
    logp, _ = gen.token_logprobs(np.repeat(f, len(seqs), axis=0), caps)
    J = T.sum(T.mul(T.exp(T.sum(logp, axis=1)), np.asarray(rewards)))
    J.backward()
    g = flat_grad(gen.params)
    gen.params.zero_grad()
    return g, float(J.item())


def per_token_gradients(gen, f, seqs):
    """grad log pi(g_t | prefix) for every sequence and step, via the surrogate."""
    tm = gen.config.t_max
    out = np.zeros((len(seqs), tm, gen.params.num_parameters()))
    for i, s in enumerate(seqs):
        cap = pad_captions([s], tm)
        for t in range(len(s) - 2):
            e = np.zeros((1, tm))
            e[0, t] = 1.0
            gen.params.zero_grad()
            gen.pg_surrogate(f, cap, e).backward()
            out[i, t] = flat_grad(gen.params)
    gen.params.zero_grad()
    return out


def worst_z(samples, exact, seed=0):
    """Largest |z| of the per-sample gradient mean against the exact gradient,
    projected on the exact direction and four random ones."""
    rng = np.random.default_rng(seed)
    dirs = [exact / np.linalg.norm(exact)] + [v / np.linalg.norm(v) for v in rng.normal(size=(4, exact.size))]
    worst = 0.0
    for v in dirs:
        x = samples @ v
        se = x.std(ddof=1) / np.sqrt(len(x))
        worst = max(worst, abs(x.mean() - exact @ v) / se)
    return worst
