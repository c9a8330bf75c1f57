"""Caption generator: image projection plus noise into an LSTM decoder.

Captions are int arrays ``[START, w1, ..., END, PAD...]`` of width
``t_max + 1``. Decoding step ``t`` consumes the token at index ``t`` and
yields the distribution for index ``t + 1``. START and PAD are never
emitted; at index ``t_max`` the distribution is a point mass on END, so the
forced terminator carries log-probability 0 and no gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .corpus import END_ID, PAD_ID, START_ID
from .numeric import SeededRng, no_grad, sample_categorical_rows
from .numeric import tape as T
from .params import ParameterStore, uniform_init


@dataclass
class GeneratorConfig:
    vocab_size: int
    d_img: int = 16
    d_h: int = 32
    d_e: int = 32
    d_z: int = 8
    t_max: int = 12
    init_scale: float = 0.08
    # token ids never emitted before the final index (END included, this
    # fixes the caption length at t_max); meant for small enumerable policies
    banned: tuple = ()


@dataclass
class DecoderState:
    h: T.Tensor
    c: T.Tensor
    t: np.ndarray  # per-row step index



class Generator:
    def __init__(self, config: GeneratorConfig, params: ParameterStore):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: GeneratorConfig, rng: SeededRng):
        c = config
        shapes = {
            "init_w": (c.d_img + c.d_z, 2 * c.d_h),
            "init_b": (2 * c.d_h,),
            "embed": (c.vocab_size, c.d_e),
            "lstm_w": (c.d_e + c.d_h, 4 * c.d_h),
            "lstm_b": (4 * c.d_h,),
            "out_w": (c.d_h, c.vocab_size),
            "out_b": (c.vocab_size,),
        }
        return cls(config, ParameterStore(uniform_init(shapes, rng, c.init_scale)))

    def config_dict(self):
        return asdict(self.config)

    # ------------------------------------------------------------- core steps

    def sample_noise(self, n, rng: SeededRng):
        return rng.uniform_range(-1.0, 1.0, (n, self.config.d_z))

    def init_state(self, features, noise=None) -> DecoderState:
        """Initial (h, c) from the projected ``[features; z]``.

        ``noise=None`` means the noise-off mode, identical to an all-zero z.
        """
        c, p = self.config, self.params
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if f.shape[1] != c.d_img:
            raise ValueError(f"image features must have dimension {c.d_img}, got {f.shape[1]}")
        z = np.zeros((f.shape[0], c.d_z)) if noise is None else np.atleast_2d(noise)
        if z.shape != (f.shape[0], c.d_z):
            raise ValueError(f"noise must have shape {(f.shape[0], c.d_z)}, got {z.shape}")
        packed = T.tanh(T.add(T.matmul(np.concatenate([f, z], axis=1), p["init_w"]), p["init_b"]))
        h, cell = T.split_state(packed)
        return DecoderState(h, cell, np.zeros(f.shape[0], dtype=np.int64))

    def step_mask(self, t):
        """Boolean (rows, V) mask of tokens that cannot be emitted at index t+1."""
        V = self.config.vocab_size
        mask = np.zeros((len(t), V), dtype=bool)
        mask[:, START_ID] = True
        mask[:, PAD_ID] = True
        if len(self.config.banned):
            mask[:, list(self.config.banned)] = True
        final = (t + 1) >= self.config.t_max
        mask[final] = True
        mask[final, END_ID] = False
        return mask

    def logits(self, state: DecoderState, tokens):
        p = self.params
        x = T.take_rows(p["embed"], np.asarray(tokens, dtype=np.int64))
        packed = T.lstm_cell(x, state.h, state.c, p["lstm_w"], p["lstm_b"])
        h, cell = T.split_state(packed)
        out = T.add(T.matmul(h, p["out_w"]), p["out_b"])
        return out, DecoderState(h, cell, state.t + 1)

    def decoder_step(self, state: DecoderState, tokens, temperature=1.0):
        """Log-distribution over the vocabulary for the next index, and the next state."""
        if np.any(state.t >= self.config.t_max):
            raise ValueError(f"decoder step beyond t_max={self.config.t_max}")
        logits, nxt = self.logits(state, tokens)
        if temperature != 1.0:
            logits = T.mul(logits, 1.0 / temperature)
        return T.log_softmax(logits, self.step_mask(state.t)), nxt

    # --------------------------------------------------------------- decoding

    def _noise_for(self, n, noise_on, rng):
        if not noise_on:
            return None
        if rng is None:
            raise ValueError("noise_on requires an rng")
        return self.sample_noise(n, rng)

    def sample(self, features, rng: SeededRng, noise_on=False, temperature=1.0, noise=None,
               return_states=False):
        """Sample one caption per row of ``features``.

        Noise is drawn once per caption (before any token) and held fixed
        over the whole decode. Returns the (n, t_max + 1) token matrix, and
        with ``return_states`` also the per-index decoder states used by
        rollouts.
        """
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        f = np.atleast_2d(features)
        n, tm = f.shape[0], self.config.t_max
        if noise is None:
            noise = self._noise_for(n, noise_on, rng)
        with no_grad():
            state = self.init_state(f, noise)
            out = np.full((n, tm + 1), PAD_ID, dtype=np.int64)
            out[:, 0] = START_ID
            done = np.zeros(n, dtype=bool)
            states = []
            for t in range(tm):
                logp, state = self.decoder_step(state, np.where(done, PAD_ID, out[:, t]), temperature)
                states.append((state.h.data, state.c.data))
                nxt = sample_categorical_rows(np.exp(logp.data), rng)
                nxt = np.where(done, PAD_ID, nxt)
                out[:, t + 1] = nxt
                done |= nxt == END_ID
                if done.all():
                    break
        if return_states:
            return out, states, noise
        return out

    def greedy(self, features, noise_on=False, noise=None, rng=None):
        f = np.atleast_2d(features)
        n, tm = f.shape[0], self.config.t_max
        if noise is None:
            noise = self._noise_for(n, noise_on, rng)
        with no_grad():
            state = self.init_state(f, noise)
            out = np.full((n, tm + 1), PAD_ID, dtype=np.int64)
            out[:, 0] = START_ID
            done = np.zeros(n, dtype=bool)
            for t in range(tm):
                logp, state = self.decoder_step(state, np.where(done, PAD_ID, out[:, t]))
                nxt = np.where(done, PAD_ID, np.argmax(logp.data, axis=1))
                out[:, t + 1] = nxt
                done |= nxt == END_ID
                if done.all():
                    break
        return out

    def beam(self, features, width=3, noise_on=False, noise=None, rng=None):
        """Length-normalised beam search, one image at a time.

        Each step keeps the ``width`` best expansions; those ending in END
        leave the beam as finished hypotheses. Live hypotheses share a
        length, so ranking them by summed log-probability equals ranking
        by the mean. Finished ones are ranked by mean log-probability per
        emitted token, ties to the lexicographically smaller sequence.
        Width 1 is greedy decoding.
        """
        if width < 1:
            raise ValueError("beam width must be at least 1")
        f = np.atleast_2d(features)
        if noise is None:
            noise = self._noise_for(f.shape[0], noise_on, rng)
        rows = []
        for i in range(f.shape[0]):
            z = None if noise is None else noise[i:i + 1]
            rows.append(self._beam_one(f[i:i + 1], width, z)[0])
        return np.stack(rows)

    def _beam_one(self, f, width, z):
        """Best caption for one image and its mean log-probability."""
        tm = self.config.t_max
        with no_grad():
            state = self.init_state(f, z)
            live = [((START_ID,), 0.0)]
            done = []
            for t in range(tm):
                toks = np.array([seq[-1] for seq, _ in live])
                st = DecoderState(state.h, state.c, np.full(len(live), t, dtype=np.int64))
                logp, nxt = self.decoder_step(st, toks)
                lp = logp.data
                cand = []
                for r, (seq, score) in enumerate(live):
                    for v in np.flatnonzero(np.isfinite(lp[r])):
                        cand.append((score + lp[r, v], seq + (int(v),), r))
                cand.sort(key=lambda c: (-c[0], c[1]))
                keep = []
                for score, seq, r in cand[:width]:
                    if seq[-1] == END_ID:
                        done.append((score / (len(seq) - 1), seq))
                    else:
                        keep.append((score, seq, r))
                if not keep:
                    break
                idx = np.array([r for _, _, r in keep])
                state = DecoderState(T.Tensor(nxt.h.data[idx]), T.Tensor(nxt.c.data[idx]), nxt.t[idx])
                live = [(seq, score) for score, seq, _ in keep]
        done.sort(key=lambda d: (-d[0], d[1]))
        score, best = done[0]
        out = np.full(tm + 1, PAD_ID, dtype=np.int64)
        out[:len(best)] = best
        return out, score

    def decode(self, features, mode, rng=None, noise_on=False, width=3, temperature=1.0):
        if mode == "sample":
            return self.sample(features, rng, noise_on=noise_on, temperature=temperature)
        if mode == "greedy":
            return self.greedy(features, noise_on=noise_on, rng=rng)
        if mode == "beam":
            return self.beam(features, width=width, noise_on=noise_on, rng=rng)
        raise ValueError(f"unknown decode mode {mode!r}")

    # ----------------------------------------------------------------- losses

    def token_logprobs(self, features, captions, noise=None):
        """Teacher-forced log pi(g_t | I, g_<t) for t = 1..t_max.

        Returns a (n, t_max) tensor and the 0/1 mask of real (non-PAD)
        targets. Masked entries are zero and carry no gradient.
        """
        caps = np.asarray(captions, dtype=np.int64)
        n, width = caps.shape
        tm = self.config.t_max
        if width != tm + 1:
            raise ValueError(f"captions must have width t_max + 1 = {tm + 1}")
        state = self.init_state(features, noise)
        mask = caps[:, 1:] != PAD_ID
        steps = int(np.flatnonzero(mask.any(axis=0)).max()) + 1 if mask.any() else 0
        rows = np.arange(n)
        cols = []
        for t in range(steps):
            # rows already past END feed an arbitrary legal token; their
            # targets are masked out below
            logp, state = self.decoder_step(state, np.where(caps[:, t] == PAD_ID, END_ID, caps[:, t]))
            tgt = np.where(mask[:, t], caps[:, t + 1], END_ID)
            if not np.all(np.isfinite(logp.data[rows, tgt])):
                raise ValueError("reference contains a token the decoder can never emit")
            cols.append(T.blend(mask[:, t], T.index(logp, (rows, tgt)), np.zeros(n)))
        cols += [np.zeros(n)] * (tm - steps)
        return T.stack(cols, axis=1), mask.astype(np.float64)

    def mle_loss(self, features, captions, noise=None):
        """Mean negative log-likelihood per real target token.

        Gradients land in ``self.params`` after ``loss.backward()``.
        """
        logp, mask = self.token_logprobs(features, captions, noise)
        return T.mul(T.sum(logp), -1.0 / mask.sum())

    def pg_surrogate(self, features, captions, advantages, noise=None, form="log"):
        """Policy-gradient surrogate whose gradient is the REINFORCE estimator.

        ``form="log"`` gives sum_t grad log pi(g_t) * A_t; ``form="prob"``
        gives the literal sum_t grad pi(g_t) * A_t. Advantages are constants
        (no gradient flows into them). Averaged over captions.
        """
        logp, mask = self.token_logprobs(features, captions, noise)
        w = np.asarray(advantages, dtype=np.float64) * mask
        term = logp if form == "log" else T.exp(logp)
        return T.mul(T.sum(T.mul(term, w)), 1.0 / len(w))
