"""JSON checkpoints of both models, the trainer config and every RNG stream."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict

from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Generator, GeneratorConfig
from .numeric import SeededRng
from .numeric.rng import ALGORITHM
from .params import ParameterStore

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class Checkpoint:
    """Plain-data snapshot; ``to_bytes`` is the canonical serialization."""

    def __init__(self, data: dict):
        self.data = data

    def __getitem__(self, key):
        return self.data[key]

    @property
    def step(self):
        return self.data["step"]

    @property
    def stage(self):
        return self.data["stage"]

    def to_bytes(self) -> bytes:
        return (json.dumps(self.data, sort_keys=True, separators=(",", ":")) + "\n").encode()

    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path):
        """Atomic write: temp file in the target directory, then rename."""
        path = os.fspath(path)
        folder = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=folder)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                data = json.loads(fh.read())
        except FileNotFoundError:
            raise
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
        if not isinstance(data, dict) or data.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {data.get('version') if isinstance(data, dict) else None!r}")
        for key in ("generator", "discriminator", "trainer_config", "rng", "step", "vocab_hash"):
            if key not in data:
                raise CheckpointError(f"{path}: checkpoint missing {key!r}")
        return cls(data)

    def generator(self) -> Generator:
        g = self.data["generator"]
        return Generator(GeneratorConfig(**g["config"]), ParameterStore.from_dict(g["params"]))

    def discriminator(self) -> Discriminator:
        d = self.data["discriminator"]
        return Discriminator(DiscriminatorConfig(**d["config"]), ParameterStore.from_dict(d["params"]))


def make_checkpoint(trainer) -> Checkpoint:
    return Checkpoint({
        "version": CHECKPOINT_VERSION,
        "stage": trainer.stage,
        "step": trainer.step,
        "vocab_hash": trainer.dataset.vocab.hash(),
        "generator": {"config": asdict(trainer.gen.config), "params": trainer.gen.params.to_dict()},
        "discriminator": {"config": asdict(trainer.disc.config), "params": trainer.disc.params.to_dict()},
        "trainer_config": asdict(trainer.config),
        "rng": {"algorithm": ALGORITHM, "streams": {n: r.get_state() for n, r in trainer.rngs.items()}},
        "optimizers": {"g": trainer.g_opt.state_dict(), "d": trainer.d_opt.state_dict()},
        "baseline": trainer.baseline,
        "batch_cursor": {"epoch_start": trainer._epoch_start, "pos": trainer._epoch_pos},
        "collapse_run": trainer._collapse_run,
        "history": trainer.history,
    })


def restore_trainer(ckpt: Checkpoint, dataset, config=None):
    """Rebuild a Trainer from a checkpoint, optionally with a new config.

    The checkpoint's vocabulary hash must match the dataset's.
    """
    from .trainer import Trainer, TrainerConfig

    if ckpt["vocab_hash"] != dataset.vocab.hash():
        raise CheckpointError("checkpoint vocabulary does not match the dataset")
    cfg = config or TrainerConfig(**ckpt["trainer_config"])
    tr = Trainer(cfg, dataset, gen=ckpt.generator(), disc=ckpt.discriminator())
    if config is None or config.seed == ckpt["trainer_config"]["seed"]:
        tr.rngs = {n: SeededRng.from_state(s) for n, s in ckpt["rng"]["streams"].items()}
        cursor = ckpt.data.get("batch_cursor") or {}
        if cursor.get("epoch_start") is not None:
            tr.resume_epoch(cursor["epoch_start"], cursor["pos"])
    opts = ckpt.data.get("optimizers", {})
    if cfg.optimizer == ckpt["trainer_config"]["optimizer"] and cfg.lr == ckpt["trainer_config"]["lr"]:
        for key, opt, params in (("g", tr.g_opt, tr.gen.params), ("d", tr.d_opt, tr.disc.params)):
            if key in opts and opts[key]["name"] == opt.name:
                if opt.name == "adam":
                    opt.load_state_dict(opts[key], params)
                else:
                    opt.load_state_dict(opts[key])
    tr.step = ckpt.step
    tr.baseline = ckpt.data.get("baseline")
    tr.history = json.loads(json.dumps(ckpt.data.get("history", tr.history)))
    tr.stage = ckpt.stage
    tr._collapse_run = ckpt.data.get("collapse_run", 0)
    return tr
