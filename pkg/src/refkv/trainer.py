"""Training loop, checkpoints and batch restoration.

Every step draws its randomness from ``Rng([seed, step])`` so a run resumed
from a checkpoint continues exactly as the uninterrupted run would have.
A checkpoint is a tensor directory holding the model weights, the Adam
moments and a manifest with the effective run configuration and step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, codec as codec_mod, config as config_mod, degrade, diffusion, io, refcond, refdata
from .tensorcore import Adam, Rng, Tensor, no_grad


@dataclass
class TrainingSet:
    """HQ images in [0, 1] by id, and the reference candidates of each target."""

    images: dict  # id -> (3, S, S) float32
    reflists: dict  # target id -> list of reference ids
    targets: list = field(default_factory=list)

    def __post_init__(self):
        if not self.targets:
            self.targets = sorted(t for t, refs in self.reflists.items() if refs)
        if not self.targets:
            raise ValueError("training set has no target with references")
        missing = [r for t in self.targets for r in [t, *self.reflists[t]] if r not in self.images]
        if missing:
            raise KeyError(f"no image for id {missing[0]!r}")

    def __len__(self):
        return len(self.targets)

    @classmethod
    def from_dirs(cls, corpus_dir, dataset_dir, split="train") -> "TrainingSet":
        dataset_dir = Path(dataset_dir)
        lists = refdata.read_reflists(dataset_dir / f"{split}_refs.tsv")
        wanted = sorted({i for t, refs in lists.items() for i in [t, *refs]})
        return cls(load_images(corpus_dir, wanted), {t: list(r) for t, r in lists.items()})


def load_images(corpus_dir, ids) -> dict:
    folder = Path(corpus_dir) / "images"
    out = {}
    for i in ids:
        path = folder / f"{i}.ppm"
        if not path.exists():
            raise FileNotFoundError(f"image {path} not found")
        out[i] = io.read_ppm(path)
    return out


def encode01(codec, images01) -> np.ndarray:
    with no_grad():
        return codec.encode(Tensor(codec_mod.to_signed(images01))).data


def decode01(codec, latents) -> np.ndarray:
    with no_grad():
        return codec_mod.to_unit(codec.decode(Tensor(np.asarray(latents, dtype=np.float32))).data)


def make_batch(data: TrainingSet, idx, rng: Rng, codec, n_refs, preset="training", augment=True,
               subsampling="4:4:4") -> diffusion.Batch:
    """Degrade the chosen targets and augment their references, then encode everything."""
    aug = refdata.AugmentConfig() if augment else refdata.AugmentConfig.identity()
    hq, lq, refs = [], [], []
    for j, i in enumerate(idx):
        target = data.targets[int(i)]
        img = data.images[target]
        params = degrade.sample_params(preset, rng.child(j, 0))
        hq.append(img)
        lq.append(degrade.degrade(img, params, rng.child(j, 1), subsampling))
        cand = np.stack([data.images[r] for r in data.reflists[target]])
        refs.append(refdata.augment_references(cand, n_refs, rng.child(j, 2), aug)[0])
    hq, lq, refs = np.stack(hq), np.stack(lq), np.stack(refs)
    n, r = refs.shape[:2]
    z_refs = encode01(codec, refs.reshape((n * r,) + refs.shape[2:]))
    return diffusion.Batch(
        z0=encode01(codec, hq),
        z_lq=encode01(codec, lq),
        refs=z_refs.reshape((n, r) + z_refs.shape[1:]),
    )


class Trainer:
    """Adam over the U-net; one ``step()`` is one optimizer update."""

    def __init__(self, cfg: dict, data: TrainingSet | None, model=None, codec=None, embedder=None):
        from . import synthfaces

        self.cfg = dict(cfg)
        self.data = data
        self.sched = config_mod.schedule(cfg)
        self.loss_cfg = config_mod.loss_config(cfg)
        self.guidance = config_mod.guidance(cfg)
        self.model = model or refcond.build_model(config_mod.unet_config(cfg), Rng([cfg["seed"], 0x5EED]))
        self.codec = codec or codec_mod.LatentCodec(config_mod.codec_config(cfg))
        if not self.codec.frozen:
            self.codec.freeze()
        self.embedder = embedder
        if embedder is None and self.loss_cfg.lambda_time_id > 0:
            self.embedder = synthfaces.default_embedder(cfg["embedder.seed"])
        self.opt = Adam(self.model.named_parameters(), lr=cfg["train.lr"], grad_clip=cfg["train.grad_clip"] or None)
        self.step_count = 0

    def step_rng(self, step) -> Rng:
        return Rng([self.cfg["seed"], step, 0x7EA1])

    def batch_for(self, step) -> diffusion.Batch:
        rng = self.step_rng(step)
        idx = rng.child(0).integers(0, len(self.data), size=self.cfg["train.batch_size"])
        return make_batch(self.data, idx, rng.child(1), self.codec, self.cfg["n_refs"], self.cfg["train.preset"],
                          self.cfg["train.augment"], self.cfg["degrade.subsampling"])

    def step(self) -> dict:
        if self.data is None:
            raise RuntimeError("trainer has no training data")
        batch = self.batch_for(self.step_count)
        self.model.zero_grad()
        parts = diffusion.train_step(self.model, batch, self.sched, self.loss_cfg, self.guidance,
                                     self.step_rng(self.step_count).child(2), self.codec, self.embedder,
                                     drop_lq=self.cfg["train.drop_lq"])
        self.opt.step()
        self.model.bump_version()
        self.step_count += 1
        parts["step"] = self.step_count
        return parts

    def run(self, steps, log=None, checkpoint_dir=None):
        """Train until ``step_count == steps``; returns the per-step loss rows."""
        rows = []
        every = self.cfg["train.checkpoint_every"]
        while self.step_count < steps:
            parts = self.step()
            rows.append(parts)
            if log is not None and (self.step_count % max(1, self.cfg["train.log_every"]) == 0
                                    or self.step_count == steps):
                log(parts)
            if checkpoint_dir is not None and every and self.step_count % every == 0:
                self.save(checkpoint_dir)
        if checkpoint_dir is not None:
            self.save(checkpoint_dir)
        return rows

    # -- checkpoints --------------------------------------------------

    def save(self, path):
        arrays = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        arrays.update({f"adam.{k}": v for k, v in self.opt.state_dict().items()})
        path = Path(path)
        if path.exists():
            for old in path.glob("*.rkvt"):
                old.unlink()
        manifest = {"kind": "checkpoint", "version": __version__, "step": self.step_count,
                    "adam_steps": self.opt.step_count, "model_checksum": self.model.checksum()[:16]}
        manifest.update({f"config.{k}": config_mod._fmt(v) for k, v in self.cfg.items()})
        io.save_tensor_dir(path, arrays, manifest)
        if self.codec.config.mode != "orthogonal":
            self.codec.save(path / "codec")

    @classmethod
    def load(cls, path, data: TrainingSet | None = None, embedder=None, overrides=None) -> "Trainer":
        """Rebuild model, optimizer state and step counter from a checkpoint directory."""
        arrays, manifest = io.load_tensor_dir(path)
        if manifest.get("kind") != "checkpoint":
            raise ValueError(f"{path} is not a checkpoint (kind={manifest.get('kind')!r})")
        saved = {k[len("config."):]: v for k, v in manifest.items() if k.startswith("config.")}
        cfg = config_mod.load(None, saved)
        for k, v in (overrides or {}).items():
            cfg[k] = config_mod.coerce(k, v)
        codec = codec_mod.LatentCodec.load(Path(path) / "codec") if (Path(path) / "codec").exists() else None
        trainer = cls(cfg, data, codec=codec, embedder=embedder)
        trainer.model.load_state_dict({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
        trainer.opt.load_state_dict({k[len("adam."):]: v for k, v in arrays.items() if k.startswith("adam.")},
                                    int(manifest["adam_steps"]))
        trainer.model.bump_version()
        trainer.step_count = int(manifest["step"])
        return trainer


# ---------------------------------------------------------------- inference


def fill_reference_slots(refs01, slots):
    """Repeat the R references of each image cyclically up to ``slots`` (no-op if R >= slots)."""
    refs01 = np.asarray(refs01)
    r = refs01.shape[1]
    if r == 0:
        raise ValueError("need at least one reference to fill slots")
    if not slots or r >= slots:
        return refs01
    return refs01[:, np.arange(slots) % r]


def restore(model, codec, lq01, refs01, steps, guidance, sched, seed=0, batch=16, slots=None):
    """Restore (N, 3, S, S) LQ images in [0, 1] given (N, R, 3, S, S) references, or None.

    With ``slots`` set, fewer than ``slots`` references are repeated to fill
    them, as in training.  Returns ``(images in [0, 1], latents)``.  Each
    chunk of ``batch`` images starts from its own seeded noise, so results do
    not depend on chunking beyond that.
    """
    lq01 = np.asarray(lq01, dtype=np.float32)
    if refs01 is not None:
        refs01 = fill_reference_slots(refs01, slots)
    n = len(lq01)
    rng = Rng([seed, 0x5A4D])
    out = []
    for s in range(0, n, batch):
        z_lq = encode01(codec, lq01[s : s + batch])
        z_refs = None
        if refs01 is not None:
            chunk = np.asarray(refs01[s : s + batch], dtype=np.float32)
            m, r = chunk.shape[:2]
            z = encode01(codec, chunk.reshape((m * r,) + chunk.shape[2:]))
            z_refs = z.reshape((m, r) + z.shape[1:])
        z_T = rng.child(s).normal(z_lq.shape)
        out.append(diffusion.sample(model, z_lq, z_refs, steps, guidance, rng.child(s, 1), sched, z_T=z_T))
    z0 = np.concatenate(out)
    return decode01(codec, z0), z0
