"""Discriminative anomaly detection on composition maps.

A reconstruction UNet maps a (possibly augmented) composition map to an
anomaly-free reconstruction; a discriminative UNet looks at the input map
next to the reconstruction and predicts where they differ. At inference
time the branch only ever sees the segmenter's composition map.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import AnomalyMap, CompositionMap
from .losses import disc_loss, one_hot, recon_loss
from .simulator import connected_components, sample_training_example
from .unet import UNet, seed_everything, step_lr

logger = logging.getLogger(__name__)


@dataclass
class CompositionConfig:
    iterations: int = 70_000
    lr: float = 1e-5
    decay_fraction: float = 0.9
    batch_size: int = 8
    width: int = 64
    levels: int = 4
    scale: int = 1
    alpha: float = 5.0
    gamma: float = 2.0
    p_anomaly: float = 0.5
    strategies: tuple[str, ...] = ("perlin_paste", "component_inpaint", "component_removal")
    min_area: int = 50
    soft_disc_input: bool = False
    seed: int = 0
    deterministic: bool = True
    log_every: int = 50


@dataclass
class CompositionBranch:
    recon: UNet
    disc: UNet
    num_classes: int
    config: CompositionConfig
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, num_classes: int, config: CompositionConfig | None = None) -> CompositionBranch:
        config = config or CompositionConfig()
        recon = UNet(num_classes, num_classes, config.width, config.levels)
        disc = UNet(2 * num_classes, 1, config.width, config.levels)
        return cls(recon, disc, num_classes, config)

    def subsample(self, a: np.ndarray) -> np.ndarray:
        """Nearest-neighbour subsampling to the network resolution (``scale`` = stride)."""
        s = self.config.scale
        return a if s == 1 else a[..., s // 2 :: s, s // 2 :: s]

    def _upsample(self, a: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        if tuple(a.shape[-2:]) == tuple(size):
            return a
        return F.interpolate(a, size=size, mode="bilinear", align_corners=False)

    def _check(self, c: CompositionMap) -> None:
        if c.num_classes != self.num_classes:
            raise ValueError(f"map has {c.num_classes} classes, branch expects {self.num_classes}")

    def _disc_input(self, c_in: torch.Tensor, rec_logits: torch.Tensor) -> torch.Tensor:
        if self.config.soft_disc_input:
            rec = torch.softmax(rec_logits, dim=1)
        else:
            rec = one_hot(rec_logits.argmax(dim=1), self.num_classes)
        return torch.cat([one_hot(c_in, self.num_classes), rec], dim=1)

    @torch.no_grad()
    def reconstruct(self, c_in: CompositionMap) -> tuple[CompositionMap, np.ndarray]:
        self._check(c_in)
        self.recon.eval()
        x = torch.from_numpy(np.ascontiguousarray(self.subsample(c_in.classes)))[None]
        logits = self._upsample(self.recon(one_hot(x, self.num_classes)), c_in.shape)
        probs = torch.softmax(logits, dim=1)[0].numpy()
        return CompositionMap(probs.argmax(axis=0).astype(np.int64), self.num_classes), probs

    @torch.no_grad()
    def discriminate(self, c_in: CompositionMap, c_rec: CompositionMap | np.ndarray) -> AnomalyMap:
        """Anomaly map for ``c_in`` given its reconstruction (a map or ``(C, H, W)`` probabilities)."""
        self._check(c_in)
        self.disc.eval()
        if isinstance(c_rec, CompositionMap):
            self._check(c_rec)
            if c_rec.shape != c_in.shape:
                raise ValueError("input and reconstruction shapes differ")
            rec = one_hot(torch.from_numpy(np.ascontiguousarray(self.subsample(c_rec.classes)))[None], self.num_classes)
        else:
            rec = torch.from_numpy(np.asarray(c_rec, dtype=np.float32))[None]
            if rec.shape[2:] != c_in.shape:
                raise ValueError("input and reconstruction shapes differ")
            if not self.config.soft_disc_input:
                rec = one_hot(rec.argmax(dim=1), self.num_classes)
            rec = torch.from_numpy(np.ascontiguousarray(self.subsample(rec.numpy())))
        c_small = torch.from_numpy(np.ascontiguousarray(self.subsample(c_in.classes)))[None]
        x = torch.cat([one_hot(c_small, self.num_classes), rec], dim=1)
        out = torch.sigmoid(self._upsample(self.disc(x), c_in.shape))[0, 0].double().numpy()
        return AnomalyMap(out, (0.0, 1.0))

    def anomaly_map(self, c: CompositionMap) -> AnomalyMap:
        """Inference entry point: the map itself is the reconstruction input."""
        c_rec, probs = self.reconstruct(c)
        return self.discriminate(c, probs if self.config.soft_disc_input else c_rec)

    @torch.no_grad()
    def anomaly_maps(self, maps: list[CompositionMap], batch_size: int = 16) -> list[AnomalyMap]:
        self.recon.eval()
        self.disc.eval()
        out = []
        for s in range(0, len(maps), batch_size):
            chunk = maps[s : s + batch_size]
            for c in chunk:
                self._check(c)
            x = torch.from_numpy(np.stack([self.subsample(c.classes) for c in chunk]))
            logits = self.recon(one_hot(x, self.num_classes))
            a = self._upsample(self.disc(self._disc_input(x, logits)), chunk[0].shape)
            a = torch.sigmoid(a)[:, 0].double().numpy()
            out.extend(AnomalyMap(m, (0.0, 1.0)) for m in a)
        return out

    # persistence

    @property
    def manifest(self) -> dict:
        cfg = asdict(self.config)
        cfg["strategies"] = list(cfg["strategies"])
        return {"optimizer": "Adam", "num_classes": self.num_classes, **cfg,
                "decay_step": int(self.config.decay_fraction * self.config.iterations), "history": self.history}

    def save(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.recon.state_dict(), f"{prefix}.recon.ckpt")
        torch.save(self.disc.state_dict(), f"{prefix}.disc.ckpt")
        Path(f"{prefix}.json").write_text(json.dumps(self.manifest, indent=2))

    @classmethod
    def load(cls, prefix: str | Path) -> CompositionBranch:
        manifest = json.loads(Path(f"{prefix}.json").read_text())
        fields = {k: manifest[k] for k in CompositionConfig.__dataclass_fields__}
        fields["strategies"] = tuple(fields["strategies"])
        branch = cls.create(manifest["num_classes"], CompositionConfig(**fields))
        branch.recon.load_state_dict(torch.load(f"{prefix}.recon.ckpt", weights_only=True))
        branch.disc.load_state_dict(torch.load(f"{prefix}.disc.ckpt", weights_only=True))
        branch.recon.eval()
        branch.disc.eval()
        branch.history = manifest["history"]
        return branch


def _sample_seed(seed: int, iteration: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed, iteration, slot]).generate_state(1, np.uint64)[0])


def train_composition_branch(
    compmaps: list[CompositionMap], config: CompositionConfig | None = None, preview: list | None = None,
    preview_n: int = 16,
) -> CompositionBranch:
    """Joint training of the reconstruction and discriminative networks.

    Each iteration draws a batch of training maps, augments each with
    :func:`sample_training_example`, and minimises the sum of the
    reconstruction loss (against the clean map) and the discriminative loss
    (against the synthetic ground truth). When ``preview`` is a list, the
    first ``preview_n`` synthetic samples drawn are appended to it.
    """
    config = config or CompositionConfig()
    if not compmaps:
        raise ValueError("empty composition-map corpus")
    ks = {c.num_classes for c in compmaps}
    if len(ks) != 1:
        raise ValueError(f"inconsistent num_classes {sorted(ks)}")
    num_classes = ks.pop()
    gen = seed_everything(config.seed, config.deterministic)
    branch = CompositionBranch.create(num_classes, config)
    params = list(branch.recon.parameters()) + list(branch.disc.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    sched, _ = step_lr(opt, config.iterations, config.decay_fraction)
    cache = {i: connected_components(c, config.min_area) for i, c in enumerate(compmaps)}
    branch.recon.train()
    branch.disc.train()
    running: dict[str, float] = {}
    for it in range(config.iterations):
        idx = torch.randint(len(compmaps), (config.batch_size,), generator=gen).tolist()
        samples = [
            sample_training_example(compmaps[i], compmaps, _sample_seed(config.seed, it, b), config.p_anomaly,
                                    exclude=i, strategies=config.strategies, min_area=config.min_area,
                                    component_cache=cache)
            for b, i in enumerate(idx)
        ]
        if preview is not None and len(preview) < preview_n:
            preview.extend(samples[: preview_n - len(preview)])
        c_clean = torch.from_numpy(np.stack([branch.subsample(compmaps[i].classes) for i in idx]))
        c_aug = torch.from_numpy(np.stack([branch.subsample(s.augmented.classes) for s in samples]))
        gt = torch.from_numpy(np.stack([branch.subsample(s.gt_mask) for s in samples]))
        rec_logits = branch.recon(one_hot(c_aug, num_classes))
        l_rec = recon_loss(c_clean, rec_logits, config.gamma)
        pred = torch.sigmoid(branch.disc(branch._disc_input(c_aug, rec_logits.detach())))[:, 0]
        l_disc = disc_loss(gt, pred, config.alpha, config.gamma)
        loss = l_rec + l_disc
        if not torch.isfinite(loss):
            raise FloatingPointError(
                f"composition branch loss non-finite at iteration {it}: recon={l_rec.item()} disc={l_disc.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        for k, v in (("recon", l_rec.item()), ("disc", l_disc.item())):
            running[k] = v if k not in running else 0.98 * running[k] + 0.02 * v
        if it % config.log_every == 0 or it == config.iterations - 1:
            branch.history.append({"iteration": it, **running, "lr": opt.param_groups[0]["lr"]})
            logger.info("composition it %d recon %.4f disc %.4f", it, running["recon"], running["disc"])
    branch.recon.eval()
    branch.disc.eval()
    return branch
