"""Local appearance branch: student-teacher-autoencoder anomaly maps.

The reference model follows the EfficientAD recipe. A frozen teacher maps
the image to features ``F_T``; an autoencoder reconstructs ``F_T`` through
a narrow bottleneck (``F_A``); a small student predicts both (``F̂_T`` and
``F̂_A``). Disagreement between the student and its two targets marks
structural anomalies.

Other appearance models can be plugged in through ``APPEARANCE_BACKENDS``;
the pipeline only needs ``anomaly_map(image) -> (AnomalyMap, FeatureMap)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backends import BackendConfig, FeatureMap, extract_features
from .data import RESOLUTION, AnomalyMap, ImageSample
from .unet import seed_everything, step_lr

logger = logging.getLogger(__name__)

STUB_TEACHER = {"cell": 4, "position": False, "texture": True, "grad_weight": 1.0}


class AppearanceModel(Protocol):
    def anomaly_map(self, image: ImageSample) -> tuple[AnomalyMap, FeatureMap]: ...


@dataclass
class AppearanceConfig:
    iterations: int = 70_000
    lr: float = 1e-4
    decay_fraction: float = 0.9
    batch_size: int = 1
    p_hard: float = 0.999
    weight_decay: float = 1e-5
    student_width: int = 64
    ae_width: int = 32
    ae_bottleneck: int = 64
    map_weights: tuple[float, float] = (0.5, 0.5)
    teacher_backend: str = "stub"
    teacher_params: dict = field(default_factory=lambda: dict(STUB_TEACHER))
    seed: int = 0
    deterministic: bool = True
    log_every: int = 50

    @property
    def teacher_config(self) -> BackendConfig:
        return BackendConfig(feature_backend=self.teacher_backend, feature_params=self.teacher_params)


class Student(nn.Module):
    """Patch descriptor network: 256x256 image to a 64x64 map with a small receptive field."""

    def __init__(self, out_channels: int, width: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width // 2, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width // 2, width, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, out_channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class AutoEncoder(nn.Module):
    def __init__(self, out_channels: int, width: int = 32, bottleneck: int = 64, out_size: int = 64):
        super().__init__()
        self.out_size = out_size
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1), nn.ReLU(inplace=True),          # 128
            nn.Conv2d(width, width, 4, stride=2, padding=1), nn.ReLU(inplace=True),      # 64
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.ReLU(inplace=True),  # 32
            nn.Conv2d(2 * width, 2 * width, 4, stride=2, padding=1), nn.ReLU(inplace=True),  # 16
            nn.Conv2d(2 * width, 2 * width, 4, stride=2, padding=1), nn.ReLU(inplace=True),  # 8
            nn.Conv2d(2 * width, bottleneck, 8),                                         # 1
        )
        sizes = [3, 8, 16, 32, out_size]
        layers: list[nn.Module] = []
        cin = bottleneck
        for s in sizes:
            layers += [nn.Upsample(size=s, mode="bilinear", align_corners=False),
                       nn.Conv2d(cin, 2 * width, 3, padding=1), nn.ReLU(inplace=True)]
            cin = 2 * width
        layers.append(nn.Conv2d(cin, out_channels, 3, padding=1))
        self.decoder = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


def _to_tensor(images) -> torch.Tensor:
    arrs = [im.pixels if isinstance(im, ImageSample) else im for im in images]
    return torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2)


@dataclass
class AppearanceModelState:
    student: nn.Module
    autoencoder: nn.Module
    teacher_mean: np.ndarray
    teacher_std: np.ndarray
    config: AppearanceConfig
    trained: bool = False
    history: list[dict] = field(default_factory=list)

    @property
    def teacher_channels(self) -> int:
        return len(self.teacher_mean)

    def teacher(self, images) -> torch.Tensor:
        """Normalised teacher features ``(N, D, h, w)``; the teacher itself is frozen."""
        cfg = self.config.teacher_config
        feats = [extract_features(im if isinstance(im, ImageSample) else ImageSample(im), cfg).values
                 for im in images]
        t = torch.from_numpy(np.stack(feats)).permute(0, 3, 1, 2).float()
        mean = torch.from_numpy(self.teacher_mean).float()[None, :, None, None]
        std = torch.from_numpy(self.teacher_std).float()[None, :, None, None]
        return (t - mean) / std

    def _maps(self, x: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
        d = self.teacher_channels
        s = self.student(x)
        if f_t.shape[-2:] != s.shape[-2:]:
            f_t = F.interpolate(f_t, size=s.shape[-2:], mode="bilinear", align_corners=False)
        f_a = self.autoencoder(x)
        map_st = ((f_t - s[:, :d]) ** 2).mean(dim=1, keepdim=True)
        map_ae = ((f_a - s[:, d:]) ** 2).mean(dim=1, keepdim=True)
        w_st, w_ae = self.config.map_weights
        combined = w_st * map_st + w_ae * map_ae
        return F.interpolate(combined, size=x.shape[-2:], mode="bilinear", align_corners=False)[:, 0]

    @torch.no_grad()
    def anomaly_maps(self, images) -> list[tuple[AnomalyMap, FeatureMap]]:
        if not self.trained:
            raise RuntimeError("appearance model is untrained")
        self.student.eval()
        self.autoencoder.eval()
        f_t = self.teacher(images)
        maps = self._maps(_to_tensor(images), f_t).clamp(min=0).double().numpy()
        feats = f_t.permute(0, 2, 3, 1).numpy()
        res = (RESOLUTION, RESOLUTION)
        return [(AnomalyMap(m), FeatureMap(np.ascontiguousarray(f), res, "appearance-teacher"))
                for m, f in zip(maps, feats)]

    def anomaly_map(self, image: ImageSample) -> tuple[AnomalyMap, FeatureMap]:
        return self.anomaly_maps([image])[0]

    # persistence

    @property
    def manifest(self) -> dict:
        cfg = asdict(self.config)
        cfg["map_weights"] = list(cfg["map_weights"])
        return {"optimizer": "Adam", **cfg, "decay_step": int(self.config.decay_fraction * self.config.iterations),
                "teacher_mean": self.teacher_mean.tolist(), "teacher_std": self.teacher_std.tolist(),
                "trained": self.trained, "history": self.history}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"student": self.student.state_dict(), "autoencoder": self.autoencoder.state_dict()}, path)
        path.with_suffix(".json").write_text(json.dumps(self.manifest, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> AppearanceModelState:
        path = Path(path)
        m = json.loads(path.with_suffix(".json").read_text())
        fields = {k: m[k] for k in AppearanceConfig.__dataclass_fields__}
        fields["map_weights"] = tuple(fields["map_weights"])
        config = AppearanceConfig(**fields)
        state = _build(config, np.asarray(m["teacher_mean"]), np.asarray(m["teacher_std"]))
        weights = torch.load(path, weights_only=True)
        state.student.load_state_dict(weights["student"])
        state.autoencoder.load_state_dict(weights["autoencoder"])
        state.student.eval()
        state.autoencoder.eval()
        state.trained = m["trained"]
        state.history = m["history"]
        return state


def _build(config: AppearanceConfig, mean: np.ndarray, std: np.ndarray, out_size: int = 64) -> AppearanceModelState:
    d = len(mean)
    return AppearanceModelState(
        Student(2 * d, config.student_width),
        AutoEncoder(d, config.ae_width, config.ae_bottleneck, out_size),
        mean,
        std,
        config,
    )


def _hard_mse(diff2: torch.Tensor, p_hard: float) -> torch.Tensor:
    if p_hard <= 0:
        return diff2.mean()
    thr = torch.quantile(diff2.flatten()[:: max(1, diff2.numel() // 2**24)], p_hard)
    return diff2[diff2 >= thr].mean()


def train_appearance(images, config: AppearanceConfig | None = None) -> AppearanceModelState:
    """Fit student and autoencoder to the frozen teacher on anomaly-free images."""
    config = config or AppearanceConfig()
    if not images:
        raise ValueError("empty training corpus")
    gen = seed_everything(config.seed, config.deterministic)
    tcfg = config.teacher_config
    raw = np.stack([extract_features(im if isinstance(im, ImageSample) else ImageSample(im), tcfg).values
                    for im in images]).astype(np.float64)
    mean = raw.mean(axis=(0, 1, 2))
    std = np.maximum(raw.std(axis=(0, 1, 2)), 1e-6)
    state = _build(config, mean, std)
    f_t_all = torch.from_numpy(((raw - mean) / std).astype(np.float32)).permute(0, 3, 1, 2)
    x_all = _to_tensor(images)
    if f_t_all.shape[-1] != x_all.shape[-1] // 4:
        f_t_all = F.interpolate(f_t_all, size=(x_all.shape[-2] // 4, x_all.shape[-1] // 4), mode="bilinear",
                                align_corners=False)
    params = list(state.student.parameters()) + list(state.autoencoder.parameters())
    opt = torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    sched, _ = step_lr(opt, config.iterations, config.decay_fraction)
    d = state.teacher_channels
    state.student.train()
    state.autoencoder.train()
    running = None
    for it in range(config.iterations):
        idx = torch.randint(len(images), (config.batch_size,), generator=gen)
        x, f_t = x_all[idx], f_t_all[idx]
        s = state.student(x)
        f_a = state.autoencoder(x)
        l_st = _hard_mse((f_t - s[:, :d]) ** 2, config.p_hard)
        l_ae = ((f_t - f_a) ** 2).mean()
        l_stae = ((f_a.detach() - s[:, d:]) ** 2).mean()
        loss = l_st + l_ae + l_stae
        if not torch.isfinite(loss):
            raise FloatingPointError(f"appearance loss non-finite at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        running = loss.item() if running is None else 0.98 * running + 0.02 * loss.item()
        if it % config.log_every == 0 or it == config.iterations - 1:
            state.history.append({"iteration": it, "loss": running, "st": l_st.item(), "ae": l_ae.item(),
                                  "stae": l_stae.item(), "lr": opt.param_groups[0]["lr"]})
            logger.info("appearance it %d loss %.4f", it, running)
    state.student.eval()
    state.autoencoder.eval()
    state.trained = True
    return state


APPEARANCE_BACKENDS = {"efficientad": (train_appearance, AppearanceModelState.load)}
