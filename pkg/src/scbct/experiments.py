"""Desk-scale experiment protocols shared by scripts and the acceptance suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .baselines import sart_reconstruct
from .dataio import make_phantom
from .geometry import sample_view_angles
from .projector import simulate_projections
from .trainer import Scan, TrainConfig, default_geometry, evaluate, reconstruct, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OverfitProtocol:
    """Fit one nested-shell phantom from a handful of views and compare with SART."""
    phantom_size: int = 64
    phantom_seed: int = 3
    views: int = 6
    angle_seed: int = 3
    image_size: int = 128
    steps: int = 300
    n_points: int = 10000
    learning_rate: float = 1e-3
    seed: int = 0
    sart_iterations: int = 50
    sart_relaxation: float = 0.5
    loss_window: int = 10

    def config(self, model: str) -> TrainConfig:
        return TrainConfig(model=model, image_size=self.image_size, n_points=self.n_points,
                           epochs=self.steps, max_steps=self.steps, batch_size=1, seed=self.seed,
                           learning_rate=self.learning_rate, views=self.views)

    def scan(self):
        geom = default_geometry(self.config("trans2"))
        vol = make_phantom("shells", self.phantom_size, seed=self.phantom_seed)
        angles = sample_view_angles(self.views, self.angle_seed)
        return Scan(vol, simulate_projections(vol, geom, angles), "overfit"), geom


def sart_score(p: OverfitProtocol) -> dict:
    scan, geom = p.scan()
    t = time.time()
    rec = sart_reconstruct(scan.projections, geom, scan.volume.shape,
                           iterations=p.sart_iterations, relaxation=p.sart_relaxation)
    out = evaluate(rec, scan.volume)
    out["seconds"] = time.time() - t
    return out


def overfit_run(model: str, p: OverfitProtocol) -> dict:
    """Train ``model`` on the protocol scan; report the loss drop and metrics."""
    scan, geom = p.scan()
    t = time.time()
    ckpt = train(p.config(model), [scan], geom)
    train_s = time.time() - t
    losses = np.array([v for _, v in ckpt.losses])
    w = min(p.loss_window, len(losses))
    first, last = float(losses[:w].mean()), float(losses[-w:].mean())
    t = time.time()
    scores = evaluate(reconstruct(ckpt, scan.projections, geom, scan.volume.shape), scan.volume)
    result = {"model": model, "steps": ckpt.step, "first_loss": first, "last_loss": last,
              "loss_ratio": first / last, "train_seconds": train_s,
              "reconstruct_seconds": time.time() - t, **scores}
    log.info("overfit %s", result)
    return result
