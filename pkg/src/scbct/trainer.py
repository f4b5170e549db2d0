"""Model assembly, training loop, dense reconstruction and ablations."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import runtime
from .checkpoint import read_checkpoint, write_checkpoint
from .dataio import Volume, grid_coords, load_volume, make_phantom, sample_points
from .encoder2d import PYRAMID_CHANNELS, EncoderConfig, HybridEncoder
from .fusion import FUSED_DIM, fuse_pyramids, project_to_views
from .geometry import ScannerGeometry, max_chord_mm, read_keyvalue, sample_view_angles
from .head import AttenuationHead, mse_loss
from .metrics import psnr, ssim
from .pointtrans import PointTransformer, PointTransformerConfig
from .projector import ProjectionSet, load_projections, simulate_projections

log = logging.getLogger(__name__)

FEATURE_STRATEGIES = {
    "F4": (4,),
    "F4;F3": (3, 4),
    "F4;F3;F2": (2, 3, 4),
    "full": (1, 2, 3, 4),
}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "trans2"
    views: int = 6
    n_points: int = 10000
    epochs: int = 400
    max_steps: int = 0
    batch_size: int = 2
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    seed: int = 0
    image_size: int = 256
    scales: str = "1,2,3,4"
    sampling: str = "uniform"
    equiangular: bool = False
    head_hidden: int = 128
    bn_momentum: float = 0.1
    source: str = "shells"
    phantom_size: int = 64
    n_train: int = 20
    n_val: int = 2
    n_test: int = 5
    checkpoint_every: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pointtrans: PointTransformerConfig = field(default_factory=PointTransformerConfig)

    def __post_init__(self):
        if self.model not in ("trans", "trans2"):
            raise ValueError(f"model must be 'trans' or 'trans2', got {self.model!r}")
        if self.views < 1 or self.n_points < 1 or self.batch_size < 1:
            raise ValueError("views, n_points and batch_size must be positive")
        scales = self.scale_tuple
        if not scales or any(s not in (1, 2, 3, 4) for s in scales) or len(set(scales)) != len(scales):
            raise ValueError(f"bad scales {self.scales!r}")

    @property
    def scale_tuple(self) -> tuple[int, ...]:
        return tuple(sorted(int(s) for s in str(self.scales).split(",") if s.strip()))

    @property
    def feature_dim(self) -> int:
        return sum(PYRAMID_CHANNELS[s - 1] for s in self.scale_tuple)

    # -- flat key=value form -------------------------------------------
    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("encoder", "pointtrans"):
                for k, v in asdict(val).items():
                    out[f"{f.name}.{k}"] = ",".join(map(str, v)) if isinstance(v, (tuple, list)) else v
            else:
                out[f.name] = val
        return out

    @classmethod
    def from_flat(cls, d: dict) -> "TrainConfig":
        base = cls()
        top, enc, pt = {}, {}, {}
        sub_types = {
            "encoder": {f.name: f.type for f in fields(EncoderConfig)},
            "pointtrans": {f.name: f.type for f in fields(PointTransformerConfig)},
        }
        for key, raw in d.items():
            if "." in key:
                group, name = key.split(".", 1)
                if group not in sub_types or name not in sub_types[group]:
                    raise ValueError(f"unknown config key {key!r}")
                ref = getattr(base, group)
                (enc if group == "encoder" else pt)[name] = _coerce(getattr(ref, name), raw)
            else:
                if not hasattr(base, key) or key in ("encoder", "pointtrans"):
                    raise ValueError(f"unknown config key {key!r}")
                top[key] = _coerce(getattr(base, key), raw)
        return cls(**top, encoder=replace(base.encoder, **enc), pointtrans=PointTransformerConfig(
            **{**asdict(base.pointtrans), **pt}))

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{k}={v}\n" for k, v in self.to_flat().items()))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_flat(read_keyvalue(path))


def _coerce(ref, raw):
    if isinstance(raw, type(ref)) and not isinstance(ref, tuple):
        return raw
    text = str(raw).strip()
    if isinstance(ref, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(ref, int):
        return int(text)
    if isinstance(ref, float):
        return float(text)
    if isinstance(ref, tuple):
        return tuple(int(t) for t in text.strip("()").split(",") if t.strip())
    return text


# -- model ---------------------------------------------------------------

class IntensityField(nn.Module):
    """Projection images + query points -> attenuation in (0, 1).

    ``model="trans"`` feeds fused image features straight to the head;
    ``model="trans2"`` refines them with the neighbour-aware point
    transformer first.
    """

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.scales = cfg.scale_tuple
        self.feature_dim = cfg.feature_dim
        if self.scales == (1, 2, 3, 4) and self.feature_dim != FUSED_DIM:
            raise AssertionError(f"fused feature width {self.feature_dim} != {FUSED_DIM}")
        self.encoder = HybridEncoder(replace(cfg.encoder, image_size=cfg.image_size))
        self.point_transformer = (PointTransformer(cfg.pointtrans, self.feature_dim)
                                  if cfg.model == "trans2" else None)
        self.head = AttenuationHead(self.feature_dim, cfg.head_hidden, cfg.bn_momentum)

    def encode(self, images: torch.Tensor):
        """(M, H, W) normalized images -> list of four (M, C, h, w) maps."""
        return self.encoder(images[:, None])

    def point_features(self, pyramids, uv: torch.Tensor, points) -> torch.Tensor:
        fused = fuse_pyramids(pyramids, uv, self.scales)
        if self.point_transformer is not None:
            fused = self.point_transformer(points, fused)
        return fused

    def forward(self, images, uv, points):
        """One scan: images (M, H, W), uv (M, N, 2), points (N, 3) -> (N,)."""
        return self.head(self.point_features(self.encode(images), uv, points))


def count_parameters(module: nn.Module | None) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())


# -- data ----------------------------------------------------------------

@dataclass
class Scan:
    volume: Volume
    projections: ProjectionSet
    name: str = ""


def normalized_images(proj: ProjectionSet, geom: ScannerGeometry) -> np.ndarray:
    """Line integrals scaled into [0, 1] by the volume box diagonal."""
    return np.asarray(proj.images, dtype=np.float64) / max_chord_mm(geom)


def default_geometry(cfg: TrainConfig) -> ScannerGeometry:
    return ScannerGeometry().with_detector_pixels(cfg.image_size)


def make_phantom_scans(cfg: TrainConfig, geom: ScannerGeometry, split: str = "train") -> list[Scan]:
    """Procedural nested-shell scans; each split uses a disjoint seed range."""
    count = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}[split]
    offset = {"train": 0, "val": 10_000, "test": 20_000}[split]
    scans = []
    for i in range(count):
        seed = cfg.seed * 100_000 + offset + i
        vol = make_phantom(cfg.source, cfg.phantom_size, seed=seed, extent_mm=geom.volume_extent_mm[0])
        angles = sample_view_angles(cfg.views, seed, equiangular=cfg.equiangular)
        scans.append(Scan(vol, simulate_projections(vol, geom, angles), f"{split}{i:03d}"))
    return scans


def scan_from_files(volume_path, projection_dir, geom: ScannerGeometry) -> Scan:
    return Scan(load_volume(volume_path), load_projections(projection_dir, geom), Path(volume_path).stem)


def _step_seed(seed: int, step: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, step, index]).generate_state(1)[0])


# -- checkpoint object ---------------------------------------------------

@dataclass
class ModelCheckpoint:
    model: IntensityField
    cfg: TrainConfig
    geom: ScannerGeometry
    step: int = 0
    losses: list = field(default_factory=list)

    def header(self) -> dict:
        return {
            "config": self.cfg.to_flat(),
            "geometry": self.geom.to_dict(),
            "step": self.step,
            "seed": self.cfg.seed,
            "dtype": str(next(self.model.parameters()).dtype).replace("torch.", ""),
            "feature_dim": self.model.feature_dim,
        }

    def save(self, path) -> Path:
        return write_checkpoint(path, self.header(), self.model.state_dict())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        header, state = read_checkpoint(path)
        cfg = TrainConfig.from_flat(header["config"])
        geom = ScannerGeometry.from_dict(header["geometry"])
        dtype = torch.float64 if header.get("dtype") == "float64" else torch.float32
        model = IntensityField(cfg).to(dtype)
        expected = model.state_dict()
        for name, t in state.items():
            if name not in expected:
                raise ValueError(f"checkpoint has unexpected weight {name!r}")
            if tuple(t.shape) != tuple(expected[name].shape):
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {tuple(t.shape)}, model {tuple(expected[name].shape)}")
        missing = set(expected) - set(state)
        if missing:
            raise ValueError(f"checkpoint is missing weights: {sorted(missing)[:5]}")
        model.load_state_dict({k: v.to(expected[k].dtype) for k, v in state.items()})
        model.eval()
        return cls(model, cfg, geom, int(header.get("step", 0)))


# -- training --------------------------------------------------------------

def build_model(cfg: TrainConfig) -> IntensityField:
    torch.manual_seed(cfg.seed)
    return IntensityField(cfg).to(runtime.model_dtype())


def _scan_tensors(scan: Scan, geom: ScannerGeometry, dtype):
    n_u, n_v = geom.detector_pixels
    if scan.projections.images.shape[1:] != (n_v, n_u):
        raise ValueError(
            f"projection images {scan.projections.images.shape[1:]} do not match detector {(n_v, n_u)}")
    return torch.as_tensor(normalized_images(scan.projections, geom), dtype=dtype)


def train(cfg: TrainConfig, scans: list[Scan], geom: ScannerGeometry | None = None,
          log_path=None, checkpoint_dir=None, model: IntensityField | None = None,
          progress_every: int = 0) -> ModelCheckpoint:
    """Fit the intensity field by point-wise regression on ``scans``.

    Each step draws fresh points per scan, averages the per-scan MSE over
    the batch and takes one AdamW step. Stops after ``cfg.epochs`` passes
    or ``cfg.max_steps`` steps, whichever comes first.
    """
    geom = geom or default_geometry(cfg)
    if geom.detector_pixels != (cfg.image_size, cfg.image_size):
        raise ValueError(f"geometry detector {geom.detector_pixels} does not match image_size {cfg.image_size}")
    if not scans:
        raise ValueError("no training scans")
    model = model or build_model(cfg)
    dtype = next(model.parameters()).dtype
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                            betas=(0.9, 0.999), eps=1e-8)
    images = [_scan_tensors(s, geom, dtype) for s in scans]

    losses: list[tuple[int, float]] = []
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w")
        log_file.write("step,loss\n")
    step = 0
    model.train()
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(scans))
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                batch = order[start:start + cfg.batch_size]
                preds, gts = [], []
                for j, si in enumerate(batch):
                    scan = scans[si]
                    pts = sample_points(scan.volume, cfg.n_points, _step_seed(cfg.seed, step, j), cfg.sampling)
                    uv, _ = project_to_views(pts.coords, geom, scan.projections.angles_deg, scan.volume.shape)
                    feats = model.point_features(model.encode(images[si]),
                                                 torch.as_tensor(uv, dtype=dtype),
                                                 torch.as_tensor(pts.coords, dtype=dtype))
                    preds.append(feats)
                    gts.append(torch.as_tensor(pts.gt_values, dtype=dtype))
                # one head call so batch norm sees every scan in the step
                out = model.head(torch.stack(preds))
                loss = torch.stack([mse_loss(out[b], gts[b]) for b in range(len(batch))]).mean()
                opt.zero_grad(set_to_none=True)
                loss.backward()
                value = float(loss.detach())
                if not math.isfinite(value):
                    gnorm = math.sqrt(sum(float(p.grad.detach().double().pow(2).sum())
                                          for p in model.parameters() if p.grad is not None))
                    raise TrainingDivergedError(
                        f"non-finite loss {value} at step {step} (lr={cfg.learning_rate}, grad_norm={gnorm})")
                opt.step()
                losses.append((step, value))
                if log_file:
                    log_file.write(f"{step},{value!r}\n")
                if progress_every and step % progress_every == 0:
                    log.info("step %d loss %.6g", step, value)
                step += 1
                if checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    ModelCheckpoint(model, cfg, geom, step).save(Path(checkpoint_dir) / f"step_{step:06d}.ckpt")
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return ModelCheckpoint(model, cfg, geom, step, losses)


# -- inference -------------------------------------------------------------

@torch.no_grad()
def reconstruct(ckpt: ModelCheckpoint | IntensityField, projections: ProjectionSet,
                geom: ScannerGeometry, dims, chunk: int = 65536) -> Volume:
    """Evaluate the field at every voxel center of a ``dims`` grid.

    Points are processed in chunks of at most ``chunk``; the neighbour graph
    of the point transformer always spans the whole grid.
    """
    model = ckpt.model if isinstance(ckpt, ModelCheckpoint) else ckpt
    if chunk < 1 or chunk > 65536:
        raise ValueError(f"chunk must be in [1, 65536], got {chunk}")
    n_u, n_v = geom.detector_pixels
    if projections.images.shape[1:] != (n_v, n_u):
        raise ValueError(
            f"projection images {projections.images.shape[1:]} do not match detector {(n_v, n_u)}")
    if n_u != model.encoder.cfg.image_size and model.encoder.cfg.enforce_size:
        raise ValueError(f"model expects {model.encoder.cfg.image_size}px projections, geometry has {n_u}px")
    model.eval()
    dtype = next(model.parameters()).dtype
    pyramids = model.encode(torch.as_tensor(normalized_images(projections, geom), dtype=dtype))
    coords = grid_coords(dims)
    n = len(coords)
    fused = []
    for s in range(0, n, chunk):
        uv, _ = project_to_views(coords[s:s + chunk], geom, projections.angles_deg, dims)
        fused.append(fuse_pyramids(pyramids, torch.as_tensor(uv, dtype=dtype), model.scales))
    fused = torch.cat(fused)
    if model.point_transformer is not None:
        fused = model.point_transformer.forward_chunked(torch.as_tensor(coords, dtype=dtype), fused, chunk)
    values = torch.cat([model.head(fused[s:s + chunk]) for s in range(0, n, chunk)])
    data = values.cpu().numpy().reshape(tuple(dims), order="F")
    return Volume(data.astype(np.float32), tuple(float(x) for x in geom.voxel_spacing(dims)))


def evaluate(pred: Volume, gt: Volume) -> dict:
    return {"psnr": psnr(pred.data, gt.data, 1.0), "ssim": ssim(pred.data, gt.data, 1.0)}


# -- ablations -------------------------------------------------------------

ABLATION_GRIDS = {
    "n_points": (5000, 10000, 20000),
    "k": (3, 6, 9, 15),
    "features": ("F4", "F4;F3", "F4;F3;F2", "full"),
}


def ablation_config(base: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "n_points":
        return replace(base, n_points=int(value))
    if axis == "k":
        return replace(base, pointtrans=replace(base.pointtrans, k=int(value)))
    if axis == "features":
        if value not in FEATURE_STRATEGIES:
            raise ValueError(f"unknown feature strategy {value!r}; expected one of {list(FEATURE_STRATEGIES)}")
        return replace(base, scales=",".join(map(str, FEATURE_STRATEGIES[value])))
    raise ValueError(f"unknown ablation axis {axis!r}")


def run_ablation(axis: str, values, base: TrainConfig, geom: ScannerGeometry | None = None,
                 train_scans=None, test_scans=None, out_csv=None) -> list[tuple]:
    """Train and test one configuration per value under the shared seed.

    Returns rows ``(value, psnr, ssim)`` averaged over the test scans and
    optionally writes them as CSV.
    """
    geom = geom or default_geometry(base)
    values = list(values if values is not None else ABLATION_GRIDS[axis])
    cfgs = [ablation_config(base, axis, v) for v in values]  # validate all before training
    train_scans = train_scans if train_scans is not None else make_phantom_scans(base, geom, "train")
    test_scans = test_scans if test_scans is not None else make_phantom_scans(base, geom, "test")
    rows = []
    for value, cfg in zip(values, cfgs):
        ckpt = train(cfg, train_scans, geom)
        scores = [evaluate(reconstruct(ckpt, s.projections, geom, s.volume.shape), s.volume)
                  for s in test_scans]
        row = (value, float(np.mean([m["psnr"] for m in scores])), float(np.mean([m["ssim"] for m in scores])))
        log.info("ablation %s=%s psnr=%.4f ssim=%.4f", axis, *row)
        rows.append(row)
        if out_csv is not None:
            write_ablation_csv(rows, out_csv)
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "psnr", "ssim"])
        for value, p, s in rows:
            w.writerow([value, f"{p:.6f}", f"{s:.6f}"])
