"""Encoder-decoder denoiser trained to undo the corruption operator.

The network is a small UNet without batch normalisation whose top
(full-resolution) skip connection is removed.  Gradients come from torch
autograd; the coefficient fitting for the equivariant network is derivative
free and lives in :func:`fit_coeffs`.
"""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corrupt import NoiseParams, corrupt
from .geom3d import Volume3, sample_rigid, warp_array

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


@dataclass
class DenoiserConfig:
    levels: int = 2             # number of 2x downsamplings
    features: int = 16
    convs_per_level: int = 2
    drop_top_skip: bool = True
    upsample: str = "nearest"   # or "trilinear"
    seed: int = 0

    @classmethod
    def paper(cls, seed: int = 0) -> "DenoiserConfig":
        return cls(levels=4, features=32, seed=seed)


class _Conv3d(nn.Conv3d):
    # Batch-1 single-thread f32 conv3d falls back to torch's slow reference
    # kernel; the oneDNN op is differentiable and ~1.5x faster per training step.
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dtype == torch.float32 and x.device.type == "cpu" and torch.backends.mkldnn.is_available():
            return torch.ops.aten.mkldnn_convolution(x, self.weight, self.bias, list(self.padding),
                                                     list(self.stride), list(self.dilation), self.groups)
        return super().forward(x)


def _block(cin: int, cout: int, n: int) -> nn.Sequential:
    layers = []
    for k in range(n):
        layers += [_Conv3d(cin if k == 0 else cout, cout, 3, padding=1), nn.ReLU()]
    return nn.Sequential(*layers)


class DenoiserNet(nn.Module):
    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        torch.manual_seed(cfg.seed)
        f, n = cfg.features, cfg.convs_per_level
        self.enc = nn.ModuleList([_block(1 if k == 0 else f, f, n) for k in range(cfg.levels)])
        self.bottom = _block(f, f, n)
        self.dec = nn.ModuleList()
        for k in range(cfg.levels):
            skip = not (k == 0 and cfg.drop_top_skip)
            self.dec.append(_block(2 * f if skip else f, f, n))
        self.head = _Conv3d(f, 1, 1)
        # keep parameters f32-exact so checkpoints round-trip bit for bit
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(p.float())

    def skips(self) -> list[bool]:
        return [not (k == 0 and self.config.drop_top_skip) for k in range(self.config.levels)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        div = 2 ** self.config.levels
        if any(s % div for s in x.shape[-3:]):
            raise ValueError(f"spatial dims {tuple(x.shape[-3:])} must be divisible by {div}")
        feats = []
        for block in self.enc:
            x = block(x)
            feats.append(x)
            x = nn.functional.avg_pool3d(x, 2)
        x = self.bottom(x)
        for k in reversed(range(self.config.levels)):
            if self.config.upsample == "nearest":
                x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            else:
                x = nn.functional.interpolate(x, scale_factor=2, mode=self.config.upsample, align_corners=False)
            if self.skips()[k]:
                x = torch.cat([x, feats[k]], dim=1)
            x = self.dec[k](x)
        return self.head(x)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_params(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1).double() for p in self.parameters()]).numpy()

    def load_flat(self, flat: np.ndarray) -> None:
        flat = torch.as_tensor(np.asarray(flat))
        if flat.numel() != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.numel()}")
        i = 0
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(flat[i:i + p.numel()].reshape(p.shape).to(p.dtype))
                i += p.numel()

    def save(self, path, state: "TrainState | None" = None) -> None:
        header = {"format": "DENOISER1", "architecture": asdict(self.config), "n_params": self.n_params}
        if state is not None:
            header.update(step=state.step, best_step=state.best_step, lr=state.lr, seed=state.seed)
        h = json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(h)))
            fh.write(h)
            fh.write(self.flat_params().astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "DenoiserNet":
        raw = Path(path).read_bytes()
        (n,) = struct.unpack("<I", raw[:4])
        header = json.loads(raw[4:4 + n])
        net = cls(DenoiserConfig(**header["architecture"]))
        net.load_flat(np.frombuffer(raw, dtype="<f4", offset=4 + n).astype(np.float32))
        return net


def _as_tensor(img, dtype) -> torch.Tensor:
    arr = np.asarray(getattr(img, "data", img))
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)[None, None]


def denoiser_forward(net: DenoiserNet, image) -> np.ndarray:
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        return net(_as_tensor(image, dtype))[0, 0].double().numpy()


def _cube_maps(shape) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """(axis permutation, flipped axes) for the proper cube rotations that keep ``shape``."""
    maps = []
    for perm in itertools.permutations(range(3)):
        if tuple(shape[a] for a in perm) != tuple(shape):
            continue
        parity = round(np.linalg.det(np.eye(3)[list(perm)]))
        for flips in itertools.product((0, 1), repeat=3):
            if parity * (-1) ** sum(flips) > 0:
                maps.append((perm, tuple(a for a in range(3) if flips[a])))
    return maps


def cubic_average(net: DenoiserNet, image) -> np.ndarray:
    """``mean_g g^-1 Psi(g I)`` over the cube rotations of the grid.

    The UNet is only translation-equivariant (mod its pooling stride); its
    pose-dependent residuals shift the feature centres of mass.  Averaging over
    the 24 grid rotations makes the output exactly cubic-equivariant and
    removes most of that residual.
    """
    img = np.asarray(getattr(image, "data", image), dtype=float)
    maps = _cube_maps(img.shape)
    views = [np.flip(np.transpose(img, perm), flips) for perm, flips in maps]
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = net(torch.from_numpy(np.ascontiguousarray(np.stack(views))[:, None]).to(dtype))[:, 0].double().numpy()
    acc = np.zeros_like(img)
    for y, (perm, flips) in zip(out, maps):
        acc += np.transpose(np.flip(y, flips), np.argsort(perm))
    return acc / len(maps)


def loss_psi(net: DenoiserNet, clean, corrupted) -> tuple[float, dict[str, np.ndarray]]:
    """Sum of squared residuals and its gradient for every named parameter."""
    dtype = next(net.parameters()).dtype
    net.zero_grad()
    out = net(_as_tensor(corrupted, dtype))
    loss = ((out - _as_tensor(clean, dtype)) ** 2).sum()
    loss.backward()
    grads = {name: p.grad.detach().double().numpy().copy() for name, p in net.named_parameters()}
    return float(loss.detach()), grads


def _loss_value(net: DenoiserNet, clean, corrupted) -> float:
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        return float(((net(_as_tensor(corrupted, dtype)) - _as_tensor(clean, dtype)) ** 2).sum())


def gradient_check(net: DenoiserNet, clean, corrupted, n: int = 100, seed: int = 0,
                   h: float = 1e-6) -> np.ndarray:
    """Relative error of autograd vs central differences on ``n`` random parameters.

    Run on a float64 copy of the network.  The denominator is floored at
    1e-6 of the largest gradient so that parameters behind dead units do not
    divide zero by zero.
    """

    net64 = copy.deepcopy(net).double()
    _, grads = loss_psi(net64, clean, corrupted)
    named = list(net64.named_parameters())
    sizes = np.array([p.numel() for _, p in named])
    gmax = max(np.abs(g).max() for g in grads.values())
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=n, replace=False)
    out = []
    for flat_idx in picks:
        k = int(np.searchsorted(np.cumsum(sizes), flat_idx, side="right"))
        name, p = named[k]
        i = int(flat_idx - (sizes[:k].sum() if k else 0))
        with torch.no_grad():
            orig = p.view(-1)[i].item()
            p.view(-1)[i] = orig + h
            up = _loss_value(net64, clean, corrupted)
            p.view(-1)[i] = orig - h
            down = _loss_value(net64, clean, corrupted)
            p.view(-1)[i] = orig
        fd = (up - down) / (2 * h)
        g = grads[name].reshape(-1)[i]
        out.append(abs(g - fd) / max(abs(g), abs(fd), 1e-6 * gmax))
    return np.array(out)


@dataclass
class TrainState:
    step: int = 0
    lr: float = 1e-3
    seed: int = 0
    loss_history: list = field(default_factory=list)
    heldout_history: list = field(default_factory=list)   # (step, mse)
    best_step: int = 0                                     # checkpoint kept by validation selection

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss"])
            for k, v in enumerate(self.loss_history):
                w.writerow([k, repr(v)])


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 1
    rot_range: float = 180.0
    trans_range: float = 4.0
    eval_every: int = 100
    schedule: str = "cosine"    # or "constant"
    select_best: bool = True    # keep the parameters with the lowest held-out MSE
    seed: int = 0


def make_training_sample(image: np.ndarray, params: NoiseParams, rng: np.random.Generator,
                         rot_range: float, trans_range: float) -> tuple[np.ndarray, np.ndarray]:
    """(clean, corrupted) after a random rigid warp and a fresh corruption draw."""
    from .geom3d import grid_center

    T = sample_rigid(rot_range, trans_range, rng, grid_center(image.shape))
    clean = np.clip(warp_array(image, T), 0.0, 1.0)
    noisy, _ = corrupt(Volume3(clean), params, rng)
    return clean, noisy.data


def heldout_mse(net: DenoiserNet, pairs) -> float:
    return float(np.mean([np.mean((denoiser_forward(net, noisy) - clean) ** 2) for clean, noisy in pairs]))


def train_denoiser(corpus, params: NoiseParams, config: TrainConfig | None = None,
                   net: DenoiserNet | None = None, heldout=None) -> tuple[DenoiserNet, TrainState]:
    """Adam on the mean squared residual with online spatial + intensity augmentation.

    ``corpus`` is a sequence of clean images (arrays or volumes); ``heldout`` an
    optional list of fixed (clean, corrupted) pairs evaluated every
    ``eval_every`` steps.
    """
    cfg = config or TrainConfig()
    images = [np.asarray(getattr(im, "data", im), dtype=float) for im in corpus]
    if not images:
        raise ValueError("empty training corpus")
    net = net or DenoiserNet()
    state = TrainState(lr=cfg.lr, seed=cfg.seed)
    if cfg.steps == 0:
        return net, state
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    sched = None
    if cfg.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)
    elif cfg.schedule != "constant":
        raise ValueError(f"unknown schedule {cfg.schedule!r}")
    dtype = next(net.parameters()).dtype
    best = None
    if heldout:
        state.heldout_history.append((0, heldout_mse(net, heldout)))
        best = (state.heldout_history[0][1], copy.deepcopy(net.state_dict()))
    for step in range(cfg.steps):
        batch = [make_training_sample(images[rng.integers(len(images))], params, rng,
                                      cfg.rot_range, cfg.trans_range) for _ in range(cfg.batch_size)]
        clean = torch.from_numpy(np.stack([b[0] for b in batch])[:, None]).to(dtype)
        noisy = torch.from_numpy(np.stack([b[1] for b in batch])[:, None]).to(dtype)
        opt.zero_grad()
        loss = ((net(noisy) - clean) ** 2).mean()
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        state.loss_history.append(value)
        state.step = step + 1
        if heldout and (state.step % cfg.eval_every == 0 or state.step == cfg.steps):
            mse = heldout_mse(net, heldout)
            state.heldout_history.append((state.step, mse))
            log.info("step %d  train %.5f  heldout %.5f", state.step, value, mse)
            if mse < best[0]:
                best = (mse, copy.deepcopy(net.state_dict()))
                state.best_step = state.step
    if best is not None and cfg.select_best:
        net.load_state_dict(best[1])
    else:
        state.best_step = state.step
    return net, state


# --- coefficient fitting for the equivariant feature network -----------------

def _pose_pair(anchor: np.ndarray, T1, T2) -> tuple[np.ndarray, np.ndarray]:
    return np.clip(warp_array(anchor, T1), 0.0, 1.0), np.clip(warp_array(anchor, T2), 0.0, 1.0)


def loss_phi(ecnn, anchor, T1, T2) -> float:
    """Image loss of the closed-form head: ``sum (T2 o I - T_hat o (T1 o I))^2``."""
    from .pipeline import track

    anchor = np.asarray(getattr(anchor, "data", anchor), dtype=float)
    fixed, moving = _pose_pair(anchor, T1, T2)
    T_hat = track(None, ecnn, fixed, moving).T
    return float(((moving - warp_array(fixed, T_hat)) ** 2).sum())


def loss_geodesic(ecnn, anchor, T1, T2, trans_weight: float = 0.0) -> float:
    """Supervised alternative: geodesic angle (rad) between T_hat and T2 o T1^-1."""
    from .geom3d import compose, geodesic_deg, inverse
    from .pipeline import track

    anchor = np.asarray(getattr(anchor, "data", anchor), dtype=float)
    fixed, moving = _pose_pair(anchor, T1, T2)
    T_hat = track(None, ecnn, fixed, moving).T
    T_true = compose(T2, inverse(T1))
    loss = np.deg2rad(geodesic_deg(T_hat.R, T_true.R))
    if trans_weight:
        loss += trans_weight * float(np.linalg.norm(T_hat.recentered(T_true.center).t - T_true.t))
    return float(loss)


@dataclass
class FitConfig:
    steps: int = 50
    step_size: float = 0.25      # relative to the coordinate's init scale
    loss: str = "image"          # "image" or "geodesic"
    seed: int = 0


def fit_coeffs(ecnn, samples, config: FitConfig | None = None):
    """Random coordinate descent over the kernel coefficients.

    ``samples`` is a list of (anchor, T1, T2).  Each step perturbs one
    coefficient by +-step and keeps the better move only if the summed loss
    drops, so the returned history is non-increasing.  Gate biases are left
    alone.  Returns (fitted copy, loss history).
    """

    cfg = config or FitConfig()
    fn = {"image": loss_phi, "geodesic": loss_geodesic}[cfg.loss]
    net = copy.deepcopy(ecnn)
    n_coeffs = sum(layer.n_coeffs for layer in net.layers)
    scale = np.concatenate([np.full(layer.n_coeffs, np.abs(np.concatenate(
        [c.ravel() for c in layer.coeffs.values()])).max()) for layer in net.layers])
    rng = np.random.default_rng(cfg.seed)

    def total(params) -> float:
        net.set_params(params)
        return sum(fn(net, *s) for s in samples)

    params = net.get_params()
    best = total(params)
    history = [best]
    for _ in range(cfg.steps):
        i = int(rng.integers(n_coeffs))
        delta = float(np.float32(cfg.step_size * scale[i]))
        for sign in (1.0, -1.0):
            trial = params.copy()
            trial[i] = float(np.float32(params[i] + sign * delta))
            value = total(trial)
            if value < best:
                params, best = trial, value
                break
        history.append(best)
    net.set_params(params)
    return net, history
