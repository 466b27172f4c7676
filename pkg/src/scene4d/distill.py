"""Feature field distillation.

Per-Gaussian latent features and small per-task decoders are trained jointly
so that decoded rendered feature maps reproduce ground-truth 2D maps from a
synthetic encoder. Compositing weights come from the rasterizer and are held
fixed (recomputed per view, never differentiated through); geometry and
opacity never change during distillation, so each view's weight matrix is
computed once and reused. Background pixels carry zero target and zero
rendered feature, so their loss reduces to a single ``decoder(0)`` term
weighted by the pixel count; the computed loss is exactly the full-image
MSE.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import DivergenceError, LabelingError, SceneValidationError
from .rasterizer import rasterize_with_weights
from .scene import Camera, Gaussian3D, GaussianScene


# ---------------------------------------------------------------------------
# synthetic encoder
# ---------------------------------------------------------------------------

def _hashed_unit_vector(seed: int, tag: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}|{tag}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class SyntheticEncoder:
    """Deterministic label -> unit-vector table with low mutual cosine.

    Stands in for a 2D feature extractor at desk scale: labeled content maps
    to its label's embedding and empty background composites to zero. The
    table is regenerated from successive derived seeds until all pairwise
    |cos| < 0.5.
    """

    MAX_COSINE = 0.5

    def __init__(self, labels: Sequence[str], dim: int = 8, seed: int = 0):
        if not labels:
            raise LabelingError("encoder needs at least one label")
        self.dim = dim
        self.seed = seed
        self.labels = tuple(sorted(set(labels)))
        attempt = 0
        while True:
            table = {
                lab: _hashed_unit_vector(seed + 1_000_003 * attempt, lab, dim)
                for lab in self.labels
            }
            if self._separated(table):
                break
            attempt += 1
        self._table = table
        self.attempts = attempt

    def _separated(self, table) -> bool:
        vecs = list(table.values())
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                if abs(float(vecs[i] @ vecs[j])) >= self.MAX_COSINE:
                    return False
        return True

    def embed(self, label: str) -> np.ndarray:
        if label not in self._table:
            raise LabelingError(f"label {label!r} is not in the encoder table")
        return self._table[label].copy()

    def embed_query(self, phrase: str) -> np.ndarray:
        """Embedding for an arbitrary prompt; unknown phrases hash to a
        deterministic unit vector so they match nothing in particular."""
        key = phrase.strip().lower()
        if key in self._table:
            return self._table[key].copy()
        return _hashed_unit_vector(self.seed ^ 0x5EED, key, self.dim)

    @property
    def background(self) -> np.ndarray:
        return np.zeros(self.dim)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "seed": self.seed,
            "labels": list(self.labels),
            "table": {k: list(v) for k, v in self._table.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticEncoder":
        enc = cls.__new__(cls)
        enc.dim = int(data["dim"])
        enc.seed = int(data["seed"])
        enc.labels = tuple(data["labels"])
        enc._table = {k: np.asarray(v, dtype=np.float64)
                      for k, v in data["table"].items()}
        enc.attempts = -1
        return enc


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

class FeatureDecoder:
    """MLP decoder D -> D_s (one tanh hidden layer, or purely linear)."""

    def __init__(self, d_in: int, d_out: int, hidden: int | None,
                 weights: list[np.ndarray], biases: list[np.ndarray]):
        self.d_in = d_in
        self.d_out = d_out
        self.hidden = hidden
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        shapes = [w.shape for w in self.weights]
        expect = ([(hidden, d_in), (d_out, hidden)] if hidden
                  else [(d_out, d_in)])
        if shapes != expect:
            raise SceneValidationError(f"decoder layer shapes {shapes} != {expect}")
        if not all(np.all(np.isfinite(w)) for w in self.weights + self.biases):
            raise SceneValidationError("decoder parameters must be finite")

    @classmethod
    def seeded(cls, d_in: int, d_out: int, hidden: int | None = 32,
               seed: int = 0) -> "FeatureDecoder":
        rng = np.random.default_rng(seed)

        def layer(n_out, n_in):
            return rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)

        if hidden:
            return cls(d_in, d_out, hidden,
                       [layer(hidden, d_in), layer(d_out, hidden)],
                       [np.zeros(hidden), np.zeros(d_out)])
        return cls(d_in, d_out, None, [layer(d_out, d_in)], [np.zeros(d_out)])

    @classmethod
    def identity(cls, dim: int) -> "FeatureDecoder":
        return cls(dim, dim, None, [np.eye(dim)], [np.zeros(dim)])

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise SceneValidationError(
                f"decoder expects dim {self.d_in}, got {x.shape[-1]}"
            )
        if self.hidden:
            h = np.tanh(x @ self.weights[0].T + self.biases[0])
            return h @ self.weights[1].T + self.biases[1]
        return x @ self.weights[0].T + self.biases[0]

    def apply_t(self, x: torch.Tensor, params: list[torch.Tensor]) -> torch.Tensor:
        if self.hidden:
            w1, b1, w2, b2 = params
            return torch.tanh(x @ w1.T + b1) @ w2.T + b2
        w, b = params
        return x @ w.T + b

    def torch_params(self) -> list[torch.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(torch.from_numpy(w.copy()).requires_grad_(True))
            out.append(torch.from_numpy(b.copy()).requires_grad_(True))
        return out

    def with_params(self, params: list[torch.Tensor]) -> "FeatureDecoder":
        arrays = [p.detach().numpy().copy() for p in params]
        return FeatureDecoder(self.d_in, self.d_out, self.hidden,
                              arrays[0::2], arrays[1::2])

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "hidden": self.hidden,
            "layers": [
                {"w": [list(row) for row in w], "b": list(b)}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureDecoder":
        if data.get("version") != 1:
            raise SceneValidationError("unsupported decoder checkpoint version")
        ws = [np.asarray(layer["w"]) for layer in data["layers"]]
        bs = [np.asarray(layer["b"]) for layer in data["layers"]]
        return cls(data["d_in"], data["d_out"], data["hidden"], ws, bs)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "FeatureDecoder":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def decode_gaussian(decoder: FeatureDecoder, g: Gaussian3D) -> np.ndarray:
    """Apply the task decoder directly to one Gaussian's latent feature."""
    return decoder.apply(g.feature)


def decode_features(decoder: FeatureDecoder, scene: GaussianScene) -> np.ndarray:
    return decoder.apply(scene.features())


# ---------------------------------------------------------------------------
# ground truth maps
# ---------------------------------------------------------------------------

def ground_truth_feature_map(scene: GaussianScene, frame: int, cam: Camera,
                             enc: SyntheticEncoder) -> np.ndarray:
    """Composite each Gaussian's label embedding with the color weights."""
    override = np.empty((len(scene.gaussians), enc.dim))
    for i, g in enumerate(scene.gaussians):
        if g.label is None:
            raise LabelingError(f"gaussian {i} has no label")
        override[i] = enc.embed(g.label)
    out = rasterize_with_weights(scene, frame, cam, features=override)[0]
    return out.feature_map


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistillConfig:
    lr: float = 1.0
    steps: int = 2000
    momentum: float = 0.0
    hidden: int | None = 32
    decoder_seed: int = 0
    divergence_factor: float = 10.0
    initial_decoders: Mapping[str, "FeatureDecoder"] | None = None


@dataclass
class DistillResult:
    scene: GaussianScene
    decoders: dict[str, FeatureDecoder]
    loss_curve: list[float]
    weights_per_view: int = 0

    @property
    def decoder(self) -> FeatureDecoder:
        if len(self.decoders) == 1:
            return next(iter(self.decoders.values()))
        return self.decoders["semantic"]

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1]

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "L_feat"))
            for i, v in enumerate(self.loss_curve):
                w.writerow((i, v))


def train_distillation(scene: GaussianScene, cams: Sequence[Camera],
                       frames: Sequence[int],
                       enc: SyntheticEncoder | Mapping[str, SyntheticEncoder],
                       cfg: DistillConfig = DistillConfig()) -> DistillResult:
    """Joint gradient descent on per-Gaussian features and decoder weights.

    Full-batch over all (frame, camera) views; plain GD with optional
    momentum. The loss is the mean over views of the per-task MSE sum
    against the synthetic ground-truth maps. Aborts when the loss exceeds
    ``divergence_factor`` times its initial value.
    """
    encoders: dict[str, SyntheticEncoder] = (
        dict(enc) if isinstance(enc, Mapping) else {"semantic": enc}
    )
    views = [(f, c) for f in frames for c in cams]
    if not views:
        raise SceneValidationError("distillation needs at least one view")

    n = len(scene.gaussians)
    view_data = []
    for f, cam in views:
        out, w = rasterize_with_weights(scene, f, cam)
        fg = np.flatnonzero(w.sum(axis=1) > 0.0)
        n_px = w.shape[0]
        targets = {}
        for name, e in encoders.items():
            gt = ground_truth_feature_map(scene, f, cam, e).reshape(n_px, -1)
            targets[name] = torch.from_numpy(gt[fg].copy())
        view_data.append({
            "w_fg": torch.from_numpy(w[fg].copy()),
            "n_px": n_px,
            "n_bg": n_px - len(fg),
            "targets": targets,
        })

    features = torch.from_numpy(scene.features().copy()).requires_grad_(True)
    if cfg.initial_decoders is not None:
        decoders = dict(cfg.initial_decoders)
    else:
        decoders = {
            name: FeatureDecoder.seeded(scene.feature_dim, e.dim, cfg.hidden,
                                        seed=cfg.decoder_seed)
            for name, e in encoders.items()
        }
    dec_params = {name: d.torch_params() for name, d in decoders.items()}
    all_params = [features] + [p for ps in dec_params.values() for p in ps]
    momentum_buf = [torch.zeros_like(p) for p in all_params]

    def compute_loss() -> torch.Tensor:
        total = 0.0
        for vd in view_data:
            rendered = vd["w_fg"] @ features
            for name, d in decoders.items():
                decoded = d.apply_t(rendered, dec_params[name])
                sq = ((decoded - vd["targets"][name]) ** 2).sum()
                zero_in = torch.zeros(1, scene.feature_dim, dtype=torch.float64)
                bg = (d.apply_t(zero_in, dec_params[name]) ** 2).sum() * vd["n_bg"]
                total = total + (sq + bg) / (vd["n_px"] * encoders[name].dim)
        return total / len(view_data)

    loss_curve: list[float] = []
    initial = None
    for step in range(cfg.steps + 1):
        loss = compute_loss()
        value = float(loss.detach())
        loss_curve.append(value)
        if initial is None:
            initial = value
        elif value > cfg.divergence_factor * max(initial, 1e-30):
            raise DivergenceError(
                f"loss {value:.3e} exceeded {cfg.divergence_factor}x initial "
                f"{initial:.3e} at step {step}"
            )
        if step == cfg.steps:
            break
        grads = torch.autograd.grad(loss, all_params)
        with torch.no_grad():
            for p, g, m in zip(all_params, grads, momentum_buf):
                if cfg.momentum:
                    m.mul_(cfg.momentum).add_(g)
                    p.sub_(cfg.lr * m)
                else:
                    p.sub_(cfg.lr * g)

    new_feats = features.detach().numpy()
    new_gaussians = [replace(g, feature=new_feats[i])
                     for i, g in enumerate(scene.gaussians)]
    final_decoders = {
        name: decoders[name].with_params(dec_params[name])
        for name in decoders
    }
    return DistillResult(
        scene=scene.with_gaussians(new_gaussians),
        decoders=final_decoders,
        loss_curve=loss_curve,
        weights_per_view=n,
    )


# ---------------------------------------------------------------------------
# desk defaults
# ---------------------------------------------------------------------------

def trailing_nonincreasing(curve: Sequence[float], window: int = 50,
                           rtol: float = 1e-9, atol: float = 1e-15) -> bool:
    """True when the loss does not increase over the trailing window."""
    tail = list(curve[-(window + 1):])
    return all(b <= a * (1.0 + rtol) + atol for a, b in zip(tail, tail[1:]))


def desk_distill_cameras(width: int = 64, height: int = 64,
                         focal: float = 70.0) -> list[Camera]:
    from .scene import orbit_camera

    front = Camera.look_at((0.0, 0.5, -9.0), (0.0, 0.0, 0.0),
                           width=width, height=height, focal=focal)
    side = orbit_camera((0.0, 0.0, 0.0), 9.0, 35.0, 18.0,
                        width=width, height=height, focal=focal)
    return [front, side]


def desk_distill_config(steps: int = 2000) -> DistillConfig:
    return DistillConfig(lr=3.0, steps=steps, momentum=0.9, hidden=32,
                         decoder_seed=3)
