"""Toy latent diffusion sampler with trajectory-aligned attention guidance.

The denoiser is a fixed, seeded, untrained network: 3D patchification (a
linear projection over non-overlapping (p_t, p_h, p_w) patches), one
cross-attention layer over named text tokens, and an output projection that
predicts noise. The mechanism under test is the guidance loop: at each
denoising step the per-frame energy

    E_i = (1 - in_box_mass_i)^2,   in_box_mass_i = sum_{u in B_i} A[i,u,n]
                                                   / sum_u A[i,u,n]

is minimized by gradient descent on the latent through the attention
computation, steering the motion token's attention into the trajectory
boxes. Forward math exists twice: a numpy reference path (used by tests and
finite-difference oracles) and a torch path (used for autograd); both are
float64.
"""

from __future__ import annotations

import csv
import hashlib
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DegenerateBoxError, GuidanceAbort, ScheduleError
from .parser import ExecutionPlan, Module
from .trajectory import GridBoxTrack


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])


def make_schedule(steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule; alpha_t = 1 - beta_t, alpha_bar_t = prod alpha_i."""
    if steps < 1:
        raise ScheduleError(f"steps must be >= 1, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bars):
        a.flags.writeable = False
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatentTensor:
    """(T, C, H, W) float64 array; immutable value."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 4:
            raise ScheduleError(f"latent must be 4D (T,C,H,W), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ScheduleError("latent contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.values.shape)


@dataclass(frozen=True)
class AttentionTensor:
    """A[i, u, n]: temporal cell i, flattened spatial cell u, token n."""

    values: np.ndarray
    token_names: tuple[str, ...]
    grid: tuple[int, int, int]  # (Ti, Hc, Wc)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        ti, hc, wc = self.grid
        if v.shape != (ti, hc * wc, len(self.token_names)):
            raise ScheduleError(
                f"attention shape {v.shape} does not match grid {self.grid} "
                f"and {len(self.token_names)} tokens"
            )
        if np.any(v < 0):
            raise ScheduleError("attention entries must be nonnegative")
        sums = v.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ScheduleError("attention must sum to one over tokens")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "token_names", tuple(self.token_names))


# ---------------------------------------------------------------------------
# toy denoiser
# ---------------------------------------------------------------------------

def _token_vector(seed: int, name: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim)


@dataclass(frozen=True)
class DenoiserConfig:
    latent_shape: tuple[int, int, int, int] = (16, 4, 16, 16)
    patch: tuple[int, int, int] = (2, 2, 2)
    d_model: int = 32
    d_attn: int = 32
    token_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        t, _, h, w = self.latent_shape
        p_t, p_h, p_w = self.patch
        if t % p_t or h % p_h or w % p_w:
            raise ScheduleError(
                f"patch {self.patch} must divide latent dims {self.latent_shape}"
            )

    @property
    def grid(self) -> tuple[int, int, int]:
        t, _, h, w = self.latent_shape
        return t // self.patch[0], h // self.patch[1], w // self.patch[2]

    @property
    def patch_dim(self) -> int:
        return self.latent_shape[1] * self.patch[0] * self.patch[1] * self.patch[2]

    @property
    def seq_len(self) -> int:
        ti, hc, wc = self.grid
        return ti * hc * wc


class ToyDenoiser:
    """Seeded untrained denoiser; deterministic and smooth end to end."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)

        def mat(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)

        pd, dm, da, td = (config.patch_dim, config.d_model, config.d_attn,
                          config.token_dim)
        self.w_embed = mat(pd, dm)
        self.b_embed = rng.standard_normal(dm) * 0.02
        self.w_q = mat(dm, da)
        self.w_k = mat(td, da)
        self.w_v = mat(td, da)
        self.w_out = mat(da, pd)
        self.b_out = rng.standard_normal(pd) * 0.02
        self._torch_cache: dict[str, torch.Tensor] = {}

    # -- token embeddings ---------------------------------------------------

    def token_embeddings(self, token_names: tuple[str, ...]) -> np.ndarray:
        return np.stack(
            [_token_vector(self.config.seed, n, self.config.token_dim)
             for n in token_names]
        )

    # -- sequence index mapping ----------------------------------------------

    def seq_index(self, ti: int, hi: int, wi: int) -> int:
        _, hc, wc = self.config.grid
        return (ti * hc + hi) * wc + wi

    def seq_cell(self, s: int) -> tuple[int, int, int]:
        _, hc, wc = self.config.grid
        ti, rem = divmod(s, hc * wc)
        hi, wi = divmod(rem, wc)
        return ti, hi, wi

    # -- numpy reference path -------------------------------------------------

    def patchify(self, x: np.ndarray) -> np.ndarray:
        t, c, h, w = self.config.latent_shape
        p_t, p_h, p_w = self.config.patch
        ti, hc, wc = self.config.grid
        y = x.reshape(ti, p_t, c, hc, p_h, wc, p_w)
        y = y.transpose(0, 3, 5, 2, 1, 4, 6)
        return y.reshape(self.config.seq_len, self.config.patch_dim)

    def unpatchify(self, tokens: np.ndarray) -> np.ndarray:
        t, c, h, w = self.config.latent_shape
        p_t, p_h, p_w = self.config.patch
        ti, hc, wc = self.config.grid
        y = tokens.reshape(ti, hc, wc, c, p_t, p_h, p_w)
        y = y.transpose(0, 4, 3, 1, 5, 2, 6)
        return y.reshape(t, c, h, w)

    def attention_np(self, x: np.ndarray, token_names: tuple[str, ...]) -> np.ndarray:
        """(seq_len, N) softmax attention over tokens."""
        emb = self.patchify(x) @ self.w_embed + self.b_embed
        q = emb @ self.w_q
        k = self.token_embeddings(token_names) @ self.w_k
        logits = q @ k.T / math.sqrt(self.config.d_attn)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict_noise_np(self, x: np.ndarray, token_names: tuple[str, ...]) -> np.ndarray:
        emb = self.patchify(x) @ self.w_embed + self.b_embed
        q = emb @ self.w_q
        tok = self.token_embeddings(token_names)
        k = tok @ self.w_k
        v = tok @ self.w_v
        logits = q @ k.T / math.sqrt(self.config.d_attn)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        attn = e / e.sum(axis=1, keepdims=True)
        out = (attn @ v) @ self.w_out + self.b_out
        return self.unpatchify(out)

    # -- torch path ------------------------------------------------------------

    def _t(self, name: str) -> torch.Tensor:
        if name not in self._torch_cache:
            self._torch_cache[name] = torch.from_numpy(getattr(self, name))
        return self._torch_cache[name]

    def _patchify_t(self, x: torch.Tensor) -> torch.Tensor:
        t, c, h, w = self.config.latent_shape
        p_t, p_h, p_w = self.config.patch
        ti, hc, wc = self.config.grid
        y = x.reshape(ti, p_t, c, hc, p_h, wc, p_w)
        y = y.permute(0, 3, 5, 2, 1, 4, 6)
        return y.reshape(self.config.seq_len, self.config.patch_dim)

    def _unpatchify_t(self, tokens: torch.Tensor) -> torch.Tensor:
        t, c, h, w = self.config.latent_shape
        p_t, p_h, p_w = self.config.patch
        ti, hc, wc = self.config.grid
        y = tokens.reshape(ti, hc, wc, c, p_t, p_h, p_w)
        y = y.permute(0, 4, 3, 1, 5, 2, 6)
        return y.reshape(t, c, h, w)

    def _token_k_v(self, token_names: tuple[str, ...]) -> tuple[torch.Tensor, torch.Tensor]:
        tok = torch.from_numpy(self.token_embeddings(token_names))
        return tok @ self._t("w_k"), tok @ self._t("w_v")

    def attention_t(self, x: torch.Tensor, token_names: tuple[str, ...]) -> torch.Tensor:
        emb = self._patchify_t(x) @ self._t("w_embed") + self._t("b_embed")
        q = emb @ self._t("w_q")
        k, _ = self._token_k_v(token_names)
        logits = q @ k.T / math.sqrt(self.config.d_attn)
        return torch.softmax(logits, dim=-1)

    def predict_noise_t(self, x: torch.Tensor, token_names: tuple[str, ...]) -> torch.Tensor:
        emb = self._patchify_t(x) @ self._t("w_embed") + self._t("b_embed")
        q = emb @ self._t("w_q")
        k, v = self._token_k_v(token_names)
        logits = q @ k.T / math.sqrt(self.config.d_attn)
        attn = torch.softmax(logits, dim=-1)
        out = (attn @ v) @ self._t("w_out") + self._t("b_out")
        return self._unpatchify_t(out)


# ---------------------------------------------------------------------------
# forward / reverse diffusion
# ---------------------------------------------------------------------------

def q_sample(x0: LatentTensor, t: int, noise: LatentTensor,
             sched: NoiseSchedule) -> LatentTensor:
    """Closed-form forward marginal: sqrt(ab_t) x0 + sqrt(1 - ab_t) noise."""
    if not 1 <= t <= sched.steps:
        raise ScheduleError(f"t must be in [1, {sched.steps}], got {t}")
    if noise.shape != x0.shape:
        raise ScheduleError("noise shape must match x0")
    ab = sched.alpha_bar(t)
    return LatentTensor(math.sqrt(ab) * x0.values
                        + math.sqrt(1.0 - ab) * noise.values)


def reverse_step(x_t: LatentTensor, t: int, denoiser, token_names,
                 sched: NoiseSchedule, z: LatentTensor | None = None) -> LatentTensor:
    """One reverse update with sigma_t = sqrt(beta_t); caller supplies z."""
    if not 1 <= t <= sched.steps:
        raise ScheduleError(f"t must be in [1, {sched.steps}], got {t}")
    eps = denoiser.predict_noise_np(x_t.values, tuple(token_names))
    if eps.shape != x_t.values.shape:
        raise ScheduleError("denoiser output shape mismatch")
    a = sched.alpha(t)
    out = (x_t.values - math.sqrt(1.0 - a) * eps) / math.sqrt(a)
    if z is not None:
        if z.shape != x_t.shape:
            raise ScheduleError("z shape must match latent")
        out = out + math.sqrt(sched.beta(t)) * z.values
    return LatentTensor(out)


def _reverse_step_t(x: torch.Tensor, t: int, denoiser, token_names,
                    sched: NoiseSchedule, z: torch.Tensor | None) -> torch.Tensor:
    eps = denoiser.predict_noise_t(x, token_names)
    a = sched.alpha(t)
    out = (x - math.sqrt(1.0 - a) * eps) / math.sqrt(a)
    if z is not None:
        out = out + math.sqrt(sched.beta(t)) * z
    return out


# ---------------------------------------------------------------------------
# attention maps and energy
# ---------------------------------------------------------------------------

def attention_maps(denoiser, x_t: LatentTensor,
                   token_names: tuple[str, ...]) -> AttentionTensor:
    """Cross-attention restored to the (T/p_t, H/p_h, W/p_w) grid."""
    if len(token_names) < 1:
        raise ScheduleError("need at least one token")
    flat = denoiser.attention_np(x_t.values, tuple(token_names))
    ti, hc, wc = denoiser.config.grid
    return AttentionTensor(
        values=flat.reshape(ti, hc * wc, len(token_names)),
        token_names=tuple(token_names),
        grid=(ti, hc, wc),
    )


def _box_mask(boxes: GridBoxTrack, frame: int) -> np.ndarray:
    mask = boxes.cell_mask(frame).reshape(-1)
    if not mask.any():
        raise DegenerateBoxError(f"grid box at temporal cell {frame} is empty")
    return mask


def in_box_mass(a: AttentionTensor, boxes: GridBoxTrack, token: int,
                frame: int) -> float:
    """Fraction of token's attention inside the frame's box."""
    mask = _box_mask(boxes, frame)
    col = a.values[frame, :, token]
    total = col.sum()
    if total == 0.0:
        return 0.0
    return float(col[mask].sum() / total)


def energy(a: AttentionTensor, boxes: GridBoxTrack, token: int,
           frame: int) -> float:
    """Frame energy (1 - in-box ratio)^2; 0 when all mass is inside."""
    if not 0 <= token < len(a.token_names):
        raise ScheduleError(f"token index {token} out of range")
    if not 0 <= frame < a.grid[0]:
        raise ScheduleError(f"frame {frame} outside attention grid")
    m = in_box_mass(a, boxes, token, frame)
    return (1.0 - m) ** 2


def total_energy(a: AttentionTensor, boxes: GridBoxTrack, token: int) -> float:
    return sum(energy(a, boxes, token, i) for i in range(a.grid[0]))


def _energy_terms_t(attn_flat: torch.Tensor, masks: list[torch.Tensor],
                    grid: tuple[int, int, int], token: int) -> torch.Tensor:
    """Per-temporal-cell energies as a torch vector (keeps the graph)."""
    ti, hc, wc = grid
    a = attn_flat.reshape(ti, hc * wc, -1)[:, :, token]
    terms = []
    for i in range(ti):
        total = a[i].sum()
        inside = a[i][masks[i]].sum()
        terms.append((1.0 - inside / total) ** 2)
    return torch.stack(terms)


# ---------------------------------------------------------------------------
# guided sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GuidanceConfig:
    eta: float = 0.3
    inner_iters: int = 5
    guidance_frac: float = 0.6
    seed: int = 0
    token_names: tuple[str, ...] | None = None
    motion_token: int = 0
    record_baseline: bool = False
    dump_dir: str | None = None


@dataclass
class GuidanceLog:
    columns = ("step", "frame", "token", "E_before", "E_after", "in_box_mass")
    rows: list[tuple] = field(default_factory=list)
    baseline_rows: list[tuple] = field(default_factory=list)
    runtime_seconds: float = 0.0

    def record(self, baseline: bool, step: int, frame: int, token: str,
               e_before: float, e_after: float, mass: float) -> None:
        row = (step, frame, token, e_before, e_after, mass)
        (self.baseline_rows if baseline else self.rows).append(row)

    def final_step_masses(self, baseline: bool = False) -> list[float]:
        rows = self.baseline_rows if baseline else self.rows
        if not rows:
            return []
        last = min(r[0] for r in rows)
        return [r[5] for r in rows if r[0] == last]

    def mean_final_mass(self, baseline: bool = False) -> float:
        masses = self.final_step_masses(baseline)
        return float(np.mean(masses)) if masses else float("nan")

    def write_csv(self, path, baseline: bool = False) -> None:
        rows = self.baseline_rows if baseline else self.rows
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            w.writerows(rows)


def tokens_for_plan(plan: ExecutionPlan) -> tuple[str, ...]:
    """Conditioning tokens; the motion token (object phrase) is index 0."""
    if plan.module is not Module.GEN:
        raise ScheduleError("guidance tokens come from GEN plans")
    q = plan.queries
    tokens = [q.object_phrase]
    if q.color:
        tokens.append(q.color)
    tokens.append(q.direction.value)
    tokens.append("background")
    return tuple(tokens)


def guided_sample(plan: ExecutionPlan | None, track: GridBoxTrack,
                  sched: NoiseSchedule, denoiser,
                  cfg: GuidanceConfig = GuidanceConfig()
                  ) -> tuple[list[LatentTensor], GuidanceLog]:
    """Sample with per-step attention guidance.

    At each denoising step inside the guidance window, the latent takes
    ``inner_iters`` descent steps on sum_i E_i before the reverse update.
    The log records per-frame energy before/after and the in-box mass at
    every step; with ``record_baseline`` an unguided twin run (same initial
    noise and z draws) is logged alongside for comparison.
    """
    grid = denoiser.config.grid
    if track.grid_t != grid[0] or track.grid_h != grid[1] or track.grid_w != grid[2]:
        raise ScheduleError(
            f"track grid ({track.grid_t},{track.grid_h},{track.grid_w}) "
            f"does not match denoiser grid {grid}"
        )
    token_names = cfg.token_names
    if token_names is None:
        if plan is None:
            raise ScheduleError("either a plan or explicit token_names is required")
        token_names = tokens_for_plan(plan)
    motion = cfg.motion_token
    if not 0 <= motion < len(token_names):
        raise ScheduleError(f"motion token index {motion} out of range")
    masks = [torch.from_numpy(_box_mask(track, i)) for i in range(grid[0])]

    rng = np.random.default_rng(cfg.seed)
    shape = denoiser.config.latent_shape
    x_init = rng.standard_normal(shape)
    zs = {t: rng.standard_normal(shape) for t in range(sched.steps, 1, -1)}

    log = GuidanceLog()
    started = time.perf_counter()
    trajectory: list[LatentTensor] = []

    phases = [False] + ([True] if cfg.record_baseline else [])
    for baseline in phases:
        x = torch.from_numpy(x_init.copy())
        if not baseline:
            trajectory.append(LatentTensor(x.numpy()))
        for step_index, t in enumerate(range(sched.steps, 0, -1)):
            guide = (not baseline and cfg.eta > 0 and cfg.inner_iters > 0
                     and step_index / sched.steps < cfg.guidance_frac)
            if guide:
                e_before = None
                for _ in range(cfg.inner_iters):
                    x_req = x.detach().requires_grad_(True)
                    attn = denoiser.attention_t(x_req, token_names)
                    terms = _energy_terms_t(attn, masks, grid, motion)
                    if e_before is None:
                        e_before = terms.detach().numpy().copy()
                    (grad,) = torch.autograd.grad(terms.sum(), x_req)
                    if not torch.isfinite(grad).all():
                        path = _dump_diagnostics(cfg, x_req, attn)
                        raise GuidanceAbort(
                            f"non-finite guidance gradient at step t={t}",
                            dump_path=path,
                        )
                    x = x_req.detach() - cfg.eta * grad
            with torch.no_grad():
                attn = denoiser.attention_t(x, token_names)
                terms = _energy_terms_t(attn, masks, grid, motion).numpy()
                a_flat = attn.reshape(grid[0], grid[1] * grid[2], -1)[:, :, motion]
            if not guide:
                e_before = terms
            for i in range(grid[0]):
                inside = float(a_flat[i][masks[i]].sum() / a_flat[i].sum())
                log.record(baseline, t, i, token_names[motion],
                           float(e_before[i]), float(terms[i]), inside)
            z = torch.from_numpy(zs[t]) if t > 1 else None
            with torch.no_grad():
                x = _reverse_step_t(x, t, denoiser, token_names, sched, z)
            if not baseline:
                trajectory.append(LatentTensor(x.numpy()))
    log.runtime_seconds = time.perf_counter() - started
    return trajectory, log


def _dump_diagnostics(cfg: GuidanceConfig, x: torch.Tensor,
                      attn: torch.Tensor) -> str:
    directory = Path(cfg.dump_dir) if cfg.dump_dir else Path(tempfile.mkdtemp())
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "guidance_abort.npz"
    np.savez(path, x_t=x.detach().numpy(), attention=attn.detach().numpy())
    return str(path)


# ---------------------------------------------------------------------------
# seeded desk configuration (shared by the CLI and the acceptance suite)
# ---------------------------------------------------------------------------

DESK_DENOISER_CONFIG = DenoiserConfig(
    latent_shape=(16, 4, 16, 16), patch=(2, 2, 2), seed=11,
)
DESK_SCHEDULE = (50, 1e-4, 0.02)
DESK_BOX_EXTENT = (2.5, 2.5)


def desk_guidance_config(seed: int = 0, record_baseline: bool = True,
                         eta: float = 50.0, inner_iters: int = 10,
                         guidance_frac: float = 0.6) -> GuidanceConfig:
    return GuidanceConfig(
        eta=eta, inner_iters=inner_iters, guidance_frac=guidance_frac,
        seed=seed, record_baseline=record_baseline,
    )
