"""Language-driven scene editing.

A target phrase is resolved to a Gaussian subset by softmax over cosine
similarities between decoded per-Gaussian features and a candidate prompt
set (the target plus distractors), followed by an iterative threshold
search scored by the separation margin between selected and unselected
probabilities. Edits (recolor / remove / extract) are copy-on-write scene
transforms; the scaffold is untouched, so an edit holds at every frame and
viewpoint by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .distill import FeatureDecoder, SyntheticEncoder
from .errors import EditError, EmptySelectionError, SimilarityError
from .parser import EditVerb, named_colors
from .scene import Gaussian3D, GaussianScene


@dataclass(frozen=True)
class QuerySet:
    """Candidate prompts and their embeddings; the target is prompts[0]."""

    prompts: tuple[str, ...]
    embeddings: np.ndarray  # (P, D_s)

    def __post_init__(self):
        object.__setattr__(self, "prompts", tuple(self.prompts))
        emb = np.array(self.embeddings, dtype=np.float64, copy=True)
        emb.flags.writeable = False
        object.__setattr__(self, "embeddings", emb)
        if not self.prompts:
            raise EditError("query set needs at least one prompt")
        if emb.shape[0] != len(self.prompts):
            raise EditError("one embedding per prompt required")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(norms == 0):
            raise EditError("query embeddings must be nonzero")

    def index_of(self, prompt: str) -> int:
        try:
            return self.prompts.index(prompt)
        except ValueError:
            raise EditError(f"prompt {prompt!r} is not in the query set") from None


def build_query_set(target: str, enc: SyntheticEncoder,
                    distractors: Sequence[str] | None = None) -> QuerySet:
    """Target plus distractors (default: encoder labels and "background")."""
    if distractors is None:
        distractors = tuple(enc.labels) + ("background",)
    prompts = [target] + [d for d in distractors if d != target]
    emb = np.stack([enc.embed_query(p) for p in prompts])
    return QuerySet(prompts=tuple(prompts), embeddings=emb)


@dataclass(frozen=True)
class SelectionResult:
    probabilities: np.ndarray         # p(target | j) per gaussian
    threshold: float
    selected: tuple[int, ...]
    trace: tuple[tuple[float, float], ...]  # (threshold, score)
    target: str

    def to_manifest(self, verb: str, params=None) -> dict:
        return {
            "verb": verb,
            "target": self.target,
            "threshold_trace": [list(t) for t in self.trace],
            "chosen_threshold": self.threshold,
            "selected_count": len(self.selected),
            "params": params,
        }


def softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - np.max(values, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def similarity(g: Gaussian3D, decoder: FeatureDecoder, query: np.ndarray) -> float:
    """Cosine between the decoded Gaussian feature and the query embedding."""
    f = decoder.apply(g.feature)
    fn = np.linalg.norm(f)
    qn = np.linalg.norm(query)
    if fn == 0.0 or qn == 0.0:
        raise SimilarityError("cosine similarity undefined for zero vectors")
    return float(f @ query / (fn * qn))


def prompt_probabilities(g: Gaussian3D, decoder: FeatureDecoder,
                         queries: QuerySet) -> np.ndarray:
    sims = np.array([similarity(g, decoder, q) for q in queries.embeddings])
    return softmax(sims)


def scene_probabilities(scene: GaussianScene, decoder: FeatureDecoder,
                        queries: QuerySet) -> np.ndarray:
    """(N, P) softmax prompt distribution per gaussian, vectorized."""
    decoded = decoder.apply(scene.features())
    norms = np.linalg.norm(decoded, axis=1)
    if np.any(norms == 0):
        raise SimilarityError("a gaussian decodes to the zero vector")
    qn = np.linalg.norm(queries.embeddings, axis=1)
    sims = (decoded / norms[:, None]) @ (queries.embeddings / qn[:, None]).T
    return softmax(sims)


@dataclass(frozen=True)
class ThresholdConfig:
    initial: float = 0.9
    decay: float = 0.9
    minimum: float = 0.3
    max_iters: int = 20


def threshold_search(scene: GaussianScene, decoder: FeatureDecoder,
                     queries: QuerySet, target: str,
                     cfg: ThresholdConfig = ThresholdConfig()) -> SelectionResult:
    """Scan decaying thresholds; keep the one maximizing the margin score.

    score(theta) = [mean p(target) over selected - mean over unselected],
    zero when nothing is selected. Raises when every trial selects nothing.
    """
    if not scene.gaussians:
        raise EmptySelectionError(f"no gaussians to select for {target!r}")
    probs = scene_probabilities(scene, decoder, queries)
    p = probs[:, queries.index_of(target)]

    trace: list[tuple[float, float]] = []
    best: tuple[float, float, np.ndarray] | None = None
    theta = cfg.initial
    for _ in range(cfg.max_iters):
        if theta < cfg.minimum:
            break
        mask = p >= theta
        if mask.any():
            sel_mean = float(p[mask].mean())
            unsel_mean = float(p[~mask].mean()) if (~mask).any() else 0.0
            score = sel_mean - unsel_mean
        else:
            score = 0.0
        trace.append((theta, score))
        if mask.any() and (best is None or score > best[1]):
            best = (theta, score, mask)
        theta *= cfg.decay
    if best is None:
        raise EmptySelectionError(
            f"no threshold above {cfg.minimum} selects any gaussian for "
            f"{target!r} (max p = {p.max():.3f})"
        )
    theta, _, mask = best
    return SelectionResult(
        probabilities=p,
        threshold=theta,
        selected=tuple(int(i) for i in np.flatnonzero(mask)),
        trace=tuple(trace),
        target=target,
    )


def resolve_color(params) -> np.ndarray:
    """Named color (CSS basic table) or an explicit RGB triple."""
    if isinstance(params, str):
        table = named_colors()
        if params not in table:
            raise EditError(
                f"unknown color {params!r}; known: {', '.join(sorted(table))}"
            )
        return np.array(table[params])
    rgb = np.asarray(params, dtype=np.float64)
    if rgb.shape != (3,) or rgb.min() < 0 or rgb.max() > 1:
        raise EditError("explicit color must be an RGB triple in [0,1]")
    return rgb


def apply_edit(scene: GaussianScene, selection: SelectionResult,
               verb: EditVerb, params=None) -> GaussianScene:
    """Execute recolor / remove / extract on the selected set."""
    if not selection.selected:
        raise EmptySelectionError(f"empty selection for {selection.target!r}")
    chosen = set(selection.selected)
    if max(chosen) >= len(scene.gaussians):
        raise EditError("selection references gaussians outside the scene")
    verb = EditVerb(verb)
    if verb is EditVerb.RECOLOR:
        rgb = resolve_color(params)
        new = [
            replace(g, color=rgb) if i in chosen else g
            for i, g in enumerate(scene.gaussians)
        ]
        return scene.with_gaussians(new)
    if verb is EditVerb.REMOVE:
        return scene.with_gaussians(
            [g for i, g in enumerate(scene.gaussians) if i not in chosen]
        )
    return scene.with_gaussians(
        [g for i, g in enumerate(scene.gaussians) if i in chosen]
    )
