"""Quantitative domain-invariance analysis.

Layer-4 features of a model are compared across two domains at three levels
(global per-sample means, individual pixel vectors, per-region means) using
the symmetric averaged Chamfer distance in a feature space standardized by
the source domain's sampled local-feature statistics. Invariance is
exp(-gamma * distance); local and regional distances are computed per
semantic category and averaged over categories present in both domains.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .stats import EPS_STD, IGNORE, present_categories, resize_labels

LEVELS = ("global", "local", "regional")
DEFAULT_GAMMA = 0.01
MIN_SAMPLES = 10


class EmptySetError(ValueError):
    pass


@dataclass
class FeatureSampleSet:
    level: str
    vectors: np.ndarray  # (N, D)
    categories: np.ndarray  # (N,), -1 for the category-free global level


@dataclass
class LevelResult:
    distances: list = field(default_factory=list)  # one per trial
    scores: list = field(default_factory=list)

    @property
    def mean_distance(self) -> float:
        return float(np.mean(self.distances))

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores))


@dataclass
class InvarianceReport:
    levels: dict  # level name -> LevelResult
    trials: int
    samples_per_trial: int
    gamma: float
    standardization_seed: int

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "samples_per_trial": self.samples_per_trial,
            "gamma": self.gamma,
            "standardization_seed": self.standardization_seed,
            "levels": {
                name: {
                    "distances": res.distances,
                    "scores": res.scores,
                    "mean_distance": res.mean_distance,
                    "mean_score": res.mean_score,
                }
                for name, res in self.levels.items()
            },
        }


def chamfer_distance(s_set: np.ndarray, t_set: np.ndarray) -> float:
    """Symmetric averaged nearest-neighbor distance between two vector sets."""
    s = np.atleast_2d(np.asarray(s_set, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t_set, dtype=np.float64))
    if s.shape[0] == 0 or t.shape[0] == 0:
        raise EmptySetError("chamfer distance needs non-empty sets")
    d = cdist(s, t)
    return 0.5 * float(d.min(axis=1).mean()) + 0.5 * float(d.min(axis=0).mean())


def invariance_score(d: float, gamma: float = DEFAULT_GAMMA) -> float:
    if d < 0:
        raise ValueError("distance must be non-negative")
    return float(np.exp(-gamma * d))


def _extract_level_features(model, samples, level: str) -> FeatureSampleSet:
    """Raw (unstandardized) layer-4 feature vectors for one level."""
    vectors, categories = [], []
    with torch.no_grad():
        for sample in samples:
            feats = model(sample.image.unsqueeze(0)).features[4][0]
            h, w = feats.shape[-2:]
            gt = resize_labels(sample.labels, h, w)
            if level == "global":
                vectors.append(feats.mean(dim=(1, 2)).numpy())
                categories.append(-1)
            elif level == "local":
                flat = feats.permute(1, 2, 0).reshape(-1, feats.shape[0]).numpy()
                vectors.extend(flat)
                categories.extend(gt.reshape(-1).tolist())
            elif level == "regional":
                for c in present_categories(gt):
                    mask = gt == c
                    vectors.append(feats.permute(1, 2, 0)[mask].mean(dim=0).numpy())
                    categories.append(c)
            else:
                raise ValueError(f"unknown level {level}")
    return FeatureSampleSet(
        level=level,
        vectors=np.asarray(vectors, dtype=np.float64),
        categories=np.asarray(categories, dtype=np.int64),
    )


def source_standardization(
    model, source_samples, samples_per_trial: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (mean, std) of one designated sampling of source local features."""
    local = _extract_level_features(model, source_samples, "local")
    rng = np.random.default_rng(seed)
    n = min(samples_per_trial, local.vectors.shape[0])
    idx = rng.choice(local.vectors.shape[0], size=n, replace=False)
    sampled = local.vectors[idx]
    mu = sampled.mean(axis=0)
    sigma = np.maximum(sampled.std(axis=0), EPS_STD)
    return mu, sigma


def build_sample_sets(
    model,
    source_samples,
    target_samples,
    level: str,
    rng: np.random.Generator,
    samples_per_trial: int = 300,
    standardization: tuple | None = None,
    standardization_seed: int = 0,
) -> tuple[FeatureSampleSet, FeatureSampleSet]:
    """Standardized, subsampled source/target feature sets for one level."""
    if standardization is None:
        standardization = source_standardization(
            model, source_samples, samples_per_trial, standardization_seed
        )
    mu, sigma = standardization
    sets = []
    for samples in (source_samples, target_samples):
        fs = _extract_level_features(model, samples, level)
        vectors = (fs.vectors - mu) / sigma
        n = min(samples_per_trial, vectors.shape[0])
        idx = rng.choice(vectors.shape[0], size=n, replace=False)
        sets.append(
            FeatureSampleSet(level=level, vectors=vectors[idx], categories=fs.categories[idx])
        )
    return sets[0], sets[1]


def _level_distance(s: FeatureSampleSet, t: FeatureSampleSet) -> float:
    """Single Chamfer distance for global; per-category average for local/regional."""
    if s.level == "global":
        return chamfer_distance(s.vectors, t.vectors)
    shared = sorted(
        (set(s.categories.tolist()) & set(t.categories.tolist())) - {IGNORE}
    )
    dists = [
        chamfer_distance(s.vectors[s.categories == c], t.vectors[t.categories == c])
        for c in shared
    ]
    if not dists:
        raise EmptySetError("no category present in both domains")
    return float(np.mean(dists))


def analyze(
    model,
    source_samples,
    target_samples,
    trials: int = 10,
    samples_per_trial: int = 300,
    gamma: float = DEFAULT_GAMMA,
    seed: int = 0,
) -> InvarianceReport:
    """Multi-trial domain-invariance report at all three levels."""
    if not source_samples or not target_samples:
        raise ValueError("datasets must be non-empty")
    samples_per_trial = max(MIN_SAMPLES, samples_per_trial)
    standardization = source_standardization(
        model, source_samples, samples_per_trial, seed
    )
    raw = {
        lvl: (
            _extract_level_features(model, source_samples, lvl),
            _extract_level_features(model, target_samples, lvl),
        )
        for lvl in LEVELS
    }
    mu, sigma = standardization
    results = {lvl: LevelResult() for lvl in LEVELS}
    seeds = np.random.SeedSequence(seed).spawn(trials)
    for trial_seed in seeds:
        level_seeds = trial_seed.spawn(len(LEVELS))
        for lvl, lvl_seed in zip(LEVELS, level_seeds):
            s_raw, t_raw = raw[lvl]
            subsets = []
            for fs in (s_raw, t_raw):
                # both domains reuse one generator state per (trial, level):
                # identical datasets then yield identical subsets, so the
                # distance measures domain gap rather than draw mismatch
                rng = np.random.default_rng(lvl_seed)
                vectors = (fs.vectors - mu) / sigma
                n = min(samples_per_trial, vectors.shape[0])
                idx = rng.choice(vectors.shape[0], size=n, replace=False)
                subsets.append(
                    FeatureSampleSet(level=lvl, vectors=vectors[idx], categories=fs.categories[idx])
                )
            d = _level_distance(subsets[0], subsets[1])
            results[lvl].distances.append(d)
            results[lvl].scores.append(invariance_score(d, gamma))
    return InvarianceReport(
        levels=results,
        trials=trials,
        samples_per_trial=samples_per_trial,
        gamma=gamma,
        standardization_seed=seed,
    )


def format_report_table(report: InvarianceReport, source_name: str, target_name: str) -> str:
    """Plain-text table: one row per source->target pair, levels as columns."""
    header = f"{'Source -> Target':<28}{'Global':>10}{'Local':>10}{'Regional':>10}"
    row = f"{source_name + ' -> ' + target_name:<28}"
    for lvl in LEVELS:
        row += f"{report.levels[lvl].mean_score:>10.4f}"
    return header + "\n" + row
