"""Dual pseudo training: classifier -> pseudo labels -> conditional generator -> pseudo samples -> classifier."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import (
    HiddenTruth,
    LabeledData,
    MixtureSpec,
    SemiDataset,
    SplitSpec,
    Table,
    generate_mixture,
    split_semi,
)
from .diffusion import ConditionalDenoiser, DiffusionConfig, init_denoiser, sample_per_class, train_denoiser
from .numcore import ConfigError
from .ssl_classifier import (
    LinearProbe,
    MsnConfig,
    MsnState,
    ProbeConfig,
    extract_features,
    predict,
    train_msn,
    train_probe,
)

log = logging.getLogger(__name__)

# Fixed offsets: every random stream is SeedSequence([master_seed, offset]).
STREAMS = {
    "data": 0,
    "split": 1,
    "heldout": 2,
    "msn": 3,
    "diffusion_init": 4,
    "diffusion_train": 5,
    "diffusion_sample": 6,
}


def stream(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, STREAMS[name]])


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream(seed, name))


@dataclass
class PipelineConfig:
    mixture: MixtureSpec = field(default_factory=MixtureSpec.ring)
    split: SplitSpec = field(default_factory=SplitSpec)
    msn: MsnConfig = field(default_factory=MsnConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    K: int = 128
    k_grid: list[int] = field(default_factory=list)
    refinement_rounds: int = 0
    refine_finetune: bool = False
    heldout_per_class: int = 500
    seed: int = 0

    def validate(self):
        self.mixture.validate()
        self.split.validate()
        if self.K < 0 or any(k < 0 for k in self.k_grid):
            raise ConfigError("K must be nonnegative")
        if self.refinement_rounds < 0:
            raise ConfigError("refinement_rounds must be nonnegative")
        if self.heldout_per_class < 1:
            raise ConfigError("heldout_per_class must be positive")
        self.msn.prototypes_for(self.mixture.num_classes)
        self.diffusion.schedule()

    @property
    def num_classes(self) -> int:
        return self.mixture.num_classes

    def k_values(self) -> list[int]:
        return sorted(set([self.K, *self.k_grid]))


@dataclass
class Benchmark:
    semi: SemiDataset
    truth: HiddenTruth
    heldout: LabeledData
    bayes: object


def prepare_data(cfg: PipelineConfig) -> Benchmark:
    data_rng = np.random.default_rng(cfg.mixture.seed) if cfg.mixture.seed is not None else rng_for(cfg.seed, "data")
    mix = generate_mixture(cfg.mixture, data_rng)
    split_rng = np.random.default_rng(cfg.split.seed) if cfg.split.seed is not None else rng_for(cfg.seed, "split")
    semi, truth = split_semi(mix.data, mix.num_classes, cfg.split, split_rng)
    held_spec = MixtureSpec(cfg.mixture.means, cfg.mixture.covs, cfg.heldout_per_class)
    held = generate_mixture(held_spec, rng_for(cfg.seed, "heldout"), id_offset=len(mix.data))
    return Benchmark(semi, truth, held.data, mix.bayes)


def pseudo_label_table(semi: SemiDataset, msn: MsnState, probe: LinearProbe) -> Table:
    """S1: every real item with its probe prediction, labeled items included."""
    y_hat, _ = predict(probe, extract_features(msn, semi.x))
    return Table(semi.ids.copy(), y_hat, ["real"] * len(semi.ids), semi.x.copy())


@dataclass
class Stage1:
    msn: MsnState
    probe: LinearProbe
    s1: Table


def stage1_train_and_label(semi: SemiDataset, cfg: PipelineConfig) -> Stage1:
    present = set(semi.labeled_y.tolist())
    missing = sorted(set(range(semi.num_classes)) - present)
    if missing:
        raise ConfigError(f"classes without a labeled example: {missing}")
    msn, _ = train_msn(semi.x, semi.num_classes, cfg.msn, rng_for(cfg.seed, "msn"))
    feats = extract_features(msn, semi.labeled_x())
    probe = train_probe(feats, semi.labeled_y, semi.num_classes, cfg.probe)
    return Stage1(msn, probe, pseudo_label_table(semi, msn, probe))


def train_generator(x: np.ndarray, labels: np.ndarray, num_classes: int, cfg: DiffusionConfig, seed: int,
                    init: ConditionalDenoiser | None = None) -> ConditionalDenoiser:
    """Train a conditional denoiser; ``init`` continues from an existing model instead of a fresh one."""
    model = init.copy() if init is not None else init_denoiser(x.shape[1], num_classes, cfg,
                                                               rng_for(seed, "diffusion_init"))
    train_denoiser(model, x, labels, cfg, rng_for(seed, "diffusion_train"))
    return model


def pseudo_sample_table(model: ConditionalDenoiser, K: int, cfg: DiffusionConfig, seed: int, id_base: int
                        ) -> Table:
    """S2: K samples per class, uniform class prior."""
    x, y = sample_per_class(model, K, cfg.schedule(), cfg.guidance, stream(seed, "diffusion_sample"))
    return Table(id_base + np.arange(len(y)), y, ["pseudo"] * len(y), x)


def subset_per_class(s2: Table, K: int, num_classes: int) -> Table:
    """First K rows of every class, keeping order."""
    keep = np.zeros(len(s2), dtype=bool)
    for c in range(num_classes):
        keep[np.flatnonzero(s2.labels == c)[:K]] = True
    return Table(s2.ids[keep], s2.labels[keep], [p for p, k in zip(s2.provenance, keep) if k], s2.x[keep])


def stage2_train_and_sample(s1: Table, num_classes: int, cfg: PipelineConfig, K: int | None = None,
                            init: ConditionalDenoiser | None = None) -> tuple[ConditionalDenoiser, Table]:
    K = cfg.K if K is None else K
    if len(s1) == 0:
        raise ConfigError("S1 is empty")
    absent = sorted(set(range(num_classes)) - set(s1.labels.tolist()))
    if absent:
        log.warning("classes absent from S1 (sampled anyway): %s", absent)
    model = train_generator(s1.x, s1.labels, num_classes, cfg.diffusion, cfg.seed, init)
    id_base = int(s1.ids.max()) + 1 + cfg.heldout_per_class * num_classes
    return model, pseudo_sample_table(model, K, cfg.diffusion, cfg.seed, id_base)


def stage3_retrain(msn: MsnState, semi: SemiDataset, s2: Table, cfg: PipelineConfig) -> LinearProbe:
    """Fresh probe on S (ground-truth labels) plus S2 (generation labels), frozen encoder."""
    feats = extract_features(msn, semi.labeled_x())
    labels = semi.labeled_y
    if len(s2):
        feats = np.concatenate([feats, extract_features(msn, s2.x)])
        labels = np.concatenate([labels, s2.labels])
    return train_probe(feats, labels, semi.num_classes, cfg.probe)


@dataclass
class DptState:
    msn: MsnState
    probe1: LinearProbe
    s1: Table
    denoiser: ConditionalDenoiser
    s2: Table
    probe3: LinearProbe
    history: list[dict] = field(default_factory=list)


def stage4_refine(state: DptState, semi: SemiDataset, cfg: PipelineConfig, rounds: int, K: int | None = None
                  ) -> DptState:
    """Relabel X with the latest probe, retrain the generator, resample S2, retrain the probe.

    Retraining reuses the stage-2 random streams, so a round differs from stage 2 only through
    the labels (and the starting weights when ``cfg.refine_finetune`` is set).
    """
    K = cfg.K if K is None else K
    for _ in range(rounds):
        s1 = pseudo_label_table(semi, state.msn, state.probe3)
        init = state.denoiser if cfg.refine_finetune else None
        denoiser, s2 = stage2_train_and_sample(s1, semi.num_classes, cfg, K=K, init=init)
        probe = stage3_retrain(state.msn, semi, s2, cfg)
        state = DptState(state.msn, state.probe1, s1, denoiser, s2, probe,
                         state.history + [{"round": len(state.history) + 1}])
    return state
