"""Pinned experiment designs used by the acceptance suite and scripts/.

Each scenario builds a synthetic bundle plus the matching encoder/training
configuration at desk scale.  Seeds and sizes are fixed so results are
bit-reproducible; the generators make every run's ground truth available
for oracle checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Bundle
from .encoder import EncoderConfig, EncoderModel
from .synth import GroundTruth, GroupSpec, SynthSpec, make_bundle
from .trainer import StageRole, TrainConfig, fit, greedy_soup, make_val_fn


@dataclass
class Scenario:
    name: str
    spec: SynthSpec
    encoder: dict
    train: TrainConfig
    ratio: tuple = (90, 6, 4)

    def build(self) -> tuple[Bundle, GroundTruth]:
        bundle = make_bundle(self.spec, ratio=self.ratio)
        return bundle, GroundTruth.from_dict(bundle.ground_truth)

    def model(self, bundle: Bundle, **overrides) -> EncoderModel:
        kwargs = dict(
            n_layers=bundle.store.n_layers,
            d_in=bundle.store.n_channels,
            n_voxels=bundle.voxels.n_voxels,
            grid=bundle.store.grid,
        )
        kwargs.update(self.encoder)
        kwargs.update(overrides)
        return EncoderModel(EncoderConfig(**kwargs))


def train_with_soup(model, bundle, config, role=None, use_soup=True):
    """Fit, then load the greedy-soup weights (falls back to best single)."""
    role = role or StageRole()
    result = fit(model, bundle, config, role)
    if use_soup and len(result.pool) > 1:
        values, score = greedy_soup(result.pool, make_val_fn(model, bundle, role))
        model.load_values(values)
        result.best_val_r = score
    return result


# ---------------------------------------------------------------------------
# TopyNeck recovery (retina-map + layer-selector ground-truth recovery)


def recovery_scenario(seed: int = 11) -> Scenario:
    """High-SNR brain with planted positions and layer preferences.

    200 one-hot voxels carry a single preferred layer each; 100 mixture
    voxels sit between adjacent depth anchors with a 50/50 preference.
    """
    return Scenario(
        name="recovery",
        spec=SynthSpec(
            n_images=2000, n_layers=4, n_channels=16, grid=8,
            groups=[
                GroupSpec("hi_onehot", 200, 4.0, "one_hot"),
                GroupSpec("hi_mixture", 100, 4.0, "mixture"),
            ],
            seed=seed, field_max_freq=1.1,
        ),
        encoder=dict(d_model=24, pe_freqs=6, hidden=128, jitter_sigma=0.02, init_seed=0),
        train=TrainConfig(batch=96, epoch_fraction=0.5, patience=20, max_epochs=200,
                          voxel_cap=512, seed=0),
    )


# ---------------------------------------------------------------------------
# Entropy-regularizer ablation (selector collapse without the regularizer)


def entropy_ablation_scenario(seed: int = 19) -> Scenario:
    """Collapse-prone set: strong one-hot majority, low-SNR mixture minority.

    Without the entropy term, the one-hot voxels' logit fields grow without
    bound and the shared selector MLP bridges over the weakly supervised
    mixture band; with the regularizer the mixture band stays soft.
    """
    return Scenario(
        name="entropy_ablation",
        spec=SynthSpec(
            n_images=500, n_layers=2, n_channels=8, grid=8,
            groups=[
                GroupSpec("onehot", 120, 4.0, "one_hot"),
                GroupSpec("mixture", 40, 0.25, "mixture"),
            ],
            seed=seed, field_max_freq=1.1, layer_corr=0.5,
        ),
        encoder=dict(d_model=12, pe_freqs=4, hidden=64, jitter_sigma=0.02, init_seed=0),
        train=TrainConfig(batch=64, epoch_fraction=1.0, patience=10_000, max_epochs=500,
                          voxel_cap=512, seed=0),
        ratio=(80, 12, 8),
    )


# ---------------------------------------------------------------------------
# TopyNeck ablations (FullTopyNeck vs FrozenRM / FrozenLS)


def ablation_scenario(position_mode: str, seed: int = 23) -> Scenario:
    """Retinotopic (spread positions) or center-only synthetic set."""
    return Scenario(
        name=f"ablation_{position_mode}",
        spec=SynthSpec(
            n_images=800, n_layers=3, n_channels=12, grid=8,
            groups=[GroupSpec("hi", 150, 4.0, "one_hot")],
            seed=seed, field_max_freq=1.1, position_mode=position_mode,
        ),
        encoder=dict(d_model=16, pe_freqs=4, hidden=64, jitter_sigma=0.02, init_seed=0),
        train=TrainConfig(batch=64, epoch_fraction=1.0, patience=10, max_epochs=80,
                          voxel_cap=512, seed=0),
        ratio=(80, 10, 10),
    )


# ---------------------------------------------------------------------------
# AFO recipe (3-ROI heterogeneous brain)


def afo_scenario(seed: int = 31) -> Scenario:
    """Three ROIs with distinct weight families and SNR levels.

    Heterogeneous SNR is what the staged recipe exploits: the low-SNR ROI's
    stage-1 model cannot learn a good trunk alone, while denoised teachers
    from the cleaner ROIs can carry that structure over in stage 2.
    """
    return Scenario(
        name="afo",
        spec=SynthSpec(
            n_images=700, n_layers=3, n_channels=12, grid=8,
            groups=[
                GroupSpec("roi_hi", 60, 2.0, "one_hot"),
                GroupSpec("roi_mid", 60, 0.8, "one_hot"),
                GroupSpec("roi_lo", 60, 0.35, "one_hot"),
            ],
            seed=seed, field_max_freq=1.1,
        ),
        encoder=dict(d_model=16, pe_freqs=4, hidden=64, jitter_sigma=0.02, init_seed=0),
        train=TrainConfig(batch=64, epoch_fraction=1.0, patience=8, max_epochs=70,
                          voxel_cap=512, soup_top_k=5, seed=0),
        ratio=(80, 12, 8),
    )


# ---------------------------------------------------------------------------
# Weight-family clustering (veROI recovery)


def weight_family_scenario(seed: int = 41) -> Scenario:
    """Three planted weight families at uniform high SNR for head clustering."""
    return Scenario(
        name="weight_families",
        spec=SynthSpec(
            n_images=500, n_layers=2, n_channels=12, grid=8,
            groups=[
                GroupSpec("fam_a", 50, 4.0, "one_hot"),
                GroupSpec("fam_b", 50, 4.0, "one_hot"),
                GroupSpec("fam_c", 50, 4.0, "one_hot"),
            ],
            seed=seed, field_max_freq=1.1, weight_spread=0.06,
        ),
        encoder=dict(d_model=16, pe_freqs=4, hidden=64, jitter_sigma=0.02, init_seed=0),
        train=TrainConfig(batch=64, epoch_fraction=1.0, patience=8, max_epochs=60,
                          voxel_cap=512, soup_top_k=5, seed=0),
        ratio=(80, 12, 8),
    )


# ---------------------------------------------------------------------------
# Decoding


def decode_scenario(snr: float, seed: int = 53) -> Scenario:
    """Retrieval test bed; the 70/10/20 split yields a 100-image candidate set."""
    return Scenario(
        name=f"decode_snr{snr}",
        spec=SynthSpec(
            n_images=500, n_layers=2, n_channels=10, grid=8,
            groups=[GroupSpec("g", 120, snr, "one_hot")],
            seed=seed, field_max_freq=1.1,
        ),
        encoder=dict(d_model=16, pe_freqs=4, hidden=64, jitter_sigma=0.02, init_seed=0),
        train=TrainConfig(batch=64, epoch_fraction=1.0, patience=8, max_epochs=70,
                          voxel_cap=512, soup_top_k=5, seed=0),
        ratio=(70, 10, 20),
    )
