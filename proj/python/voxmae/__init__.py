"""Volumetric masked-autoencoder pipeline: Python access to the C++ core."""

from ._core import (
    aggregate_seeds,
    auprc,
    auroc,
    binary_entropy,
    bonferroni,
    cli,
    clip_normalize,
    count_parameters,
    energy_ledger,
    patchify,
    random_mask,
    read_volume,
    resample,
    roundtrip_patches,
    synthetic,
    t_test,
    write_volume,
)

__all__ = [
    "aggregate_seeds",
    "auprc",
    "auroc",
    "binary_entropy",
    "bonferroni",
    "cli",
    "clip_normalize",
    "count_parameters",
    "energy_ledger",
    "patchify",
    "random_mask",
    "read_volume",
    "resample",
    "roundtrip_patches",
    "synthetic",
    "t_test",
    "write_volume",
]
