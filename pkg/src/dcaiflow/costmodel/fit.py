from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dcaiflow.costmodel.model import LinkModel


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class LinkFit:
    link: LinkModel
    residuals: tuple[float, ...]
    rms: float


def fit_link_model(
    observations: Sequence[tuple[int, int, float]],
    *,
    fit_per_file: bool = False,
) -> LinkFit:
    """Least-squares fit of ``seconds = bytes / v + S (+ files * per_file)``.

    *observations* are ``(bytes, file_count, measured_seconds)`` triples. By
    default the file term is folded into the startup constant ``S``; with
    *fit_per_file* it is estimated separately, which needs at least two
    distinct file counts.
    """
    if len(observations) < 3:
        raise FitError(f"need at least 3 observations, got {len(observations)}")
    obs = np.asarray(observations, dtype=float)
    x, files, t = obs[:, 0], obs[:, 1], obs[:, 2]
    if np.unique(x).size < 2:
        raise FitError("degenerate design: all byte counts are equal")
    if fit_per_file and np.unique(files).size < 2:
        raise FitError("degenerate design: per-file term needs distinct file counts")

    # Columns are rescaled so bytes (~1e9) and the constant (~1) are conditioned alike.
    scale = float(np.max(np.abs(x))) or 1.0
    cols = [x / scale, np.ones_like(x)]
    if fit_per_file:
        fscale = float(np.max(files)) or 1.0
        cols.append(files / fscale)
    design = np.column_stack(cols)
    coef, _, rank, _ = np.linalg.lstsq(design, t, rcond=None)
    if rank < design.shape[1]:
        raise FitError("degenerate design: observations do not determine the model")

    inv_rate = coef[0] / scale
    if inv_rate <= 0:
        raise FitError(f"fitted rate is not positive (1/v = {inv_rate:g})")
    startup = max(float(coef[1]), 0.0)
    per_file = max(float(coef[2] / fscale), 0.0) if fit_per_file else 0.0

    residuals = t - design @ coef
    link = LinkModel(rate_v=float(1.0 / inv_rate), startup_s=startup, per_file_overhead=per_file)
    return LinkFit(link, tuple(float(r) for r in residuals), float(np.sqrt(np.mean(residuals**2))))
