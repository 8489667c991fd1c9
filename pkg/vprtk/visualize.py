"""
Channel-mean heatmaps of backbone feature maps.
"""
import os
from typing import Union

import numpy as np
import pandas as pd
import torch
from matplotlib import pyplot as plt
from PIL import Image

from vprtk.utils import get_logger

logger = get_logger(__name__)


def channel_mean_map(fm: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """
    Per-location channel means of an `(h, w, C)` map, min-max normalized to `[0, 1]`. A constant map
    becomes `0.5` everywhere.
    """
    if isinstance(fm, torch.Tensor):
        fm = fm.detach().cpu().numpy()
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 3:
        raise ValueError(f"Expected an (h, w, C) feature map, got shape {fm.shape}.")
    means = fm.mean(axis=-1)
    low, high = means.min(), means.max()
    if high == low:
        return np.full_like(means, 0.5)
    return (means - low) / (high - low)


def emit_heatmap(
    fm: Union[np.ndarray, torch.Tensor],
    path_prefix: os.PathLike,
    colormap: str = None,
) -> np.ndarray:
    """
    Writes `<prefix>.csv` (headerless `h x w` values) and `<prefix>.pgm` (8-bit grayscale) and, given a
    matplotlib `colormap`, a colour `<prefix>.png`.

    ## Args:
    * `fm` (`np.ndarray` or `torch.Tensor`): `(h, w, C)` feature map.
    * `path_prefix` (`os.PathLike`): Output path without extension.
    * `colormap` (`str`, optional): Colormap of the PNG, e.g. `"jet"`. No PNG when `None`.

    ## Returns:
    * `np.ndarray`: The normalized `(h, w)` heatmap.
    """
    heatmap = channel_mean_map(fm)
    path_prefix = str(path_prefix)
    os.makedirs(os.path.dirname(os.path.abspath(path_prefix)), exist_ok=True)
    pd.DataFrame(heatmap).to_csv(
        f"{path_prefix}.csv", header=False, index=False, float_format="%.6f"
    )
    Image.fromarray(np.round(heatmap * 255.0).astype(np.uint8)).save(
        f"{path_prefix}.pgm", format="PPM"
    )
    if colormap is not None:
        plt.imsave(f"{path_prefix}.png", heatmap, cmap=colormap, vmin=0.0, vmax=1.0)
    logger.info(f"Heatmap {heatmap.shape[0]}x{heatmap.shape[1]} written to '{path_prefix}.*'.")
    return heatmap
