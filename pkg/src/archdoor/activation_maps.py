"""Draw the intermediate maps of a trigger detector.

`ActivationPanel` lays out one image per detector stage: the input, the
per-pixel responses, the pooled maps and the single-channel detector map.
Multi-channel stages show their channel maximum.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import logging
from pathlib import Path
from typing import Union

import matplotlib as mpl
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.axes import Axes

from archdoor.miscellaneous import atomic_write

logger = logging.getLogger(__name__)


class ActivationPanel:
    """Store the maps to draw and the figure settings.

    Attributes
    ----------
    stages : dict[str, np.ndarray]
        Stage name to a (C, H, W) map of a single example, in drawing order.
    cfg : DetectorConfig
        Detector constants, shown in the title.
    color_map : str
        Matplotlib colormap used for the activation maps (default: `magma`).
    panel_size : float
        Width and height of each panel in inches (default: 2.4).
    dpi : float
        Resolution of the saved figure in dots per inch (default: 150.0).
    """

    def __init__(
        self,
        stages: dict,
        cfg,
        color_map: str = "magma",
        panel_size: float = 2.4,
        dpi: float = 150.0,
    ):
        self.stages = stages
        self.cfg = cfg
        self.color_map = color_map
        self.panel_size = panel_size
        self.dpi = dpi

    @staticmethod
    def as_picture(image: np.ndarray) -> np.ndarray:
        """(3, H, W) in [-1, 1] to (H, W, 3) in [0, 1]."""
        return np.clip((np.moveaxis(image, 0, -1) + 1.0) / 2.0, 0.0, 1.0)

    def draw_stage(self, ax: Axes, name: str, values: np.ndarray) -> None:
        ax.set_axis_off()
        if name == "input" and values.shape[0] == 3:
            ax.imshow(self.as_picture(values), interpolation="nearest")
            ax.set_title("input", fontsize=9)
            return
        collapsed = values.max(axis=0)
        shown = ax.imshow(collapsed, cmap=self.color_map, interpolation="nearest")
        ax.set_title(f"{name}\nmax {collapsed.max():.3g}", fontsize=9)
        plt.colorbar(shown, ax=ax, fraction=0.046, pad=0.04)

    def make_figure(self):
        """Make figure with matplotlib."""
        mpl.rcParams["toolbar"] = "None"
        count = len(self.stages)
        fig, axes = plt.subplots(
            1,
            count,
            figsize=(self.panel_size * count, self.panel_size + 0.6),
            layout="constrained",
            squeeze=False,
        )
        for ax, (name, values) in zip(axes[0], self.stages.items()):
            self.draw_stage(ax, name, np.asarray(values))
        fig.suptitle(
            f"{self.cfg.mode} detector (alpha={self.cfg.alpha}, beta={self.cfg.beta}, "
            f"delta={self.cfg.delta}, window={self.cfg.window})",
            fontsize=10,
        )
        return fig

    def save(self, path: Union[str, Path]) -> Path:
        """Render and save; the format follows the file suffix."""
        path = Path(path)
        fig = self.make_figure()
        try:
            with atomic_write(path, "wb") as stream:
                fig.savefig(stream, format=path.suffix.lstrip(".") or "png", dpi=self.dpi)
        finally:
            plt.close(fig)
        logger.info("Wrote activation maps to %s", path)
        return path
