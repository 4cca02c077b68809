"""Warp visualization: per-block reconstruction of the target from the exemplar."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import numerics as nm
from .attention import save_attention_map
from .blocks import DynastModel
from .data import ToySample
from .imageio import write_ppm
from .losses import warp_image, warp_matrix
from .numerics import Tensor


def warp_viz(model: DynastModel, sample: ToySample, out_dir,
             dump_attention: bool = True) -> list[Path]:
    """Emit each block's warped exemplar plus the final output image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = model.forward(Tensor(sample.s_tgt), Tensor(sample.s_ref), Tensor(sample.i_ref))
    i_ref = Tensor(sample.i_ref)

    written: list[Path] = []
    panels: list[tuple[str, np.ndarray]] = []
    for block in result.blocks:
        if block.attn is None:
            continue
        h, w = block.attn.candidates.ref_hw
        ref_r = nm.bilinear_resize(i_ref, h, w)
        img = warp_image(warp_matrix(block.attn), ref_r, block.attn)
        arr = np.clip(img.data, 0.0, 1.0)
        path = out / f"scale{block.scale}_block{block.index}.ppm"
        write_ppm(path, arr)
        written.append(path)
        if dump_attention:
            attn_path = out / f"scale{block.scale}_block{block.index}.dtnsr"
            save_attention_map(attn_path, block.attn)
            written.append(attn_path)
        panels.append((f"scale{block.scale} block{block.index}", arr))

    final = np.clip(result.image.data, 0.0, 1.0)
    final_path = out / "final.ppm"
    write_ppm(final_path, final)
    written.append(final_path)
    panels.append(("output", final))
    panels.append(("exemplar", sample.i_ref))
    panels.append(("target", sample.i_tgt))

    _render_overview(panels, out / "warp_overview.png")
    written.append(out / "warp_overview.png")
    return written


def _render_overview(panels, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = min(4, len(panels))
    rows = (len(panels) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.8 * rows))
    axes = np.atleast_1d(axes).ravel()
    for ax in axes[len(panels):]:
        ax.axis("off")
    for ax, (title, arr) in zip(axes, panels):
        ax.imshow(arr.transpose(1, 2, 0), interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
