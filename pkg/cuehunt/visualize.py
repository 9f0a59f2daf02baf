"""PNG renderings of attention and score maps, and plotly HTML reports."""

import logging
import os
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import plotly.colors as pcolors
import plotly.graph_objects as go
import plotly.io as pio
from PIL import Image, ImageDraw

from .model import ArchitectureConfig
from .scenes import Episode

logger = logging.getLogger(__name__)

KEYPOINT_RGB = (0, 200, 255)
CROSSHAIR_RGB = (255, 0, 255)
LABEL_RGB = (0, 160, 0)
OVERLAY_OPACITY = 0.6
GRID_SCALE = 4


def _heat_lut() -> np.ndarray:
    """256×3 uint8 lookup table interpolated from plotly's Inferno scale."""
    stops = np.array([pcolors.hex_to_rgb(c) for c in pcolors.sequential.Inferno], dtype=float)
    anchors = np.linspace(0.0, 1.0, len(stops))
    levels = np.linspace(0.0, 1.0, 256)
    return np.stack([np.interp(levels, anchors, stops[:, ch]) for ch in range(3)], axis=1).round().astype(np.uint8)


HEAT_LUT = _heat_lut()


def colorize(values: np.ndarray) -> np.ndarray:
    peak = float(values.max())
    scaled = values / peak if peak > 0 else np.zeros_like(values)
    return HEAT_LUT[np.clip(np.rint(scaled * 255), 0, 255).astype(np.int64)]


def attention_overlay_grid(attention: np.ndarray, config: ArchitectureConfig, height: int, width: int) -> np.ndarray:
    """Place α (h×w on the feature grid) at the receptive-field centres of an H×W image."""
    attention = np.asarray(attention, dtype=np.float64).reshape(attention.shape[-2:])
    offset = (config.receptive_field - 1) // 2
    grid = np.zeros((height, width))
    h, w = attention.shape
    grid[offset:offset + h, offset:offset + w] = attention
    return grid


def blend_heat(image: np.ndarray, grid: np.ndarray, opacity: float = OVERLAY_OPACITY) -> np.ndarray:
    peak = float(grid.max())
    weight = (grid / peak if peak > 0 else grid)[..., None] * opacity
    out = image.astype(np.float64) * (1.0 - weight) + colorize(grid).astype(np.float64) * weight
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def tile_maps(maps: np.ndarray, columns: int = 4, scale: int = GRID_SCALE, pad: int = 1) -> np.ndarray:
    """K×h×w maps, each normalized to its own peak, tiled into one grayscale image."""
    maps = np.asarray(maps, dtype=np.float64)
    k, h, w = maps.shape
    columns = min(columns, k)
    rows = -(-k // columns)
    sheet = np.full((rows * (h + pad) - pad, columns * (w + pad) - pad), 255.0)
    for idx in range(k):
        r, c = divmod(idx, columns)
        m = maps[idx] - maps[idx].min()
        peak = m.max()
        sheet[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = 255.0 * (m / peak if peak > 0 else m)
    sheet = np.rint(sheet).astype(np.uint8)
    return np.kron(sheet, np.ones((scale, scale), dtype=np.uint8))


def _crosshair(draw, row, col, size, rgb):
    draw.line([(col - size, row), (col + size, row)], fill=rgb)
    draw.line([(col, row - size), (col, row + size)], fill=rgb)


def render_episode(episode: Episode, predictor, out_dir) -> Dict[str, str]:
    """Write adapt_attention.png, target_prediction.png, alpha.png and phi.png.

    ``predictor`` must expose ``trace(episode)`` and ``arch``. Identical
    inputs give byte-identical files.
    """
    os.makedirs(out_dir, exist_ok=True)
    trace = predictor.trace(episode)
    config = predictor.arch
    height, width = episode.adapt.shape[:2]
    offset = (config.receptive_field - 1) // 2
    paths = {}

    attention = trace.attention.data[0]
    overlay = blend_heat(episode.adapt, attention_overlay_grid(attention, config, height, width))
    paths["adapt_attention"] = os.path.join(out_dir, "adapt_attention.png")
    Image.fromarray(overlay, "RGB").save(paths["adapt_attention"], format="PNG")

    target = Image.fromarray(np.asarray(episode.target, dtype=np.uint8), "RGB")
    draw = ImageDraw.Draw(target)
    fh, fw = trace.score_maps.shape[1:]
    for kx, ky in trace.keypoints.data:
        row, col = offset + kx * (fh - 1), offset + ky * (fw - 1)
        draw.ellipse([col - 1, row - 1, col + 1, row + 1], fill=KEYPOINT_RGB)
    lx, ly = episode.label
    _crosshair(draw, lx * (height - 1), ly * (width - 1), 2, LABEL_RGB)
    px, py = trace.point
    _crosshair(draw, px * (height - 1), py * (width - 1), 4, CROSSHAIR_RGB)
    paths["target_prediction"] = os.path.join(out_dir, "target_prediction.png")
    target.save(paths["target_prediction"], format="PNG")

    paths["alpha"] = os.path.join(out_dir, "alpha.png")
    Image.fromarray(tile_maps(trace.attention.data, columns=1), "L").save(paths["alpha"], format="PNG")
    paths["phi"] = os.path.join(out_dir, "phi.png")
    Image.fromarray(tile_maps(trace.score_maps.data), "L").save(paths["phi"], format="PNG")

    logger.debug(f"Rendered {episode.episode_id} to {out_dir}")
    return paths


# ---------------------------------------------------------------- HTML

FOOTNOTE = (
    "<div style='margin: 30px 10px 20px 10px; padding-top: 10px; border-top: 1px solid #ccc; "
    "font-family: Arial, sans-serif; font-size: 0.9em; color: #666; font-style: italic;'>"
    "Generated by cuehunt"
    "</div>"
)


def write_html_report(figs: List[go.Figure], title: str, intro: str, output_html, tables: Optional[List[pd.DataFrame]] = None):
    """Stack plotly figures (and optional tables) into one standalone HTML page."""
    os.makedirs(os.path.dirname(os.path.abspath(output_html)), exist_ok=True)
    with open(output_html, "w", encoding="utf-8") as f:
        f.write(f"<html><head><meta charset='utf-8'><title>{title}</title></head><body>\n")
        f.write(f"<h1 style='font-family: Arial, sans-serif; text-align: left;'>{title}</h1>\n")
        f.write(f"<p style='font-family: Arial, sans-serif; font-size: 14px;'>{intro}</p>\n")
        for table in tables or []:
            f.write(table.to_html(index=False, float_format=lambda v: f"{v:.5g}"))
            f.write("<br>")
        if not figs:
            f.write("<p>No data available for visualization.</p>")
        for i, fig in enumerate(figs):
            f.write(pio.to_html(fig, include_plotlyjs="cdn" if i == 0 else False, full_html=False))
            f.write("<br>")
        f.write(FOOTNOTE)
        f.write("</body></html>")
    return output_html


def training_figures(log: pd.DataFrame) -> List[go.Figure]:
    if log.empty:
        return []
    errors = go.Figure()
    errors.add_trace(go.Scatter(x=log["step"], y=log["loss"], mode="lines+markers", name="training loss"))
    errors.add_trace(go.Scatter(x=log["step"], y=log["val_mse"], mode="lines+markers", name="validation mse"))
    errors.update_layout(title="Loss and validation error", xaxis_title="Step", yaxis_title="Mean squared error",
                         yaxis_type="log", hovermode="x unified", height=500)

    rates = go.Figure()
    for col, name in (("val_success_at_10", "success @ 10%"), ("val_success_at_15", "success @ 15%")):
        rates.add_trace(go.Scatter(x=log["step"], y=log[col], mode="lines+markers", name=name))
    rates.update_layout(title="Validation success rates", xaxis_title="Step", yaxis_title="Rate",
                        yaxis_range=[0, 1], hovermode="x unified", height=450)
    return [errors, rates]


def write_training_report(metric_log, output_html) -> str:
    """Render a line-delimited JSON metric log as an HTML page."""
    if not os.path.exists(metric_log):
        raise FileNotFoundError(f"Metric log not found at {metric_log}")
    log = pd.read_json(metric_log, lines=True) if os.path.getsize(metric_log) else pd.DataFrame()
    if not log.empty:
        log = log.sort_values("step").drop_duplicates("step", keep="last")
    write_html_report(
        training_figures(log),
        "cuehunt Training Report",
        "Training loss and validation metrics of the one-shot localizer, one point per evaluation interval.",
        output_html,
    )
    logger.info(f"Training report written to: {output_html}")
    return output_html
