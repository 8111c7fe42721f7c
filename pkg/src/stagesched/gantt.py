"""Per-GPU Gantt charts as standalone SVG."""
from __future__ import annotations

import colorsys
import hashlib
from typing import Iterable, List, Optional, Sequence
from xml.sax.saxutils import escape

from .runtime import GpuInterval

ROW_H = 26
LEFT = 60
WIDTH = 900
TOP = 30


def _color(node: str) -> str:
    hue = int(hashlib.blake2b(node.encode(), digest_size=2).hexdigest(), 16) / 65535.0
    r, g, b = colorsys.hls_to_rgb(hue, 0.6, 0.55)
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


def plan_intervals(plan) -> List[GpuInterval]:
    """Occupancy implied by a plan's recorded placements."""
    out = []
    for s in plan.stages:
        for node, reps in s.placement.items():
            for gpus in reps:
                for g in gpus:
                    out.append(GpuInterval(g, s.start, s.end, node, "run"))
    return out


def render_svg(intervals: Iterable[GpuInterval], num_gpus: int, total: float,
               loads: Sequence[GpuInterval] = (), boundaries: Sequence[float] = (),
               title: str = "") -> str:
    total = max(total, 1e-9)
    scale = (WIDTH - LEFT - 10) / total
    height = TOP + num_gpus * ROW_H + 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<text x="{LEFT}" y="18" font-size="13">{escape(title)}</text>']
    for g in range(num_gpus):
        y = TOP + g * ROW_H
        parts.append(f'<text x="8" y="{y + ROW_H * 0.65:.1f}">GPU {g}</text>')
        parts.append(f'<rect x="{LEFT}" y="{y}" width="{total * scale:.2f}" height="{ROW_H - 4}" '
                     f'fill="#f2f2f2"/>')
    for iv in intervals:
        x, w = LEFT + iv.start * scale, max(0.5, (iv.end - iv.start) * scale)
        y = TOP + iv.gpu * ROW_H
        parts.append(f'<rect x="{x:.2f}" y="{y}" width="{w:.2f}" height="{ROW_H - 4}" fill="{_color(iv.node)}" '
                     f'stroke="#333" stroke-width="0.5"><title>{escape(iv.node)} '
                     f'{iv.start:.3f}-{iv.end:.3f}s</title></rect>')
        if w > 7 * len(iv.node):
            parts.append(f'<text x="{x + 3:.2f}" y="{y + ROW_H * 0.6:.1f}">{escape(iv.node)}</text>')
    for iv in loads:
        x, w = LEFT + iv.start * scale, max(0.5, (iv.end - iv.start) * scale)
        y = TOP + iv.gpu * ROW_H
        parts.append(f'<rect x="{x:.2f}" y="{y + ROW_H - 9}" width="{w:.2f}" height="4" fill="#222">'
                     f'<title>loading {escape(iv.node)}</title></rect>')
    for t in boundaries:
        x = LEFT + t * scale
        parts.append(f'<line x1="{x:.2f}" y1="{TOP - 4}" x2="{x:.2f}" y2="{TOP + num_gpus * ROW_H}" '
                     f'stroke="#c00" stroke-dasharray="3,3"/>')
    y = TOP + num_gpus * ROW_H + 16
    parts.append(f'<text x="{LEFT}" y="{y}">0 s</text>')
    parts.append(f'<text x="{WIDTH - 10}" y="{y}" text-anchor="end">{total:.2f} s</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def trace_svg(trace, title: str = "") -> str:
    loads = [b for b in trace.busy if b.kind == "load"]
    bounds = sorted({s["start"] for s in trace.segments})
    return render_svg(trace.occupancy, trace.num_gpus, trace.total_time, loads, bounds, title)


def plan_svg(plan, num_gpus: int, title: Optional[str] = None) -> str:
    bounds = [s.start for s in plan.stages]
    return render_svg(plan_intervals(plan), num_gpus, plan.total_latency, (), bounds,
                      title if title is not None else f"{plan.algorithm} plan")
