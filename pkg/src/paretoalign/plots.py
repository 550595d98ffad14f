"""Minimal static SVG rendering of the per-hypothesis alignment plots:
aggregated group points plus the fitted regression curve. Deterministic
output bytes for identical inputs."""

from __future__ import annotations

_W, _H = 480, 360
_ML, _MR, _MT, _MB = 60, 20, 30, 50
_COLORS = ["#d62728", "#ff7f0e", "#2ca02c", "#1f77b4", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f"]


def _scale(v, lo, hi, out_lo, out_hi):
    if hi <= lo:
        return 0.5 * (out_lo + out_hi)
    return out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)


def render_scatter_svg(title: str, x_label: str, y_label: str,
                       points: list[tuple[float, float, int]],
                       curve: list[tuple[float, float]]) -> str:
    """Scatter of (x, y, group) points with an overlaid fitted curve."""
    xs = [p[0] for p in points] + [c[0] for c in curve]
    ys = [p[1] for p in points] + [c[1] for c in curve]
    ys = [y for y in ys if y == y]  # drop NaNs
    if not xs or not ys:
        raise ValueError("nothing to plot")
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    pad_x = 0.05 * (x_hi - x_lo or 1.0)
    pad_y = 0.1 * (y_hi - y_lo or max(abs(y_hi), 1e-6))
    x_lo, x_hi = x_lo - pad_x, x_hi + pad_x
    y_lo, y_hi = y_lo - pad_y, y_hi + pad_y

    def px(v):
        return _scale(v, x_lo, x_hi, _ML, _W - _MR)

    def py(v):
        return _scale(v, y_lo, y_hi, _H - _MB, _MT)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>',
        f'<text x="{(_ML + _W - _MR) / 2:.1f}" y="{_H - 12}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{x_label}</text>',
        f'<text x="16" y="{(_MT + _H - _MB) / 2:.1f}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {(_MT + _H - _MB) / 2:.1f})">'
        f'{y_label}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<text x="{px(xv):.1f}" y="{_H - _MB + 16}" text-anchor="middle" '
                     f'font-size="10" font-family="sans-serif">{xv:.3g}</text>')
        parts.append(f'<text x="{_ML - 6}" y="{py(yv) + 3:.1f}" text-anchor="end" '
                     f'font-size="10" font-family="sans-serif">{yv:.3g}</text>')
    if curve:
        path = " ".join(f"{'M' if i == 0 else 'L'}{px(cx):.2f},{py(cy):.2f}"
                        for i, (cx, cy) in enumerate(curve))
        parts.append(f'<path d="{path}" fill="none" stroke="black" stroke-width="1.5"/>')
    for x, y, group in points:
        if y != y:
            continue
        color = _COLORS[group % len(_COLORS)]
        parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="5" fill="{color}" '
                     f'fill-opacity="0.85" stroke="black" stroke-width="0.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
