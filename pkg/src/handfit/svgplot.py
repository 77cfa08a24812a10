"""Minimal deterministic SVG line plots (no toolkit, byte-stable output)."""

from __future__ import annotations

from pathlib import Path

WIDTH, HEIGHT = 640, 480
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 55
COLORS = ("#1f6fb2", "#d1495b", "#3a8f5d", "#9a6fb0", "#c98a2b", "#5b5b5b")


def _fmt(x):
    return f"{x:.6g}"


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    raw = span / max(n - 1, 1)
    mag = 10.0 ** int(f"{raw:e}".split("e")[1])
    for step in (1, 2, 2.5, 5, 10):
        if raw <= step * mag:
            raw = step * mag
            break
    first = raw * (int(lo / raw) if lo >= 0 else int(lo / raw) - 1)
    ticks = []
    t = first
    while t <= hi + 1e-12 * span:
        if t >= lo - 1e-12 * span:
            ticks.append(t)
        t += raw
    return ticks


def line_plot(path, series, *, title="", xlabel="", ylabel=""):
    """Write a line plot to `path`.

    series: list of dicts with keys label, x, y and optional yerr
    (symmetric error bars). Output is byte-identical for identical input.
    """
    xs = [float(v) for s in series for v in s["x"]]
    ys = [float(v) for s in series for v in s["y"]]
    for s in series:
        if s.get("yerr") is not None:
            ys.extend(float(v) + float(e) for v, e in zip(s["y"], s["yerr"]))
            ys.extend(float(v) - float(e) for v, e in zip(s["y"], s["yerr"]))
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y_lo, y_hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    y_pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + plot_w * (x - x_lo) / (x_hi - x_lo)

    def py(y):
        return MARGIN_T + plot_h * (1.0 - (y - y_lo) / (y_hi - y_lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
           f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    out.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" '
               f'height="{plot_h}" fill="none" stroke="#333"/>')

    for t in _ticks(x_lo, x_hi):
        x = px(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{MARGIN_T + plot_h}" x2="{_fmt(x)}" '
                   f'y2="{MARGIN_T + plot_h + 5}" stroke="#333"/>')
        out.append(f'<text x="{_fmt(x)}" y="{MARGIN_T + plot_h + 20}" '
                   f'font-size="12" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        y = py(t)
        out.append(f'<line x1="{MARGIN_L - 5}" y1="{_fmt(y)}" x2="{MARGIN_L}" '
                   f'y2="{_fmt(y)}" stroke="#333"/>')
        out.append(f'<text x="{MARGIN_L - 9}" y="{_fmt(y + 4)}" font-size="12" '
                   f'text-anchor="end">{_fmt(t)}</text>')

    if title:
        out.append(f'<text x="{WIDTH / 2:.6g}" y="24" font-size="15" '
                   f'text-anchor="middle">{title}</text>')
    if xlabel:
        out.append(f'<text x="{MARGIN_L + plot_w / 2:.6g}" y="{HEIGHT - 14}" '
                   f'font-size="13" text-anchor="middle">{xlabel}</text>')
    if ylabel:
        cx, cy = 18, MARGIN_T + plot_h / 2
        out.append(f'<text x="{_fmt(cx)}" y="{_fmt(cy)}" font-size="13" '
                   f'text-anchor="middle" transform="rotate(-90 {_fmt(cx)} '
                   f'{_fmt(cy)})">{ylabel}</text>')

    for i, s in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{_fmt(px(float(x)))},{_fmt(py(float(y)))}"
                       for x, y in zip(s["x"], s["y"]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="2"/>')
        for x, y in zip(s["x"], s["y"]):
            out.append(f'<circle cx="{_fmt(px(float(x)))}" cy="{_fmt(py(float(y)))}" '
                       f'r="3" fill="{color}"/>')
        if s.get("yerr") is not None:
            for x, y, e in zip(s["x"], s["y"], s["yerr"]):
                x_p = px(float(x))
                out.append(f'<line x1="{_fmt(x_p)}" y1="{_fmt(py(float(y) - float(e)))}" '
                           f'x2="{_fmt(x_p)}" y2="{_fmt(py(float(y) + float(e)))}" '
                           f'stroke="{color}" stroke-width="1"/>')
        label_y = MARGIN_T + 16 + 16 * i
        out.append(f'<line x1="{MARGIN_L + plot_w - 150}" y1="{_fmt(label_y - 4)}" '
                   f'x2="{MARGIN_L + plot_w - 130}" y2="{_fmt(label_y - 4)}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{MARGIN_L + plot_w - 124}" y="{_fmt(label_y)}" '
                   f'font-size="12">{s["label"]}</text>')

    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
