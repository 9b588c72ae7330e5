"""Minimal self-contained SVG scatter/line figures (no timestamps, byte-stable)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

W, H = 480, 400
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 40, 50


def diverging(t: float) -> str:
    """Blue (-1) to grey (0) to red (+1)."""
    t = max(-1.0, min(1.0, t))
    grey = (170, 170, 170)
    end = (214, 39, 40) if t > 0 else (31, 119, 180)
    a = abs(t)
    r, g, b = (round(grey[i] + (end[i] - grey[i]) * a) for i in range(3))
    return f"#{r:02x}{g:02x}{b:02x}"


class Figure:
    def __init__(self, title: str = "", xlabel: str = "", ylabel: str = ""):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.xlim = (0.0, 1.0)
        self.ylim = (0.0, 1.0)
        self._items: list[str] = []

    def set_limits(self, xlim, ylim):
        self.xlim = (float(xlim[0]), float(xlim[1]) if xlim[1] > xlim[0] else float(xlim[0]) + 1.0)
        self.ylim = (float(ylim[0]), float(ylim[1]) if ylim[1] > ylim[0] else float(ylim[0]) + 1.0)

    def _px(self, x, y):
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        px = LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT)
        py = H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM)
        return f"{px:.2f}", f"{py:.2f}"

    def point(self, x, y, color="#1f77b4", r=3.0, ring=None, title=None):
        cx, cy = self._px(x, y)
        tip = f"<title>{escape(title)}</title>" if title else ""
        self._items.append(f'<circle cx="{cx}" cy="{cy}" r="{r}" fill="{color}" fill-opacity="0.8">{tip}</circle>')
        if ring:
            self._items.append(f'<circle cx="{cx}" cy="{cy}" r="{r + 3}" fill="none" stroke="{ring}" stroke-width="1.5"/>')

    def line(self, pts, color="#000000", width=1.5, dash=False):
        if not pts:
            return
        d = " ".join(",".join(self._px(x, y)) for x, y in pts)
        extra = ' stroke-dasharray="4,3"' if dash else ""
        self._items.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>')

    def star(self, x, y, color="#d62728", size=9.0):
        cx, cy = (float(v) for v in self._px(x, y))
        pts = []
        for i in range(10):
            rad = size if i % 2 == 0 else size * 0.45
            ang = -math.pi / 2 + i * math.pi / 5
            pts.append(f"{cx + rad * math.cos(ang):.2f},{cy + rad * math.sin(ang):.2f}")
        self._items.append(f'<polygon points="{" ".join(pts)}" fill="{color}"/>')

    def legend(self, entries):
        for i, (label, color) in enumerate(entries):
            y = TOP + 12 + 16 * i
            self._items.append(f'<rect x="{W - RIGHT - 110}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
            self._items.append(f'<text x="{W - RIGHT - 95}" y="{y + 1}" font-size="11">{escape(label)}</text>')

    def render(self) -> str:
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        ax = [
            f'<rect x="{LEFT}" y="{TOP}" width="{W - LEFT - RIGHT}" height="{H - TOP - BOTTOM}" fill="none" stroke="#333333"/>',
            f'<text x="{W / 2:.0f}" y="{TOP - 15}" text-anchor="middle" font-size="13">{escape(self.title)}</text>',
            f'<text x="{W / 2:.0f}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(self.xlabel)}</text>',
            f'<text x="15" y="{H / 2:.0f}" text-anchor="middle" font-size="12" transform="rotate(-90 15 {H / 2:.0f})">{escape(self.ylabel)}</text>',
        ]
        for i in range(5):
            fx = x0 + (x1 - x0) * i / 4
            fy = y0 + (y1 - y0) * i / 4
            px, _ = self._px(fx, y0)
            _, py = self._px(x0, fy)
            ax.append(f'<text x="{px}" y="{H - BOTTOM + 15}" text-anchor="middle" font-size="10">{fx:.3g}</text>')
            ax.append(f'<text x="{LEFT - 5}" y="{py}" text-anchor="end" font-size="10">{fy:.3g}</text>')
        body = "\n".join(ax + ['<g class="plot-area">'] + self._items + ["</g>"])
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
                f'font-family="sans-serif">\n<rect width="{W}" height="{H}" fill="#ffffff"/>\n{body}\n</svg>\n')
