"""Static SVG rendering of a Distortion-Distortion plot."""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from .evaluation import DDCurve, auddc, normalize_curve

WIDTH, HEIGHT = 480, 360
MARGIN = dict(left=60, right=20, top=30, bottom=50)
COLORS = dict(left="gray", top="orange", bottom="red", right="steelblue")


def _scales(curve: DDCurve):
    pts = curve.points
    xmax = 1.08 * max(curve.b_right, pts[:, 0].max(initial=0.0), 1e-12)
    ymax = 1.08 * max(curve.b_top, curve.b_bottom, pts[:, 1].max(initial=0.0), 1e-12)
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + pw * x / xmax

    def sy(y):
        return MARGIN["top"] + ph * (1.0 - y / ymax)

    return sx, sy


def _pts(seq) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in seq)


def render_svg(curve: DDCurve, title: str = "") -> str:
    """SVG text showing raw points, their interpolation, the boundary lines and the AUDDC area."""
    norm = normalize_curve(curve)
    area = 1.0 if norm.degenerate else auddc(norm.points)
    sx, sy = _scales(curve)
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(WIDTH), height=str(HEIGHT),
                     viewBox=f"0 0 {WIDTH} {HEIGHT}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT), fill="white")
    if title:
        ET.SubElement(svg, "text", x=str(WIDTH // 2), y="18", attrib={"text-anchor": "middle",
                      "font-size": "13"}).text = title

    # area under the normalized curve, mapped back into raw units
    span = curve.b_top - curve.b_bottom if not norm.degenerate else 0.0
    top = curve.b_top if not norm.degenerate else max(curve.b_top, curve.b_bottom)
    mapped = [(u * curve.b_right, curve.b_bottom + v * span) if span else (u * curve.b_right, top)
              for u, v in norm.points]
    base = min(curve.b_bottom, top)
    poly = [(sx(x), sy(y)) for x, y in mapped] + [(sx(curve.b_right), sy(base)), (sx(0), sy(base))]
    ET.SubElement(svg, "polygon", points=_pts(poly), fill="lightsteelblue", attrib={"fill-opacity": "0.6",
                  "class": "auddc-area"})

    x0, x1 = sx(0), sx(curve.b_right)
    lines = dict(left=(x0, sy(0), x0, sy(top)), top=(x0, sy(curve.b_top), x1, sy(curve.b_top)),
                 bottom=(x0, sy(curve.b_bottom), x1, sy(curve.b_bottom)),
                 right=(x1, sy(0), x1, sy(top)))
    for name, (a, b, c, d) in lines.items():
        ET.SubElement(svg, "line", x1=f"{a:.2f}", y1=f"{b:.2f}", x2=f"{c:.2f}", y2=f"{d:.2f}",
                      stroke=COLORS[name], attrib={"stroke-width": "1.5", "class": f"boundary-{name}"})

    raw = curve.points[np.lexsort((curve.points[:, 1], curve.points[:, 0]))]
    ET.SubElement(svg, "polyline", points=_pts((sx(x), sy(y)) for x, y in raw), fill="none",
                  stroke="black", attrib={"stroke-width": "1"})
    for x, y in raw:
        ET.SubElement(svg, "circle", cx=f"{sx(x):.2f}", cy=f"{sy(y):.2f}", r="2.5", fill="black")

    ET.SubElement(svg, "text", x=f"{x1 - 4:.2f}", y=f"{sy(top) - 6:.2f}",
                  attrib={"text-anchor": "end", "font-size": "14", "class": "auddc-label"}
                  ).text = f"AUDDC = {area:.2f}"
    ET.SubElement(svg, "text", x=str(WIDTH // 2), y=str(HEIGHT - 12),
                  attrib={"text-anchor": "middle", "font-size": "12"}).text = "input distortion (l2)"
    ET.SubElement(svg, "text", x="14", y=str(HEIGHT // 2), transform=f"rotate(-90 14 {HEIGHT // 2})",
                  attrib={"text-anchor": "middle", "font-size": "12"}).text = "distance to target (l2)"
    return ET.tostring(svg, encoding="unicode") + "\n"


def write_svg(path, curve: DDCurve, title: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_svg(curve, title))
