"""SVG ribbon plots of label tracks (ground truth drawn above prediction)."""

from xml.sax.saxutils import escape

from .errors import ContractError

MASKED = "-"
MASK_COLOR = "#bdbdbd"
PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]


def read_track(path):
    """One label name per line; ``-`` marks an unlabeled frame."""
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def class_colors(names):
    colors = {}
    for k, name in enumerate(sorted(set(names) - {MASKED})):
        if k < len(PALETTE):
            colors[name] = PALETTE[k]
        else:
            colors[name] = f"hsl({(k * 137) % 360}, 65%, 50%)"
    return colors


def _runs(track):
    start = 0
    for t in range(1, len(track) + 1):
        if t == len(track) or track[t] != track[start]:
            yield track[start], start, t
            start = t


def ribbon_svg(truth, pred, width=900, band=28, title=None):
    if len(truth) != len(pred):
        raise ContractError(f"track lengths differ: truth {len(truth)}, prediction {len(pred)}")
    if not truth:
        raise ContractError("cannot render empty tracks")
    colors = class_colors(list(truth) + list(pred))
    left, top, gap = 90, 30 if title else 10, 8
    scale = width / len(truth)
    legend_y = top + 2 * band + gap + 24
    height = legend_y + 20 * ((len(colors) + 4) // 5) + 10
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 20}" height="{height}" '
        f'font-family="sans-serif" font-size="12">',
    ]
    if title:
        out.append(f'<text x="{left}" y="18">{escape(title)}</text>')
    for row, (label, track) in enumerate((("truth", truth), ("prediction", pred))):
        y = top + row * (band + gap)
        out.append(f'<text x="4" y="{y + band / 2 + 4:.1f}">{label}</text>')
        for name, a, b in _runs(track):
            fill = MASK_COLOR if name == MASKED else colors[name]
            out.append(f'<rect x="{left + a * scale:.3f}" y="{y}" width="{(b - a) * scale:.3f}" '
                       f'height="{band}" fill="{fill}"><title>{escape(name)} [{a}, {b})</title></rect>')
    for k, (name, color) in enumerate(list(colors.items()) + [("unlabeled", MASK_COLOR)]):
        x = left + (k % 5) * 150
        y = legend_y + (k // 5) * 20
        out.append(f'<rect x="{x}" y="{y - 10}" width="12" height="12" fill="{color}"/>')
        out.append(f'<text x="{x + 18}" y="{y}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_files(pred_path, truth_path, out_path, title=None):
    svg = ribbon_svg(read_track(truth_path), read_track(pred_path), title=title)
    with open(out_path, "w") as fh:
        fh.write(svg)
