"""Static SVG rendering of step traces: position over time, one panel per lane."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .experiment import iter_trace

PANEL_W, PANEL_H = 720, 220
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 30, 45
AV_COLOR, HDV_COLOR = "#1f5fbf", "#2e8b3a"
N_LANES = 2


def load_episodes(path) -> dict[int, list[dict]]:
    episodes: dict[int, list[dict]] = {}
    for _, rec in iter_trace(path):
        episodes.setdefault(int(rec.get("episode", 1)), []).append(rec)
    return episodes


def _segments(samples):
    """Split ``(step, x, lane)`` samples into per-lane runs of consecutive steps."""
    runs, current = [], []
    for s in samples:
        if current and current[-1][2] != s[2]:
            runs.append(current)
            current = []
        current.append(s)
    if current:
        runs.append(current)
    return runs


def render_episode(records: list[dict], title: str = "") -> str:
    """SVG text for one episode's records (possibly empty)."""
    steps = [r["step"] for r in records]
    xs = [v["x"] for r in records for v in r["vehicles"]]
    t_lo, t_hi = (min(steps), max(steps)) if steps else (0, 1)
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if t_hi == t_lo:
        t_hi = t_lo + 1
    if x_hi - x_lo < 1e-9:
        x_hi = x_lo + 1.0
    plot_w = PANEL_W - MARGIN_L - MARGIN_R
    plot_h = PANEL_H - MARGIN_T - MARGIN_B
    height = PANEL_H * N_LANES

    def sx(t):
        return MARGIN_L + (t - t_lo) / (t_hi - t_lo) * plot_w

    def sy(x, lane):
        return lane * PANEL_H + MARGIN_T + plot_h - (x - x_lo) / (x_hi - x_lo) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{height}" viewBox="0 0 {PANEL_W} {height}">',
        f"<title>{escape(title)}</title>",
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for lane in range(N_LANES):
        top = lane * PANEL_H + MARGIN_T
        out.append(f'<g class="lane" data-lane="{lane}">')
        out.append(f'<rect x="{MARGIN_L}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>')
        out.append(f'<text x="{MARGIN_L}" y="{top - 8}" font-size="12">lane {lane}</text>')
        out.append(
            f'<text x="{MARGIN_L + plot_w / 2:.1f}" y="{top + plot_h + 32}" font-size="11" text-anchor="middle">step</text>'
        )
        out.append(
            f'<text x="16" y="{top + plot_h / 2:.1f}" font-size="11" transform="rotate(-90 16 {top + plot_h / 2:.1f})" '
            f'text-anchor="middle">x (m)</text>'
        )
        for t in (t_lo, t_hi):
            out.append(f'<text x="{sx(t):.1f}" y="{top + plot_h + 15}" font-size="10" text-anchor="middle">{t}</text>')
        for x in (x_lo, x_hi):
            out.append(f'<text x="{MARGIN_L - 5}" y="{sy(x, lane) + 4:.1f}" font-size="10" text-anchor="end">{x:.0f}</text>')
        out.append("</g>")

    series: dict[int, dict] = {}
    for r in records:
        for v in r["vehicles"]:
            entry = series.setdefault(v["id"], {"kind": v["kind"], "samples": []})
            entry["samples"].append((r["step"], v["x"], int(v["lane"])))
    for vid in sorted(series):
        entry = series[vid]
        color = AV_COLOR if entry["kind"] == "AV" else HDV_COLOR
        for run in _segments(entry["samples"]):
            lane = run[0][2]
            pts = " ".join(f"{sx(t):.2f},{sy(x, lane):.2f}" for t, x, _ in run)
            out.append(
                f'<polyline class="vehicle" data-id="{vid}" data-kind="{entry["kind"]}" data-samples="{len(run)}" '
                f'fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'
            )

    for r in records:
        for av in r.get("avs", []):
            if not av.get("collided"):
                continue
            veh = next((v for v in r["vehicles"] if v["id"] == av["id"]), None)
            if veh is None:
                continue
            cx, cy = sx(r["step"]), sy(veh["x"], int(veh["lane"]))
            out.append(
                f'<circle class="collision" data-id="{av["id"]}" data-step="{r["step"]}" cx="{cx:.2f}" cy="{cy:.2f}" '
                f'r="5" fill="none" stroke="red" stroke-width="2"/>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_trace(trace_path, out_dir) -> list[Path]:
    """Write ``episode_<k>.svg`` for each episode in the trace; an empty trace gives one empty plot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes = load_episodes(trace_path)
    if not episodes:
        path = out_dir / "episode_empty.svg"
        path.write_text(render_episode([], title="empty trace"))
        return [path]
    written = []
    for ep, records in sorted(episodes.items()):
        path = out_dir / f"episode_{ep:04d}.svg"
        path.write_text(render_episode(records, title=f"episode {ep}"))
        written.append(path)
    return written
