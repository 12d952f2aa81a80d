"""Attention-matrix analysis: src/mt mass per step, focus statistics, record files, heatmaps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from .model import AttentionRecord


class RecordFormatError(ValueError):
    pass


def input_mass(record: AttentionRecord, step: int) -> Tuple[float, float]:
    """(weight on src rows, weight on mt rows) at decoding step ``step``."""
    if not 0 <= step < record.n_steps:
        raise IndexError(f"step {step} out of range for {record.n_steps} decoding steps")
    column = record.matrix[:, step]
    return float(column[: record.boundary].sum()), float(column[record.boundary:].sum())


@dataclass(frozen=True)
class FocusSummary:
    src_count: int
    mt_count: int
    both_count: int
    threshold: float

    @property
    def total(self) -> int:
        return self.src_count + self.mt_count + self.both_count

    def _pct(self, count: int) -> float:
        return 100.0 * count / self.total if self.total else 0.0

    @property
    def src_pct(self) -> float:
        return self._pct(self.src_count)

    @property
    def mt_pct(self) -> float:
        return self._pct(self.mt_count)

    @property
    def both_pct(self) -> float:
        return self._pct(self.both_count)

    def __add__(self, other: "FocusSummary") -> "FocusSummary":
        if other.threshold != self.threshold:
            raise ValueError("cannot combine summaries computed with different thresholds")
        return FocusSummary(self.src_count + other.src_count, self.mt_count + other.mt_count,
                            self.both_count + other.both_count, self.threshold)


def classify_step(src_mass: float, threshold: float) -> str:
    if src_mass > threshold:
        return "src"
    if src_mass < 1.0 - threshold:
        return "mt"
    return "both"


def focus_statistics(records: Iterable[AttentionRecord], threshold: float = 0.6) -> FocusSummary:
    """Count every decoding step of every record as src, mt or both.

    A step is src when its src mass exceeds ``threshold``, mt when the src mass
    is below ``1 - threshold``, and both otherwise. Every column counts,
    including the one that emitted ``</s>``.
    """
    if not 0.5 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly between 0.5 and 1, got {threshold}")
    counts = {"src": 0, "mt": 0, "both": 0}
    for record in records:
        src_mass = record.matrix[: record.boundary].sum(axis=0)
        for mass in src_mass:
            counts[classify_step(float(mass), threshold)] += 1
    return FocusSummary(counts["src"], counts["mt"], counts["both"], threshold)


# -- record files --------------------------------------------------------------


def export_record(record: AttentionRecord, path) -> None:
    """Text format: N/M/T/SRC/MT/PE header lines, then one line of N+M weights per step."""
    n = record.boundary
    m = record.matrix.shape[0] - n
    t = record.matrix.shape[1]
    lines = [f"N={n}", f"M={m}", f"T={t}", "SRC=" + " ".join(record.src_tokens),
             "MT=" + " ".join(record.mt_tokens), "PE=" + " ".join(record.pe_tokens)]
    for column in np.asarray(record.matrix, dtype=np.float64).T:
        lines.append(" ".join(repr(float(x)) for x in column))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _header(lines: List[str], lineno: int, key: str) -> str:
    if lineno >= len(lines) or not lines[lineno].startswith(key + "="):
        raise RecordFormatError(f"line {lineno + 1}: expected '{key}=...'")
    return lines[lineno][len(key) + 1:]


def _int_header(lines: List[str], lineno: int, key: str) -> int:
    raw = _header(lines, lineno, key)
    try:
        value = int(raw)
    except ValueError:
        raise RecordFormatError(f"line {lineno + 1}: {key} is not an integer: {raw!r}") from None
    if value < 0:
        raise RecordFormatError(f"line {lineno + 1}: {key} must be >= 0")
    return value


def import_record(path) -> AttentionRecord:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    n = _int_header(lines, 0, "N")
    m = _int_header(lines, 1, "M")
    t = _int_header(lines, 2, "T")
    labels = []
    for lineno, key, expected in ((3, "SRC", n), (4, "MT", m), (5, "PE", t)):
        raw = _header(lines, lineno, key)
        tokens = raw.split(" ") if raw else []
        if tokens and len(tokens) != expected:
            raise RecordFormatError(f"line {lineno + 1}: {len(tokens)} {key} tokens, expected {expected}")
        labels.append(tokens)
    body = lines[6:]
    if len(body) != t:
        raise RecordFormatError(f"expected {t} weight lines after the header, found {len(body)}")
    matrix = np.zeros((n + m, t), dtype=np.float64)
    for i, line in enumerate(body):
        fields = line.split(" ") if line else []
        if len(fields) != n + m:
            raise RecordFormatError(f"line {7 + i}: {len(fields)} weights, expected {n + m}")
        for j, field in enumerate(fields):
            try:
                matrix[j, i] = float(field)
            except ValueError:
                raise RecordFormatError(f"line {7 + i}, field {j + 1}: not a number: {field!r}") from None
    return AttentionRecord(matrix, n, labels[0], labels[1], labels[2])


def load_records(directory) -> List[AttentionRecord]:
    return [import_record(p) for p in sorted(Path(directory).glob("*.attn"))]


# -- heatmaps ------------------------------------------------------------------

CELL = 24


def gray_level(alpha: float) -> int:
    """Monochrome scale: 0 -> white (255), 1 -> black (0)."""
    a = min(max(float(alpha), 0.0), 1.0)
    return int(round(255 * (1.0 - a)))


def render_heatmap(record: AttentionRecord, path, cell: int = CELL) -> None:
    """Write an SVG (or binary PGM when ``path`` ends in .pgm) heatmap of the record.

    Rows are src then mt positions, columns the emitted pe tokens; a rule
    separates src from mt.
    """
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        _render_pgm(record, path, cell)
    else:
        _render_svg(record, path, cell)


def _labels(tokens: Sequence[str], count: int, prefix: str) -> List[str]:
    return list(tokens) if len(tokens) == count else [f"{prefix}{i}" for i in range(count)]


def _render_svg(record: AttentionRecord, path: Path, cell: int) -> None:
    rows, cols = record.matrix.shape
    n = record.boundary
    row_labels = (_labels(record.src_tokens, n, "src") + _labels(record.mt_tokens, rows - n, "mt"))
    col_labels = _labels(record.pe_tokens, cols, "pe")
    left = 8 + 7 * max((len(s) for s in row_labels), default=1)
    top = 8 + 7 * max((len(s) for s in col_labels), default=1)
    width, height = left + cols * cell + 4, top + rows * cell + 4
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="rgb(255,255,255)"/>']
    for i in range(rows):
        for j in range(cols):
            v = gray_level(record.matrix[i, j])
            out.append(f'<rect class="cell" data-row="{i}" data-col="{j}" x="{left + j * cell}" '
                       f'y="{top + i * cell}" width="{cell}" height="{cell}" fill="rgb({v},{v},{v})"/>')
    for i, label in enumerate(row_labels):
        out.append(f'<text x="{left - 4}" y="{top + i * cell + cell * 0.7:.1f}" font-size="11" '
                   f'text-anchor="end" font-family="sans-serif">{escape(label)}</text>')
    for j, label in enumerate(col_labels):
        x, y = left + j * cell + cell * 0.6, top - 4
        out.append(f'<text x="{x:.1f}" y="{y}" font-size="11" font-family="sans-serif" '
                   f'transform="rotate(-90 {x:.1f} {y})">{escape(label)}</text>')
    rule_y = top + n * cell
    out.append(f'<line class="boundary" x1="{left - 6}" y1="{rule_y}" x2="{left + cols * cell}" '
               f'y2="{rule_y}" stroke="rgb(200,0,0)" stroke-width="2"/>')
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def heatmap_pixels(record: AttentionRecord, cell: int = CELL) -> np.ndarray:
    """The PGM raster: one ``cell`` x ``cell`` block per weight and a one-pixel black rule after src."""
    rows, cols = record.matrix.shape
    n = record.boundary
    grid = np.vectorize(gray_level, otypes=[np.uint8])(record.matrix) if record.matrix.size else \
        np.zeros((rows, cols), dtype=np.uint8)
    image = np.kron(grid, np.ones((cell, cell), dtype=np.uint8))
    rule = np.zeros((1, cols * cell), dtype=np.uint8)
    return np.concatenate([image[: n * cell], rule, image[n * cell:]], axis=0)


def _render_pgm(record: AttentionRecord, path: Path, cell: int) -> None:
    pixels = heatmap_pixels(record, cell)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
