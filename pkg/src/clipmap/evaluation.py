"""Retrieval recall@K, zero-shot accuracy, mapping-matrix exports and report output."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .data import SplitData, SyntheticSpec, prompt_for_class
from .errors import ContractError
from .fileio import atomic_open
from .mapping import CompressionMaps
from .model import ClipModel, encode_image, encode_text

DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    tr: dict[int, float] = field(default_factory=dict)
    ir: dict[int, float] = field(default_factory=dict)
    n_pairs: int = 0

    def rows(self) -> list[tuple[str, float]]:
        return [(f"TR@{k}", v) for k, v in self.tr.items()] + [(f"IR@{k}", v) for k, v in self.ir.items()]


def _rank_of_match(sim: np.ndarray) -> np.ndarray:
    """Rank of column i in row i; ties go to the lower column index."""
    diag = np.diagonal(sim)[:, None]
    higher = (sim > diag).sum(axis=1)
    lower_tie = np.tril(sim == diag, k=-1).sum(axis=1)
    return higher + lower_tie


def recall_at_k(sim, ks=DEFAULT_KS) -> RetrievalReport:
    """Image-to-text (rows) and text-to-image (columns) recall, in percent."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ContractError(f"recall needs a square similarity matrix, got {sim.shape}")
    tr_rank = _rank_of_match(sim)
    ir_rank = _rank_of_match(sim.T)
    return RetrievalReport(
        tr={k: float(100.0 * np.mean(tr_rank < k)) for k in ks},
        ir={k: float(100.0 * np.mean(ir_rank < k)) for k in ks},
        n_pairs=sim.shape[0],
    )


def embed_split(model: ClipModel, data: SplitData, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    with no_grad():
        img = [encode_image(model.image, data.images[s:s + chunk]).data for s in range(0, len(data), chunk)]
        txt = [encode_text(model.text, data.tokens[s:s + chunk]).data for s in range(0, len(data), chunk)]
    return np.concatenate(img), np.concatenate(txt)


def retrieval_report(model: ClipModel, data: SplitData, ks=DEFAULT_KS) -> RetrievalReport:
    img, txt = embed_split(model, data)
    return recall_at_k(img @ txt.T, ks)


def zero_shot_from_embeddings(image_emb: np.ndarray, class_emb: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy (percent) of argmax cosine similarity; ties pick the lower class index."""
    pred = np.argmax(np.asarray(image_emb) @ np.asarray(class_emb).T, axis=1)
    return float(100.0 * np.mean(pred == np.asarray(labels)))


def zero_shot_accuracy(model: ClipModel, spec: SyntheticSpec, attribute: int, data: SplitData) -> float:
    """Classify attribute ``attribute`` of every image against its value prompts."""
    prompts = np.stack([prompt_for_class(spec, attribute, v) for v in range(spec.n_values)])
    with no_grad():
        class_emb = encode_text(model.text, prompts).data
        img = [encode_image(model.image, data.images[s:s + 256]).data for s in range(0, len(data), 256)]
    return zero_shot_from_embeddings(np.concatenate(img), class_emb, data.latents[:, attribute])


# -- mapping-matrix export --------------------------------------------------------

def export_heatmap_csv(maps: CompressionMaps, directory, epoch: int) -> list[Path]:
    """Write one CSV per map matrix: header ``# name rows cols epoch`` then full-precision rows."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, t in maps.named_parameters():
        m = np.asarray(t.data, dtype=np.float64)
        if not np.all(np.isfinite(m)):
            raise ContractError(f"map {name} holds non-finite values")
        path = directory / f"{name}.epoch{epoch}.csv"
        with atomic_open(path, newline=None) as fh:
            fh.write(f"# {name} {m.shape[0]} {m.shape[1]} {epoch}\n")
            for row in m:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        written.append(path)
    return written


def read_heatmap_csv(path) -> tuple[str, int, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5 or header[0] != "#":
            raise ValueError(f"{path}: malformed heatmap header")
        name, rows, cols, epoch = header[1], int(header[2]), int(header[3]), int(header[4])
        m = np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()], dtype=np.float64)
    if m.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {m.shape}")
    return name, epoch, m


def off_diagonal_mass(m: np.ndarray) -> float:
    m = np.asarray(m)
    k = min(m.shape)
    return float(np.abs(m).sum() - np.abs(m[np.arange(k), np.arange(k)]).sum())


# -- reports --------------------------------------------------------------------------

def report_rows(report: RetrievalReport, accuracy: dict[str, float] | None = None,
                counts: dict[str, int] | None = None) -> list[tuple[str, float]]:
    rows: list[tuple[str, float]] = list(report.rows())
    for k, v in (accuracy or {}).items():
        rows.append((k, v))
    for k, v in (counts or {}).items():
        rows.append((f"params.{k}", v))
    return rows


def format_table(rows: list[tuple[str, float]]) -> str:
    width = max(len(k) for k, _ in rows)
    lines = []
    for k, v in rows:
        value = f"{v:d}" if isinstance(v, (int, np.integer)) else f"{v:.2f}"
        lines.append(f"{k:<{width}}  {value:>12}")
    return "\n".join(lines)


def write_report_csv(path, rows: list[tuple[str, float]]) -> None:
    with atomic_open(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(("metric", "value"))
        writer.writerows(rows)
