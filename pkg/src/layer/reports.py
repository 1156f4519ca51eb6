"""Output documents with provenance, CSV tables and the SVG saliency annuli."""

import json
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Union

import pandas as pd
from jinja2 import Environment, FileSystemLoader
from pydantic import BaseModel, ValidationError

from . import __version__
from .errors import DomainError, FormatError
from .faithfulness import FaithfulnessResult, FaithfulnessSummary, Method
from .saliency import LAYER_PAIRS, InteractionReport, SaliencyReport, ScanSaliency
from .training import CrossValidationResult, EpochRecord, EvaluationResult
from .validation import AssociationResult, SanityResult
from .volume import TISSUE_LAYERS, Layer

PathLike = Union[str, Path]

TEMPLATE_DIR = os.path.join(os.path.dirname(__file__), "templates")
LAYER_COLORS = {1: "#e6a57e", 2: "#f2d16b", 3: "#9bc53d", 4: "#f7b2bd", 5: "#5b8e7d", 6: "#bc4b51"}

_templates = Environment(loader=FileSystemLoader(TEMPLATE_DIR), autoescape=True, trim_blocks=True,
                         lstrip_blocks=True, keep_trailing_newline=True)


# documents


class Provenance(BaseModel):
    package: str = "layer"
    version: str = __version__
    command: str
    seed: int
    config: Dict[str, Any]


def provenance(command: str, seed: int, config: Mapping[str, Any]) -> Provenance:
    return Provenance(command=command, seed=seed, config=dict(config))


class EpochRow(BaseModel):
    epoch: int
    n_e: int
    loss: float
    val_auc: Optional[float]
    selected_hash: str


class EvaluationSummary(BaseModel):
    scan_auc: Optional[float]
    node_auc: Optional[float]
    precision: float
    recall: float
    f1: float
    accuracy: float
    scans: int
    nodes: int
    incomplete: int


class FoldRow(BaseModel):
    fold: int
    final_loss: float
    evaluation: EvaluationSummary


class TrainDocument(BaseModel):
    kind: Literal["train"] = "train"
    provenance: Provenance
    checkpoint: str
    log: List[EpochRow]
    test: Optional[EvaluationSummary] = None


class CrossValidationDocument(BaseModel):
    kind: Literal["cross-validation"] = "cross-validation"
    provenance: Provenance
    folds: List[FoldRow]
    mean_scan_auc: Optional[float]
    mean_node_auc: Optional[float]


class ExplainDocument(BaseModel):
    kind: Literal["explain"] = "explain"
    provenance: Provenance
    saliency: SaliencyReport
    interaction: Optional[InteractionReport] = None


class FaithfulnessDocument(BaseModel):
    kind: Literal["faithfulness"] = "faithfulness"
    provenance: Provenance
    summary: FaithfulnessSummary


class SanityDocument(BaseModel):
    kind: Literal["sanity"] = "sanity"
    provenance: Provenance
    result: SanityResult


class AssociationDocument(BaseModel):
    kind: Literal["association"] = "association"
    provenance: Provenance
    rows: List[AssociationResult]


DOCUMENTS = {
    "train": TrainDocument,
    "cross-validation": CrossValidationDocument,
    "explain": ExplainDocument,
    "faithfulness": FaithfulnessDocument,
    "sanity": SanityDocument,
    "association": AssociationDocument,
}


def epoch_rows(log: Sequence[EpochRecord]) -> List[EpochRow]:
    return [EpochRow(epoch=r.epoch, n_e=r.n_e, loss=r.loss, val_auc=r.val_auc, selected_hash=r.selected_hash)
            for r in log]


def evaluation_summary(evaluation: EvaluationResult) -> EvaluationSummary:
    m = evaluation.metrics
    return EvaluationSummary(scan_auc=evaluation.scan_auc, node_auc=evaluation.node_auc, precision=m.precision,
                             recall=m.recall, f1=m.f1, accuracy=m.accuracy, scans=evaluation.scans,
                             nodes=evaluation.nodes, incomplete=len(evaluation.incomplete))


def cross_validation_document(result: CrossValidationResult, prov: Provenance) -> CrossValidationDocument:
    folds = [FoldRow(fold=s.fold, final_loss=s.final_loss, evaluation=evaluation_summary(s.evaluation))
             for s in result.scores]
    return CrossValidationDocument(provenance=prov, folds=folds, mean_scan_auc=result.mean("scan_auc"),
                                   mean_node_auc=result.mean("node_auc"))


def write_document(path: PathLike, document: BaseModel) -> None:
    """JSON with a trailing newline; non-finite floats are written as null."""
    Path(path).write_text(document.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_document(path: PathLike, kind: Optional[str] = None) -> BaseModel:
    """
    Load and validate any document written by write_document.

    :raises FormatError: If the file is not valid JSON, names an unknown kind, or fails validation.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e.msg}", offset=e.pos) from None
    found = data.get("kind") if isinstance(data, dict) else None
    if found not in DOCUMENTS or (kind is not None and found != kind):
        raise FormatError(f"{path} is not a {kind or 'known'} document (kind {found!r}).")
    try:
        return DOCUMENTS[found].model_validate(data)
    except ValidationError as e:
        raise FormatError(f"{path} does not match the {found} schema: {e}") from None


def document_schema(kind: str) -> Dict[str, Any]:
    """The JSON schema documents of this kind validate against."""
    if kind not in DOCUMENTS:
        raise DomainError(f"Unknown document kind '{kind}'.")
    return DOCUMENTS[kind].model_json_schema()


# CSV tables


def provenance_comment(prov: Provenance) -> str:
    return f"# {prov.package} {prov.version} {prov.command} seed {prov.seed}"


def _write_csv(path: PathLike, rows: List[Dict[str, Any]], columns: Sequence[str],
               prov: Optional[Provenance] = None) -> None:
    """With provenance the table starts with one '#' comment line; read it back with read_table."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        if prov is not None:
            f.write(provenance_comment(prov) + "\n")
        pd.DataFrame(rows, columns=list(columns)).to_csv(f, index=False)


def read_table(path: PathLike, **kwargs) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", **kwargs)


def write_layer_csv(path: PathLike, report: SaliencyReport, prov: Optional[Provenance] = None) -> None:
    rows = []
    for s in report.layers:
        row = s.model_dump()
        for name in ("ss", "pdss", "ndss", "va_ss", "va_pdss", "va_ndss"):
            ci = row.pop(f"{name}_ci")
            row[f"{name}_ci_low"], row[f"{name}_ci_high"] = ci if ci is not None else (None, None)
        rows.append(row)
    _write_csv(path, rows, list(rows[0]), prov)


def write_pair_csv(path: PathLike, interaction: InteractionReport, prov: Optional[Provenance] = None) -> None:
    rows = [{"layer_i": i, "layer_j": j, "name_i": Layer(i).label, "name_j": Layer(j).label,
             "correlation": interaction.correlation[i - 1][j - 1], "ois": interaction.ois[i - 1][j - 1],
             "n": interaction.counts[i - 1][j - 1]} for i, j in LAYER_PAIRS]
    _write_csv(path, rows, ["layer_i", "layer_j", "name_i", "name_j", "correlation", "ois", "n"], prov)


def write_scan_csv(path: PathLike, scans: Sequence[ScanSaliency], prov: Optional[Provenance] = None) -> None:
    """One row per analysed sample: full logit, per-layer delta and volume, per-pair SS when computed."""
    columns = ["key", "label", "target", "full_logit"]
    columns += [f"delta_{layer}" for layer in TISSUE_LAYERS] + [f"volume_{layer}" for layer in TISSUE_LAYERS]
    with_pairs = bool(scans) and bool(scans[0].pair_ss)
    if with_pairs:
        columns += [f"ss_{i}_{j}" for i, j in LAYER_PAIRS]
    rows = []
    for scan in scans:
        row = {"key": scan.key, "label": scan.label.value, "target": scan.target, "full_logit": scan.full_logit}
        row.update({f"delta_{layer}": scan.deltas[layer] for layer in TISSUE_LAYERS})
        row.update({f"volume_{layer}": scan.volumes[layer] for layer in TISSUE_LAYERS})
        if with_pairs:
            row.update({f"ss_{i}_{j}": scan.pair_ss[(i, j)] for i, j in LAYER_PAIRS})
        rows.append(row)
    _write_csv(path, rows, columns, prov)


def write_faithfulness_csv(path: PathLike, results: Mapping[Method, Sequence[FaithfulnessResult]],
                           prov: Optional[Provenance] = None) -> None:
    rows = [{"scan": r.key, "method": method.value, "auc_ins": r.auc_ins, "auc_del": r.auc_del,
             "auc_delta": r.auc_delta, "irof": r.irof, "unstable": r.unstable, "draws": r.draws,
             "ranking": " ".join(str(layer) for layer in r.ranking)}
            for method, method_results in results.items() for r in method_results]
    _write_csv(path, rows, ["scan", "method", "auc_ins", "auc_del", "auc_delta", "irof", "unstable", "draws",
                             "ranking"], prov)


def write_association_csv(path: PathLike, rows: Sequence[AssociationResult], prov: Optional[Provenance] = None) -> None:
    table = [{"layer": r.layer, "name": r.name, "kind": r.kind, "beta0": r.beta0, "beta1": r.beta1,
              "ci_low": r.ci_low, "ci_high": r.ci_high, "p": r.p, "auc": r.auc, "pass": r.passed, "error": r.error}
             for r in rows]
    _write_csv(path, table, ["layer", "name", "kind", "beta0", "beta1", "ci_low", "ci_high", "p", "auc", "pass",
                             "error"], prov)


def write_training_log(path: PathLike, log: Sequence[EpochRecord], prov: Optional[Provenance] = None) -> None:
    rows = [{"epoch": r.epoch, "N_e": r.n_e, "loss": r.loss, "val_auc": r.val_auc, "selected_hash": r.selected_hash}
            for r in log]
    _write_csv(path, rows, ["epoch", "N_e", "loss", "val_auc", "selected_hash"], prov)


# SVG


def _point(center: float, radius: float, degrees: float) -> str:
    angle = math.radians(degrees)
    return f"{center + radius * math.sin(angle):.2f} {center - radius * math.cos(angle):.2f}"


def _sector(center: float, inner: float, outer: float, start: float, end: float) -> str:
    """Annular sector path, angles in degrees clockwise from 12 o'clock."""
    return (f"M {_point(center, outer, start)} A {outer:.2f} {outer:.2f} 0 0 1 {_point(center, outer, end)} "
            f"L {_point(center, inner, end)} A {inner:.2f} {inner:.2f} 0 0 0 {_point(center, inner, start)} Z")


def _span(layer: int, gap: float = 2.0):
    width = 360.0 / len(TISSUE_LAYERS)
    start = (layer - 1) * width
    return start + gap, start + width - gap, start + width / 2


def _metadata(prov: Optional[Provenance], seed: Optional[int] = None) -> Dict[str, Any]:
    if prov is not None:
        return {"package": prov.package, "version": prov.version, "command": prov.command, "seed": prov.seed}
    return {"package": "layer", "version": __version__, "command": "", "seed": "" if seed is None else seed}


def render_annulus(report: SaliencyReport, title: Optional[str] = None, size: int = 360,
                   prov: Optional[Provenance] = None) -> str:
    """
    Six-segment saliency annulus: band thickness scales with mean SS, radial ticks mark the
    SS confidence interval and fill opacity scales with volume-adjusted SS.

    The SVG metadata carries the package version and the seed, from prov when given and from
    the report otherwise.
    """
    center = size / 2
    inner = size * 0.2
    max_band = size * 0.26
    peak = max([max(s.ss, s.ss_ci[1]) for s in report.layers] + [0.0])
    scale = max_band / peak if peak > 0 else 0.0
    va_peak = max([s.va_ss for s in report.layers if s.va_ss is not None] + [0.0])
    segments = []
    for s in report.layers:
        start, end, mid = _span(s.layer)
        outer = inner + max(s.ss * scale, 0.5)
        low, high = inner + s.ss_ci[0] * scale, inner + s.ss_ci[1] * scale
        ticks = [f"M {_point(center, low, mid)} L {_point(center, high, mid)}"]
        ticks += [f"M {_point(center, r, mid - 1.5)} L {_point(center, r, mid + 1.5)}" for r in (low, high)]
        opacity = 0.2 + 0.8 * (s.va_ss / va_peak) if va_peak > 0 and s.va_ss is not None else 0.2
        label_x, label_y = _point(center, inner - 16, mid).split()
        segments.append({"layer": s.layer, "name": s.name, "ss": f"{s.ss:.6g}",
                         "va_ss": "" if s.va_ss is None else f"{s.va_ss:.6g}",
                         "path": _sector(center, inner, outer, start, end), "color": LAYER_COLORS[s.layer],
                         "opacity": f"{opacity:.3f}", "ticks": ticks, "label_x": label_x, "label_y": label_y})
    title = title or f"Layer saliency ({report.modality}, {report.scenario})"
    return _templates.get_template("annulus.svg.j2").render(size=size, center=center, inner=f"{inner:.2f}",
                                                            title=title, segments=segments,
                                                            meta=_metadata(prov, report.seed))


def render_chord_annulus(interaction: InteractionReport, kind: str = "correlation", title: Optional[str] = None,
                         size: int = 360, prov: Optional[Provenance] = None) -> str:
    """
    Ring of the six layers with a chord per layer pair; stroke width scales with |value| and
    the colour class carries the sign. Undefined pairs get no chord.
    """
    if kind not in ("correlation", "ois"):
        raise DomainError(f"Chords encode 'correlation' or 'ois', not '{kind}'.")
    table = interaction.correlation if kind == "correlation" else interaction.ois
    center = size / 2
    inner, outer = size * 0.36, size * 0.42
    segments = []
    for layer in TISSUE_LAYERS:
        start, end, mid = _span(layer)
        label_x, label_y = _point(center, outer + 14, mid).split()
        segments.append({"layer": layer, "name": Layer(layer).label, "path": _sector(center, inner, outer, start, end),
                         "color": LAYER_COLORS[layer], "label_x": label_x, "label_y": label_y})
    values = {(i, j): table[i - 1][j - 1] for i, j in LAYER_PAIRS if table[i - 1][j - 1] is not None}
    peak = max([abs(v) for v in values.values()] + [0.0])
    chords = []
    for (i, j), value in values.items():
        width = 1.0 + 9.0 * abs(value) / peak if peak > 0 else 1.0
        chords.append({"i": i, "j": j, "value": f"{value:.6g}", "sign": "positive" if value >= 0 else "negative",
                       "width": f"{width:.2f}",
                       "path": f"M {_point(center, inner - 2, _span(i)[2])} Q {center:.2f} {center:.2f} "
                               f"{_point(center, inner - 2, _span(j)[2])}"})
    title = title or ("Saliency correlation" if kind == "correlation" else "Occlusion interaction")
    return _templates.get_template("chords.svg.j2").render(size=size, center=center, title=title, segments=segments,
                                                           chords=chords, meta=_metadata(prov))
