"""Line-delimited tensor, predictor, prediction-set and report files.

Every file is UTF-8 JSON.  Floats are written with Python's shortest
round-trip ``repr``, so a 64-bit value reloads to exactly the same bits.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .conformal import CalibratedPredictor, CalibrationConfig, EvalReport
from .core_types import Method, PredictionSet, ScoreKind, ScoreTensor
from .eb_normal import EBModel, ThresholdTable
from .errors import HeaderMismatch, InputError, ParseError

__all__ = [
    "TENSOR_VERSION",
    "PREDICTOR_VERSION",
    "SIZE_GUARD_CELLS",
    "atomic_write_text",
    "dump_tensor",
    "save_tensor",
    "load_tensor",
    "predictor_to_dict",
    "predictor_from_dict",
    "save_predictor",
    "load_predictor",
    "save_sets",
    "load_sets",
    "save_json",
]

log = logging.getLogger(__name__)

TENSOR_VERSION = 1
PREDICTOR_VERSION = 1
SETS_VERSION = 1
SIZE_GUARD_CELLS = 10**6


def _dumps(obj) -> str:
    try:
        return json.dumps(obj, separators=(",", ":"), allow_nan=False, ensure_ascii=False)
    except ValueError as exc:
        raise InputError(f"cannot serialize non-finite value: {exc}") from None


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary sibling file and rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _guard_size(n, k, m):
    cells = n * k * m
    if cells > SIZE_GUARD_CELLS:
        log.warning("tensor has %d item x candidate x sample cells (> %d)", cells, SIZE_GUARD_CELLS)


# --- tensors -----------------------------------------------------------------


def dump_tensor(t: ScoreTensor, meta: dict | None = None) -> str:
    n, k, m = t.scores.shape
    _guard_size(n, k, m)
    header = {"version": TENSOR_VERSION, "K": k, "M": m, "score_kind": t.score_kind.value}
    if meta:
        header["meta"] = meta
    lines = [_dumps(header)]
    for i, item_id in enumerate(t.item_ids):
        label = None
        if t.true_label is not None and t.true_label[i] >= 0:
            label = int(t.true_label[i])
        rec = {"id": item_id, "true_label": label, "scores": t.scores[i].tolist()}
        lines.append(_dumps(rec))
    return "\n".join(lines) + "\n"


def save_tensor(t: ScoreTensor, path, meta: dict | None = None) -> None:
    atomic_write_text(path, dump_tensor(t, meta))


def _parse_line(line: str, lineno: int):
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None


def load_tensor(path) -> ScoreTensor:
    """Read a tensor file.

    Raises
    ------
    ParseError
        Malformed JSON or a missing/ill-typed field, with the line number.
    HeaderMismatch
        A record whose candidate or sample count disagrees with the header.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    header = _parse_line(lines[0], 1)
    if not isinstance(header, dict):
        raise ParseError("header must be a JSON object", 1)
    if header.get("version") != TENSOR_VERSION:
        raise ParseError(f"unsupported tensor version {header.get('version')!r}", 1)
    try:
        k, m = int(header["K"]), int(header["M"])
        kind = ScoreKind(header["score_kind"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad header: {exc}", 1) from None

    ids, labels, scores = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = _parse_line(line, lineno)
        if not isinstance(rec, dict) or "id" not in rec or "scores" not in rec:
            raise ParseError("record needs 'id' and 'scores'", lineno)
        item_id = rec["id"]
        if not isinstance(item_id, str):
            raise ParseError("'id' must be a string", lineno)
        try:
            arr = np.array(rec["scores"], dtype=np.float64)
        except (ValueError, TypeError):
            raise ParseError(f"scores of {item_id!r} are not a numeric K x M array", lineno) from None
        if arr.ndim != 2 or arr.shape[0] != k:
            got = arr.shape[0] if arr.ndim >= 1 else 0
            raise HeaderMismatch(f"item {item_id!r} (line {lineno}) has {got} candidates, header says K={k}")
        if arr.shape[1] != m:
            raise HeaderMismatch(f"item {item_id!r} (line {lineno}) has {arr.shape[1]} samples, header says M={m}")
        label = rec.get("true_label")
        if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
            raise ParseError(f"true_label of {item_id!r} must be an integer or null", lineno)
        ids.append(item_id)
        labels.append(-1 if label is None else label)
        scores.append(arr)
    _guard_size(len(ids), k, m)
    data = np.stack(scores) if scores else np.zeros((0, k, m))
    true_label = None if all(v == -1 for v in labels) else np.array(labels, dtype=np.int64)
    return ScoreTensor(ids, data, kind, true_label)


# --- predictors --------------------------------------------------------------


def _floats(arr) -> list[float]:
    return [float(v) for v in np.asarray(arr).reshape(-1)]


def predictor_to_dict(pred: CalibratedPredictor) -> dict[str, Any]:
    d = {
        "format": "rvcp-predictor",
        "version": PREDICTOR_VERSION,
        "method": pred.method.value,
        "alpha": pred.alpha,
        "threshold": pred.threshold,
        "n_cal": pred.n_cal,
        "rank": pred.rank,
        "n_candidates": pred.n_candidates,
        "score_kind": pred.score_kind.value,
        "config": pred.config.to_dict(),
        "model": None,
        "table": None,
        "lambdas": None,
    }
    if pred.model is not None:
        d["model"] = {
            "mu": pred.model.mu,
            "tau2": pred.model.tau2,
            "g_support": _floats(pred.model.g_support),
            "fit_diagnostics": pred.model.fit_diagnostics,
        }
    if pred.table is not None:
        d["table"] = {
            "alpha_grid": _floats(pred.table.alpha_grid),
            "theta_beta": _floats(pred.table.theta_beta),
            "z_beta": _floats(pred.table.z_beta),
        }
    if pred.lambdas is not None:
        d["lambdas"] = _floats(pred.lambdas)
    return d


def predictor_from_dict(d: dict[str, Any]) -> CalibratedPredictor:
    if d.get("format") != "rvcp-predictor" or d.get("version") != PREDICTOR_VERSION:
        raise ParseError("not a version-1 rvcp predictor file")
    try:
        model = table = lambdas = None
        if d["model"] is not None:
            md = d["model"]
            model = EBModel(md["mu"], md["tau2"], np.array(md["g_support"]), md.get("fit_diagnostics", {}))
        if d["table"] is not None:
            td = d["table"]
            table = ThresholdTable(
                np.array(td["alpha_grid"]), np.array(td["theta_beta"]), np.array(td["z_beta"]), model
            )
        if d["lambdas"] is not None:
            lambdas = np.array(d["lambdas"], dtype=np.float64)
        return CalibratedPredictor(
            method=Method(d["method"]),
            alpha=float(d["alpha"]),
            threshold=float(d["threshold"]),
            n_cal=int(d["n_cal"]),
            rank=int(d["rank"]),
            n_candidates=int(d["n_candidates"]),
            score_kind=ScoreKind(d["score_kind"]),
            config=CalibrationConfig(**d["config"]),
            model=model,
            table=table,
            lambdas=lambdas,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed predictor file: {exc}") from None


def save_predictor(pred: CalibratedPredictor, path, echo: dict | None = None) -> None:
    d = predictor_to_dict(pred)
    if echo is not None:
        d["config_echo"] = echo
    atomic_write_text(path, json.dumps(d, indent=1, allow_nan=False) + "\n")


def load_predictor(path) -> CalibratedPredictor:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return predictor_from_dict(d)


# --- prediction sets and reports ---------------------------------------------


def save_sets(sets: Iterable[PredictionSet], path, header: dict | None = None) -> None:
    sets = list(sets)
    head = {"version": SETS_VERSION, "kind": "prediction_sets"}
    head.update(header or {})
    lines = [_dumps(head)]
    for s in sets:
        lines.append(_dumps({"id": s.item_id, "method": s.method.value, "members": [[i, v] for i, v in s.members]}))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_sets(path) -> tuple[dict, list[PredictionSet]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    header = _parse_line(lines[0], 1)
    if not isinstance(header, dict) or header.get("kind") != "prediction_sets":
        raise ParseError("not a prediction-set file", 1)
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = _parse_line(line, lineno)
        try:
            members = tuple((int(i), float(v)) for i, v in rec["members"])
            out.append(PredictionSet(str(rec["id"]), members, Method(rec["method"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad prediction-set record: {exc}", lineno) from None
    return header, out


def save_json(obj, path) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, allow_nan=False) + "\n")


def report_to_dict(report: EvalReport, echo: dict | None = None) -> dict:
    d = {"version": 1, "kind": "evaluation", "summary": report.summary(), "items": [dict(r) for r in report.items]}
    if echo is not None:
        d["config"] = echo
    return d
