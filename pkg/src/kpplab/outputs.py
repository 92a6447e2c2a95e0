"""CSV/JSON emission and checkpoint files.

Floats are written with ``repr`` so every value survives a round trip
exactly.  Each CSV starts with a header naming its columns.

Checkpoints are a CSV payload plus a JSON sidecar that carries the format
version, the object's metadata and the sha256 of the payload bytes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .barriers import BarrierReport
from .bbm import BBMEnsemble
from .kpp_solver import Field, FrontTrace, Grid, ReactionFn
from .self_similar import SelfSimilarState
from .wave_profile import WaveProfile

FORMAT_VERSION = "1"


class UnsupportedOutputError(TypeError):
    """No writer exists for this artifact and format."""


class VersionError(ValueError):
    """Checkpoint written by an unrecognized format version."""


class ChecksumError(ValueError):
    """Checkpoint payload does not match its recorded checksum."""


def _num(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def _csv_bytes(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) for v in row])
    return buf.getvalue().encode()


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# emission

def _trace_csv(tr: FrontTrace) -> bytes:
    return _csv_bytes(["t", "sigma", "level", "frame"],
                      ((t, s, tr.level, tr.frame) for t, s in zip(tr.t, tr.sigma)))


def _profile_csv(p: WaveProfile) -> bytes:
    return _csv_bytes(["xi", "phi"], zip(p.xi_grid, p.phi))


def _field_csv(f: Field) -> bytes:
    return _csv_bytes(["x", "u"], zip(f.x, f.values))


def _states_csv(states: Sequence[SelfSimilarState]) -> bytes:
    rows = ((s.tau, e, v) for s in states for e, v in zip(s.eta_grid, s.w))
    return _csv_bytes(["tau", "eta", "w"], rows)


def _bbm_csv(ens: BBMEnsemble) -> bytes:
    R, nt = ens.max.shape
    rows = ((ens.times[k], r, ens.max[r, k], ens.count[r, k], ens.Z[r, k])
            for k in range(nt) for r in range(R))
    return _csv_bytes(["t", "replicate", "max", "count", "Z"], rows)


def _profile_json(p: WaveProfile) -> dict:
    return {"k_tail": p.k_tail, "omega_fit": p.omega_fit, "residual_norm": p.residual_norm,
            "amplitude": p.amplitude, "normalization": p.normalization, "settings": p.settings}


def _state_summary(s: SelfSimilarState) -> dict:
    from .self_similar import decompose_remainder
    _, rem = decompose_remainder(s.eta_grid, s.w)
    return {"alpha_moment": s.alpha_moment, "alpha_fit": s.alpha_fit,
            "weighted_remainder_sup": rem, "tau": s.tau}


def _is_states(obj) -> bool:
    return isinstance(obj, (list, tuple)) and len(obj) > 0 and all(isinstance(s, SelfSimilarState) for s in obj)


def emit_outputs(artifact, fmt: str, path) -> Path:
    """Write ``artifact`` as ``fmt`` ('csv' or 'json') to ``path``."""
    path = Path(path)
    data = None
    if fmt == "csv":
        if isinstance(artifact, FrontTrace):
            data = _trace_csv(artifact)
        elif isinstance(artifact, WaveProfile):
            data = _profile_csv(artifact)
        elif isinstance(artifact, Field):
            data = _field_csv(artifact)
        elif isinstance(artifact, SelfSimilarState):
            data = _states_csv([artifact])
        elif _is_states(artifact):
            data = _states_csv(artifact)
        elif isinstance(artifact, BBMEnsemble):
            data = _bbm_csv(artifact)
    elif fmt == "json":
        if isinstance(artifact, WaveProfile):
            data = json_text(_profile_json(artifact)).encode()
        elif isinstance(artifact, SelfSimilarState):
            data = json_text(_state_summary(artifact)).encode()
        elif isinstance(artifact, BarrierReport):
            data = json_text(artifact.to_dict()).encode()
        elif isinstance(artifact, FrontTrace):
            data = json_text({"level": artifact.level, "frame": artifact.frame,
                              "t": artifact.t, "sigma": artifact.sigma}).encode()
        elif isinstance(artifact, dict) or (is_dataclass(artifact) and hasattr(artifact, "to_dict")):
            payload = artifact.to_dict() if hasattr(artifact, "to_dict") else artifact
            data = json_text(payload).encode()
    if data is None:
        raise UnsupportedOutputError(f"cannot write {type(artifact).__name__} as {fmt!r}")
    _write(path, data)
    return path


# ---------------------------------------------------------------------------
# checkpoints

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _save(obj, path: Path) -> Path:
    if isinstance(obj, Field):
        if obj.reaction.kind != "quadratic":
            raise ValueError("only fields with the quadratic reaction can be checkpointed")
        payload = _field_csv(obj)
        meta = {"kind": "field", "t": obj.t, "frame": obj.frame, "left_state": obj.left_state,
                "right_state": obj.right_state,
                "diffusion": obj.diffusion, "reaction": obj.reaction.kind,
                "grid": {"x_min": obj.grid.x_min, "x_max": obj.grid.x_max, "n": obj.grid.n},
                "scheme": "strang/crank-nicolson, 4th-order stencils"}
    elif isinstance(obj, SelfSimilarState):
        payload = _csv_bytes(["eta", "w"], zip(obj.eta_grid, obj.w))
        meta = {"kind": "selfsim", "tau": obj.tau, "fit_window": list(obj.fit_window)}
    else:
        raise UnsupportedOutputError(f"cannot checkpoint {type(obj).__name__}")
    meta["format_version"] = FORMAT_VERSION
    meta["sha256"] = hashlib.sha256(payload).hexdigest()
    _write(path, payload)
    _write(_sidecar(path), json_text(meta).encode())
    return path


def _columns(payload: bytes, header: list[str], path: Path) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(payload.decode())))
    if not rows or rows[0] != header:
        raise ChecksumError(f"{path}: unexpected header")
    return np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(header))


def _load(path: Path):
    try:
        meta = json.loads(_sidecar(path).read_text())
        payload = path.read_bytes()
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{_sidecar(path)}: corrupted metadata") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {meta.get('format_version')!r}, expected {FORMAT_VERSION!r}")
    if hashlib.sha256(payload).hexdigest() != meta.get("sha256"):
        raise ChecksumError(f"{path}: checksum mismatch")
    if meta["kind"] == "field":
        data = _columns(payload, ["x", "u"], path)
        g = meta["grid"]
        grid = Grid(g["x_min"], g["x_max"], g["n"])
        return Field(grid=grid, values=data[:, 1], t=meta["t"], frame=meta["frame"],
                     reaction=ReactionFn.quadratic(), left_state=meta["left_state"], right_state=meta["right_state"],
                     diffusion=meta["diffusion"])
    if meta["kind"] == "selfsim":
        data = _columns(payload, ["eta", "w"], path)
        return SelfSimilarState(tau=meta["tau"], eta_grid=data[:, 0], w=data[:, 1],
                                fit_window=tuple(meta["fit_window"]))
    raise VersionError(f"{path}: unknown checkpoint kind {meta['kind']!r}")


def checkpoint(mode: str, obj=None, path=None):
    """``checkpoint('save', obj, path)`` or ``checkpoint('load', path=path)``."""
    path = Path(path)
    if mode == "save":
        return _save(obj, path)
    if mode == "load":
        return _load(path)
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")
