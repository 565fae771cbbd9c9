"""File formats: volumes (JSON sidecar + raw payload), dataset manifests,
gradient tables, the per-level metrics CSV and the comparisons CSV."""
from __future__ import annotations

import csv
import io
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .morphometry import LabelVolume

VOLUME_FORMAT = "cordseg-volume"
VOLUME_VERSION = 1
DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


@dataclass
class ScalarVolume:
    data: np.ndarray  # [Z, Y, X] float32
    spacing: tuple[float, float, float]
    orientation: str = "RPI"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError(f"scalar volume must be [Z, Y, X], got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)


def header_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".json")


def save_volume(vol: LabelVolume | ScalarVolume, path: str | os.PathLike) -> None:
    """Write ``path`` (little-endian payload, Z-major) and ``path.json`` (header)."""
    path = Path(path)
    if isinstance(vol, LabelVolume):
        if vol.labels.min(initial=0) < 0 or vol.labels.max(initial=0) > 255:
            raise ValidationError("label values must fit in an unsigned byte")
        payload = np.ascontiguousarray(vol.labels, dtype=DTYPES["u8"])
        header = {"dtype": "u8", "legend": {str(k): v for k, v in sorted(vol.legend.items())}}
    elif isinstance(vol, ScalarVolume):
        payload = np.ascontiguousarray(vol.data, dtype=DTYPES["f32"])
        header = {"dtype": "f32", "legend": {}}
    else:
        raise ValidationError(f"cannot save {type(vol).__name__}")
    header = {"format": VOLUME_FORMAT, "version": VOLUME_VERSION, "dims": list(payload.shape),
              "spacing": list(vol.spacing), "orientation": vol.orientation, **header}
    path.parent.mkdir(parents=True, exist_ok=True)
    header_path(path).write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    path.write_bytes(payload.tobytes())


def read_header(path: str | os.PathLike) -> dict:
    hp = header_path(path)
    if not hp.exists():
        raise ValidationError(f"{hp}: header sidecar not found")
    raw = hp.read_bytes()
    try:
        header = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{hp}: malformed header, invalid UTF-8 at byte {exc.start}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{hp}: malformed header at byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(header, dict) or header.get("format") != VOLUME_FORMAT:
        raise ValidationError(f"{hp}: not a {VOLUME_FORMAT} header")
    if header.get("version") != VOLUME_VERSION:
        raise ValidationError(f"{hp}: unsupported volume format version {header.get('version')!r}")
    if header.get("dtype") not in DTYPES:
        raise ValidationError(f"{hp}: unknown dtype {header.get('dtype')!r}; expected one of {sorted(DTYPES)}")
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise ValidationError(f"{hp}: dims must be three positive integers, got {dims!r}")
    spacing = header.get("spacing")
    if not (isinstance(spacing, list) and len(spacing) == 3 and all(isinstance(s, (int, float)) and s > 0 for s in spacing)):
        raise ValidationError(f"{hp}: spacing must be three positive numbers, got {spacing!r}")
    return header


def expected_payload_bytes(header: dict) -> int:
    return int(np.prod(header["dims"])) * DTYPES[header["dtype"]].itemsize


def load_volume(path: str | os.PathLike) -> LabelVolume | ScalarVolume:
    path = Path(path)
    header = read_header(path)
    if not path.exists():
        raise ValidationError(f"{path}: payload file not found")
    raw = path.read_bytes()
    want = expected_payload_bytes(header)
    if len(raw) != want:
        if len(raw) < want:
            detail = f"truncated: data ends at byte offset {len(raw)}"
        else:
            detail = f"{len(raw) - want} trailing byte(s) from offset {want}"
        raise ValidationError(f"{path}: payload size mismatch, {len(raw)} bytes but header expects {want} "
                              f"({'x'.join(map(str, header['dims']))} x {DTYPES[header['dtype']].itemsize}); {detail}")
    arr = np.frombuffer(raw, dtype=DTYPES[header["dtype"]]).reshape(header["dims"]).copy()
    spacing = tuple(header["spacing"])
    orientation = header.get("orientation", "RPI")
    if header["dtype"] == "f32":
        return ScalarVolume(arr, spacing, orientation)
    legend = {int(k): v for k, v in header.get("legend", {}).items()}
    present = set(np.unique(arr).tolist())
    if present - set(legend):
        raise ValidationError(f"{path}: labels {sorted(present - set(legend))} missing from the legend")
    return LabelVolume(arr, spacing, legend, orientation=orientation)


# ---------------------------------------------------------------------------
# Gradient tables
# ---------------------------------------------------------------------------
def save_gradient_table(path: str | os.PathLike, bvals: np.ndarray, bvecs: np.ndarray) -> None:
    lines = [f"{b:g} {g[0]!r} {g[1]!r} {g[2]!r}" for b, g in zip(bvals, np.asarray(bvecs, dtype=float).tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_gradient_table(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """One sample per line: ``b gx gy gz``; '#' starts a comment."""
    bvals, bvecs = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValidationError(f"{path}:{lineno}: expected 'b gx gy gz', got {len(parts)} field(s)")
        try:
            b, gx, gy, gz = (float(p) for p in parts)
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: non-numeric entry ({exc})") from exc
        if b < 0:
            raise ValidationError(f"{path}:{lineno}: negative b-value {b}")
        norm = (gx * gx + gy * gy + gz * gz) ** 0.5
        if b > 0 and abs(norm - 1.0) > 1e-6:
            raise ValidationError(f"{path}:{lineno}: gradient direction norm {norm:.8f} is not 1")
        bvals.append(b)
        bvecs.append((gx, gy, gz))
    if not bvals:
        raise ValidationError(f"{path}: empty gradient table")
    return np.array(bvals), np.array(bvecs)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------
@dataclass
class SubjectEntry:
    id: str
    gender: str
    machine: str
    image: str
    label: str
    levels: str | None = None
    dwi: list[str] | None = None
    bvecs: str | None = None


@dataclass
class DatasetManifest:
    subjects: list[SubjectEntry]
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> str:
        return json.dumps({"version": 1, "subjects": [asdict(s) for s in self.subjects]}, indent=1) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())


_MACHINE = re.compile(r"^[A-Z]$")


def load_manifest(path: str | os.PathLike, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"{path}: manifest not found") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed manifest at byte {exc.pos}: {exc.msg}") from exc
    known = {f.name for f in fields(SubjectEntry)}
    subjects, seen = [], set()
    for i, entry in enumerate(doc.get("subjects", [])):
        extra = set(entry) - known
        if extra:
            raise ValidationError(f"{path}: subject {i} has unknown keys {sorted(extra)}")
        try:
            s = SubjectEntry(**entry)
        except TypeError as exc:
            raise ValidationError(f"{path}: subject {i}: {exc}") from exc
        if s.id in seen:
            raise ValidationError(f"{path}: duplicate subject id {s.id!r}")
        seen.add(s.id)
        if s.gender not in ("F", "M"):
            raise ValidationError(f"{path}: subject {s.id}: gender must be F or M, got {s.gender!r}")
        if not _MACHINE.match(s.machine):
            raise ValidationError(f"{path}: subject {s.id}: machine tag must be one capital letter, got {s.machine!r}")
        subjects.append(s)
    if not subjects:
        raise ValidationError(f"{path}: manifest lists no subjects")
    m = DatasetManifest(subjects, path.parent)
    if check_paths:
        for s in subjects:
            rels = [s.image, s.label] + ([s.levels] if s.levels else []) + list(s.dwi or []) + ([s.bvecs] if s.bvecs else [])
            for rel in rels:
                if not m.resolve(rel).exists():
                    raise ValidationError(f"{path}: subject {s.id}: missing file {rel}")
    return m


# ---------------------------------------------------------------------------
# Metrics table
# ---------------------------------------------------------------------------
METRIC_COLUMNS = ["subject", "gender", "machine", "level", "csa_mm2", "sac_mm2", "sac_csa_ratio", "fa", "md", "rd"]
_FLOAT_COLUMNS = METRIC_COLUMNS[4:]


@dataclass
class MetricsRow:
    subject: str
    gender: str
    machine: str
    level: int
    csa_mm2: float | None = None
    sac_mm2: float | None = None
    sac_csa_ratio: float | None = None
    fa: float | None = None
    md: float | None = None
    rd: float | None = None


def level_name(level: int) -> str:
    return f"C{level}"


def parse_level(text: str) -> int:
    m = re.fullmatch(r"C?([1-7])", text.strip())
    if not m:
        raise ValidationError(f"bad vertebral level {text!r}; expected C1..C7")
    return int(m.group(1))


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def metrics_to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in sorted(rows, key=lambda r: (r.subject, r.level)):
        w.writerow([r.subject, r.gender, r.machine, level_name(r.level)] + [_fmt(getattr(r, c)) for c in _FLOAT_COLUMNS])
    return buf.getvalue()


def metrics_from_csv(text: str) -> list[MetricsRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != METRIC_COLUMNS:
        raise ValidationError(f"metrics table header must be {','.join(METRIC_COLUMNS)}, got {header}")
    rows, seen = [], set()
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(METRIC_COLUMNS):
            raise ValidationError(f"metrics line {lineno}: {len(rec)} fields, expected {len(METRIC_COLUMNS)}")
        vals = []
        for col, cell in zip(_FLOAT_COLUMNS, rec[4:]):
            try:
                vals.append(None if cell == "" else float(cell))
            except ValueError as exc:
                raise ValidationError(f"metrics line {lineno}: column {col}: {cell!r} is not a number") from exc
        row = MetricsRow(rec[0], rec[1], rec[2], parse_level(rec[3]), *vals)
        key = (row.subject, row.level)
        if key in seen:
            raise ValidationError(f"metrics line {lineno}: duplicate row for {row.subject} {rec[3]}")
        seen.add(key)
        rows.append(row)
    return rows


def write_metrics(path: str | os.PathLike, rows: list[MetricsRow]) -> None:
    Path(path).write_text(metrics_to_csv(rows))


def read_metrics(path: str | os.PathLike) -> list[MetricsRow]:
    try:
        return metrics_from_csv(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"{path}: metrics table not found") from exc


def merge_metrics(base: list[MetricsRow], update: list[MetricsRow], columns: list[str]) -> list[MetricsRow]:
    """Overwrite ``columns`` of rows in ``base`` with those from ``update``
    (matched on subject and level); unmatched update rows are appended."""
    index = {(r.subject, r.level): r for r in base}
    for u in update:
        r = index.get((u.subject, u.level))
        if r is None:
            index[(u.subject, u.level)] = u
            continue
        for c in columns:
            setattr(r, c, getattr(u, c))
    return sorted(index.values(), key=lambda r: (r.subject, r.level))


COMPARISON_COLUMNS = ["stratumA", "stratumB", "rA", "nA", "rB", "nB", "z", "p"]


def comparisons_to_csv(comparisons, with_adjusted: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_COLUMNS + (["p_bonferroni"] if with_adjusted else []))
    for c in comparisons:
        row = [c.a.stratum, c.b.stratum, repr(c.a.r), c.a.n, repr(c.b.r), c.b.n, repr(c.z), repr(c.p)]
        if with_adjusted:
            row.append(repr(c.p_adjusted))
        w.writerow(row)
    return buf.getvalue()
