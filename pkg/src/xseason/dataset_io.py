"""Correspondence samples on disk and per-condition dataset statistics.

Sample file (UTF-8 text, one sample per file)::

    CORR 1 <ref_view_id> <target_view_id> <condition_tag> <N>
    ur vr ut vt          # N lines

Spaces in the condition tag are written as underscores and read back as
spaces, so tags themselves may not contain underscores. Coordinates use the
shortest decimal that round-trips a double. A dataset is a directory of
sample files plus a manifest listing their paths, one per line, relative to
the manifest's directory.
"""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, TextIO

import numpy as np

from .errors import ParseError
from .geometry import CameraView

FORMAT_VERSION = 1
_TOKEN = re.compile(r"^\S+$")


@dataclass(frozen=True, eq=False)
class CorrespondenceSample:
    """A reference/target image pair with N matched pixel positions.

    ``x_ref`` and ``x_tgt`` are parallel (N, 2) arrays of ``(u, v)``.
    ``ref_size`` / ``tgt_size`` are ``(width, height)`` when known and are
    used for bounds validation.
    """

    ref_view_id: str
    target_view_id: str
    condition_tag: str
    x_ref: np.ndarray
    x_tgt: np.ndarray
    ref_image_path: str = ""
    target_image_path: str = ""
    ref_size: Optional[tuple] = None
    tgt_size: Optional[tuple] = None

    def __post_init__(self):
        xr = np.array(self.x_ref, dtype=np.float64).reshape(-1, 2)
        xt = np.array(self.x_tgt, dtype=np.float64).reshape(-1, 2)
        if len(xr) != len(xt):
            raise ValueError(f"x_ref has {len(xr)} entries, x_tgt {len(xt)}")
        if not (np.all(np.isfinite(xr)) and np.all(np.isfinite(xt))):
            raise ValueError("pixel coordinates must be finite")
        for arr, size, name in ((xr, self.ref_size, "x_ref"), (xt, self.tgt_size, "x_tgt")):
            bad = _out_of_bounds(arr, size)
            if bad.size:
                raise ValueError(f"{name}[{bad[0]}] = {tuple(arr[bad[0]])} outside image")
        xr.setflags(write=False)
        xt.setflags(write=False)
        object.__setattr__(self, "x_ref", xr)
        object.__setattr__(self, "x_tgt", xt)

    @property
    def n(self) -> int:
        return len(self.x_ref)

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, CorrespondenceSample):
            return NotImplemented
        return (
            self.ref_view_id == other.ref_view_id
            and self.target_view_id == other.target_view_id
            and self.condition_tag == other.condition_tag
            and self.ref_image_path == other.ref_image_path
            and self.target_image_path == other.target_image_path
            and np.array_equal(self.x_ref, other.x_ref)
            and np.array_equal(self.x_tgt, other.x_tgt)
        )

    def subset(self, keep) -> "CorrespondenceSample":
        keep = np.asarray(keep)
        return CorrespondenceSample(
            self.ref_view_id, self.target_view_id, self.condition_tag,
            self.x_ref[keep], self.x_tgt[keep], self.ref_image_path,
            self.target_image_path, self.ref_size, self.tgt_size,
        )


def _out_of_bounds(xy: np.ndarray, size) -> np.ndarray:
    if size is None:
        bad = (xy[:, 0] < 0) | (xy[:, 1] < 0)
    else:
        w, h = size
        bad = (xy[:, 0] < 0) | (xy[:, 0] >= w) | (xy[:, 1] < 0) | (xy[:, 1] >= h)
    return np.nonzero(bad)[0]


def encode_tag(tag: str) -> str:
    if not tag or "_" in tag or not _TOKEN.match(tag.replace(" ", "_")):
        raise ValueError(f"condition tag {tag!r} must be nonempty, without underscores "
                         "or whitespace other than single spaces")
    return tag.replace(" ", "_")


def decode_tag(token: str) -> str:
    return token.replace("_", " ")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_sample(sample: CorrespondenceSample, stream: TextIO) -> None:
    for vid in (sample.ref_view_id, sample.target_view_id):
        if not _TOKEN.match(vid):
            raise ValueError(f"view id {vid!r} must be a single token")
    stream.write(f"CORR {FORMAT_VERSION} {sample.ref_view_id} {sample.target_view_id} "
                 f"{encode_tag(sample.condition_tag)} {sample.n}\n")
    for (ur, vr), (ut, vt) in zip(sample.x_ref.tolist(), sample.x_tgt.tolist()):
        stream.write(f"{_fmt(ur)} {_fmt(vr)} {_fmt(ut)} {_fmt(vt)}\n")


def sample_to_text(sample: CorrespondenceSample) -> str:
    buf = io.StringIO()
    write_sample(sample, buf)
    return buf.getvalue()


def read_sample(stream: TextIO, views: Optional[Mapping[str, CameraView]] = None,
                source: Optional[str] = None) -> CorrespondenceSample:
    """Parse one sample.

    Args:
        stream: text stream positioned at the header.
        views: optional view_id -> CameraView map. When given, both view ids
            must be present, image paths are filled in and coordinates are
            checked against the image bounds; otherwise only nonnegativity
            is checked.
        source: name used in error messages.

    Raises:
        ParseError: naming the offending line.
    """
    lines = stream.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty input", 1, source)
    head = lines[0].split(" ")
    if len(head) != 6 or head[0] != "CORR":
        raise ParseError("expected 'CORR 1 <ref> <target> <tag> <N>'", 1, source)
    if head[1] != str(FORMAT_VERSION):
        raise ParseError(f"unsupported format version {head[1]!r}", 1, source)
    ref_id, tgt_id, tag_tok = head[2], head[3], head[4]
    if not all(_TOKEN.match(t) for t in (ref_id, tgt_id, tag_tok)):
        raise ParseError("empty header field", 1, source)
    try:
        n = int(head[5])
    except ValueError:
        raise ParseError(f"N = {head[5]!r} is not an integer", 1, source) from None
    if n < 0 or head[5] != str(n):
        raise ParseError(f"N = {head[5]!r} is not a nonnegative integer", 1, source)
    if len(lines) - 1 != n:
        # first missing line, or first surplus line
        bad_line = len(lines) + 1 if len(lines) - 1 < n else n + 2
        raise ParseError(f"header declares N = {n} but body has {len(lines) - 1} lines",
                         bad_line, source)

    ref_size = tgt_size = None
    ref_path = tgt_path = ""
    if views is not None:
        for vid in (ref_id, tgt_id):
            if vid not in views:
                raise ParseError(f"unknown view id {vid!r}", 1, source)
        rv, tv = views[ref_id], views[tgt_id]
        ref_size, tgt_size = (rv.width, rv.height), (tv.width, tv.height)
        ref_path, tgt_path = rv.image_path, tv.image_path

    coords = np.empty((n, 4))
    for i in range(n):
        lineno = i + 2
        tok = lines[i + 1].split(" ")
        if len(tok) != 4:
            raise ParseError("expected 'ur vr ut vt'", lineno, source)
        try:
            vals = [float(t) for t in tok]
        except ValueError:
            raise ParseError("non-numeric coordinate", lineno, source) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite coordinate", lineno, source)
        if _out_of_bounds(np.array([vals[:2]]), ref_size).size:
            raise ParseError(f"reference pixel {vals[:2]} out of bounds", lineno, source)
        if _out_of_bounds(np.array([vals[2:]]), tgt_size).size:
            raise ParseError(f"target pixel {vals[2:]} out of bounds", lineno, source)
        coords[i] = vals
    return CorrespondenceSample(ref_id, tgt_id, decode_tag(tag_tok), coords[:, :2], coords[:, 2:],
                                ref_path, tgt_path, ref_size, tgt_size)


def sample_filename(sample: CorrespondenceSample) -> str:
    return f"{sample.ref_view_id}__{sample.target_view_id}.corr"


def write_dataset(samples: Sequence[CorrespondenceSample], out_dir,
                  manifest_name: str = "manifest.txt") -> Path:
    """Write one file per sample plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for s in samples:
        name = sample_filename(s)
        if name in names:
            raise ValueError(f"duplicate sample {name}")
        with open(out / name, "w", encoding="utf-8", newline="\n") as fh:
            write_sample(s, fh)
        names.append(name)
    manifest = out / manifest_name
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        for name in names:
            fh.write(name + "\n")
    return manifest


def read_manifest(path) -> List[Path]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                p = Path(line)
                out.append(p if p.is_absolute() else path.parent / p)
    return out


def read_dataset(manifest, views: Optional[Mapping[str, CameraView]] = None) -> List[CorrespondenceSample]:
    samples = []
    for p in read_manifest(manifest):
        with open(p, encoding="utf-8", newline="") as fh:
            samples.append(read_sample(fh, views, source=str(p)))
    return samples


# -- statistics ---------------------------------------------------------------

@dataclass(frozen=True)
class ConditionStats:
    image_pair_count: int
    mean_correspondences: float


@dataclass(frozen=True)
class DatasetStats:
    per_condition: Dict[str, ConditionStats] = field(default_factory=dict)

    def to_tsv(self) -> str:
        rows = ["condition\tpairs\tmean_n"]
        for tag in sorted(self.per_condition):
            st = self.per_condition[tag]
            rows.append(f"{tag}\t{st.image_pair_count}\t{st.mean_correspondences:.1f}")
        return "\n".join(rows) + "\n"


def compute_statistics(samples: Iterable[CorrespondenceSample]) -> DatasetStats:
    """Image-pair count and mean N per condition tag."""
    groups: Dict[str, List[int]] = {}
    for s in samples:
        groups.setdefault(s.condition_tag, []).append(s.n)
    # integer sums keep the mean independent of sample order
    return DatasetStats({
        tag: ConditionStats(len(ns), sum(ns) / len(ns)) for tag, ns in groups.items()
    })
