"""Typological feature profiles and pairwise syntactic distance.

Distance between two languages is the number of disagreeing features among
those reported for every language in the comparison set.  The bundled
fixture matrix (``fixtures/wals_matrix.tsv``) is a synthetic stand-in
constructed so the six-language English distances are exactly de 9, es 11,
el 14, ko 17, tr 27 over 75 shared features; it is not an extract of the
live WALS database.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ValidationError

UNREPORTED = "unreported"


@dataclass(frozen=True)
class WalsProfile:
    """Categorical feature values for one language; unreported cells are explicit."""

    language_code: str
    features: dict[str, str]


@dataclass(frozen=True)
class DistanceMatrix:
    languages: list[str]
    distances: list[list[int]]
    shared_feature_count: int


def load_feature_matrix(source: str | Path | Iterable[str], delimiter: str = "\t") -> list[WalsProfile]:
    """Parse a language x feature matrix into one profile per language.

    ``source`` is a file path or an iterable of lines.  First column is the
    language code, header row names the feature ids; empty cells become
    ``unreported``.
    """
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    else:
        lines = [ln.rstrip("\n") for ln in source]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ValidationError("feature matrix is empty")

    header = lines[0].split(delimiter)
    feature_ids = header[1:]
    if len(set(feature_ids)) != len(feature_ids):
        raise ValidationError("duplicate feature ids in header")

    profiles: list[WalsProfile] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(delimiter)
        if len(cells) != len(header):
            raise ValidationError(
                f"row {lineno}: expected {len(header)} cells, got {len(cells)}"
            )
        code = cells[0].strip()
        if not code:
            raise ValidationError(f"row {lineno}: missing language code")
        if code in seen:
            raise ValidationError(f"row {lineno}: duplicate language code {code!r}")
        seen.add(code)
        features = {
            fid: (val.strip() if val.strip() else UNREPORTED)
            for fid, val in zip(feature_ids, cells[1:])
        }
        profiles.append(WalsProfile(language_code=code, features=features))
    return profiles


def filter_shared_features(profiles: Sequence[WalsProfile]) -> list[str]:
    """Feature ids reported (non-unreported) in every profile, sorted."""
    if len(profiles) < 2:
        raise ValidationError("need at least 2 profiles to compare")
    shared = None
    for p in profiles:
        reported = {fid for fid, val in p.features.items() if val != UNREPORTED}
        shared = reported if shared is None else shared & reported
    return sorted(shared)


def syntactic_distance(a: WalsProfile, b: WalsProfile, shared: Sequence[str]) -> int:
    """Count of shared features on which the two profiles disagree."""
    d = 0
    for fid in shared:
        va = a.features.get(fid, UNREPORTED)
        vb = b.features.get(fid, UNREPORTED)
        if va == UNREPORTED or vb == UNREPORTED:
            raise ValidationError(
                f"feature {fid!r} unreported for {a.language_code!r} or {b.language_code!r}"
            )
        if va != vb:
            d += 1
    return d


def distance_matrix(profiles: Sequence[WalsProfile]) -> DistanceMatrix:
    shared = filter_shared_features(profiles)
    langs = [p.language_code for p in profiles]
    dist = [
        [syntactic_distance(a, b, shared) for b in profiles] for a in profiles
    ]
    return DistanceMatrix(languages=langs, distances=dist, shared_feature_count=len(shared))


def matrix_to_json(dm: DistanceMatrix) -> str:
    return json.dumps(
        {
            "languages": dm.languages,
            "distances": dm.distances,
            "shared_feature_count": dm.shared_feature_count,
        },
        indent=2,
        sort_keys=True,
    )


def matrix_to_text(dm: DistanceMatrix) -> str:
    """Aligned-column rendering of the distance matrix."""
    width = max(4, max(len(c) for c in dm.languages) + 1)
    out = ["".ljust(width) + "".join(c.rjust(width) for c in dm.languages)]
    for code, row in zip(dm.languages, dm.distances):
        out.append(code.ljust(width) + "".join(str(d).rjust(width) for d in row))
    out.append(f"shared features: {dm.shared_feature_count}")
    return "\n".join(out) + "\n"


def fixture_matrix_path() -> Path:
    """Path to the bundled synthetic six-language fixture matrix."""
    return Path(resources.files("xli").joinpath("fixtures/wals_matrix.tsv"))
