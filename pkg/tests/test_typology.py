import itertools

import pytest

from xli.errors import ValidationError
from xli.typology import (
    UNREPORTED,
    WalsProfile,
    distance_matrix,
    filter_shared_features,
    fixture_matrix_path,
    load_feature_matrix,
    matrix_to_json,
    matrix_to_text,
    syntactic_distance,
)

# Expected English-row distances for the bundled fixture.
FIXTURE_DISTANCES = {"de": 9, "es": 11, "el": 14, "ko": 17, "tr": 27}


def _profiles(rows: dict[str, dict[str, str]]) -> list[WalsProfile]:
    return [WalsProfile(code, feats) for code, feats in rows.items()]


def test_parse_simple_matrix():
    lines = ["language\tf1\tf2\tf3", "en\tA\tB\tA", "de\tA\tA\tC"]
    profiles = load_feature_matrix(lines)
    assert [p.language_code for p in profiles] == ["en", "de"]
    assert profiles[0].features == {"f1": "A", "f2": "B", "f3": "A"}
    assert profiles[1].features["f3"] == "C"


def test_blank_cell_becomes_unreported():
    profiles = load_feature_matrix(["language\tf1\tf2", "en\tA\t", "de\tB\tC"])
    assert profiles[0].features["f2"] == UNREPORTED


def test_duplicate_language_rejected():
    with pytest.raises(ValidationError, match="duplicate language"):
        load_feature_matrix(["language\tf1", "de\tA", "de\tB"])


def test_malformed_row_rejected():
    with pytest.raises(ValidationError, match="expected 3 cells"):
        load_feature_matrix(["language\tf1\tf2", "en\tA"])


def test_shared_features_identity_and_exclusion():
    profiles = _profiles(
        {
            "en": {"f1": "A", "f2": "B"},
            "de": {"f1": "A", "f2": "C"},
        }
    )
    assert filter_shared_features(profiles) == ["f1", "f2"]
    profiles[1].features["f2"] = UNREPORTED
    assert filter_shared_features(profiles) == ["f1"]
    with pytest.raises(ValidationError):
        filter_shared_features(profiles[:1])


def test_distance_identity_and_counting():
    a = WalsProfile("en", {"f1": "A", "f2": "B", "f3": "C", "f4": "D"})
    b = WalsProfile("de", {"f1": "X", "f2": "Y", "f3": "Z", "f4": "D"})
    shared = ["f1", "f2", "f3", "f4"]
    assert syntactic_distance(a, a, shared) == 0
    assert syntactic_distance(a, b, shared) == 3


def test_distance_unreported_feature_rejected():
    a = WalsProfile("en", {"f1": "A"})
    b = WalsProfile("de", {"f1": UNREPORTED})
    with pytest.raises(ValidationError, match="unreported"):
        syntactic_distance(a, b, ["f1"])


@pytest.fixture(scope="module")
def fixture_profiles():
    return load_feature_matrix(fixture_matrix_path())


def test_fixture_shared_feature_count(fixture_profiles):
    assert len(filter_shared_features(fixture_profiles)) == 75


def test_fixture_reproduces_reference_distances(fixture_profiles):
    dm = distance_matrix(fixture_profiles)
    en = dm.languages.index("en")
    for code, expected in FIXTURE_DISTANCES.items():
        assert dm.distances[en][dm.languages.index(code)] == expected


def test_fixture_ordering(fixture_profiles):
    dm = distance_matrix(fixture_profiles)
    en = dm.languages.index("en")
    row = {code: dm.distances[en][dm.languages.index(code)] for code in FIXTURE_DISTANCES}
    assert row["de"] < row["es"] < row["el"] < row["ko"] < row["tr"]


def test_matrix_symmetry_diagonal_and_bounds(fixture_profiles):
    dm = distance_matrix(fixture_profiles)
    n = len(dm.languages)
    for i, j in itertools.product(range(n), range(n)):
        assert dm.distances[i][j] == dm.distances[j][i]
        assert 0 <= dm.distances[i][j] <= dm.shared_feature_count
        if i == j:
            assert dm.distances[i][j] == 0


def test_matrix_renderings(fixture_profiles):
    dm = distance_matrix(fixture_profiles)
    as_json = matrix_to_json(dm)
    assert '"shared_feature_count": 75' in as_json
    text = matrix_to_text(dm)
    assert text.splitlines()[0].split() == dm.languages
    assert "shared features: 75" in text
