import csv
import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdnet.dataset import (
    MANIFEST_COLUMNS,
    POSITIVE_LEVELS,
    DatasetManifest,
    ImageRecord,
    RaleScore,
    SeverityLevel,
    load_manifest,
    load_plan,
    make_cv_plan,
    save_plan,
    severity_from_rale,
    validation_size,
)
from sdnet.errors import InsufficientData, InvalidCombination, InvalidManifest, InvalidRale


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({c: row.get(c, "") for c in MANIFEST_COLUMNS})
    return path


def synthetic_manifest(n_pos, n_neg):
    recs = []
    for i in range(n_pos):
        recs.append(ImageRecord(f"p{i:04d}", f"p{i}.png", "P", SeverityLevel.MILD))
    for i in range(n_neg):
        recs.append(ImageRecord(f"n{i:04d}", f"n{i}.png", "N", SeverityLevel.NEGATIVE_CONTROL))
    return DatasetManifest(tuple(recs))


# -- severity ------------------------------------------------------------------


@pytest.mark.parametrize(
    "left,right,expected",
    [
        (0, 0, SeverityLevel.NORMAL_PCR_PLUS),
        (1, 0, SeverityLevel.MILD),
        (1, 1, SeverityLevel.MILD),
        (2, 1, SeverityLevel.MODERATE),
        (2, 2, SeverityLevel.MODERATE),
        (4, 1, SeverityLevel.MODERATE),
        (3, 3, SeverityLevel.SEVERE),
        (4, 4, SeverityLevel.SEVERE),
    ],
)
def test_severity_from_rale_bands(left, right, expected):
    assert severity_from_rale(RaleScore(left, right), True) is expected


def test_severity_rejects_out_of_range():
    with pytest.raises(InvalidRale):
        severity_from_rale(RaleScore(5, 0), True)
    with pytest.raises(InvalidRale):
        RaleScore(-1, 2)


def test_normal_pcr_negative_is_not_a_positive_severity():
    with pytest.raises(InvalidCombination):
        severity_from_rale(RaleScore(0, 0), False)
    # nonzero totals do not depend on PCR
    assert severity_from_rale(RaleScore(1, 2), False) is SeverityLevel.MODERATE


def test_severity_total_and_monotone():
    levels = []
    for total in range(9):
        rale = RaleScore(min(total, 4), total - min(total, 4))
        assert rale.total == total
        levels.append(severity_from_rale(rale, True))
    ranks = [lv.rank for lv in levels]
    assert ranks == sorted(ranks)
    assert set(levels) == set(POSITIVE_LEVELS)


# -- manifest ------------------------------------------------------------------


def test_load_manifest_full_sized(tmp_path):
    rows = [dict(id=f"p{i}", path=f"P/{i}.png", label="P", rale_left=1, rale_right=1, pcr_positive="true", view="PA")
            for i in range(426)]
    rows += [dict(id=f"n{i}", path=f"N/{i}.png", label="N", view="PA") for i in range(426)]
    m = load_manifest(write_csv(tmp_path / "m.csv", rows), check_files=False)
    assert m.n == 852 == len(m.records)
    assert m.class_counts() == {"N": 426, "P": 426}
    assert all(r.severity is SeverityLevel.MILD for r in m if r.label == "P")
    assert all(r.severity is SeverityLevel.NEGATIVE_CONTROL for r in m if r.label == "N")


def test_load_manifest_header_only(tmp_path):
    m = load_manifest(write_csv(tmp_path / "m.csv", []))
    assert m.n == 0


def test_duplicate_id_names_the_row(tmp_path):
    rows = [dict(id="a", path="a.png", label="N", view="PA"), dict(id="a", path="b.png", label="N", view="PA")]
    with pytest.raises(InvalidManifest) as exc:
        load_manifest(write_csv(tmp_path / "m.csv", rows), check_files=False)
    assert exc.value.diagnostics[0][0] == 3
    assert "duplicate id 'a'" in str(exc.value)


@pytest.mark.parametrize(
    "row,fragment",
    [
        (dict(id="x", path="x.png", label="P", severity="Mild", view="AP"), "only PA"),
        (dict(id="x", path="x.png", label="N", severity="Severe", view="PA"), "mismatch"),
        (dict(id="x", path="x.png", label="P", severity="NegativeControl", view="PA"), "mismatch"),
        (dict(id="x", path="x.png", label="P", rale_left=5, rale_right=0, view="PA"), "RALE"),
        (dict(id="x", path="x.png", label="P", severity="Severe", rale_left=1, rale_right=0, view="PA"), "mismatch"),
        (dict(id="x", path="x.png", label="P", view="PA"), "severity or RALE"),
        (dict(id="x", path="x.png", label="Q", view="PA"), "label"),
        (dict(id="x", path="x.png", label="P", rale_left=0, rale_right=0, pcr_positive="false", view="PA"),
         "negative control"),
    ],
)
def test_invalid_rows(tmp_path, row, fragment):
    with pytest.raises(InvalidManifest) as exc:
        load_manifest(write_csv(tmp_path / "m.csv", [row]), check_files=False)
    assert fragment in str(exc.value)
    assert exc.value.diagnostics[0][0] == 2


def test_missing_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,path,label\nx,x.png,N\n")
    with pytest.raises(InvalidManifest, match="missing column"):
        load_manifest(p)


def test_missing_file_detected(tmp_path):
    rows = [dict(id="x", path="nope.png", label="N", view="PA")]
    with pytest.raises(InvalidManifest, match="not found"):
        load_manifest(write_csv(tmp_path / "m.csv", rows))


def test_jsonl_mirrors_csv(tmp_path):
    rows = [dict(id="p", path="p.png", label="P", severity="Normal-PCR+", pcr_positive=True, view="PA"),
            dict(id="n", path="n.png", label="N", view="PA")]
    p = tmp_path / "m.jsonl"
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    m = load_manifest(p, check_files=False)
    assert [r.severity for r in m] == [SeverityLevel.NORMAL_PCR_PLUS, SeverityLevel.NEGATIVE_CONTROL]


def test_exclude_normal_pcr():
    recs = (
        ImageRecord("a", "a", "P", SeverityLevel.NORMAL_PCR_PLUS),
        ImageRecord("b", "b", "P", SeverityLevel.SEVERE),
        ImageRecord("c", "c", "N", SeverityLevel.NEGATIVE_CONTROL),
    )
    assert DatasetManifest(recs).exclude_normal_pcr().ids == ["b", "c"]


# -- CV plans --------------------------------------------------------------------


def check_plan(plan, manifest):
    label = {r.id: r.label for r in manifest}
    all_ids = Counter(manifest.ids)
    for r in range(plan.repeats):
        folds = [plan.get(r, f) for f in range(plan.folds)]
        union = Counter(i for a in folds for i in a.test)
        assert union == all_ids  # partition: every id exactly once
        for lab in ("P", "N"):
            counts = [sum(label[i] == lab for i in a.test) for a in folds]
            assert max(counts) - min(counts) <= 1
        for a in folds:
            tr, va, te = set(a.train), set(a.val), set(a.test)
            assert not (tr & va) and not (tr & te) and not (va & te)
            assert len(tr) == len(a.train) and len(va) == len(a.val)
            portion = len(a.train) + len(a.val)
            assert portion == manifest.n - len(a.test)
            assert len(a.val) == validation_size(portion, plan.val_fraction)


def test_small_stratified_plan():
    m = synthetic_manifest(10, 10)
    plan = make_cv_plan(m, repeats=1, folds=5, seed=3)
    for a in plan.assignments:
        labels = Counter(i[0] for i in a.test)
        assert labels == {"p": 2, "n": 2}
    check_plan(plan, m)


def test_full_sized_fold_sizes():
    m = synthetic_manifest(426, 426)
    plan = make_cv_plan(m, repeats=5, folds=5, seed=7)
    assert len(plan) == 25
    # integer-partition oracle: 426 = 86 + 4 * 85
    for r in range(5):
        for lab in "pn":
            sizes = sorted(sum(i[0] == lab for i in plan.get(r, f).test) for f in range(5))
            assert sizes == [85, 85, 85, 85, 86]
    check_plan(plan, m)
    # 10% of the 681- or 682-image training portion
    assert {len(a.val) for a in plan.assignments} == {68}


def test_validation_size_rule():
    assert validation_size(5, 0.1) == 1  # round(0.5) half-up
    assert validation_size(4, 0.1) == 1  # floor at 1
    assert validation_size(15, 0.1) == 2  # 1.5 -> 2
    assert validation_size(682, 0.1) == 68


def test_plan_determinism_and_roundtrip(tmp_path):
    m = synthetic_manifest(30, 17)
    a = make_cv_plan(m, repeats=3, folds=4, seed=11)
    b = make_cv_plan(m, repeats=3, folds=4, seed=11)
    assert a.to_json() == b.to_json()
    assert make_cv_plan(m, repeats=3, folds=4, seed=12).to_json() != a.to_json()
    save_plan(a, tmp_path / "plan.json")
    assert load_plan(tmp_path / "plan.json").to_json() == a.to_json()


def test_repeats_shuffle_independently():
    m = synthetic_manifest(20, 20)
    plan = make_cv_plan(m, repeats=2, folds=5, seed=0)
    assert plan.get(0, 0).test != plan.get(1, 0).test


def test_explicit_seed_list():
    m = synthetic_manifest(20, 20)
    same = make_cv_plan(m, repeats=2, folds=5, seeds=[4, 4])
    assert same.get(0, 0).test == same.get(1, 0).test
    assert same.repeat_seeds == ((4,), (4,))


def test_insufficient_data():
    with pytest.raises(InsufficientData):
        make_cv_plan(synthetic_manifest(4, 10), folds=5)
    with pytest.raises(InsufficientData):
        make_cv_plan(synthetic_manifest(10, 10), folds=1)


@settings(max_examples=40, deadline=None)
@given(
    n_pos=st.integers(2, 60),
    n_neg=st.integers(2, 60),
    folds=st.integers(2, 6),
    repeats=st.integers(1, 3),
    seed=st.integers(0, 2**32 - 1),
)
def test_plan_invariants_property(n_pos, n_neg, folds, repeats, seed):
    if min(n_pos, n_neg) < folds:
        with pytest.raises(InsufficientData):
            make_cv_plan(synthetic_manifest(n_pos, n_neg), repeats=repeats, folds=folds, seed=seed)
        return
    m = synthetic_manifest(n_pos, n_neg)
    plan = make_cv_plan(m, repeats=repeats, folds=folds, seed=seed)
    assert len(plan) == repeats * folds
    check_plan(plan, m)
