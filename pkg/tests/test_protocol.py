import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contiseg.protocol import (
    BACKGROUND_ID,
    IGNORE_ID,
    DatasetLoadError,
    GenerationError,
    ProtocolError,
    SegSample,
    SplitSpecError,
    build_task_sequence,
    generate_synthetic_dataset,
    load_dataset,
    make_eval_view,
    make_step_view,
    save_dataset,
)

from conftest import make_sample


# ---------------------------------------------------------------------------
# split arithmetic
# ---------------------------------------------------------------------------

def test_split_15_1():
    seq = build_task_sequence(range(1, 21), "15-1")
    assert [len(g) for g in seq.class_groups] == [15, 1, 1, 1, 1, 1]
    assert seq.num_steps == 6


def test_split_19_1():
    seq = build_task_sequence(range(1, 21), "19-1")
    assert [len(g) for g in seq.class_groups] == [19, 1]


def test_split_single_group():
    seq = build_task_sequence(range(1, 7), "6")
    assert seq.num_steps == 1
    assert seq.class_groups == ((1, 2, 3, 4, 5, 6),)


def test_split_order_follows_universe():
    seq = build_task_sequence([4, 2, 9, 7], "2-1")
    assert seq.class_groups == ((4, 2), (9,), (7,))


def test_split_explicit_groups():
    seq = build_task_sequence([1, 2, 3], [[3, 1], [2]])
    assert seq.class_groups == ((3, 1), (2,))


def test_split_errors():
    with pytest.raises(SplitSpecError):
        build_task_sequence(range(1, 21), "15-2")  # 5 leftover not divisible by 2
    with pytest.raises(SplitSpecError):
        build_task_sequence(range(1, 21), "21-1")
    with pytest.raises(SplitSpecError):
        build_task_sequence([1, 2, 0], "3")  # background id in universe
    with pytest.raises(SplitSpecError):
        build_task_sequence([1, 2, 2], "3")  # duplicate


@given(n=st.integers(2, 60), a=st.integers(1, 59), b=st.integers(1, 10))
@settings(max_examples=200)
def test_split_arithmetic_property(n, a, b):
    universe = list(range(1, n + 1))
    rest = n - a
    if rest >= 0 and rest % b == 0:
        seq = build_task_sequence(universe, f"{a}-{b}")
        assert seq.num_steps == 1 + rest // b
        assert seq.total_classes == n
        assert sorted(seq.all_classes) == universe
    else:
        with pytest.raises(SplitSpecError):
            build_task_sequence(universe, f"{a}-{b}")


# ---------------------------------------------------------------------------
# step / eval views
# ---------------------------------------------------------------------------

def _lab(rows):
    return np.array(rows, dtype=np.int64)


def test_step_view_keeps_and_relabels():
    seq = build_task_sequence([3, 7], [[3], [7]])
    s = make_sample(_lab([[3, 7], [7, 0]]))
    view = make_step_view([s], seq, 2)
    assert len(view.samples) == 1
    assert view.samples[0].labels.tolist() == [[0, 7], [7, 0]]


def test_step_view_drops_without_current_class():
    seq = build_task_sequence([3, 7], [[3], [7]])
    s = make_sample(_lab([[3, 3], [0, 0]]))
    assert make_step_view([s], seq, 2).samples == []


def test_step_view_passes_ignore_through():
    seq = build_task_sequence([1, 2], [[1], [2]])
    s = make_sample(_lab([[2, 255], [1, 255]]))
    view = make_step_view([s], seq, 2)
    assert view.samples[0].labels.tolist() == [[2, 255], [0, 255]]


def test_step_view_out_of_range():
    seq = build_task_sequence([1, 2], "2")
    with pytest.raises(ProtocolError):
        make_step_view([], seq, 2)
    with pytest.raises(ProtocolError):
        make_eval_view([], seq, 0)


def _pixel_loop_step_oracle(samples, current, t):
    """Literal per-pixel restatement of the overlapped-step rule."""
    out = []
    for s in samples:
        if not any(int(v) in current for v in np.unique(s.labels)):
            continue
        lab = s.labels.copy()
        h, w = lab.shape
        for i in range(h):
            for j in range(w):
                v = int(lab[i, j])
                if v not in current and v != IGNORE_ID:
                    lab[i, j] = BACKGROUND_ID
        out.append((s.id, lab))
    return out


def test_step_view_matches_pixel_oracle():
    rng = np.random.default_rng(3)
    ds = generate_synthetic_dataset(12, 16, 6, seed=11)
    # sprinkle some ignore pixels to exercise that path
    noisy = []
    for s in ds:
        lab = s.labels.copy()
        lab[rng.random(lab.shape) < 0.05] = IGNORE_ID
        noisy.append(SegSample(image=s.image, labels=lab, id=s.id))
    seq = build_task_sequence(range(1, 7), "4-1")
    for t in range(1, 4):
        view = make_step_view(noisy, seq, t)
        expected = _pixel_loop_step_oracle(noisy, set(seq.current_classes(t)), t)
        assert [(s.id, s.labels.tolist()) for s in view.samples] == [
            (sid, lab.tolist()) for sid, lab in expected
        ]


def test_eval_view_last_step_keeps_labels():
    ds = generate_synthetic_dataset(6, 16, 4, seed=2)
    seq = build_task_sequence(range(1, 5), "2-1")
    view = make_eval_view(ds, seq, 3)
    for s, orig in zip(view.samples, ds):
        assert np.array_equal(s.labels, orig.labels)


def test_eval_view_future_to_background():
    seq = build_task_sequence([1, 2, 3], [[1], [2], [3]])
    s = make_sample(_lab([[2, 3], [3, 3]]))
    view = make_eval_view([s], seq, 1)
    assert len(view.samples) == 1
    assert view.samples[0].labels.tolist() == [[0, 0], [0, 0]]


def test_eval_view_matches_pixel_oracle():
    ds = generate_synthetic_dataset(10, 16, 6, seed=5)
    seq = build_task_sequence(range(1, 7), "4-1")
    view = make_eval_view(ds, seq, 2)
    seen = set(seq.seen_classes(2))
    for s, orig in zip(view.samples, ds):
        h, w = orig.labels.shape
        for i in range(h):
            for j in range(w):
                v = int(orig.labels[i, j])
                want = v if (v in seen or v == IGNORE_ID) else BACKGROUND_ID
                assert int(s.labels[i, j]) == want


def test_view_labels_stay_in_step_vocabulary(tiny_dataset):
    seq = build_task_sequence(range(1, 7), "4-1")
    for t in range(1, 4):
        allowed = {BACKGROUND_ID, IGNORE_ID, *seq.current_classes(t)}
        view = make_step_view(tiny_dataset, seq, t)
        for s in view.samples:
            assert set(np.unique(s.labels).tolist()) <= allowed
            assert any(int(c) in seq.current_classes(t) for c in np.unique(s.labels))


def test_view_coverage(tiny_dataset):
    """A sample appears in exactly the steps whose classes it contains."""
    seq = build_task_sequence(range(1, 7), "4-1")
    for s in tiny_dataset:
        for t in range(1, 4):
            in_view = any(v.id == s.id for v in make_step_view(tiny_dataset, seq, t).samples)
            assert in_view == bool(s.present_classes & set(seq.current_classes(t)))


def test_views_deterministic(tiny_dataset):
    seq = build_task_sequence(range(1, 7), "4-1")
    a = make_step_view(tiny_dataset, seq, 2)
    b = make_step_view(tiny_dataset, seq, 2)
    assert [s.id for s in a.samples] == [s.id for s in b.samples]
    for x, y in zip(a.samples, b.samples):
        assert np.array_equal(x.labels, y.labels)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def test_generation_deterministic():
    a = generate_synthetic_dataset(8, 32, 4, seed=0)
    b = generate_synthetic_dataset(8, 32, 4, seed=0)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.labels, y.labels)


def test_generation_class_coverage():
    ds = generate_synthetic_dataset(100, 64, 6, seed=1)
    counts = {c: 0 for c in range(1, 7)}
    for s in ds:
        for c in s.present_classes:
            counts[c] += 1
    assert all(v >= 5 for v in counts.values())


def test_generation_label_range():
    ds = generate_synthetic_dataset(10, 32, 6, seed=4)
    for s in ds:
        assert set(np.unique(s.labels).tolist()) <= set(range(0, 7))
        assert s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_generation_too_small():
    with pytest.raises(GenerationError):
        generate_synthetic_dataset(2, 8, 3, seed=0)


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    ds = generate_synthetic_dataset(5, 32, 4, seed=9)
    save_dataset(ds, tmp_path, class_universe=range(1, 5), seed=9)
    back = load_dataset(tmp_path)
    assert [s.id for s in back] == [s.id for s in ds]
    for x, y in zip(ds, back):
        assert np.array_equal(x.labels, y.labels)
        assert np.array_equal(x.image, y.image)


def test_load_empty_dir_warns(tmp_path):
    with pytest.warns(UserWarning):
        assert load_dataset(tmp_path) == []


def test_load_rejects_unknown_label(tmp_path):
    ds = generate_synthetic_dataset(3, 32, 4, seed=9)
    bad = ds[1].labels.copy()
    bad[0, 0] = 37
    ds[1] = SegSample(image=ds[1].image, labels=bad, id=ds[1].id)
    save_dataset(ds, tmp_path, class_universe=range(1, 5))
    with pytest.raises(DatasetLoadError) as exc:
        load_dataset(tmp_path)
    assert ds[1].id in str(exc.value)
    assert "37" in str(exc.value)
