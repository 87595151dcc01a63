import numpy as np
import pytest

from spectrack.data import (
    Annotation,
    Band,
    BandSpec,
    MUST_BANDS,
    MsiFrame,
    MsiSequence,
    SequenceFormatError,
    collapse_to_rgb,
    crop_resize,
    load_meta,
    load_sequence,
    rgb_band_groups,
    save_sequence,
)

RNG = np.random.default_rng(7)


def _frame(h=90, w=120, b=8):
    return MsiFrame(values=RNG.uniform(0, 1, (h, w, b)).astype(np.float32))


# -- types ---------------------------------------------------------------------


def test_frame_invariants():
    with pytest.raises(ValueError):
        MsiFrame(values=np.zeros((4, 4, 2)))          # too few bands
    with pytest.raises(ValueError):
        MsiFrame(values=np.full((4, 4, 3), 1.5))      # out of range


def test_annotation_invariants():
    with pytest.raises(ValueError):
        Annotation(box=(1, 2, 3, 4), flag=1)          # flagged must be zero box
    with pytest.raises(ValueError):
        Annotation(box=(1, 2, 0, 4), flag=0)          # visible needs extent
    a = Annotation(box=(10, 20, 4, 6))
    assert a.center() == (12.0, 23.0)


def test_band_invariants():
    with pytest.raises(ValueError):
        Band(500, 400, 450, 100)
    with pytest.raises(ValueError):
        Band(400, 500, 600, 100)
    with pytest.raises(ValueError):
        BandSpec(bands=(Band(500, 600, 550, 100), Band(300, 400, 350, 100)))


def test_sequence_alignment_checked():
    f = _frame(20, 20)
    with pytest.raises(ValueError):
        MsiSequence(frames=[f, f], annotations=[Annotation(box=(1, 1, 2, 2))],
                    bands=MUST_BANDS)
    with pytest.raises(ValueError):
        MsiSequence(frames=[f], annotations=[Annotation(box=(15, 15, 10, 10))],
                    bands=MUST_BANDS)  # box exceeds frame


# -- crop geometry ---------------------------------------------------------------


def test_crop_worked_example():
    # 50x50 box at (100,100), factor 4 -> region [25,25,200,200], scale 1.92
    frame = _frame(900, 1200)
    r = crop_resize(frame, (100, 100, 50, 50), 4.0, 384)
    assert (r.mapping.x0, r.mapping.y0) == (25.0, 25.0)
    assert r.mapping.scale == pytest.approx(1.92)
    assert not r.padded.any()


def test_crop_identity_geometry():
    frame = _frame(300, 300)
    r = crop_resize(frame, (100, 100, 50, 50), 1.0, 100)
    assert (r.mapping.x0, r.mapping.y0) == (100.0, 100.0)
    # mapping round-trips corner points
    for pt_box in [(0, 0, 1, 1), (49, 49, 1, 1)]:
        back = r.mapping.frame_to_patch(r.mapping.patch_to_frame(pt_box))
        assert np.abs(back - np.array(pt_box, dtype=float)).max() < 1e-9


def test_crop_corner_padding():
    frame = _frame(900, 1200)
    r = crop_resize(frame, (0, 0, 50, 50), 4.0, 384)
    assert (r.mapping.x0, r.mapping.y0) == (-75.0, -75.0)
    assert r.padded.any() and not r.padded.all()
    # padded samples hold the per-band mean of the in-frame part
    fill = r.patch[r.padded][0]
    assert np.allclose(r.patch[r.padded], fill)


def test_crop_roundtrip_precision():
    frame = _frame(200, 200)
    r = crop_resize(frame, (40, 60, 30, 20), 4.0, 96)
    box = np.array([45.0, 63.0, 10.0, 8.0])
    twice = r.mapping.frame_to_patch(r.mapping.patch_to_frame(
        r.mapping.frame_to_patch(box)))
    assert np.abs(twice - r.mapping.frame_to_patch(box)).max() < 1e-9


def test_crop_degenerate_box_rejected():
    with pytest.raises(ValueError):
        crop_resize(_frame(), (10, 10, 0, 5), 2.0, 48)


# -- band collapse ----------------------------------------------------------------


def test_must_band_groups_nearest_anchor():
    groups = rgb_band_groups(MUST_BANDS)
    assert groups["R"] == [4, 5, 6, 7]      # 660, 725, 785, 887.5 nm
    assert groups["G"] == [2, 3]            # 550, 602.5 nm
    assert groups["B"] == [0, 1]            # 422.5, 487.5 nm


def test_collapse_identity_at_anchors():
    bands = BandSpec(bands=(
        Band(420, 450, 435.8, 30), Band(530, 560, 546.1, 30), Band(690, 710, 700.0, 20),
    ))
    frame = MsiFrame(values=RNG.uniform(0, 1, (8, 8, 3)).astype(np.float64))
    rgb, out_bands = collapse_to_rgb(frame, bands)
    assert np.allclose(rgb.values, frame.values, atol=1e-12)
    assert [b.center for b in out_bands.bands] == [435.8, 546.1, 700.0]


def test_collapse_preserves_constants():
    frame = MsiFrame(values=np.full((6, 6, 8), 0.37))
    rgb, _ = collapse_to_rgb(frame, MUST_BANDS)
    assert np.allclose(rgb.values, 0.37, atol=1e-12)


def test_collapse_weights_are_width_weighted():
    vals = np.zeros((1, 1, 8))
    vals[0, 0] = np.arange(8) / 10.0
    rgb, _ = collapse_to_rgb(MsiFrame(values=vals), MUST_BANDS)
    widths = MUST_BANDS.widths()
    expect_b = (vals[0, 0, :2] * widths[:2]).sum() / widths[:2].sum()
    expect_g = (vals[0, 0, 2:4] * widths[2:4]).sum() / widths[2:4].sum()
    expect_r = (vals[0, 0, 4:] * widths[4:]).sum() / widths[4:].sum()
    assert np.allclose(rgb.values[0, 0], [expect_b, expect_g, expect_r], atol=1e-12)


# -- sequence i/o ------------------------------------------------------------------


def _tiny_sequence(n=3):
    frames = [MsiFrame(values=RNG.uniform(0, 1, (12, 16, 8)).astype(np.float32))
              for _ in range(n)]
    anns = [Annotation(box=(2, 3, 4, 5))] * (n - 1) + [Annotation(box=(0, 0, 0, 0), flag=1)]
    return MsiSequence(frames=frames, annotations=anns, bands=MUST_BANDS,
                       fps=5.0, attributes=("SC",), name="tiny")


def test_io_round_trip_exact(tmp_path):
    seq = _tiny_sequence()
    save_sequence(seq, tmp_path / "seq")
    back = load_sequence(tmp_path / "seq")
    for a, b in zip(seq.frames, back.frames):
        assert np.array_equal(a.values, b.values)
    assert back.annotations == seq.annotations
    assert back.bands == seq.bands
    assert back.fps == seq.fps
    assert back.attributes == seq.attributes


def test_truncated_annotations_named_frame(tmp_path):
    seq = _tiny_sequence(4)
    save_sequence(seq, tmp_path / "seq")
    gt = (tmp_path / "seq" / "groundtruth.txt").read_text().splitlines()
    (tmp_path / "seq" / "groundtruth.txt").write_text("\n".join(gt[:2]) + "\n")
    with pytest.raises(SequenceFormatError, match="frame 3"):
        load_sequence(tmp_path / "seq")


def test_band_count_mismatch(tmp_path):
    seq = _tiny_sequence()
    save_sequence(seq, tmp_path / "seq")
    f = tmp_path / "seq" / "frame_000001.raw"
    f.write_bytes(f.read_bytes()[: 12 * 16 * 4 * 5])
    with pytest.raises(SequenceFormatError, match="band-count mismatch"):
        load_sequence(tmp_path / "seq")


def test_malformed_header(tmp_path):
    seq = _tiny_sequence()
    save_sequence(seq, tmp_path / "seq")
    meta = (tmp_path / "seq" / "meta").read_text().replace("height = 12", "height = what")
    (tmp_path / "seq" / "meta").write_text(meta)
    with pytest.raises(SequenceFormatError, match="malformed header"):
        load_sequence(tmp_path / "seq")


def test_must_shaped_header_parses(tmp_path):
    lines = ["height = 1200", "width = 900", "bands = 8", "fps = 5.0",
             "frames = 42", "attributes = LR,BC"]
    for i, b in enumerate(MUST_BANDS.bands):
        lines.append(f"band{i + 1} = {b.start},{b.end},{b.center},{b.width}")
    d = tmp_path / "must_like"
    d.mkdir()
    (d / "meta").write_text("\n".join(lines) + "\n")
    meta = load_meta(d)
    assert meta["height"] == 1200 and meta["width"] == 900
    assert meta["bands"] == 8 and meta["fps"] == 5.0
    assert meta["band_table"] == MUST_BANDS
    assert meta["attributes"] == ("LR", "BC")
