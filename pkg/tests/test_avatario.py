import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghsa.avatario import container
from ghsa.avatario.assets import (load_asset, load_baked, load_checkpoint, load_rig, save_asset,
                                  save_baked, save_checkpoint, save_rig)
from ghsa.avatario.oneeuro import OneEuroState, one_euro_filter, smooth_landmarks
from ghsa.avatario.sequence import load_sequence, save_sequence
from ghsa.avatario.synthetic import (SyntheticConfig, check_homographies, make_synthetic,
                                     make_toy_rig)
from ghsa.errors import CorruptAsset, InvalidArgument
from ghsa.fastpath import BakedAvatar
from ghsa.gaussmodel import GaussianSet

from helpers import small_scene, small_trainer, tiny_scene


# -- container ------------------------------------------------------------------

DTYPES = ["<f4", "<f8", "<i4", "<i8", "|u1", "|b1"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 5))
def test_container_round_trip_is_bit_exact(seed, n):
    rng = np.random.default_rng(seed)
    blobs = {}
    for i in range(n):
        dt = np.dtype(DTYPES[rng.integers(len(DTYPES))])
        shape = tuple(rng.integers(0, 5, rng.integers(0, 4)))
        raw = rng.integers(0, 256, int(np.prod(shape)) * dt.itemsize, dtype=np.uint8)
        blobs[f"b{i}"] = (raw.view(dt) if dt.kind != "b" else raw.astype(bool)).reshape(shape)
    kind, meta, out = container.unpack(container.pack("test", blobs, {"k": [1, 2]}))
    assert kind == "test" and meta == {"k": [1, 2]}
    assert list(out) == list(blobs)
    for k in blobs:
        assert out[k].dtype == blobs[k].dtype and out[k].shape == blobs[k].shape
        assert out[k].tobytes() == blobs[k].tobytes()


def test_blobs_are_aligned():
    data = container.pack("t", {"a": np.arange(3, dtype="<f4"), "b": np.arange(5.0)})
    assert len(data) % container.ALIGN == 0


def test_big_endian_input_stored_little_endian():
    a = np.arange(4, dtype=">f8")
    _, _, out = container.unpack(container.pack("t", {"a": a}))
    assert out["a"].dtype.str == "<f8"
    np.testing.assert_array_equal(out["a"], a)


def test_truncated_file_is_corrupt():
    data = container.pack("t", {"a": np.arange(40.0)})
    with pytest.raises(CorruptAsset):
        container.unpack(data[:-8])
    with pytest.raises(CorruptAsset):
        container.unpack(data[:10])


def test_wrong_byte_order_mark():
    data = bytearray(container.pack("t", {"a": np.zeros(2)}))
    data[6], data[7] = data[7], data[6]
    with pytest.raises(CorruptAsset) as exc:
        container.unpack(bytes(data))
    assert exc.value.field == "byte_order"


def test_flipped_payload_byte_fails_checksum():
    data = bytearray(container.pack("t", {"a": np.arange(8.0)}))
    data[-3] ^= 0xFF
    with pytest.raises(CorruptAsset) as exc:
        container.unpack(bytes(data))
    assert exc.value.field == "a"


def test_kind_is_checked():
    with pytest.raises(CorruptAsset):
        container.unpack(container.pack("rig", {}), kind="avatar")


def test_unsupported_dtype_refused():
    with pytest.raises(ValueError):
        container.pack("t", {"a": np.zeros(2, np.complex128)})


# -- assets ---------------------------------------------------------------------

def same_params(a, b):
    pa, pb = a.parameters(), b.parameters()
    assert pa.keys() == pb.keys()
    for k in pa:
        assert pa[k].dtype == pb[k].dtype and pa[k].tobytes() == pb[k].tobytes(), k


def test_avatar_asset_round_trip(tmp_path):
    av, _ = tiny_scene()
    save_asset(tmp_path / "a.ghsa", av)
    back = load_asset(tmp_path / "a.ghsa")
    same_params(av, back)
    assert back.tex.padding == av.tex.padding


def test_avatar_asset_without_anchors(tmp_path):
    av, _ = tiny_scene(n_anchor=0)
    save_asset(tmp_path / "a.ghsa", av)
    assert load_asset(tmp_path / "a.ghsa").anchors is None


def test_rig_round_trip(tmp_path):
    rig = make_toy_rig(0)
    save_rig(tmp_path / "r.ghsa", rig)
    back = load_rig(tmp_path / "r.ghsa")
    assert back.joint_names == rig.joint_names
    np.testing.assert_array_equal(back.parents, rig.parents)
    for k in ("rest_joints", "ref_verts", "ref_weights", "ref_expr"):
        np.testing.assert_allclose(getattr(back, k), getattr(rig, k), rtol=1e-6, atol=1e-7)


def test_checkpoint_resumes_identically(tmp_path):
    scene = small_scene()
    tr = small_trainer(scene=scene)
    tr.begin_stage(1)
    for _ in range(3):
        tr.step()
    save_checkpoint(tmp_path / "c.ghsa", tr)
    back = load_checkpoint(tmp_path / "c.ghsa", scene.train)
    same_params(tr.av, back.av)
    a = [float(tr.step()["loss"]) for _ in range(2)]
    b = [float(back.step()["loss"]) for _ in range(2)]
    assert a == b


def test_baked_round_trip(tmp_path):
    rig = make_toy_rig(0)
    rng = np.random.default_rng(0)
    n, m = 7, 5
    head = GaussianSet(rng.normal(size=(n, 3)), rng.random((n, 3)), rng.normal(size=(n, 4)),
                       rng.random(n), rng.normal(size=(n, 16, 3)))
    nj, ne, npz = rig.n_joints, rig.n_expr, rig.n_pose * 9
    b = BakedAvatar(rig, head, rng.normal(size=(n, ne, 3)), rng.normal(size=(n, npz, 3)),
                    rng.random((n, nj)), rng.normal(size=(m, 3)), rng.normal(size=(m, ne, 3)),
                    rng.normal(size=(m, npz, 3)), rng.random((m, nj)), rng.random((m, 2)),
                    rng.random((12, 14, 3)), padding=3, canonical=2)
    save_baked(tmp_path / "b.ghsa", b)
    c = load_baked(tmp_path / "b.ghsa")
    for k in ("head_E", "head_P", "head_W", "anchor_mu", "anchor_E", "anchor_P", "anchor_W",
              "target_uv", "texture"):
        assert getattr(c, k).tobytes() == getattr(b, k).tobytes(), k
    for k in ("mu", "scale", "quat", "opacity", "sh"):
        assert getattr(c.head, k).tobytes() == getattr(head, k).tobytes()
    assert (c.padding, c.canonical) == (3, 2)


def test_loading_wrong_kind(tmp_path):
    save_rig(tmp_path / "r.ghsa", make_toy_rig(0))
    with pytest.raises(CorruptAsset):
        load_asset(tmp_path / "r.ghsa")


# -- sequences ------------------------------------------------------------------

@pytest.mark.parametrize("fmt", ["pfm", "png"])
def test_sequence_round_trip(tmp_path, fmt):
    frames = small_scene(n_frames=3).frames
    path = tmp_path / "seq.jsonl"
    save_sequence(str(path), frames, image_format=fmt)
    back = load_sequence(str(path))
    assert len(back) == 3
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.psi, b.psi)
        np.testing.assert_array_equal(a.ldmk, b.ldmk)
        assert a.cam.to_dict() == b.cam.to_dict()
        tol = 0 if fmt == "pfm" else 0.5 / 255 + 1e-7
        np.testing.assert_allclose(b.image, a.image, atol=tol)
        np.testing.assert_allclose(b.extra["fg_mask"], a.extra["fg_mask"], atol=tol)


def test_sequence_indices_must_increase(tmp_path):
    frames = small_scene(n_frames=2).frames
    frames = [frames[1], frames[0]]
    path = tmp_path / "seq.jsonl"
    save_sequence(str(path), frames, write_images=False)
    with pytest.raises(InvalidArgument):
        load_sequence(str(path))


def test_sequence_bad_record(tmp_path):
    path = tmp_path / "seq.jsonl"
    path.write_text('{"index": 0}\n')
    with pytest.raises(InvalidArgument):
        load_sequence(str(path))


# -- One-Euro -------------------------------------------------------------------

def run_filter(xs, min_cutoff=1.0, beta=0.0, rate=30.0):
    s = OneEuroState(min_cutoff, beta)
    return [float(one_euro_filter(s, x, i / rate)) for i, x in enumerate(xs)]


def test_constant_signal_is_unchanged():
    assert run_filter([2.5] * 20, beta=0.5) == [2.5] * 20


def test_step_response_is_monotone_and_bounded():
    out = run_filter([0.0] * 5 + [1.0] * 40)
    tail = out[5:]
    assert all(b >= a for a, b in zip(tail, tail[1:]))
    assert all(0 <= v <= 1 for v in out) and tail[-1] > 0.99


def test_huge_cutoff_passes_through():
    xs = np.random.default_rng(0).normal(size=10)
    np.testing.assert_allclose(run_filter(xs, min_cutoff=1e9), xs, atol=1e-6)


def test_first_sample_factor():
    # dt = 1/30 and cutoff 1 Hz: alpha = r / (r + 1), r = 2 pi / 30
    r = 2 * np.pi / 30
    assert run_filter([0.0, 1.0])[1] == pytest.approx(r / (r + 1), rel=1e-12)


def test_timestamps_must_increase():
    s = OneEuroState()
    one_euro_filter(s, 1.0, 0.5)
    with pytest.raises(InvalidArgument):
        one_euro_filter(s, 1.0, 0.5)


def test_landmark_smoothing_skips_missing():
    frames = small_scene(n_frames=4).frames
    frames[2].ldmk[1] = np.nan
    out = smooth_landmarks(frames)
    assert np.isnan(out[2].ldmk[1]).all()
    np.testing.assert_array_equal(out[0].ldmk, frames[0].ldmk)
    assert np.isfinite(out[3].ldmk).all()


# -- synthetic data -------------------------------------------------------------

def test_synthetic_is_deterministic():
    cfg = SyntheticConfig(n_frames=4, height=32, width=32, n_head_gaussians=60)
    a, b = make_synthetic(cfg, 3), make_synthetic(cfg, 3)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.image.tobytes() == fb.image.tobytes()
        assert fa.theta.tobytes() == fb.theta.tobytes()
    assert make_synthetic(cfg, 4).frames[1].image.tobytes() != a.frames[1].image.tobytes()


def test_static_scene_frames_are_identical():
    s = make_synthetic(SyntheticConfig(n_frames=3, height=32, width=32, n_head_gaussians=60,
                                       motion=False), 0)
    for fr in s.frames[1:]:
        np.testing.assert_array_equal(fr.image, s.frames[0].image)


def test_plate_motion_is_a_homography():
    s = make_synthetic(SyntheticConfig(n_frames=8, height=64, width=64, n_head_gaussians=60), 1)
    assert check_homographies(s) <= 1e-6


def test_train_test_split():
    s = make_synthetic(SyntheticConfig(n_frames=10, height=32, width=32, n_head_gaussians=60), 0)
    assert s.test_ids == [4, 9]
    assert sorted(s.test_ids + s.train_ids) == list(range(10))
