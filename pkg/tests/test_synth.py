import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentseg import synth as S


def tv(img):
    a = S.to_float(img).astype(np.float64)
    return np.abs(np.diff(a, axis=0)).mean() + np.abs(np.diff(a, axis=1)).mean()


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "lqseg"
    manifest = S.build_dataset(4, 3, seed=11, out_dir=root)
    return manifest, root


# -- clean samples ----------------------------------------------------------

def test_shape_sample_format_and_determinism():
    img, mask = S.gen_shape_sample(5)
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8
    assert mask.shape == (64, 64) and set(np.unique(mask)) <= {0, 255}
    again = S.gen_shape_sample(5)
    assert np.array_equal(img, again[0]) and np.array_equal(mask, again[1])
    assert not np.array_equal(img, S.gen_shape_sample(6)[0])
    with pytest.raises(ValueError):
        S.gen_shape_sample(0, size=16)


def test_foreground_fraction_in_band():
    fracs = [(S.gen_shape_sample(s)[1] > 0).mean() for s in range(1000)]
    assert 0.03 <= min(fracs) and max(fracs) <= 0.6
    assert np.std(fracs) > 0.03   # the generator is not stuck on one size


# -- primitives -------------------------------------------------------------

@pytest.mark.parametrize("kind", S.KERNEL_KINDS)
@pytest.mark.parametrize("size", [3, 7, 21])
def test_kernels_normalised_symmetric(kind, size):
    k = S.make_blur_kernel(kind, size, 1.3, 2.0)
    assert k.shape == (size, size)
    assert k.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(k >= 0)
    np.testing.assert_allclose(k, k.T)
    np.testing.assert_allclose(k, k[::-1, ::-1])
    assert k[size // 2, size // 2] == k.max()


def test_kernel_validation():
    for bad in [(4, 1.0), (0, 1.0), (5, 0.0)]:
        with pytest.raises(ValueError):
            S.make_blur_kernel("gaussian", *bad)
    with pytest.raises(ValueError):
        S.make_blur_kernel("box", 5, 1.0)
    with pytest.raises(ValueError):
        S.apply_blur(np.zeros((4, 4)), S.make_blur_kernel("gaussian", 7, 1.0))


def test_blur_reduces_total_variation():
    rng = np.random.default_rng(0)
    for kind in S.KERNEL_KINDS:
        k = S.make_blur_kernel(kind, 7, 1.5, 2.0)
        for _ in range(100 // len(S.KERNEL_KINDS) + 1):
            img = rng.random((32, 32, 3)).astype(np.float32)
            assert tv(S.apply_blur(img, k)) < tv(img)
    for s in range(10):
        img, _ = S.gen_shape_sample(s)
        assert tv(S.apply_blur(img, S.make_blur_kernel("gaussian", 7, 1.5))) < tv(img)


def test_unit_kernel_blur_is_identity():
    img = S.to_float(S.gen_shape_sample(1)[0])
    np.testing.assert_allclose(S.apply_blur(img, np.ones((1, 1))), img, atol=1e-7)


def test_resize_round_trip_and_validation():
    img = S.to_float(S.gen_shape_sample(2)[0])
    small = S.apply_resize(img, 0.5, "area")
    assert small.shape == (32, 32, 3)
    assert S.apply_resize(small, algo="bicubic", size=(64, 64)).shape == (64, 64, 3)
    np.testing.assert_array_equal(S.apply_resize(img, 1.0), img)
    with pytest.raises(ValueError):
        S.apply_resize(img, 0.0)
    with pytest.raises(ValueError):
        S.apply_resize(img, 0.5, "lanczos")


def test_gaussian_noise_per_pixel_std():
    gray = np.full((4, 4), 0.5, np.float32)
    draws = np.stack([S.apply_noise(gray, "gaussian", 0.1, seed=s) for s in range(10000)])
    std = draws.std(axis=0)
    assert np.all(np.abs(std - 0.1) <= 0.005)


def test_gaussian_noise_std():
    flat = np.full((256, 256), 0.5, np.float32)
    out = S.apply_noise(flat, "gaussian", 0.05, seed=0)
    assert np.std(out - flat) == pytest.approx(0.05, rel=0.03)
    assert np.array_equal(out, S.apply_noise(flat, "gaussian", 0.05, seed=0))
    assert abs(np.mean(out - flat)) < 0.002


def test_poisson_noise_mean_and_variance():
    flat = np.full((256, 256), 0.4, np.float32)
    out = S.apply_noise(flat, "poisson", 0.05, seed=1)
    assert np.mean(out) == pytest.approx(0.4, abs=0.002)
    # variance of rate-scaled Poisson noise is image * strength^2
    assert np.var(out) == pytest.approx(0.4 * 0.05 ** 2, rel=0.05)
    with pytest.raises(ValueError):
        S.apply_noise(flat, "speckle", 0.1, 0)
    with pytest.raises(ValueError):
        S.apply_noise(flat, "gaussian", 0.0, 0)


def test_jpeg_quality_ordering():
    for s in range(50):
        img, _ = S.gen_shape_sample(s)
        assert S.psnr(S.apply_jpeg(img, 100), img) >= 40
        assert S.psnr(S.apply_jpeg(img, 10), img) < S.psnr(S.apply_jpeg(img, 90), img)
    with pytest.raises(ValueError):
        S.apply_jpeg(img, 0)


def test_psnr_conventions():
    a = np.zeros((4, 4))
    assert S.psnr(a, a) == float("inf")
    assert S.psnr(a, np.full((4, 4), 0.1)) == pytest.approx(20.0)


# -- recipes ----------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.sampled_from(S.LEVELS), st.integers(0, 2**32 - 1))
def test_recipe_structure(level, seed):
    r = S.sample_recipe(level, seed, (64, 64))
    assert r.ops[0]["op"] == "resize" and r.ops[-1]["op"] == "resize"
    assert r.rate == {1: 1, 2: 2, 3: 4}[level]
    middle = [op["op"] for op in r.ops[1:-1]]
    assert len(middle) == len(set(middle)) and set(middle) <= {"blur", "noise", "jpeg"}
    for op in r.ops:
        if op["op"] == "blur":
            assert op["kernel_size"] % 2 == 1 and op["kernel_size"] <= 64 // r.rate
    assert S.DegradationRecipe.from_json(r.to_json()) == r


def test_recipe_reapply_is_bit_exact():
    img, _ = S.gen_shape_sample(8)
    for lv in S.LEVELS:
        lq, recipe = S.degrade(img, lv, seed=123 + lv)
        again = S.apply_recipe(img, S.DegradationRecipe.from_json(recipe.to_json()))
        assert np.array_equal(lq, again)
        assert lq.shape == (64, 64, 3)


def test_recipe_rejects_unknown_level_and_op():
    with pytest.raises(ValueError):
        S.sample_recipe(4, 0, (64, 64))
    bad = S.DegradationRecipe(1, [{"op": "sharpen"}], 0)
    with pytest.raises(ValueError):
        S.apply_recipe(np.zeros((8, 8, 3)), bad)


def test_levels_order_by_psnr():
    means = {}
    for lv in S.LEVELS:
        vals = []
        for s in range(40):
            img, _ = S.gen_shape_sample(s)
            vals.append(S.psnr(S.to_uint8(S.degrade(img, lv, 1000 + s)[0]), img))
        means[lv] = np.mean(vals)
    assert means[1] > means[2] > means[3]


# -- dataset ----------------------------------------------------------------

def test_dataset_layout_and_manifest(tiny):
    manifest, root = tiny
    assert len(manifest.records) == (4 + 3) * 3
    assert len(manifest.split("train")) == 12 and len(manifest.split("test", [2])) == 3
    parsed = S.DatasetManifest.load(root / "manifest.jsonl")
    assert parsed == manifest and parsed.seed == 11 and parsed.version == S.GENERATOR_VERSION
    for r in manifest.records:
        for key in ("hq", "lq", "mask"):
            assert (root / r[key]).is_file()
    assert not list(root.parent.glob("*.partial-*"))


def test_dataset_files_reproduce_from_recipes(tiny):
    manifest, root = tiny
    for r in manifest.split("test"):
        hq = S.read_png(root / r["hq"])
        lq = S.read_png(root / r["lq"])
        again = S.to_uint8(S.apply_recipe(hq, S.DegradationRecipe.from_json(r["recipe"])))
        assert np.array_equal(lq, again)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_byte_identical_rebuild(tiny, tmp_path):
    manifest, root = tiny
    S.build_dataset(4, 3, seed=11, out_dir=tmp_path / "again")
    assert _digest(root) == _digest(tmp_path / "again")


def test_dataset_refuses_non_empty_dir_and_bad_level(tmp_path):
    d = tmp_path / "x"
    d.mkdir()
    (d / "keep").write_text("x")
    with pytest.raises(FileExistsError):
        S.build_dataset(1, 1, out_dir=d)
    with pytest.raises(ValueError):
        S.build_dataset(1, 1, levels=[5], out_dir=tmp_path / "y")


def test_manifest_parse_requires_header():
    with pytest.raises(ValueError):
        S.DatasetManifest.parse(json.dumps({"id": "a"}) + "\n")
    with pytest.raises(ValueError):
        S.DatasetManifest.parse("")


def test_load_split_reads_and_records_missing(tiny, tmp_path):
    manifest, root = tiny
    full = S.load_split(manifest, root, "train")
    assert full.hq.shape == (4, 64, 64, 3) and full.masks.shape == (4, 64, 64)
    assert sorted(full.lq) == [1, 2, 3] and full.missing == []
    # copy the tree and remove one LQ file
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    victim = manifest.split("train", [2])[1]
    (copy / victim["lq"]).unlink()
    part = S.load_split(manifest, copy, "train")
    assert len(part.missing) == 1 and part.missing[0].startswith(victim["id"] + ":")
    assert victim["id"] not in part.ids and len(part.ids) == 3


def test_kernel_reductions():
    for size in (5, 9):
        np.testing.assert_allclose(S.make_blur_kernel("generalized_gaussian", size, 1.7, 1.0),
                                   S.make_blur_kernel("gaussian", size, 1.7), rtol=1e-12)
    for kind in S.KERNEL_KINDS:
        assert S.make_blur_kernel(kind, 1, 0.8, 2.0).tolist() == [[1.0]]
        assert abs(S.make_blur_kernel(kind, 15, 2.5, 0.7).sum() - 1) <= 1e-9


def test_blur_keeps_constant_image():
    flat = np.full((20, 20, 3), 0.37, np.float32)
    np.testing.assert_allclose(S.apply_blur(flat, S.make_blur_kernel("plateau", 7, 2.0, 1.5)), flat,
                               atol=1e-6)


def test_resize_unit_scale_any_algo():
    img = S.to_float(S.gen_shape_sample(2)[0])
    for algo in S.RESIZE_ALGOS:
        assert S.apply_resize(img, 1.0, algo).shape == img.shape


def test_noise_vanishing_strength_and_jpeg_dims():
    img = S.to_float(S.gen_shape_sample(3)[0])
    np.testing.assert_allclose(S.apply_noise(img, "gaussian", 1e-12, seed=1), img, atol=1e-7)
    assert S.apply_jpeg(img, 50).shape == img.shape


def test_degrade_deterministic():
    img, _ = S.gen_shape_sample(9)
    for lv in S.LEVELS:
        a, ra = S.degrade(img, lv, 5)
        b, rb = S.degrade(img, lv, 5)
        assert np.array_equal(a, b) and ra == rb


def test_counting_contract(tmp_path):
    m = S.build_dataset(10, 0, seed=1, out_dir=tmp_path / "d")
    files = list((tmp_path / "d" / "train").iterdir())
    assert sum(f.name.endswith("_hq.png") for f in files) == 10
    assert sum("_lq" in f.name for f in files) == 30
    assert sum(f.name.endswith("_mask.png") for f in files) == 10
    refs = {r[k] for r in m.records for k in ("hq", "lq", "mask")}
    assert len(refs) == 50 and len(m.records) == 30
