import filecmp
import shutil

import numpy as np
import pytest

from cfan.data import (ManifestError, SynthConfig, class_cues, from_uint8, generate_synthetic, hfi_lfi_transform,
                       ideal_mask, load_dataset, parse_manifest, read_pnm, render, split_known_unknown, to_uint8,
                       write_pnm)

SMALL = SynthConfig(image_size=32, n_train=30, n_val=5, n_test=8, seed=3)


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "ds"
    generate_synthetic(SMALL, out)
    return out


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_pnm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, (8, 16, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, (4, 4), dtype=np.uint8)
    write_pnm(tmp_path / "a.ppm", rgb)
    write_pnm(tmp_path / "b.pgm", gray)
    assert np.array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
    assert np.array_equal(read_pnm(tmp_path / "b.pgm"), gray)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n")
    img = from_uint8(rgb)
    assert img.shape == (3, 8, 16) and np.array_equal(to_uint8(img), rgb)


def test_pnm_with_comment_and_truncation(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 2\n255\n\x01\x02\x03\x04")
    assert np.array_equal(read_pnm(tmp_path / "c.pgm"), [[1, 2], [3, 4]])
    (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n\x01\x02")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "t.pgm")
    (tmp_path / "x.pgm").write_bytes(b"P3\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "x.pgm")


def test_generation_is_byte_reproducible(tmp_path, small):
    again = tmp_path / "again"
    generate_synthetic(SMALL, again)
    assert tree_equal(small, again)
    other = tmp_path / "other"
    generate_synthetic(SynthConfig(**{**SMALL.__dict__, "seed": 4}), other)
    assert not tree_equal(small, other)


def test_manifest_contract(small):
    ds = load_dataset(small)
    m = ds.manifest
    m.validate()
    assert m.n_classes == 10 and m.known_classes == [0, 1, 2, 5, 6, 7]
    assert all(e.split == "test" for e in m.entries if not e.known)
    assert len({e.label for e in m.entries if not e.known}) == 4
    assert len(m.select("train")) == 6 * 30 and len(m.select("test", known=False)) == 4 * 8
    assert float(m.extra["ncc_acc"]) > 0.8
    assert float(m.extra["ncc_texture_acc"]) - float(m.extra["ncc_texture_lfi_acc"]) >= 0.2
    text = (small / "manifest.tsv").read_text()
    assert "path\tlabel\tsplit\tknown\n" in text and "# mean " in text and "# std " in text


def test_images_load_and_normalize(small):
    ds = load_dataset(small)
    rec = ds.manifest.select("train")[0]
    assert np.array_equal(to_uint8(ds.raw(rec)), read_pnm(small / rec.path))
    x, y, known = ds.arrays("train", dtype=np.float64)
    assert x.shape == (180, 3, 32, 32) and known.all()
    assert np.allclose(x.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    assert np.allclose(x.std(axis=(0, 2, 3)), 1, atol=1e-6)
    assert set(y) == set(range(6))
    _, yt, kt = ds.arrays("test")
    assert np.all(yt[~kt] == -1)


def test_corrupt_manifest_names_line(tmp_path, small):
    lines = (small / "manifest.tsv").read_text().splitlines()
    idx = next(i for i, line in enumerate(lines) if line.startswith("class_"))
    lines[idx] = "class_00/train_0000.ppm\tzero\ttrain\t1"
    with pytest.raises(ManifestError, match=f"line {idx + 1}"):
        parse_manifest("\n".join(lines), small)


def test_missing_file_reported(tmp_path, small):
    copy = tmp_path / "copy"
    shutil.copytree(small, copy)
    (copy / "class_00" / "train_0003.ppm").unlink()
    with pytest.raises(FileNotFoundError, match="train_0003"):
        load_dataset(copy)


def test_split_known_unknown(small):
    m = load_dataset(small).manifest
    everything = split_known_unknown(m, range(10))
    assert all(e.known for e in everything.entries)
    again = split_known_unknown(split_known_unknown(m, [0, 1, 2, 5, 6, 7]), [0, 1, 2, 5, 6, 7])
    assert again.entries == m.entries
    fewer = split_known_unknown(m, [0, 5])
    assert {e.label for e in fewer.entries if not e.known} == {1, 2, 3, 4, 6, 7, 8, 9}
    assert all(e.split == "test" for e in fewer.entries if not e.known)
    with pytest.raises(ManifestError):
        split_known_unknown(m, [0, 42])


def test_hfi_lfi_examples():
    const = np.full((3, 16, 16), 0.4)
    assert np.allclose(hfi_lfi_transform(const, 0.25, "LFI"), const, atol=1e-15)
    assert np.allclose(hfi_lfi_transform(const, 0.25, "HFI"), 0, atol=1e-15)
    with pytest.raises(ValueError):
        hfi_lfi_transform(const, 1.0)
    with pytest.raises(ValueError):
        hfi_lfi_transform(np.ones((3, 12, 12)))


def test_hfi_plus_lfi_reconstructs():
    rng = np.random.default_rng(1)
    x = rng.random((2, 3, 32, 32))
    for cutoff in (0.05, 0.25, 0.5, 0.9):
        total = hfi_lfi_transform(x, cutoff, "HFI") + hfi_lfi_transform(x, cutoff, "LFI")
        assert np.linalg.norm(total - x) / np.linalg.norm(x) < 1e-6
    m = ideal_mask(8, 8, 0.25, "HFI") + ideal_mask(8, 8, 0.25, "LFI")
    assert np.array_equal(m, np.ones((8, 8)))


def test_lfi_at_high_cutoff_keeps_generated_images(small):
    ds = load_dataset(small)
    imgs = np.stack([ds.raw(r) for r in ds.manifest.select("test")[:20]])
    lfi = hfi_lfi_transform(imgs, 0.99, "LFI")
    assert np.linalg.norm(lfi - imgs) / np.linalg.norm(imgs) < 0.05


def test_texture_classes_match_after_low_pass():
    cfg = SynthConfig(image_size=64, seed=5)
    cues, _ = class_cues(cfg)
    means = []
    for label in (5, 6):
        rng = np.random.default_rng([9, label])
        means.append(np.mean([render(cues[label], cfg, rng) for _ in range(60)], axis=0))
    a, b = (hfi_lfi_transform(m, 0.25, "LFI") for m in means)
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 0.05
    # the raw images of distinct texture classes do differ
    raw_a, raw_b = (render(cues[c], cfg, np.random.default_rng(0)) for c in (5, 6))
    assert np.linalg.norm(raw_a - raw_b) / np.linalg.norm(raw_a) > 0.1


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(image_size=48)
    with pytest.raises(ValueError):
        SynthConfig(n_known=10)


def test_hfi_lfi_commute_with_normalization(small):
    ds = load_dataset(small)
    raw = np.stack([ds.raw(r) for r in ds.manifest.select("test")[:6]])
    std = ds.manifest.std[:, None, None]
    lfi_then_norm = ds.normalize(hfi_lfi_transform(raw, 0.25, "LFI"))
    assert np.allclose(hfi_lfi_transform(ds.normalize(raw), 0.25, "LFI"), lfi_then_norm, atol=1e-10)
    assert np.allclose(hfi_lfi_transform(ds.normalize(raw), 0.25, "HFI"),
                       hfi_lfi_transform(raw, 0.25, "HFI") / std, atol=1e-10)
