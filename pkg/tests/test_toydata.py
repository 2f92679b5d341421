import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rladlab.errors import ConfigError
from rladlab.metrics import dice
from rladlab.toydata import (
    DEFAULT_BLUR,
    DOMAINS,
    STYLE_RANGES,
    BranchingConfig,
    RenderStyle,
    load_bundle_pngs,
    load_manifest,
    load_record_bundle,
    load_record_image,
    make_dataset,
    make_layout,
    oracle_extract,
    render,
    save_bundle_pngs,
    split_counts,
    style_from_seed,
)


def flood_fill_components(mask):
    """Brute-force 8-connected component count (test-local oracle)."""
    mask = mask.copy()
    count = 0
    while mask.any():
        count += 1
        ys, xs = np.nonzero(mask)
        stack = [(ys[0], xs[0])]
        mask[ys[0], xs[0]] = False
        while stack:
            y, x = stack.pop()
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1] and mask[ny, nx]:
                        mask[ny, nx] = False
                        stack.append((ny, nx))
    return count


def zero_blur(style: RenderStyle) -> RenderStyle:
    return RenderStyle(
        palette_id=style.palette_id,
        grad_strength=style.grad_strength,
        grad_origin=style.grad_origin,
        blur_sigma=0.0,
        noise_amp=style.noise_amp,
        artery_offset=style.artery_offset,
        vein_offset=style.vein_offset,
        noise_seed=style.noise_seed,
    )


class TestMakeLayout:
    def test_deterministic(self):
        a = make_layout(0, 64)
        b = make_layout(0, 64)
        assert np.array_equal(a.av, b.av)
        assert np.array_equal(a.cd, b.cd)
        assert np.array_equal(a.lesions, b.lesions)
        assert a.present == b.present

    def test_depth_zero_two_root_segments(self):
        bundle = make_layout(3, 64, BranchingConfig(branch_depth=0))
        assert flood_fill_components(bundle.av[..., 0]) == 1
        assert flood_fill_components(bundle.av[..., 1]) == 1

    def test_no_lesions(self):
        bundle = make_layout(5, 64, BranchingConfig(lesion_count=0))
        assert not bundle.lesions.any()
        assert not bundle.present.lesions

    def test_invariants(self):
        for seed in range(8):
            bundle = make_layout(seed, 64)
            bundle.validate()
            # cup inside disc
            assert not (bundle.cd[..., 1] & ~bundle.cd[..., 0]).any()
            # lesions disjoint from disc and vessels
            occupied = bundle.av.any(-1) | bundle.cd[..., 0]
            assert not (bundle.lesions.any(-1) & occupied).any()
            # roots inside the disc
            assert (bundle.av[..., 0] & bundle.cd[..., 0]).any()
            assert (bundle.av[..., 1] & bundle.cd[..., 0]).any()

    def test_canvas_validation(self):
        with pytest.raises(ConfigError):
            make_layout(0, 16)
        with pytest.raises(ConfigError):
            make_layout(0, 64, BranchingConfig(branch_depth=9))

    def test_canvas_scaling(self):
        bundle = make_layout(2, 96)
        assert bundle.av.shape == (96, 96, 2)


class TestRender:
    def test_all_zero_bundle_is_pure_background(self):
        from rladlab.toydata import empty_bundle

        style = zero_blur(style_from_seed(0, "source"))
        img = render(empty_bundle(64), style)
        rec = oracle_extract(img)
        assert not rec.av.any() and not rec.cd.any() and not rec.lesions.any()

    def test_bit_identical_rerender(self):
        bundle = make_layout(1, 64)
        style = style_from_seed(1, "source")
        assert np.array_equal(render(bundle, style), render(bundle, style))

    def test_two_styles_same_recovery(self):
        bundle = make_layout(2, 64)
        s1 = zero_blur(style_from_seed(10, "source"))
        s2 = zero_blur(style_from_seed(11, "source"))
        r1 = oracle_extract(render(bundle, s1))
        r2 = oracle_extract(render(bundle, s2))
        assert dice(r1.av[..., 0], r2.av[..., 0]) == 1.0
        assert dice(r1.av[..., 1], r2.av[..., 1]) == 1.0

    @pytest.mark.parametrize("domain", DOMAINS)
    def test_round_trip_exact_at_zero_blur(self, domain):
        for seed in range(6):
            bundle = make_layout(seed, 64)
            style = zero_blur(style_from_seed(seed, domain))
            rec = oracle_extract(render(bundle, style))
            for ch in range(2):
                assert dice(rec.av[..., ch], bundle.av[..., ch]) == 1.0
                assert dice(rec.cd[..., ch], bundle.cd[..., ch]) == 1.0
            for cls in range(3):
                assert dice(rec.lesions[..., cls], bundle.lesions[..., cls]) == 1.0

    def test_round_trip_at_default_blur(self):
        scores = []
        for seed in range(8):
            bundle = make_layout(seed + 50, 64)
            s = style_from_seed(seed + 50, "source")
            style = RenderStyle(
                palette_id=s.palette_id,
                grad_strength=s.grad_strength,
                grad_origin=s.grad_origin,
                blur_sigma=DEFAULT_BLUR,
                noise_amp=s.noise_amp,
                artery_offset=s.artery_offset,
                vein_offset=s.vein_offset,
                noise_seed=s.noise_seed,
            )
            rec = oracle_extract(render(bundle, style))
            scores.append(0.5 * (dice(rec.av[..., 0], bundle.av[..., 0]) + dice(rec.av[..., 1], bundle.av[..., 1])))
        assert min(scores) >= 0.95

    def test_style_validation(self):
        with pytest.raises(ConfigError):
            RenderStyle(0, 0.1, 0, 0.5, 0.005, 0.1, 0.4, 1)  # artery offset below floor
        with pytest.raises(ConfigError):
            style_from_seed(0, "unknown-domain")


class TestStyles:
    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_shift_separation(self, seed):
        src = style_from_seed(seed, "source")
        shf = style_from_seed(seed, "shifted")
        ranges = STYLE_RANGES["source"]
        for style, inside in ((src, True), (shf, False)):
            checks = {
                "palette_id": style.palette_id,
                "grad_strength": style.grad_strength,
                "blur_sigma": style.blur_sigma,
                "noise_amp": style.noise_amp,
                "vessel_offset": style.artery_offset,
            }
            for key, value in checks.items():
                lo, hi = ranges[key]
                assert (lo <= value <= hi) == inside

    def test_style_fully_determined_by_seed(self):
        assert style_from_seed(42, "source") == style_from_seed(42, "source")


class TestDataset:
    def test_split_counts(self):
        assert split_counts(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
        assert split_counts(7, (0.5, 0.25, 0.25)) == [4, 2, 1]
        with pytest.raises(ConfigError):
            split_counts(10, (0.5, 0.2))

    def test_make_dataset_and_reload(self, tmp_path):
        manifest = make_dataset(10, (0.8, 0.1, 0.1), "source", tmp_path / "d", seed=7)
        assert [len(manifest.split(s)) for s in ("train", "val", "test")] == [8, 1, 1]
        again = load_manifest(tmp_path / "d")
        assert [r.to_json() for r in again.records] == [r.to_json() for r in manifest.records]
        img = load_record_image(again, again.records[0])
        assert img.shape == (64, 64, 3) and img.dtype == np.float32
        bundle = load_record_bundle(again, again.records[0])
        bundle.validate()

    def test_byte_identical_manifests(self, tmp_path):
        make_dataset(6, (0.5, 0.25, 0.25), "source", tmp_path / "a", seed=3)
        make_dataset(6, (0.5, 0.25, 0.25), "source", tmp_path / "b", seed=3)
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert a == b
        img_a = (tmp_path / "a" / "images" / "source-00000.png").read_bytes()
        img_b = (tmp_path / "b" / "images" / "source-00000.png").read_bytes()
        assert img_a == img_b

    def test_shifted_styles_outside_source_ranges(self, tmp_path):
        manifest = make_dataset(5, (0.0, 0.0, 1.0), "shifted", tmp_path / "s", seed=1)
        src = STYLE_RANGES["source"]
        for rec in manifest.records:
            style = style_from_seed(rec.seed, rec.domain)
            assert not src["palette_id"][0] <= style.palette_id <= src["palette_id"][1]
            assert not src["blur_sigma"][0] <= style.blur_sigma <= src["blur_sigma"][1]

    def test_seeds_unique_and_splits_disjoint(self, tmp_path):
        manifest = make_dataset(12, (0.5, 0.25, 0.25), "source", tmp_path / "u", seed=2)
        seeds = [r.seed for r in manifest.records]
        assert len(set(seeds)) == len(seeds)
        ids_by_split = [set(r.id for r in manifest.split(s)) for s in ("train", "val", "test")]
        assert not (ids_by_split[0] & ids_by_split[1])
        assert not (ids_by_split[1] & ids_by_split[2])

    def test_validation(self, tmp_path):
        with pytest.raises(ConfigError):
            make_dataset(0, (1.0, 0.0, 0.0), "source", tmp_path / "x")
        with pytest.raises(ConfigError):
            make_dataset(3, (0.5, 0.5, 0.0), "nope", tmp_path / "x")

    def test_bundle_png_round_trip(self, tmp_path):
        bundle = make_layout(9, 64)
        save_bundle_pngs(tmp_path / "b", bundle)
        again = load_bundle_pngs(tmp_path / "b")
        assert np.array_equal(bundle.av, again.av)
        assert np.array_equal(bundle.cd, again.cd)
        assert np.array_equal(bundle.lesions, again.lesions)
        assert bundle.present == again.present
