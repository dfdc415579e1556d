use proptest::prelude::*;
use uda_core::data::*;

fn gradient_image(h: usize, w: usize) -> RasterImage {
    let pixels = (0..h * w)
        .flat_map(|i| {
            let (y, x) = (i / w, i % w);
            [(y % 251) as u8, (x % 241) as u8, ((y * 7 + x * 3) % 256) as u8]
        })
        .collect();
    RasterImage::new(h, w, pixels).unwrap()
}

#[test]
fn tiling_examples() {
    let spec = PatchSpec::default();
    assert_eq!(spec.count(6000, 6000), 121);
    assert_eq!(38 * spec.count(6000, 6000), 4598);
    let one = crop_patches(&gradient_image(512, 512), None, &spec).unwrap();
    assert_eq!(one.len(), 1);
    let four = crop_patches(&gradient_image(1024, 1024), None, &spec).unwrap();
    assert_eq!(four.len(), 4);
    // offsets (0,0), (0,512), (512,0), (512,512) in row-major order
    assert_eq!(four[1].0.pixel(0, 0), gradient_image(1024, 1024).pixel(0, 512));
    assert_eq!(four[2].0.pixel(0, 0), gradient_image(1024, 1024).pixel(512, 0));
}

#[test]
fn image_smaller_than_patch_is_rejected() {
    let err = crop_patches(&gradient_image(100, 600), None, &PatchSpec::default()).unwrap_err();
    assert!(err.to_string().contains("smaller"), "{}", err);
}

#[test]
fn label_patches_follow_image_patches() {
    let img = gradient_image(64, 48);
    let classes = (0..64 * 48).map(|i| (i % 5) as u8).collect();
    let label = LabelMap::new(64, 48, classes).unwrap();
    let spec = PatchSpec {
        patch_size: 16,
        stride: 16,
    };
    let patches = crop_patches(&img, Some(&label), &spec).unwrap();
    assert_eq!(patches.len(), 12);
    let (_, l) = &patches[4];
    let l = l.as_ref().unwrap();
    // patch 4 is row 1, column 1
    assert_eq!(l.classes[0], label.classes[16 * 48 + 16]);
}

fn brute_force_count(h: usize, w: usize, p: usize, s: usize) -> usize {
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if y % s == 0 && x % s == 0 && y + p <= h && x + p <= w {
                n += 1;
            }
        }
    }
    n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn count_matches_offset_enumeration(h in 1usize..200, w in 1usize..200, p in 1usize..64, s_frac in 1usize..=64) {
        let s = s_frac.min(p);
        let spec = PatchSpec { patch_size: p, stride: s };
        prop_assert_eq!(spec.count(h, w), brute_force_count(h, w, p, s));
    }

    #[test]
    fn non_overlapping_patches_reassemble(h in 8usize..80, w in 8usize..80, p in 2usize..=8) {
        let img = gradient_image(h, w);
        let spec = PatchSpec { patch_size: p, stride: p };
        let patches = crop_patches(&img, None, &spec).unwrap();
        let (ny, nx) = (h / p, w / p);
        prop_assert_eq!(patches.len(), ny * nx);
        for y in 0..ny * p {
            for x in 0..nx * p {
                let (patch, _) = &patches[(y / p) * nx + x / p];
                prop_assert_eq!(patch.pixel(y % p, x % p), img.pixel(y, x));
            }
        }
    }

    #[test]
    fn split_is_an_exact_partition(n in 1usize..300, f in 0.01f64..0.99, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (train, test) = split_dataset(&items, f, seed).unwrap();
        prop_assert_eq!(train.len(), (f * n as f64).round() as usize);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort();
        prop_assert_eq!(all, items);
    }
}

#[test]
fn split_examples() {
    let items: Vec<u32> = (0..10).collect();
    let (train, test) = split_dataset(&items, 0.7, 0).unwrap();
    assert_eq!((train.len(), test.len()), (7, 3));
    assert_eq!(split_dataset(&items, 0.7, 0).unwrap(), (train, test));
    let big: Vec<u32> = (0..22500).collect();
    assert_eq!(split_dataset(&big, 0.7, 3).unwrap().0.len(), 15750);
    assert!(split_dataset::<u32>(&[], 0.7, 0).is_err());
    assert!(split_dataset(&items, 1.0, 0).is_err());
}

#[test]
fn split_depends_on_seed() {
    let items: Vec<u32> = (0..100).collect();
    let parts: Vec<Vec<u32>> = (0..10).map(|s| split_dataset(&items, 0.7, s).unwrap().0).collect();
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            assert_ne!(parts[i], parts[j], "seeds {} and {} agree", i, j);
        }
    }
}

#[test]
fn synthetic_pair_is_deterministic_and_labeled() {
    let scene = SceneSpec::default();
    let a = generate_synthetic_pair(5, 4, 4, &ShiftSpec::default(), &scene).unwrap();
    let b = generate_synthetic_pair(5, 4, 4, &ShiftSpec::default(), &scene).unwrap();
    assert_eq!(a, b);
    for s in a.0.iter().chain(&a.1) {
        assert_eq!((s.image.height, s.image.width), (128, 128));
        assert_eq!((s.label.height, s.label.width), (128, 128));
        s.label.check_classes(4).unwrap();
    }
}

#[test]
fn permutation_shift_keeps_labels_and_permutes_channels() {
    let scene = SceneSpec::default();
    let (_, plain) = generate_synthetic_pair(9, 3, 4, &ShiftSpec::identity(), &scene).unwrap();
    let (_, shifted) = generate_synthetic_pair(9, 3, 4, &ShiftSpec::channel_permutation([2, 0, 1]), &scene).unwrap();
    for (p, s) in plain.iter().zip(&shifted) {
        assert_eq!(p.label, s.label);
        let (mp, ms) = (p.image.channel_means(), s.image.channel_means());
        for c in 0..3 {
            assert_eq!(ms[c], mp[[2, 0, 1][c]]);
        }
    }
}

#[test]
fn identity_shift_gives_matching_class_colors() {
    let scene = SceneSpec::default();
    let (src, tgt) = generate_synthetic_pair(1, 16, 4, &ShiftSpec::identity(), &scene).unwrap();
    let class_means = |set: &[Sample]| {
        let mut sum = [[0.0f64; 3]; 4];
        let mut n = [0usize; 4];
        for s in set {
            for (px, &c) in s.image.pixels.chunks_exact(3).zip(&s.label.classes) {
                n[c as usize] += 1;
                for ch in 0..3 {
                    sum[c as usize][ch] += px[ch] as f64;
                }
            }
        }
        (0..4).map(|k| sum[k].map(|v| v / n[k] as f64)).collect::<Vec<_>>()
    };
    let (ms, mt) = (class_means(&src), class_means(&tgt));
    for k in 0..4 {
        for ch in 0..3 {
            assert!((ms[k][ch] - mt[k][ch]).abs() < 1.0, "class {} channel {}", k, ch);
            assert!((ms[k][ch] - class_color(k)[ch] as f64).abs() < 1.0);
        }
    }
}

#[test]
fn disk_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (src, _) = generate_synthetic_pair(2, 3, 4, &ShiftSpec::default(), &SceneSpec::default()).unwrap();
    let stems: Vec<String> = src.iter().map(|s| s.stem.clone()).collect();
    write_domain(dir.path(), Domain::Source, &src, &stems[..2], &stems[2..]).unwrap();
    let loaded = load_split(dir.path(), Domain::Source, "train", true).unwrap();
    assert_eq!(loaded.len(), 2);
    for ((stem, img, label), s) in loaded.iter().zip(&src) {
        assert_eq!(stem, &s.stem);
        assert_eq!(img, &s.image);
        assert_eq!(label.as_ref().unwrap(), &s.label);
    }
}
