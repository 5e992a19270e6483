use std::collections::BTreeSet;

use proptest::prelude::*;
use tempfile::tempdir;

use super::*;
use crate::tensor::io::write_tensor;

#[test]
fn split_sizes_follow_floors() {
    assert_eq!(split_sizes(10), (7, 1, 2));
    assert_eq!(split_sizes(670), (469, 67, 134));
    assert_eq!(split_sizes(200), (140, 20, 40));
}

#[test]
fn split_is_seeded_and_counts_match() {
    let a = split_assignment(670, 3).unwrap();
    let b = split_assignment(670, 3).unwrap();
    assert_eq!(a, b);
    let count = |s| a.iter().filter(|&&x| x == s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (469, 67, 134));
    assert_ne!(a, split_assignment(670, 4).unwrap());
    assert!(split_assignment(9, 0).is_err());
}

#[test]
fn nearest_upsample_makes_blocks() {
    let m = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
    let up = resize_nearest(&m, 4, 4);
    #[rustfmt::skip]
    let want = vec![
        0, 0, 1, 1,
        0, 0, 1, 1,
        2, 2, 3, 3,
        2, 2, 3, 3,
    ];
    assert_eq!(up.labels, want);
}

#[test]
fn same_size_resize_is_identity() {
    let img = Tensor::<f32>::from_fn(&[2, 5, 7], |i| (i as f32 * 0.37).sin().abs());
    let out = resize_bilinear(&img, 7, 5);
    for (a, b) in img.data().iter().zip(out.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
    let m = LabelMap::new(7, 5, (0..35).map(|i| (i % 4) as u8).collect()).unwrap();
    assert_eq!(resize_nearest(&m, 7, 5), m);
}

#[test]
fn bilinear_half_pixel_centres() {
    // 1x2 -> 1x4: sample positions -0.25, 0.25, 0.75, 1.25 clamp to [0, 1].
    let img = Tensor::<f32>::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
    let out = resize_bilinear(&img, 4, 1);
    assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
}

proptest! {
    #[test]
    fn constant_image_stays_constant(v in 0.0f32..1.0, w in 1usize..9, h in 1usize..9, ow in 1usize..20, oh in 1usize..20) {
        let img = Tensor::<f32>::full(&[1, h, w], v);
        let out = resize_bilinear(&img, ow, oh);
        prop_assert!(out.data().iter().all(|&x| (x - v).abs() <= 1e-6));
    }

    #[test]
    fn nearest_never_invents_labels(w in 1usize..10, h in 1usize..10, ow in 1usize..24, oh in 1usize..24, seed in any::<u64>()) {
        let labels: Vec<u8> = (0..w * h).map(|i| ((seed >> (i % 60)) & 3) as u8).collect();
        let m = LabelMap::new(w, h, labels).unwrap();
        let src: BTreeSet<u8> = m.labels.iter().copied().collect();
        let out = resize_nearest(&m, ow, oh);
        prop_assert!(out.labels.iter().all(|l| src.contains(l)));
    }
}

#[test]
fn manifest_round_trip() {
    let text = "cts-manifest v1 classes=3 channels=1\ntrain\timages/a.png\tmasks/a.png\nval\tb.png\tmb.png\n";
    let m = DatasetManifest::parse(text, Path::new("/data")).unwrap();
    assert_eq!(m.classes, 3);
    assert_eq!(m.entries.len(), 2);
    assert_eq!(m.render(), text);
    assert_eq!(m.resolve(&m.entries[0].image), Path::new("/data/images/a.png"));
    assert!(DatasetManifest::parse("cts-manifest v2 classes=2 channels=1\n", Path::new(".")).is_err());
    assert!(DatasetManifest::parse("cts-manifest v1 classes=2 channels=2\n", Path::new(".")).is_err());
    assert!(DatasetManifest::parse("cts-manifest v1 classes=2 channels=1\nfoo\ta\tb\n", Path::new(".")).is_err());
}

fn write_pair(dir: &Path, name: &str, pixels: &[f32], labels: Vec<u8>, w: usize, h: usize) -> ManifestEntry {
    let image = Path::new(name).with_extension("png");
    let mask = Path::new(&format!("{}_mask", name)).with_extension("png");
    save_gray_png(&dir.join(&image), w, h, pixels).unwrap();
    save_mask_png(&dir.join(&mask), &LabelMap::new(w, h, labels).unwrap()).unwrap();
    ManifestEntry { split: Split::Train, image, mask }
}

#[test]
fn grayscale_png_scaled_to_unit_range() {
    let dir = tempdir().unwrap();
    let e = write_pair(dir.path(), "g", &[0.0, 1.0, 128.0 / 255.0, 0.5], vec![0, 4, 1, 0], 2, 2);
    let m = DatasetManifest { root: dir.path().into(), classes: 5, channels: 1, entries: vec![e] };
    let ds = load_dataset(&m).unwrap();
    let s = &ds.train[0];
    assert_eq!(s.image.shape(), &[1, 2, 2]);
    assert_eq!(s.image.data(), &[0.0, 1.0, 128.0 / 255.0, 128.0 / 255.0]);
    assert_eq!(s.mask.labels, vec![0, 4, 1, 0]);
    assert_eq!(s.id, "g");
}

#[test]
fn out_of_range_label_names_entry() {
    let dir = tempdir().unwrap();
    let e = write_pair(dir.path(), "bad", &[0.0; 4], vec![0, 5, 0, 0], 2, 2);
    let m = DatasetManifest { root: dir.path().into(), classes: 5, channels: 1, entries: vec![e] };
    let err = load_dataset(&m).unwrap_err().to_string();
    assert!(err.contains("bad.png") && err.contains("label 5"), "{}", err);
}

#[test]
fn missing_file_and_extent_mismatch_are_data_errors() {
    let dir = tempdir().unwrap();
    let mut e = write_pair(dir.path(), "x", &[0.0; 4], vec![0; 4], 2, 2);
    save_mask_png(&dir.path().join(&e.mask), &LabelMap::new(3, 1, vec![0; 3]).unwrap()).unwrap();
    let mut m = DatasetManifest { root: dir.path().into(), classes: 2, channels: 1, entries: vec![e.clone()] };
    let err = load_dataset(&m).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("x.png"));
    e.image = "nope.png".into();
    m.entries = vec![e];
    assert!(load_dataset(&m).unwrap_err().to_string().contains("nope.png"));
}

#[test]
fn colour_png_gives_three_channels() {
    let dir = tempdir().unwrap();
    let img = image::RgbImage::from_fn(2, 1, |x, _| image::Rgb([255, x as u8 * 255, 0]));
    img.save(dir.path().join("c.png")).unwrap();
    let t = load_image(&dir.path().join("c.png")).unwrap();
    assert_eq!(t.shape(), &[3, 1, 2]);
    assert_eq!(t.data(), &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn tensor_container_accepted_as_image() {
    let dir = tempdir().unwrap();
    let t = Tensor::<f32>::from_fn(&[1, 2, 3], |i| i as f32 / 10.0);
    write_tensor(&dir.path().join("t.ctst"), &t).unwrap();
    assert_eq!(load_image(&dir.path().join("t.ctst")).unwrap(), t);
}

#[test]
fn synth_masks_match_geometry_and_are_nonempty() {
    for classes in [2, 3, 4] {
        for i in 0..20 {
            let s = synth_sample(i, 64, classes, 11).unwrap();
            // Independent rasterization of the returned ellipses.
            let mut want = vec![0u8; 64 * 64];
            for e in &s.geometry.ellipses {
                let (sn, cs) = e.theta.sin_cos();
                for r in 0..64 {
                    for c in 0..64 {
                        let (x, y) = (c as f64 + 0.5 - e.cx, r as f64 + 0.5 - e.cy);
                        let (u, v) = (x * cs + y * sn, y * cs - x * sn);
                        if u * u / (e.a * e.a) + v * v / (e.b * e.b) <= 1.0 {
                            want[r * 64 + c] = e.class;
                        }
                    }
                }
            }
            assert_eq!(s.mask.labels, want);
            for k in 1..classes as u8 {
                assert!(s.mask.labels.contains(&k), "class {} missing in sample {}", k, i);
            }
            assert!(!s.geometry.rings.is_empty());
        }
    }
}

#[test]
fn synth_rings_carry_foreground_intensity_but_no_label() {
    let s = synth_sample(0, 64, 2, 5).unwrap();
    let ring = &s.geometry.rings[0];
    let mut ring_px = Vec::new();
    for r in 0..64 {
        for c in 0..64 {
            if ring.contains(r, c) {
                assert_eq!(s.mask.labels[r * 64 + c], 0);
                ring_px.push(s.pixels[r * 64 + c] as f64 / 255.0);
            }
        }
    }
    let mean = ring_px.iter().sum::<f64>() / ring_px.len() as f64;
    assert!((mean - ring.intensity).abs() < 0.05, "ring mean {}", mean);
}

#[test]
fn synth_generate_writes_split_dataset_deterministically() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let ma = synth_generate(200, 64, 2, 7, a.path()).unwrap();
    synth_generate(200, 64, 2, 7, b.path()).unwrap();
    assert_eq!((ma.count(Split::Train), ma.count(Split::Val), ma.count(Split::Test)), (140, 20, 40));
    for e in &ma.entries {
        for p in [&e.image, &e.mask] {
            assert_eq!(std::fs::read(a.path().join(p)).unwrap(), std::fs::read(b.path().join(p)).unwrap());
        }
    }
    let read = DatasetManifest::read(a.path()).unwrap();
    assert_eq!(read.render(), ma.render());
    let ds = load_dataset(&read).unwrap();
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (140, 20, 40));
    assert_eq!(ds.uniform_size(), Some((64, 64)));
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        assert!(s.mask.labels.iter().any(|&l| l > 0));
    }
    let first = synth_sample(0, 64, 2, 7).unwrap();
    let loaded = ds.train.iter().chain(&ds.val).chain(&ds.test).find(|s| s.id == first.id).unwrap();
    assert_eq!(loaded.mask, first.mask);
}

#[test]
fn synth_rejects_tiny_images() {
    assert!(synth_sample(0, 8, 2, 0).is_err());
}
