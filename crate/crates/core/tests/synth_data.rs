use std::fs;
use std::path::Path;

use deformdet::bbox::BBox;
use deformdet::synth::{
    generate_dataset, load_annotations, parse_annotations, render_background, render_image,
    save_annotations, Dataset, DefectClass, GenSpec, RgbImage, Split, NUM_CLASSES,
};
use deformdet::Error;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn empty_dataset_has_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_dataset(&GenSpec::default(), 0, dir.path()).unwrap();
    assert_eq!(s.images, 0);
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(ds.entries.is_empty());
    assert_eq!(GenSpec::read(&dir.path().join("genspec.txt")).unwrap(), GenSpec::default());
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = GenSpec {
        seed: 17,
        ..Default::default()
    };
    generate_dataset(&spec, 12, a.path()).unwrap();
    generate_dataset(&spec, 12, b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 12 * 2 + 2);
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&GenSpec { seed: 18, ..spec }, 12, c.path()).unwrap();
    assert_ne!(ta, read_tree(c.path()));
}

#[test]
fn images_do_not_depend_on_count() {
    let spec = GenSpec::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&spec, 3, a.path()).unwrap();
    generate_dataset(&spec, 8, b.path()).unwrap();
    for f in ["images/000002.ppm", "labels/000002.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenSpec::default();
    generate_dataset(&spec, 20, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.ids(Some(Split::Train)).len(), 14);
    assert_eq!(ds.ids(Some(Split::Val)).len(), 3);
    assert_eq!(ds.ids(None).len(), 20);
    let s = ds.load("000004", NUM_CLASSES).unwrap();
    let r = render_image(&spec, 4);
    assert_eq!(s.boxes, r.boxes);
    assert_eq!(s.image.shape(), &[1, 3, 64, 64]);
    assert_eq!(s.image, r.image.to_tensor());
    assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn one_hot_signature_sizes_within_bounds() {
    let spec = GenSpec {
        seed: 5,
        min_frac: 0.125,
        max_frac: 0.3,
        ..Default::default()
    }
    .one_class(DefectClass::Signature);
    let s = spec.image_size as f64;
    let mut n = 0;
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for i in 0..300 {
        for b in render_image(&spec, i).boxes {
            assert_eq!(b.class_id, 5);
            for side in [b.w, b.h] {
                assert!(side >= spec.min_frac - 1.0 / s && side <= spec.max_frac + 1.0 / s, "side {side}");
                lo = lo.min(side);
                hi = hi.max(side);
            }
            n += 1;
        }
    }
    assert!(n >= 300);
    // the sampled range should actually reach both ends
    assert!(lo <= spec.min_frac + 2.0 / s && hi >= spec.max_frac - 2.0 / s, "{lo} {hi}");
}

fn pixel_rect(b: &BBox, s: usize) -> (usize, usize, usize, usize) {
    let (x0, y0, x1, y1) = b.corners();
    let px = |v: f64| (v * s as f64).round() as usize;
    (px(x0), px(y0), px(x1), px(y1))
}

#[test]
fn boxes_tightly_contain_painted_pixels() {
    for seed in [0, 1] {
        let spec = GenSpec {
            seed,
            ..Default::default()
        };
        let s = spec.image_size;
        for i in 0..60 {
            let r = render_image(&spec, i);
            let bg = render_background(&spec, i);
            let changed = |x: usize, y: usize| r.image.get(x, y) != bg.get(x, y);
            let rects: Vec<_> = r.boxes.iter().map(|b| pixel_rect(b, s)).collect();
            for (b, &(x0, y0, x1, y1)) in r.boxes.iter().zip(&rects) {
                let (cx0, cy0, cx1, cy1) = b.corners();
                assert!(cx0 >= 0.0 && cy0 >= 0.0 && cx1 <= 1.0 && cy1 <= 1.0);
                // changed pixels within one pixel of the box all belong to it
                let (ex0, ey0) = (x0.saturating_sub(1), y0.saturating_sub(1));
                let (ex1, ey1) = ((x1 + 1).min(s), (y1 + 1).min(s));
                let mut tight: Option<(usize, usize, usize, usize)> = None;
                for y in ey0..ey1 {
                    for x in ex0..ex1 {
                        if changed(x, y) {
                            let t = tight.get_or_insert((x, y, x + 1, y + 1));
                            *t = (t.0.min(x), t.1.min(y), t.2.max(x + 1), t.3.max(y + 1));
                        }
                    }
                }
                let t = tight.expect("defect changed no pixels");
                for (got, want) in [(t.0, x0), (t.1, y0), (t.2, x1), (t.3, y1)] {
                    assert!(got.abs_diff(want) <= 1, "image {i}: box {:?} scan {:?}", (x0, y0, x1, y1), t);
                }
            }
            for y in 0..s {
                for x in 0..s {
                    if changed(x, y) {
                        assert!(
                            rects.iter().any(|&(x0, y0, x1, y1)| x >= x0 && x < x1 && y >= y0 && y < y1),
                            "image {i}: stray pixel ({x},{y})"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn class_frequencies_match_weights() {
    let spec = GenSpec {
        seed: 11,
        class_weights: [0.3, 0.1, 0.15, 0.2, 0.05, 0.2],
        ..Default::default()
    };
    let mut counts = [0usize; NUM_CLASSES];
    let mut i = 0;
    while counts.iter().sum::<usize>() < 3000 {
        for b in render_image(&spec, i).boxes {
            counts[b.class_id] += 1;
        }
        i += 1;
    }
    let n = counts.iter().sum::<usize>() as f64;
    for (c, &w) in spec.class_weights.iter().enumerate() {
        let se = (n * w * (1.0 - w)).sqrt();
        let dev = (counts[c] as f64 - n * w).abs();
        assert!(dev <= 3.0 * se, "class {c}: {} vs expected {}", counts[c], n * w);
    }
}

#[test]
fn annotations_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.txt");
    let boxes = render_image(&GenSpec::default(), 9).boxes;
    save_annotations(&p, &boxes).unwrap();
    assert_eq!(load_annotations(&p, NUM_CLASSES).unwrap(), boxes);
    save_annotations(&p, &[]).unwrap();
    assert!(load_annotations(&p, NUM_CLASSES).unwrap().is_empty());
}

#[test]
fn crlf_parses_like_lf() {
    let lf = load_annotations(&fixture("labels_lf.txt"), NUM_CLASSES).unwrap();
    let crlf = load_annotations(&fixture("labels_crlf.txt"), NUM_CLASSES).unwrap();
    assert_eq!(lf.len(), 3);
    assert_eq!(lf, crlf);
    assert_eq!(lf[1], BBox::new(5, 0.1, 0.2, 0.05, 0.05));
}

#[test]
fn out_of_range_class_is_rejected_with_line() {
    let err = parse_annotations("0 0.5 0.5 0.2 0.2\n7 0.5 0.5 0.1 0.1\n", "l.txt", 6).unwrap_err();
    match err {
        Error::Parse { line, msg, .. } => {
            assert_eq!(line, 2);
            assert!(msg.contains("out of range"), "{msg}");
        }
        e => panic!("unexpected {e:?}"),
    }
    assert!(matches!(
        parse_annotations("1 0.5 0.5\n", "l", 6),
        Err(Error::Parse { line: 1, .. })
    ));
    assert!(matches!(
        parse_annotations("1 0.5 0.5 x 0.1\n", "l", 6),
        Err(Error::Parse { line: 1, .. })
    ));
}

#[test]
fn invalid_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = GenSpec::default();
    spec.class_weights[0] = -0.1;
    spec.class_weights[1] += 0.1;
    assert!(matches!(generate_dataset(&spec, 1, dir.path()), Err(Error::Config(_))));
    let spec = GenSpec {
        min_frac: 0.0,
        ..Default::default()
    };
    assert!(spec.validate().is_err());
    let spec = GenSpec {
        image_size: 50,
        ..Default::default()
    };
    assert!(spec.validate().is_err());
}

#[test]
fn ppm_files_are_p6() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&GenSpec::default(), 1, dir.path()).unwrap();
    let bytes = fs::read(dir.path().join("images/000000.ppm")).unwrap();
    assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(bytes.len(), 13 + 64 * 64 * 3);
    let img = RgbImage::from_ppm(&bytes).unwrap();
    assert_eq!((img.width, img.height), (64, 64));
}
