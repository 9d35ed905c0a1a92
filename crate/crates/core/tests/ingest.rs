use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use proptest::prelude::*;

use ovafuse_core::ingest::{clean_dataset, scan_dataset, CleanMode, QUARANTINE_DIR};
use ovafuse_core::synth::{generate_corpus, SynthesisConfig};
use ovafuse_core::{ClassLabel, Split};

fn png_bytes() -> Vec<u8> {
    let img = GrayImage::from_fn(8, 8, |x, y| Luma([(x * 30 + y) as u8]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn populate(root: &Path, layout: &[(&str, &str, usize)]) {
    let bytes = png_bytes();
    for (split, class, n) in layout {
        let dir = root.join(split).join(class);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..*n {
            fs::write(dir.join(format!("{i:05}.png")), &bytes).unwrap();
        }
    }
}

#[test]
fn reference_corpus_layout_counts() {
    let dir = tempfile::tempdir().unwrap();
    populate(
        dir.path(),
        &[
            ("train", "infected", 781),
            ("train", "notinfected", 1143),
            ("test", "infected", 787),
            ("test", "notinfected", 1145),
        ],
    );
    let m = scan_dataset(dir.path()).unwrap();
    assert_eq!(m.count(Split::Train, ClassLabel::Infected), 781);
    assert_eq!(m.count(Split::Train, ClassLabel::NotInfected), 1143);
    assert_eq!(m.count(Split::Test, ClassLabel::Infected), 787);
    assert_eq!(m.count(Split::Test, ClassLabel::NotInfected), 1145);
    assert_eq!(m.total_valid(), 3856);
}

#[test]
fn synthetic_corpus_counts_match_request() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthesisConfig {
        per_class_train: 6,
        per_class_test: 6,
        seed: 1,
        image_size: 96,
        ..SynthesisConfig::default()
    };
    generate_corpus(&cfg, dir.path()).unwrap();
    let m = scan_dataset(dir.path()).unwrap();
    for split in Split::ALL {
        for label in ClassLabel::ALL {
            assert_eq!(m.count(split, label), 6);
            let on_disk = fs::read_dir(dir.path().join(split.as_str()).join(label.as_str())).unwrap().count();
            assert_eq!(on_disk, 6);
        }
    }
}

#[test]
fn quarantine_moves_exactly_the_planted_files() {
    let dir = tempfile::tempdir().unwrap();
    populate(
        dir.path(),
        &[("train", "infected", 4), ("train", "notinfected", 4), ("test", "infected", 2), ("test", "notinfected", 2)],
    );
    let bytes = png_bytes();
    let a = dir.path().join("train/infected/00001.png");
    let b = dir.path().join("test/notinfected/00000.png");
    fs::write(&a, &bytes[..bytes.len() * 6 / 10]).unwrap();
    fs::write(&b, []).unwrap();

    let mut dry = scan_dataset(dir.path()).unwrap();
    let report = clean_dataset(&mut dry, CleanMode::DryRun).unwrap();
    assert_eq!((report.removed, report.entries.len()), (0, 2));
    assert!(a.exists() && b.exists());

    let mut m = scan_dataset(dir.path()).unwrap();
    let report = clean_dataset(&mut m, CleanMode::Quarantine).unwrap();
    assert_eq!(report.removed, 2);
    assert!(!a.exists() && !b.exists());
    let q = dir.path().join(QUARANTINE_DIR);
    assert!(q.join("train/infected/00001.png").exists());
    assert!(q.join("test/notinfected/00000.png").exists());
    assert_eq!(m.records.len(), 10);
    assert_eq!(scan_dataset(dir.path()).unwrap().records.len(), 10);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn counts_sum_to_valid_records(sizes in prop::array::uniform4(1usize..5), broken in prop::array::uniform4(0usize..3)) {
        let dir = tempfile::tempdir().unwrap();
        let names = [("train", "infected"), ("train", "notinfected"), ("test", "infected"), ("test", "notinfected")];
        let layout: Vec<_> = names.iter().zip(sizes).map(|((s, c), n)| (*s, *c, n)).collect();
        populate(dir.path(), &layout);
        let mut planted = 0;
        for (((split, class), n), k) in names.iter().zip(sizes).zip(broken) {
            for i in 0..k.min(n) {
                fs::write(dir.path().join(split).join(class).join(format!("{i:05}.png")), b"\x89PNG\r\n").unwrap();
                planted += 1;
            }
        }
        let m = scan_dataset(dir.path()).unwrap();
        let counted: usize = m.counts.values().flat_map(|c| c.values()).sum();
        prop_assert_eq!(counted, m.total_valid());
        prop_assert_eq!(m.total_valid() + planted, sizes.iter().sum::<usize>());
        prop_assert_eq!(m.flagged_records().count(), planted);
    }
}
