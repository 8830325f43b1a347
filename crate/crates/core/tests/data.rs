use std::path::PathBuf;

use daae::data::{load_idx, parse_idx_images, to_idx_bytes, unit_to_byte, write_idx, Dataset};
use daae::Tensor;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn byte_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, h, w)| {
        (
            prop::collection::vec(any::<u8>(), n * h * w),
            prop::collection::vec(0u32..10, n),
        )
            .prop_map(move |(px, labels)| {
                let v = px.iter().map(|&p| daae::data::byte_to_unit(p)).collect();
                Dataset::new(Tensor::new(vec![n, 1, h, w], v).unwrap(), labels, "prop").unwrap()
            })
    })
}

proptest! {
    #[test]
    fn idx_round_trip_is_exact(ds in byte_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &img, &lbl).unwrap();
        let back = load_idx(&img, &lbl).unwrap();
        prop_assert_eq!(back.images.values(), ds.images.values());
        prop_assert_eq!(back.images.shape(), ds.images.shape());
        prop_assert_eq!(back.class_labels, ds.class_labels);
    }

    #[test]
    fn byte_mapping_inverts(p in any::<u8>()) {
        prop_assert_eq!(unit_to_byte(daae::data::byte_to_unit(p)), p);
    }
}

#[test]
fn bundled_digits_load_and_resize() {
    let ds = load_idx(
        fixture("mnist10k-images-idx3-ubyte.gz"),
        fixture("mnist10k-labels-idx1-ubyte.gz"),
    )
    .unwrap();
    assert_eq!(ds.images.shape(), &[10_000, 1, 28, 28]);
    assert_eq!(ds.class_labels.iter().filter(|&&c| c == 1).count(), 1127);
    let small = ds.resize_digits(16).unwrap();
    assert_eq!(small.images.shape(), &[10_000, 1, 16, 16]);
    assert!(small.images.values().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn truncated_idx_reports_lengths() {
    let ds = Dataset::new(Tensor::filled(vec![2, 1, 3, 3], 0.0), vec![0, 1], "t").unwrap();
    let (img, _) = to_idx_bytes(&ds).unwrap();
    let err = parse_idx_images(&img[..img.len() - 1]).unwrap_err().to_string();
    assert!(err.contains("expected 34") && err.contains("got 33"), "{err}");
}
