use flsched::datasets::{load_idx, parse_idx};
use flsched::Error;
use proptest::prelude::*;

/// Minimal IDX writer, independent of the reader under test.
fn idx_images(images: &[Vec<u8>], rows: u32, cols: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&[0, 0, 0x08, 0x03]);
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, 0x01];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn two_digits() -> (Vec<u8>, Vec<u8>) {
    let a: Vec<u8> = (0..784).map(|i| (i % 256) as u8).collect();
    let b: Vec<u8> = (0..784).map(|i| 255 - (i % 256) as u8).collect();
    (idx_images(&[a, b], 28, 28), idx_labels(&[7, 2]))
}

#[test]
fn reads_two_mnist_sized_images() {
    let (images, labels) = two_digits();
    let ds = parse_idx(&images, &labels).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.dim(), 784);
    assert_eq!(ds.labels(), &[7, 2]);
    assert_eq!(ds.classes(), 8);
    assert_eq!(ds.row(0)[0], 0.0);
    assert_eq!(ds.row(0)[255], 1.0);
    assert_eq!(ds.row(1)[0], 1.0);
    assert!((ds.row(0)[1] - 1.0 / 255.0).abs() < 1e-15);
}

#[test]
fn loads_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = two_digits();
    let ip = dir.path().join("train-images-idx3-ubyte");
    let lp = dir.path().join("train-labels-idx1-ubyte");
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    assert_eq!(load_idx(&ip, &lp).unwrap().len(), 2);

    let missing = load_idx(dir.path().join("nope"), &lp).unwrap_err();
    assert_eq!(missing.exit_code(), 4);
}

fn format_field(e: Error) -> String {
    match e {
        Error::Format { field, .. } => field,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn wrong_label_magic_names_the_field() {
    let (images, mut labels) = two_digits();
    labels[3] = 0x03;
    assert_eq!(format_field(parse_idx(&images, &labels).unwrap_err()), "labels:magic");
}

#[test]
fn wrong_image_magic_names_the_field() {
    let (mut images, labels) = two_digits();
    images[3] = 0x01;
    assert_eq!(format_field(parse_idx(&images, &labels).unwrap_err()), "images:magic");
}

#[test]
fn count_mismatch_names_the_field() {
    let (images, _) = two_digits();
    let labels = idx_labels(&[1, 2, 3]);
    assert_eq!(format_field(parse_idx(&images, &labels).unwrap_err()), "labels:count");
}

#[test]
fn truncated_pixels_name_the_field() {
    let (images, labels) = two_digits();
    let cut = &images[..images.len() - 10];
    assert_eq!(format_field(parse_idx(cut, &labels).unwrap_err()), "images:pixels");
    assert_eq!(parse_idx(cut, &labels).unwrap_err().exit_code(), 3);
}

#[test]
fn truncated_header_is_rejected() {
    let (images, labels) = two_digits();
    assert!(parse_idx(&images[..10], &labels).is_err());
    assert!(parse_idx(&images, &labels[..6]).is_err());
}

proptest! {
    #[test]
    fn round_trip(
        rows in 1u32..5,
        cols in 1u32..5,
        data in proptest::collection::vec((any::<u8>(), proptest::collection::vec(any::<u8>(), 25)), 1..6),
    ) {
        let dim = (rows * cols) as usize;
        let images: Vec<Vec<u8>> = data.iter().map(|(_, px)| px[..dim].to_vec()).collect();
        let labels: Vec<u8> = data.iter().map(|(l, _)| l % 10).collect();
        let ds = parse_idx(&idx_images(&images, rows, cols), &idx_labels(&labels)).unwrap();
        prop_assert_eq!(ds.len(), images.len());
        prop_assert_eq!(ds.dim(), dim);
        for (i, img) in images.iter().enumerate() {
            prop_assert_eq!(ds.label(i), labels[i] as usize);
            for (j, &px) in img.iter().enumerate() {
                prop_assert_eq!((ds.row(i)[j] * 255.0).round() as u8, px);
            }
        }
    }
}
