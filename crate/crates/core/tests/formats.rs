use std::path::PathBuf;

use ldc_core::dataio::{decode_csv, decode_embeddings, encode_csv, encode_embeddings, read_embedding_file, write_embedding_file};
use ldc_core::{LdcError, Matrix, SampleSet};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// The rows stored in both golden files.
fn expected() -> SampleSet {
    let rows = vec![
        vec![0.5, -1.25, 3.0],
        vec![1e-3, 2.0, -0.0],
        vec![7.5, 0.125, -4.0],
        vec![1.0 / 3.0, 2.5e10, -6.25],
    ];
    SampleSet::new(Matrix::from_rows(&rows).unwrap(), vec![0, 1, 1, 2]).unwrap()
}

fn bitwise_eq(a: &SampleSet, b: &SampleSet) -> bool {
    a.labels == b.labels
        && a.features.shape() == b.features.shape()
        && a.features.as_slice().iter().zip(b.features.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn binary_golden_file_decodes_and_reencodes_identically() {
    let bytes = std::fs::read(data("golden.ldce")).unwrap();
    let set = decode_embeddings(&bytes).unwrap();
    assert!(bitwise_eq(&set, &expected()));
    assert_eq!(encode_embeddings(&set).unwrap(), bytes);
}

#[test]
fn binary_header_is_little_endian() {
    let bytes = std::fs::read(data("golden.ldce")).unwrap();
    assert_eq!(&bytes[..4], b"LDCE");
    assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
    assert_eq!(&bytes[8..12], &[4, 0, 0, 0]);
    assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
    // first feature 0.5 = 0x3FE0000000000000
    let first = 16 + 4 * 4;
    assert_eq!(&bytes[first..first + 8], &[0, 0, 0, 0, 0, 0, 0xE0, 0x3F]);
}

#[test]
fn csv_golden_file_decodes_and_reencodes_identically() {
    let text = std::fs::read_to_string(data("golden.csv")).unwrap();
    let set = decode_csv(&text).unwrap();
    assert!(bitwise_eq(&set, &expected()));
    assert_eq!(encode_csv(&set), text);
}

#[test]
fn file_reader_detects_format() {
    assert!(bitwise_eq(&read_embedding_file(data("golden.ldce")).unwrap(), &expected()));
    assert!(bitwise_eq(&read_embedding_file(data("golden.csv")).unwrap(), &expected()));
}

#[test]
fn written_files_round_trip_and_inputs_are_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let before = std::fs::read(data("golden.ldce")).unwrap();
    let set = read_embedding_file(data("golden.ldce")).unwrap();
    for name in ["copy.ldce", "copy.csv"] {
        let path = dir.path().join(name);
        write_embedding_file(&path, &set).unwrap();
        assert!(bitwise_eq(&read_embedding_file(&path).unwrap(), &set));
    }
    assert_eq!(std::fs::read(data("golden.ldce")).unwrap(), before);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = read_embedding_file(data("absent.ldce")).unwrap_err();
    assert!(matches!(err, LdcError::Io(_)), "{err:?}");
}
