//! Frozen on-disk format checks: the golden fixture bytes must never change.

use actgraph_core::tensor::{read_tensor, write_tensor};
use actgraph_core::Tensor;

const GOLDEN: &[u8] = include_bytes!("fixtures/golden.agtd");

#[test]
fn golden_bytes_are_frozen() {
    let expected: Vec<u8> = {
        let mut b = Vec::new();
        b.extend_from_slice(b"AGTD");
        b.extend_from_slice(&2u32.to_le_bytes()); // rank
        b.extend_from_slice(&2u32.to_le_bytes()); // dim 0
        b.extend_from_slice(&2u32.to_le_bytes()); // dim 1
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    };
    assert_eq!(GOLDEN, expected.as_slice());
}

#[test]
fn golden_parses_to_expected_tensor() {
    let tensor = Tensor::from_bytes(GOLDEN).unwrap();
    assert_eq!(tensor.shape(), &[2, 2]);
    assert_eq!(tensor.data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn writer_reproduces_golden_bytes() {
    let tensor = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(tensor.to_bytes(), GOLDEN);
}

#[test]
fn file_round_trip_preserves_golden() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.agtd");
    let tensor = Tensor::from_bytes(GOLDEN).unwrap();
    write_tensor(&tensor, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), GOLDEN);
    let back = read_tensor(&path).unwrap();
    assert_eq!(back.shape(), tensor.shape());
    assert_eq!(back.data(), tensor.data());
}
