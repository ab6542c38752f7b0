// Hand-built CIFAR-10 binary records.
// Shared with the acceptance suite of the command-line crate.

#![allow(dead_code)]

use da2s::data::{load_cifar10_binary, parse_cifar10, CIFAR_RECORD};
use da2s::Error;

/// Two records: label 3 with a ramp image, label 9 with a constant image
/// whose last blue byte is 255.
pub fn two_records() -> Vec<u8> {
    let mut bytes = Vec::with_capacity(2 * CIFAR_RECORD);
    bytes.push(3);
    bytes.extend((0..3072).map(|i| (i % 251) as u8));
    bytes.push(9);
    bytes.extend(std::iter::repeat(17u8).take(3071));
    bytes.push(255);
    bytes
}

fn positioned(result: da2s::Result<da2s::data::Dataset>) -> Option<u64> {
    match result {
        Err(Error::Format { offset, .. }) => Some(offset),
        _ => None,
    }
}

/// Every failed fixture expectation; empty when all hold.
pub fn fixture_violations(dir: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    let bytes = two_records();
    let path = dir.join("fixture.bin");
    std::fs::write(&path, &bytes).unwrap();
    match load_cifar10_binary(&path) {
        Ok(d) => {
            if d.labels != [3, 9] {
                out.push(format!("labels {:?}", d.labels));
            }
            if d.images.shape() != [2, 3, 32, 32] {
                out.push(format!("shape {:?}", d.images.shape()));
            }
            let px = d.images.data();
            // Independent decoding of every byte of the fixture.
            for (k, &v) in px.iter().enumerate() {
                let record = k / 3072;
                let byte = bytes[record * CIFAR_RECORD + 1 + k % 3072];
                if v != byte as da2s::Float / 255.0 {
                    out.push(format!("pixel {k} is {v}, byte {byte}"));
                    break;
                }
            }
            if px[0] != 0.0 || px[3071] != (3071 % 251) as da2s::Float / 255.0 || px[6143] != 1.0 {
                out.push("first or last pixel differs".into());
            }
        }
        Err(e) => out.push(format!("fixture rejected: {e}")),
    }

    let truncated = &bytes[..bytes.len() - 1];
    if positioned(parse_cifar10(truncated)) != Some(CIFAR_RECORD as u64) {
        out.push("truncated file not rejected at the start of the partial record".into());
    }
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 10]);
    if positioned(parse_cifar10(&long)) != Some(2 * CIFAR_RECORD as u64) {
        out.push("overlong file not rejected at the start of the trailing bytes".into());
    }
    if positioned(parse_cifar10(&bytes[..100])) != Some(0) {
        out.push("sub-record file not rejected at offset 0".into());
    }
    if positioned(parse_cifar10(&[])) != Some(0) {
        out.push("empty file not rejected".into());
    }
    let mut bad_label = bytes.clone();
    bad_label[CIFAR_RECORD] = 10;
    if positioned(parse_cifar10(&bad_label)) != Some(CIFAR_RECORD as u64) {
        out.push("label byte 10 not rejected at its record".into());
    }

    match parse_cifar10(&vec![0u8; CIFAR_RECORD]) {
        Ok(d) if d.labels == [0] && d.images.data().iter().all(|&v| v == 0.0) => {}
        Ok(_) => out.push("all-zero record is not a black image with label 0".into()),
        Err(e) => out.push(format!("all-zero record rejected: {e}")),
    }
    out
}
