//! Feature matrix files ("DWFT1"): the binary container with a
//! `{rows, cols, frame_rate}` header and the row-major frame data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use distilkit_core::mat::Mat;
use distilkit_core::signal::FeatureSequence;

use crate::binfile::{read_container, write_container};
use crate::validation;

const MAGIC: &[u8; 5] = b"DWFT1";

#[derive(Serialize, Deserialize)]
struct Header {
    rows: usize,
    cols: usize,
    frame_rate: f64,
}

pub fn write_features(path: &Path, features: &FeatureSequence) -> anyhow::Result<()> {
    let header = Header {
        rows: features.frames.rows(),
        cols: features.frames.cols(),
        frame_rate: features.frame_rate,
    };
    write_container(path, MAGIC, &header, features.frames.data())
}

pub fn read_features(path: &Path) -> anyhow::Result<FeatureSequence> {
    let (header, data): (Header, Vec<f64>) = read_container(path, MAGIC)?;
    if header.rows * header.cols != data.len() {
        return Err(validation(format!(
            "{}: header says {}x{} but payload has {} values",
            path.display(),
            header.rows,
            header.cols,
            data.len()
        )));
    }
    if !(header.frame_rate > 0.0) {
        return Err(validation(format!("{}: frame_rate must be positive", path.display())));
    }
    Ok(FeatureSequence {
        frames: Mat::from_vec(header.rows, header.cols, data),
        frame_rate: header.frame_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use distilkit_core::signal::{synth_task, SynthSpec, TaskKind};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dwft");
        let (features, _) =
            synth_task(TaskKind::Copy, 7, 5, &SynthSpec::default()).unwrap();
        write_features(&path, &features).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.frame_rate, features.frame_rate);
        assert_eq!(back.frames.rows(), features.frames.rows());
        for (a, b) in back.frames.data().iter().zip(features.frames.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_magic_and_bad_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.dwft");
        std::fs::write(&path, b"DWXX1\0\0\0\0").unwrap();
        assert!(read_features(&path).is_err());

        let header = Header { rows: 3, cols: 2, frame_rate: 2.0 };
        write_container(&path, MAGIC, &header, &[0.0; 5]).unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("payload"));
    }
}
