//! Debug image dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Result;
use crate::tensor::Tensor;

/// Write a `[h, w]` or `[c, h, w]` image in [0, 1] as binary PGM (channel 0
/// when multi-channel).
pub fn write_pgm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w, plane) = match image.shape() {
        [h, w] => (*h, *w, image.data()),
        [_, h, w] => (*h, *w, &image.data()[..h * w]),
        other => {
            return Err(super::DataError::Dimension(format!(
                "write_pgm expects [h, w] or [c, h, w], got {other:?}"
            )))
        }
    };
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = plane
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_payload_size() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::full(&[4, 6], 0.5f32);
        let path = dir.path().join("x.pgm");
        write_pgm(&img, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(bytes.len(), b"P5\n6 4\n255\n".len() + 24);
    }
}
