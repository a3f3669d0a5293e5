//! Dense row-major `f32` tensors and the `TNS1` container.
//!
//! A `TNS1` file is an ASCII header line followed by the raw payload:
//!
//! ```text
//! TNS1 f32 <ndim> <d0> ... <dk>\n<little-endian f32 values, last dim fastest>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const TNS_MAGIC: &str = "TNS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        ensure!(!dims.is_empty(), Shape, "tensor needs at least one dimension");
        ensure!(
            dims.iter().all(|&d| d > 0),
            Shape,
            "extents must be positive, got {dims:?}"
        );
        let n: usize = dims.iter().product();
        ensure!(
            n == data.len(),
            Shape,
            "dims {dims:?} hold {n} values but data has {}",
            data.len()
        );
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0));
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor from f64 values, rounding to f32.
    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(dims.to_vec(), data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row-major flat offset of a full index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        ensure!(
            n == self.data.len() && dims.iter().all(|&d| d > 0),
            Shape,
            "cannot reshape {:?} into {dims:?}",
            self.dims
        );
        Ok(Tensor {
            dims,
            data: self.data,
        })
    }

    /// Serializes to the `TNS1` byte layout.
    pub fn to_tns_bytes(&self) -> Vec<u8> {
        let mut header = format!("{TNS_MAGIC} f32 {}", self.dims.len());
        for d in &self.dims {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
        let mut out = Vec::with_capacity(header.len() + 4 * self.data.len());
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one `TNS1` record from the front of `bytes`, returning the
    /// tensor and the number of bytes consumed.
    pub fn from_tns_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::BadHeader("no header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::BadHeader("header is not ASCII".into()))?;
        let mut tokens = header.split(' ');
        let magic = tokens.next().unwrap_or("");
        if magic != TNS_MAGIC {
            return Err(Error::BadMagic {
                expected: TNS_MAGIC,
                found: magic.chars().take(16).collect(),
            });
        }
        let dtype = tokens.next().unwrap_or("");
        ensure!(dtype == "f32", BadHeader, "unsupported dtype token `{dtype}`");
        let ndim: usize = parse_token(tokens.next(), "ndim")?;
        ensure!(ndim > 0, BadHeader, "ndim must be positive");
        let mut dims = Vec::with_capacity(ndim);
        for k in 0..ndim {
            let d: usize = parse_token(tokens.next(), &format!("dim {k}"))?;
            ensure!(d > 0, BadHeader, "dim {k} is zero");
            dims.push(d);
        }
        ensure!(tokens.next().is_none(), BadHeader, "trailing header tokens");
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::BadHeader("dims overflow".into()))?;
        let start = newline + 1;
        let expected = count * 4;
        let available = bytes.len() - start;
        if available < expected {
            return Err(Error::PayloadMismatch {
                expected,
                found: available,
            });
        }
        let data: Vec<f32> = bytes[start..start + expected]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(dims, data)?;
        Ok((tensor, start + expected))
    }

    /// Parses a complete `TNS1` file image; trailing bytes are rejected.
    pub fn from_tns_bytes(bytes: &[u8]) -> Result<Tensor> {
        let (t, used) = Self::from_tns_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::PayloadMismatch {
                expected: used,
                found: bytes.len(),
            });
        }
        Ok(t)
    }
}

fn parse_token<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| Error::BadHeader(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::BadHeader(format!("unparsable {what}")))
}

pub fn tns_write(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&t.to_tns_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn tns_read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_tns_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let bytes = t.to_tns_bytes();
        let header = b"TNS1 f32 2 2 2\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 16);
        let back = Tensor::from_tns_bytes(&bytes).unwrap();
        assert_eq!(back.dims(), &[2, 2]);
        assert_eq!(back.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_payload() {
        let bytes = Tensor::zeros(&[1, 1]).to_tns_bytes();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0, 0]);
    }

    #[test]
    fn file_round_trip_random() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        let mut rng = RngState::new(7);
        let t = rng.gaussian(&[3, 4, 5], 0.0, 10.0).unwrap();
        tns_write(&t, &path).unwrap();
        let back = tns_read(&path).unwrap();
        assert_eq!(back.dims(), t.dims());
        let same = back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = Tensor::zeros(&[2, 3]).to_tns_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            Tensor::from_tns_bytes(&bytes),
            Err(Error::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Tensor::zeros(&[2]).to_tns_bytes();
        bytes[3] = b'X';
        assert!(matches!(
            Tensor::from_tns_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut bytes = Tensor::zeros(&[2]).to_tns_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            Tensor::from_tns_bytes(&bytes),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = tns_read("/definitely/not/here.tns").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.tns"));
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut rng = RngState::new(seed);
            let data: Vec<f32> = (0..n).map(|_| rng.uniform(-1e6, 1e6).unwrap() as f32).collect();
            let t = Tensor::new(dims, data).unwrap();
            prop_assert_eq!(Tensor::from_tns_bytes(&t.to_tns_bytes()).unwrap(), t);
        }
    }
}
