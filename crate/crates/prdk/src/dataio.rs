//! Synthetic dataset generation (unit-norm, pairwise non-parallel samples)
//! and a little-endian binary on-disk format.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::path::Path;
use thiserror::Error;

/// Magic bytes of the binary dataset format.
pub const MAGIC: &[u8; 4] = b"PRDK";
/// Current format version.
pub const FORMAT_VERSION: u32 = 1;
/// Pairwise cosine threshold used during generation.
pub const PARALLEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error("bad magic: expected \"PRDK\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input at byte {at}: {needed} bytes required")]
    Truncated { at: usize, needed: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("rejection sampling exceeded {0} draws; lower n or raise the dimension")]
    RejectionBudget(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How targets are produced during generation.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelModel {
    /// Targets from a fixed random linear map drawn once per seed.
    LinearTeacher,
    /// Caller-provided targets, one per sample.
    Provided(Vec<f64>),
}

/// In-memory dataset: unit-norm inputs with scalar targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<(Tensor, f64)>,
    pub rows: usize,
    pub cols: usize,
    /// Generation seed, zero for loaded files.
    pub seed: u64,
    /// Whether samples are unit-Frobenius-norm.
    pub normalized: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Vec<Tensor> {
        self.samples.iter().map(|(x, _)| x.clone()).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|(_, y)| *y).collect()
    }
}

/// Generate `n` unit-norm Gaussian samples, rejecting near-parallel pairs.
pub fn generate_synthetic(
    n: usize,
    rows: usize,
    cols: usize,
    label_model: &LabelModel,
    seed: u64,
) -> Result<Dataset, DataIoError> {
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataIoError::DimensionMismatch(format!(
            "need n, rows, cols >= 1, got n={n}, rows={rows}, cols={cols}"
        )));
    }
    if let LabelModel::Provided(t) = label_model {
        if t.len() != n {
            return Err(DataIoError::DimensionMismatch(format!(
                "{} targets provided for {n} samples",
                t.len()
            )));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let teacher = Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .expect("teacher shape");

    let budget = 1000 * n;
    let mut draws = 0;
    let mut inputs: Vec<Tensor> = Vec::with_capacity(n);
    while inputs.len() < n {
        if draws >= budget {
            return Err(DataIoError::RejectionBudget(budget));
        }
        draws += 1;
        let raw: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        let t = Tensor::new(vec![rows, cols], raw).expect("sample shape");
        let norm = t.frobenius_norm();
        if norm == 0.0 {
            continue;
        }
        let unit = t.scale(1.0 / norm);
        let parallel = inputs.iter().any(|x| {
            x.dot(&unit).map(f64::abs).unwrap_or(1.0) >= 1.0 - PARALLEL_TOLERANCE
        });
        if !parallel {
            inputs.push(unit);
        }
    }

    let samples = inputs
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let y = match label_model {
                LabelModel::LinearTeacher => teacher.dot(&x).expect("teacher shape matches"),
                LabelModel::Provided(t) => t[i],
            };
            (x, y)
        })
        .collect();
    Ok(Dataset {
        samples,
        rows,
        cols,
        seed,
        normalized: true,
    })
}

/// Serialize to the binary layout: magic, u32 version, u32 n, u32 rows,
/// u32 cols, then per sample `rows*cols` f64 values and one f64 target,
/// all little-endian.
pub fn to_bytes(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + dataset.len() * (dataset.rows * dataset.cols + 1) * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.rows as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.cols as u32).to_le_bytes());
    for (x, y) in &dataset.samples {
        for v in x.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&y.to_le_bytes());
    }
    out
}

/// Parse the binary layout. Validates the size arithmetic before any
/// allocation, so arbitrary inputs cannot trigger huge allocations.
pub fn from_bytes(bytes: &[u8], normalize: bool) -> Result<Dataset, DataIoError> {
    const HEADER: usize = 20;
    if bytes.len() < 4 {
        return Err(DataIoError::Truncated {
            at: bytes.len(),
            needed: HEADER,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(DataIoError::BadMagic);
    }
    if bytes.len() < HEADER {
        return Err(DataIoError::Truncated {
            at: bytes.len(),
            needed: HEADER,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(DataIoError::UnsupportedVersion(version));
    }
    let n = u32_at(8) as usize;
    let rows = u32_at(12) as usize;
    let cols = u32_at(16) as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataIoError::DimensionMismatch(format!(
            "header declares n={n}, rows={rows}, cols={cols}"
        )));
    }
    let per_sample = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_add(1))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| DataIoError::DimensionMismatch("sample size overflows".into()))?;
    let needed = per_sample
        .checked_mul(n)
        .and_then(|v| v.checked_add(HEADER))
        .ok_or_else(|| DataIoError::DimensionMismatch("total size overflows".into()))?;
    if bytes.len() < needed {
        return Err(DataIoError::Truncated {
            at: bytes.len(),
            needed,
        });
    }

    let mut samples = Vec::with_capacity(n);
    let mut offset = HEADER;
    for _ in 0..n {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(
                bytes[offset..offset + 8].try_into().expect("8 bytes"),
            ));
            offset += 8;
        }
        let y = f64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8 bytes"));
        offset += 8;
        let mut x = Tensor::new(vec![rows, cols], data).expect("validated size");
        if normalize {
            let norm = x.frobenius_norm();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(DataIoError::DimensionMismatch(
                    "cannot normalize a zero or non-finite sample".into(),
                ));
            }
            x = x.scale(1.0 / norm);
        }
        samples.push((x, y));
    }
    Ok(Dataset {
        samples,
        rows,
        cols,
        seed: 0,
        normalized: normalize,
    })
}

pub fn save_binary(dataset: &Dataset, path: &Path) -> Result<(), DataIoError> {
    crate::artifacts::write_atomic(path, &to_bytes(dataset))?;
    Ok(())
}

pub fn load_binary(path: &Path, normalize: bool) -> Result<Dataset, DataIoError> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, normalize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_sample_is_unit_norm() {
        let ds = generate_synthetic(1, 3, 4, &LabelModel::LinearTeacher, 9).unwrap();
        assert_eq!(ds.len(), 1);
        assert!((ds.samples[0].0.frobenius_norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn hundred_samples_are_pairwise_non_parallel() {
        let ds = generate_synthetic(100, 4, 6, &LabelModel::LinearTeacher, 3).unwrap();
        for i in 0..ds.len() {
            assert!((ds.samples[i].0.frobenius_norm() - 1.0).abs() < 1e-10);
            for j in (i + 1)..ds.len() {
                let cos = ds.samples[i].0.dot(&ds.samples[j].0).unwrap();
                assert!(cos.abs() < 1.0 - PARALLEL_TOLERANCE);
            }
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_seed() {
        let a = generate_synthetic(10, 3, 5, &LabelModel::LinearTeacher, 77).unwrap();
        let b = generate_synthetic(10, 3, 5, &LabelModel::LinearTeacher, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_dimensional_samples_exhaust_the_rejection_budget() {
        // Every unit 1-vector is parallel to every other one.
        let err = generate_synthetic(3, 1, 1, &LabelModel::LinearTeacher, 0).unwrap_err();
        assert!(matches!(err, DataIoError::RejectionBudget(_)));
    }

    #[test]
    fn provided_targets_must_match_count() {
        let err = generate_synthetic(3, 2, 2, &LabelModel::Provided(vec![1.0]), 0).unwrap_err();
        assert!(matches!(err, DataIoError::DimensionMismatch(_)));
    }

    #[test]
    fn round_trip_preserves_bits() {
        let ds = generate_synthetic(7, 3, 4, &LabelModel::LinearTeacher, 5).unwrap();
        let bytes = to_bytes(&ds);
        let back = from_bytes(&bytes, false).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.0.data(), b.0.data());
            assert_eq!(a.1.to_bits(), b.1.to_bits());
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncation_names_the_byte_offset() {
        let ds = generate_synthetic(2, 2, 2, &LabelModel::LinearTeacher, 5).unwrap();
        let bytes = to_bytes(&ds);
        let cut = bytes.len() - 5;
        match from_bytes(&bytes[..cut], false) {
            Err(DataIoError::Truncated { at, needed }) => {
                assert_eq!(at, cut);
                assert_eq!(needed, bytes.len());
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = to_bytes(&generate_synthetic(1, 2, 2, &LabelModel::LinearTeacher, 5).unwrap());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes, false), Err(DataIoError::BadMagic)));
    }

    #[test]
    fn zero_dimension_header_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes, false),
            Err(DataIoError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn oversized_header_cannot_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = from_bytes(&bytes, false).unwrap_err();
        assert!(matches!(
            err,
            DataIoError::Truncated { .. } | DataIoError::DimensionMismatch(_)
        ));
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = from_bytes(&bytes, false);
            let _ = from_bytes(&bytes, true);
        }
    }
}
