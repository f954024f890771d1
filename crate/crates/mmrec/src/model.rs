//! Model parameters and the forward path: per-modality affine extractors,
//! masked pairwise alignment, weighted fusion, and inner-product scoring.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic prefix of the checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCKP0001";

/// Default preference-representation dimension.
pub const DEFAULT_DIM: usize = 64;

const INIT_STD: f64 = 0.01;

/// User embedding table plus one affine extractor per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `n_users x d`
    pub user_embeddings: Array2<f64>,
    /// Per modality, `d x d_x^m`.
    pub weights: Vec<Array2<f64>>,
    /// Per modality, length `d`.
    pub biases: Vec<Array1<f64>>,
}

impl ModelParams {
    pub fn n_users(&self) -> usize {
        self.user_embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user_embeddings.ncols()
    }

    pub fn n_modalities(&self) -> usize {
        self.weights.len()
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.weights.iter().map(|w| w.ncols()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.user_embeddings.iter().all(|v| v.is_finite())
            && self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Gaussian(0, 0.01^2) weights and user embeddings, zero biases.
pub fn init_params(n_users: usize, dims: &[usize], d: usize, seed: u64) -> Result<ModelParams> {
    if d < 1 {
        return Err(Error::Config("representation dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let user_embeddings = Array2::from_shape_fn((n_users, d), |_| normal.sample(&mut rng));
    let weights = dims
        .iter()
        .map(|&dx| Array2::from_shape_fn((d, dx), |_| normal.sample(&mut rng)))
        .collect();
    let biases = dims.iter().map(|_| Array1::zeros(d)).collect();
    Ok(ModelParams { user_embeddings, weights, biases })
}

/// Modality representation of one feature vector: `W^m x + b^m`.
pub fn extract(params: &ModelParams, modality: usize, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    let rows = extract_rows(
        params,
        modality,
        x.to_shape((1, x.len())).map_err(|e| Error::Dimension(e.to_string()))?.view(),
    )?;
    Ok(rows.row(0).to_owned())
}

/// Batched extraction: one representation row per input row. Every scoring
/// path in the crate goes through this function so that training-time and
/// inference-time arithmetic agree exactly.
pub fn extract_rows(
    params: &ModelParams,
    modality: usize,
    rows: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let w = params.weights.get(modality).ok_or_else(|| {
        Error::Dimension(format!("modality {modality} out of range"))
    })?;
    if rows.ncols() != w.ncols() {
        return Err(Error::Dimension(format!(
            "modality {modality} expects {} features, got {}",
            w.ncols(),
            rows.ncols()
        )));
    }
    let mut out = rows.dot(&w.t());
    out += &params.biases[modality];
    Ok(out)
}

/// Mean of `a_jm a_jm' ||c^m_j - c^m'_j||^2` over the (item, modality-pair)
/// terms with both sides available; 0 when no pair is available.
///
/// `reps[m]` holds one row per item; `avail` is the matching slice of the
/// availability mask.
pub fn alignment_loss(reps: &[Array2<f64>], avail: ArrayView2<u8>) -> f64 {
    let m_count = reps.len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for j in 0..avail.nrows() {
        for m in 0..m_count {
            if avail[(j, m)] == 0 {
                continue;
            }
            for m2 in m + 1..m_count {
                if avail[(j, m2)] == 0 {
                    continue;
                }
                let diff = &reps[m].row(j) - &reps[m2].row(j);
                total += diff.dot(&diff);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Weighted sum of the modality representations under simplex weights.
pub fn fuse(reps: &[ArrayView1<f64>], weights: &[f64]) -> Result<Array1<f64>> {
    check_simplex(weights)?;
    if reps.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} representations for {} weights",
            reps.len(),
            weights.len()
        )));
    }
    let d = reps[0].len();
    let mut z = Array1::zeros(d);
    for (rep, &w) in reps.iter().zip(weights) {
        if rep.len() != d {
            return Err(Error::Dimension("representation lengths differ".into()));
        }
        z.scaled_add(w, rep);
    }
    Ok(z)
}

/// Batched fusion with the same accumulation order as [`fuse`].
pub fn fuse_rows(reps: &[Array2<f64>], weights: &[f64]) -> Result<Array2<f64>> {
    check_simplex(weights)?;
    let mut z = Array2::zeros(reps[0].raw_dim());
    for (rep, &w) in reps.iter().zip(weights) {
        z.scaled_add(w, rep);
    }
    Ok(z)
}

/// Preference score: inner product of user and item representations.
pub fn predict(user: ArrayView1<f64>, item: ArrayView1<f64>) -> Result<f64> {
    if user.len() != item.len() {
        return Err(Error::Dimension(format!(
            "user has length {}, item has length {}",
            user.len(),
            item.len()
        )));
    }
    Ok(user.dot(&item))
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Contract(format!("negative or non-finite weight in {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Write parameters as 32-bit floats (the only place precision drops).
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(params.n_users() as u32).to_le_bytes())?;
    out.write_all(&(params.dim() as u32).to_le_bytes())?;
    out.write_all(&(params.n_modalities() as u32).to_le_bytes())?;
    for dx in params.feature_dims() {
        out.write_all(&(dx as u32).to_le_bytes())?;
    }
    write_f32s(&mut out, params.user_embeddings.iter())?;
    for m in 0..params.n_modalities() {
        write_f32s(&mut out, params.weights[m].iter())?;
        write_f32s(&mut out, params.biases[m].iter())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let n_users = read_u32(&mut reader)? as usize;
    let d = read_u32(&mut reader)? as usize;
    let m_count = read_u32(&mut reader)? as usize;
    let mut dims = Vec::with_capacity(m_count);
    for _ in 0..m_count {
        dims.push(read_u32(&mut reader)? as usize);
    }
    let user_embeddings = read_matrix(&mut reader, n_users, d)?;
    let mut weights = Vec::with_capacity(m_count);
    let mut biases = Vec::with_capacity(m_count);
    for &dx in &dims {
        weights.push(read_matrix(&mut reader, d, dx)?);
        let row = read_matrix(&mut reader, 1, d)?;
        biases.push(row.row(0).to_owned());
    }
    Ok(ModelParams { user_embeddings, weights, biases })
}

fn write_f32s<'a>(out: &mut impl Write, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    for &v in values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_matrix(reader: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut values = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 4];
    for _ in 0..rows * cols {
        reader.read_exact(&mut buf).map_err(|_| {
            Error::Dimension("checkpoint shorter than its header promises".into())
        })?;
        values.push(f32::from_le_bytes(buf) as f64);
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Dimension(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_params(5, &[128, 32], 64, 7).unwrap();
        assert_eq!(a.user_embeddings.dim(), (5, 64));
        assert_eq!(a.weights[0].dim(), (64, 128));
        assert_eq!(a.weights[1].dim(), (64, 32));
        assert!(a.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        let b = init_params(5, &[128, 32], 64, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(5, &[128, 32], 64, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_std_matches_target() {
        let p = init_params(10_000, &[100], 100, 3).unwrap();
        let n = p.user_embeddings.len();
        assert!(n >= 1_000_000);
        let mean: f64 = p.user_embeddings.iter().sum::<f64>() / n as f64;
        let var: f64 = p
            .user_embeddings
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        assert!((std - 0.01).abs() / 0.01 < 0.05, "std {std}");
    }

    #[test]
    fn extract_identity_and_bias_cases() {
        let mut params = init_params(1, &[2], 2, 0).unwrap();
        params.weights[0] = array![[1.0, 0.0], [0.0, 1.0]];
        params.biases[0] = array![0.0, 0.0];
        let c = extract(&params, 0, array![1.0, 2.0].view()).unwrap();
        assert_eq!(c, array![1.0, 2.0]);

        params.weights[0] = Array2::zeros((2, 2));
        params.biases[0] = array![3.0, 3.0];
        let c = extract(&params, 0, array![-5.0, 9.0].view()).unwrap();
        assert_eq!(c, array![3.0, 3.0]);
    }

    #[test]
    fn extract_matches_naive_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = init_params(1, &[2], 3, 0).unwrap();
        params.weights[0] = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>() - 0.5);
        params.biases[0] = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
        let x = Array1::from_shape_fn(2, |_| rng.random::<f64>() - 0.5);
        let c = extract(&params, 0, x.view()).unwrap();
        for i in 0..3 {
            let mut expected = params.biases[0][i];
            for j in 0..2 {
                expected += params.weights[0][(i, j)] * x[j];
            }
            assert!((c[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn extract_rejects_wrong_length() {
        let params = init_params(1, &[4], 3, 0).unwrap();
        assert!(matches!(
            extract(&params, 0, array![1.0, 2.0].view()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn extract_is_affine() {
        let params = init_params(1, &[5], 4, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = Array1::from_shape_fn(5, |_| rng.random::<f64>() * 4.0 - 2.0);
            let x2 = Array1::from_shape_fn(5, |_| rng.random::<f64>() * 4.0 - 2.0);
            let lhs = &extract(&params, 0, (&x + &x2).view()).unwrap()
                - &extract(&params, 0, x2.view()).unwrap();
            let rhs = &extract(&params, 0, x.view()).unwrap()
                - &extract(&params, 0, Array1::zeros(5).view()).unwrap();
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn alignment_loss_worked_cases() {
        // identical representations across modalities
        let same = vec![array![[1.0, 2.0]], array![[1.0, 2.0]]];
        assert_eq!(alignment_loss(&same, array![[1, 1]].view()), 0.0);

        // unit squared distance
        let unit = vec![array![[1.0, 0.0]], array![[0.0, 0.0]]];
        assert_eq!(alignment_loss(&unit, array![[1, 1]].view()), 1.0);

        // masked pair contributes nothing
        assert_eq!(alignment_loss(&unit, array![[1, 0]].view()), 0.0);
    }

    #[test]
    fn alignment_loss_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let a = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5);
            let b = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() - 0.5);
            let avail = Array2::from_shape_fn((4, 2), |_| u8::from(rng.random::<f64>() < 0.8));
            let avail = {
                let mut fixed = avail;
                for mut row in fixed.rows_mut() {
                    if row.iter().all(|&v| v == 0) {
                        row[0] = 1;
                    }
                }
                fixed
            };
            let fwd = alignment_loss(&[a.clone(), b.clone()], avail.view());
            let swapped_avail = {
                let mut s = Array2::zeros(avail.raw_dim());
                for j in 0..4 {
                    s[(j, 0)] = avail[(j, 1)];
                    s[(j, 1)] = avail[(j, 0)];
                }
                s
            };
            let rev = alignment_loss(&[b, a], swapped_avail.view());
            assert!(fwd >= 0.0);
            assert!((fwd - rev).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_worked_cases() {
        let c1 = array![1.0, 0.0];
        let c2 = array![0.0, 1.0];
        let z = fuse(&[c1.view(), c2.view()], &[0.5, 0.5]).unwrap();
        assert_eq!(z, array![0.5, 0.5]);
        let z = fuse(&[c1.view(), c2.view()], &[1.0, 0.0]).unwrap();
        assert_eq!(z, c1);
    }

    #[test]
    fn fuse_rejects_non_simplex() {
        let c1 = array![1.0, 0.0];
        let c2 = array![0.0, 1.0];
        assert!(matches!(
            fuse(&[c1.view(), c2.view()], &[0.7, 0.7]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            fuse(&[c1.view(), c2.view()], &[1.5, -0.5]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fuse_matches_naive_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let reps: Vec<Array1<f64>> = (0..3)
                .map(|_| Array1::from_shape_fn(4, |_| rng.random::<f64>() - 0.5))
                .collect();
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.01).collect();
            let sum: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
            let views: Vec<ArrayView1<f64>> = reps.iter().map(|r| r.view()).collect();
            let z = fuse(&views, &weights).unwrap();
            for i in 0..4 {
                let mut expected = 0.0;
                for m in 0..3 {
                    expected += weights[m] * reps[m][i];
                }
                assert!((z[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_weight_fuse_is_the_arithmetic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let reps: Vec<Array1<f64>> = (0..4)
            .map(|_| Array1::from_shape_fn(6, |_| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let views: Vec<ArrayView1<f64>> = reps.iter().map(|r| r.view()).collect();
        let z = fuse(&views, &[0.25; 4]).unwrap();
        for i in 0..6 {
            let mean = reps.iter().map(|r| r[i]).sum::<f64>() / 4.0;
            assert!((z[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_worked_cases() {
        assert_eq!(predict(array![1.0, 2.0].view(), array![3.0, 4.0].view()).unwrap(), 11.0);
        assert_eq!(predict(array![1.0, 2.0].view(), array![0.0, 0.0].view()).unwrap(), 0.0);
        assert!(predict(array![1.0].view(), array![1.0, 2.0].view()).is_err());
    }

    proptest! {
        #[test]
        fn predict_is_bilinear(
            u in proptest::collection::vec(-10.0f64..10.0, 4),
            z in proptest::collection::vec(-10.0f64..10.0, 4),
            s in -4.0f64..4.0,
        ) {
            let u = Array1::from_vec(u);
            let z = Array1::from_vec(z);
            let base = predict(u.view(), z.view()).unwrap();
            let scaled_u = predict((&u * s).view(), z.view()).unwrap();
            let scaled_z = predict(u.view(), (&z * s).view()).unwrap();
            prop_assert!((scaled_u - s * base).abs() < 1e-9);
            prop_assert!((scaled_z - s * base).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trips_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = init_params(7, &[5, 9], 4, 123).unwrap();
        save_checkpoint(&path, &params).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.n_users(), 7);
        assert_eq!(back.dim(), 4);
        assert_eq!(back.feature_dims(), vec![5, 9]);
        for (a, b) in params.user_embeddings.iter().zip(back.user_embeddings.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        // saving the loaded params again is lossless
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &back).unwrap();
        let again = load_checkpoint(&path2).unwrap();
        assert_eq!(back, again);
    }
}
