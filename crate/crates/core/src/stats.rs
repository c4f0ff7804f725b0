//! Empirical moments. Variances and covariances use the population
//! convention (divide by the sample count `k`), under which the covariance
//! expansion of a sum of centred vectors is an exact algebraic identity.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn empirical_mean(v: &Tensor) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::InsufficientData {
            op: "mean",
            needed: 1,
            got: 0,
        });
    }
    Ok(mean_of(v.data()))
}

pub fn empirical_variance(v: &Tensor) -> Result<f64> {
    if v.len() < 2 {
        return Err(Error::InsufficientData {
            op: "variance",
            needed: 2,
            got: v.len(),
        });
    }
    Ok(variance_of(v.data()))
}

pub(crate) fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-pass population variance of a non-empty slice.
pub(crate) fn variance_of(v: &[f64]) -> f64 {
    let m = mean_of(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Population covariance of two equally long slices.
pub fn covariance_of(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ma, mb) = (mean_of(a), mean_of(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64
}

/// Pearson correlation; zero when either side is constant.
pub fn correlation_of(a: &[f64], b: &[f64]) -> f64 {
    let denom = (variance_of(a) * variance_of(b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        covariance_of(a, b) / denom
    }
}

fn sample_dims(samples: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (k, n) = samples.dims2(op)?;
    if k < 2 {
        return Err(Error::InsufficientData { op, needed: 2, got: k });
    }
    Ok((k, n))
}

fn centred(samples: &Tensor, k: usize, n: usize) -> Vec<f64> {
    let d = samples.data();
    let mut means = vec![0.0; n];
    for row in d.chunks_exact(n) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= k as f64;
    }
    d.chunks_exact(n)
        .flat_map(|row| row.iter().zip(&means).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect()
}

/// `Cov[A, B] = E[(A − E A)(B − E B)ᵀ]` for `k` paired samples (rows) of
/// `n`-vectors. Returns an `n × n` matrix.
pub fn empirical_cross_cov(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("cross_cov", a.shape(), b.shape()));
    }
    let (k, n) = sample_dims(a, "cross_cov")?;
    let ca = centred(a, k, n);
    let cb = centred(b, k, n);
    let mut out = vec![0.0; n * n];
    for s in 0..k {
        let ra = &ca[s * n..(s + 1) * n];
        let rb = &cb[s * n..(s + 1) * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += ra[i] * rb[j];
            }
        }
    }
    for v in &mut out {
        *v /= k as f64;
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

/// `Var[A] = Cov[A, A]` for `k` samples (rows) of `n`-vectors. The upper
/// triangle is mirrored so the result is exactly symmetric.
pub fn empirical_cov_matrix(samples: &Tensor) -> Result<Tensor> {
    let (k, n) = sample_dims(samples, "cov_matrix")?;
    let c = centred(samples, k, n);
    let mut out = vec![0.0; n * n];
    for s in 0..k {
        let r = &c[s * n..(s + 1) * n];
        for i in 0..n {
            for j in i..n {
                out[i * n + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let v = out[i * n + j] / k as f64;
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

pub fn trace(m: &Tensor) -> Result<f64> {
    let (r, c) = m.dims2("trace")?;
    if r != c {
        return Err(Error::shape("trace", m.shape(), &[r, r]));
    }
    Ok((0..r).map(|i| m.data()[i * c + i]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn constant_vector_has_zero_variance() {
        let v = Tensor::full(&[3], 4.2);
        assert_eq!(empirical_variance(&v).unwrap(), 0.0);
    }

    #[test]
    fn two_sample_covariance() {
        let s = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = empirical_cov_matrix(&s).unwrap();
        assert_eq!(c.data(), [1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn insufficient_data_errors() {
        assert!(matches!(
            empirical_variance(&Tensor::full(&[1], 1.0)),
            Err(Error::InsufficientData { .. })
        ));
        assert!(matches!(
            empirical_cov_matrix(&Tensor::zeros(&[1, 3])),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn cov_matrix_matches_pairwise_oracle() {
        let mut rng = RngStream::new(17);
        let (k, n) = (50, 8);
        let s = Tensor::new(vec![k, n], (0..k * n).map(|_| rng.normal(1.0, 3.0)).collect()).unwrap();
        let got = empirical_cov_matrix(&s).unwrap();
        for i in 0..n {
            for j in 0..n {
                let col_i: Vec<f64> = (0..k).map(|r| s.at(&[r, i])).collect();
                let col_j: Vec<f64> = (0..k).map(|r| s.at(&[r, j])).collect();
                let mi = col_i.iter().sum::<f64>() / k as f64;
                let mj = col_j.iter().sum::<f64>() / k as f64;
                let mut acc = 0.0;
                for r in 0..k {
                    acc += (col_i[r] - mi) * (col_j[r] - mj);
                }
                assert!((got.at(&[i, j]) - acc / k as f64).abs() < 1e-12);
            }
        }
        assert_eq!(got, got.transpose().unwrap());
    }

    #[test]
    fn sum_decomposition_identity() {
        let mut rng = RngStream::new(5);
        let (k, n) = (30, 5);
        let a = Tensor::new(vec![k, n], (0..k * n).map(|_| rng.standard_normal()).collect()).unwrap();
        let b = Tensor::new(vec![k, n], (0..k * n).map(|_| rng.uniform()).collect()).unwrap();
        let lhs = empirical_cov_matrix(&a.add(&b).unwrap()).unwrap();
        let rhs = empirical_cov_matrix(&a)
            .unwrap()
            .add(&empirical_cov_matrix(&b).unwrap())
            .unwrap()
            .add(&empirical_cross_cov(&a, &b).unwrap())
            .unwrap()
            .add(&empirical_cross_cov(&b, &a).unwrap())
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
    }
}
