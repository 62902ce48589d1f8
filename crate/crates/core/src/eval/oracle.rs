use nalgebra::{DMatrix, DVector};

use crate::autodiff::special::LN_2PI;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Largest accepted condition number of the posterior precision.
pub const MAX_CONDITION: f64 = 1e12;

/// Exact Gaussian posterior of a linear-Gaussian model.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    /// `[d]`
    pub mean: Tensor,
    /// `[d, d]`
    pub cov: Tensor,
    /// `[d, d]`
    pub precision: Tensor,
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect();
    Tensor::new([m.nrows(), m.ncols()], data).expect("shape matches")
}

fn check(weight: &Tensor, bias: &Tensor, noise_scale: f64, prior_variance: f64, x: &Tensor) -> Result<()> {
    if weight.rank() != 2 || bias.shape() != [weight.cols()] || x.shape() != [weight.cols()] {
        return Err(Error::ShapeMismatch {
            op: "linear_gaussian_posterior",
            lhs: weight.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    if !(noise_scale > 0.0) || !(prior_variance > 0.0) {
        return Err(Error::invalid("noise scale and prior variance must be positive"));
    }
    Ok(())
}

/// Posterior of `z ~ N(0, v I)`, `x = z W + b + σ ε` (`W` is `[d, n]`):
/// precision `I / v + W Wᵀ / σ²`, mean `Σ W (x − b) / σ²`.
pub fn linear_gaussian_posterior(
    weight: &Tensor,
    bias: &Tensor,
    noise_scale: f64,
    prior_variance: f64,
    x: &Tensor,
) -> Result<GaussianPosterior> {
    check(weight, bias, noise_scale, prior_variance, x)?;
    let w = to_matrix(weight);
    let d = w.nrows();
    let s2 = noise_scale * noise_scale;
    let precision = DMatrix::identity(d, d) / prior_variance + &w * w.transpose() / s2;

    let eig = precision.clone().symmetric_eigen();
    let hi = eig.eigenvalues.max();
    let lo = eig.eigenvalues.min();
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned { cond });
    }
    let chol = precision
        .clone()
        .cholesky()
        .ok_or(Error::IllConditioned { cond })?;
    let cov = chol.inverse();
    let resid = DVector::from_iterator(
        x.len(),
        x.data().iter().zip(bias.data()).map(|(a, b)| a - b),
    );
    let mean = &cov * (&w * resid) / s2;
    Ok(GaussianPosterior {
        mean: Tensor::vector(mean.iter().copied().collect()),
        cov: from_matrix(&cov),
        precision: from_matrix(&precision),
    })
}

/// `log p(x)` with `x ~ N(b, σ² I + v Wᵀ W)`.
pub fn linear_gaussian_log_evidence(
    weight: &Tensor,
    bias: &Tensor,
    noise_scale: f64,
    prior_variance: f64,
    x: &Tensor,
) -> Result<f64> {
    check(weight, bias, noise_scale, prior_variance, x)?;
    let w = to_matrix(weight);
    let n = w.ncols();
    let cov = DMatrix::identity(n, n) * (noise_scale * noise_scale)
        + w.transpose() * &w * prior_variance;
    let chol = cov.cholesky().ok_or(Error::IllConditioned { cond: f64::INFINITY })?;
    let resid = DVector::from_iterator(n, x.data().iter().zip(bias.data()).map(|(a, b)| a - b));
    let sol = chol.solve(&resid);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (n as f64 * LN_2PI + logdet + resid.dot(&sol)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_gives_prior() {
        let w = Tensor::zeros([2, 3]);
        let x = Tensor::vector(vec![1.0, -1.0, 2.0]);
        let p = linear_gaussian_posterior(&w, &Tensor::zeros([3]), 0.5, 2.0, &x).unwrap();
        assert_eq!(p.mean.data(), &[0.0, 0.0]);
        assert!((p.cov.get2(0, 0) - 2.0).abs() < 1e-14);
        assert_eq!(p.cov.get2(0, 1), 0.0);
    }

    #[test]
    fn identity_weight_halves() {
        let w = Tensor::identity(2);
        let x = Tensor::vector(vec![3.0, -1.0]);
        let p = linear_gaussian_posterior(&w, &Tensor::zeros([2]), 1.0, 1.0, &x).unwrap();
        assert!((p.mean.data()[0] - 1.5).abs() < 1e-14);
        assert!((p.mean.data()[1] + 0.5).abs() < 1e-14);
        assert!((p.cov.get2(1, 1) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn rejects_ill_conditioned_precision() {
        let w = Tensor::from_rows(&[[1e7, 0.0], [0.0, 0.0]]).unwrap();
        let x = Tensor::vector(vec![0.0, 0.0]);
        let r = linear_gaussian_posterior(&w, &Tensor::zeros([2]), 1e-1, 1.0, &x);
        assert!(matches!(r, Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn scalar_evidence() {
        let w = Tensor::from_rows(&[[2.0]]).unwrap();
        let x = Tensor::vector(vec![1.0]);
        let got = linear_gaussian_log_evidence(&w, &Tensor::zeros([1]), 1.0, 1.0, &x).unwrap();
        let var: f64 = 5.0;
        let want = -0.5 * (LN_2PI + var.ln() + 1.0 / var);
        assert!((got - want).abs() < 1e-14);
    }
}
