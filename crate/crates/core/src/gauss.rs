//! Gaussian-distribution utilities: robust Cholesky with a jitter ladder,
//! KL divergences in closed form, reparametrised sampling and Gaussian
//! (variational) log-densities.
//!
//! Covariances are carried exclusively as lower-triangular square roots;
//! full covariance matrices are never materialised.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{cholesky_raw, Tensor};

const LN_2PI: f64 = 1.8378770664093453;

/// Ladder of diagonal increments tried before declaring a matrix
/// not positive definite. The initial jitter is always added, even when the
/// matrix would factor without it, so behaviour is deterministic.
#[derive(Clone, Copy, Debug)]
pub struct JitterPolicy {
    pub initial: f64,
    pub growth_factor: f64,
    pub max: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            initial: 1e-6,
            growth_factor: 10.0,
            max: 1e-2,
        }
    }
}

impl JitterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial <= self.max && self.growth_factor > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "jitter policy requires 0 < initial <= max and growth > 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Full-covariance Gaussian `N(mean, L L^T)` with `L` lower-triangular.
#[derive(Clone, Debug)]
pub struct FullGaussian {
    pub mean: Tensor,
    pub cov_sqrt: Tensor,
}

impl FullGaussian {
    pub fn new(mean: Tensor, cov_sqrt: Tensor) -> Result<Self> {
        if mean.rank() != 1 || cov_sqrt.rank() != 2 {
            return Err(Error::Shape {
                op: "FullGaussian::new",
                node: None,
                detail: format!(
                    "mean {:?}, cov_sqrt {:?}",
                    mean.shape(),
                    cov_sqrt.shape()
                ),
            });
        }
        let m = mean.shape()[0];
        if cov_sqrt.shape() != [m, m] {
            return Err(Error::Shape {
                op: "FullGaussian::new",
                node: None,
                detail: format!("cov_sqrt {:?} for {m}-dim mean", cov_sqrt.shape()),
            });
        }
        validate_cov_sqrt(&cov_sqrt)?;
        Ok(FullGaussian { mean, cov_sqrt })
    }

    pub fn dim(&self) -> usize {
        self.mean.shape()[0]
    }

    fn mean_col(&self) -> Tensor {
        Tensor::matrix(self.dim(), 1, self.mean.data().to_vec()).expect("mean column")
    }
}

fn validate_cov_sqrt(l: &Tensor) -> Result<()> {
    let n = l.rows();
    for i in 0..n {
        if l.get2(i, i) <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "cov-sqrt diagonal entry {i} is {} (must be positive)",
                l.get2(i, i)
            )));
        }
        for j in (i + 1)..n {
            if l.get2(i, j) != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "cov-sqrt has non-zero entry above the diagonal at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn check_symmetric(a: &Tensor, tol: f64) -> Result<()> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::Shape {
            op: "cholesky_with_jitter",
            node: None,
            detail: format!("expected square matrix, got {:?}", a.shape()),
        });
    }
    let n = a.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.get2(i, j) - a.get2(j, i)).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "matrix not symmetric within {tol:e} at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn add_jitter(a: &Tensor, jitter: f64) -> Tensor {
    let mut out = a.clone();
    let n = a.rows();
    for i in 0..n {
        let v = out.get2(i, i) + jitter;
        out.set2(i, i, v);
    }
    out
}

/// Probes the jitter ladder on raw values; returns the smallest jitter that
/// factors together with the factor itself.
pub(crate) fn find_jitter(a: &Tensor, policy: &JitterPolicy) -> Result<(f64, Tensor)> {
    policy.validate()?;
    check_symmetric(a, 1e-10)?;
    let mut attempted = Vec::new();
    let mut jitter = policy.initial;
    loop {
        attempted.push(jitter);
        if let Ok(l) = cholesky_raw(&add_jitter(a, jitter)) {
            return Ok((jitter, l));
        }
        if jitter >= policy.max {
            break;
        }
        jitter = (jitter * policy.growth_factor).min(policy.max);
    }
    Err(Error::NotPositiveDefinite {
        size: a.rows(),
        attempted_jitters: attempted,
    })
}

/// Lower Cholesky factor of `A + jitter I` using the smallest jitter in the
/// policy ladder that succeeds. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(a: &Tensor, policy: &JitterPolicy) -> Result<(Tensor, f64)> {
    let (jitter, l) = find_jitter(a, policy)?;
    Ok((l, jitter))
}

/// On-tape variant: the ladder is probed on raw values, then a single
/// `A + jitter I -> cholesky` pair is recorded so gradients flow through
/// the factorisation (the jitter itself is a constant).
pub fn cholesky_with_jitter_t<'t>(
    tape: &'t Tape,
    a: Var<'t>,
    policy: &JitterPolicy,
) -> Result<(Var<'t>, f64)> {
    let (jitter, _) = find_jitter(&a.value(), policy)?;
    let n = a.shape()[0];
    let eye = tape.constant(Tensor::eye(n).scale(jitter))?;
    let l = a.add(eye)?.cholesky()?;
    Ok((l, jitter))
}

// ---------------------------------------------------------------------------
// KL divergences
// ---------------------------------------------------------------------------

/// `KL(N(m, S) || N(0, I))` for `S = L L^T`, on tape.
/// `mean` is an M x 1 column, `cov_sqrt` an M x M lower triangle.
pub fn kl_whitened_t<'t>(tape: &'t Tape, mean: Var<'t>, cov_sqrt: Var<'t>) -> Result<Var<'t>> {
    let m = mean.shape()[0] as f64;
    let tr = cov_sqrt.square()?.sum()?;
    let msq = mean.square()?.sum()?;
    // logdet S = sum(log diag(L)^2); the squared form tolerates sign flips
    // of the diagonal during optimisation
    let logdet = cov_sqrt.diag()?.square()?.log()?.sum()?;
    tr.add(msq)?
        .sub(tape.scalar(m))?
        .sub(logdet)?
        .scale(0.5)
}

/// `KL(N(m, S) || N(0, K))` given the lower Cholesky factor of `K`,
/// computed with triangular solves only.
pub fn kl_general_t<'t>(
    tape: &'t Tape,
    mean: Var<'t>,
    cov_sqrt: Var<'t>,
    prior_chol: Var<'t>,
) -> Result<Var<'t>> {
    let m = mean.shape()[0] as f64;
    let a = prior_chol.solve_lower(cov_sqrt)?;
    let tr = a.square()?.sum()?;
    let b = prior_chol.solve_lower(mean)?;
    let msq = b.square()?.sum()?;
    let logdet_k = prior_chol.diag()?.square()?.log()?.sum()?;
    let logdet_s = cov_sqrt.diag()?.square()?.log()?.sum()?;
    tr.add(msq)?
        .sub(tape.scalar(m))?
        .add(logdet_k)?
        .sub(logdet_s)?
        .scale(0.5)
}

/// `KL(q || N(0, I))`, non-negative, zero exactly when `q` is standard normal.
pub fn kl_whitened(q: &FullGaussian) -> Result<f64> {
    validate_cov_sqrt(&q.cov_sqrt)?;
    let tape = Tape::new();
    let m = tape.constant(q.mean_col())?;
    let s = tape.constant(q.cov_sqrt.clone())?;
    kl_whitened_t(&tape, m, s)?.value().as_scalar()
}

/// `KL(q || N(0, prior_chol prior_chol^T))`. Reduces exactly to
/// [`kl_whitened`] when the prior factor is the identity.
pub fn kl_general(q: &FullGaussian, prior_chol: &Tensor) -> Result<f64> {
    validate_cov_sqrt(&q.cov_sqrt)?;
    validate_cov_sqrt(prior_chol)?;
    if prior_chol.shape() != q.cov_sqrt.shape() {
        return Err(Error::Shape {
            op: "kl_general",
            node: None,
            detail: format!(
                "prior factor {:?} vs cov-sqrt {:?}",
                prior_chol.shape(),
                q.cov_sqrt.shape()
            ),
        });
    }
    let tape = Tape::new();
    let m = tape.constant(q.mean_col())?;
    let s = tape.constant(q.cov_sqrt.clone())?;
    let k = tape.constant(prior_chol.clone())?;
    kl_general_t(&tape, m, s, k)?.value().as_scalar()
}

// ---------------------------------------------------------------------------
// reparametrised sampling
// ---------------------------------------------------------------------------

/// Diagonal reparametrised sample on tape: `mean + sqrt(var) * noise`,
/// differentiable with respect to `mean` and `var`.
pub fn reparam_sample_t<'t>(
    tape: &'t Tape,
    mean: Var<'t>,
    var: Var<'t>,
    noise: &Tensor,
) -> Result<Var<'t>> {
    let v = var.value();
    if v.data().iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidArgument(
            "reparam_sample: negative variance".into(),
        ));
    }
    if noise.shape() != mean.shape() {
        return Err(Error::Shape {
            op: "reparam_sample",
            node: None,
            detail: format!("noise {:?} vs mean {:?}", noise.shape(), mean.shape()),
        });
    }
    let eps = tape.constant(noise.clone())?;
    mean.add(var.sqrt()?.mul(eps)?)
}

/// Raw reparametrised sample. With `scale` shaped like `mean` it is an
/// elementwise variance (`mean + sqrt(scale) * noise`); with a square
/// lower-triangular `scale` and a column `mean` it is a full-covariance
/// sample `mean + scale * noise`.
pub fn reparam_sample(mean: &Tensor, scale: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if scale.shape() == mean.shape() {
        if noise.shape() != mean.shape() {
            return Err(Error::Shape {
                op: "reparam_sample",
                node: None,
                detail: format!("noise {:?} vs mean {:?}", noise.shape(), mean.shape()),
            });
        }
        if scale.data().iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument(
                "reparam_sample: negative variance".into(),
            ));
        }
        Ok(mean.add(&scale.zip(noise, |v, e| v.sqrt() * e)))
    } else if scale.rank() == 2
        && scale.rows() == scale.cols()
        && mean.rank() == 2
        && mean.cols() == 1
        && mean.rows() == scale.rows()
        && noise.shape() == mean.shape()
    {
        Ok(mean.add(&scale.matmul(noise)))
    } else {
        Err(Error::Shape {
            op: "reparam_sample",
            node: None,
            detail: format!(
                "mean {:?}, scale {:?}, noise {:?}",
                mean.shape(),
                scale.shape(),
                noise.shape()
            ),
        })
    }
}

// ---------------------------------------------------------------------------
// Gaussian log-densities
// ---------------------------------------------------------------------------

/// `log N(y; mean, var)`.
pub fn gaussian_logpdf(y: f64, mean: f64, var: f64) -> Result<f64> {
    if var <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian_logpdf: variance {var} must be positive"
        )));
    }
    let d = y - mean;
    Ok(-0.5 * (LN_2PI + var.ln()) - d * d / (2.0 * var))
}

/// `E_{h ~ N(mean, var)}[log N(y; h, noise_var)]` in closed form.
pub fn gaussian_variational_expectation(
    y: f64,
    mean: f64,
    var: f64,
    noise_var: f64,
) -> Result<f64> {
    if noise_var <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "variational expectation: noise variance {noise_var} must be positive"
        )));
    }
    if var < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "variational expectation: variance {var} must be non-negative"
        )));
    }
    let d = y - mean;
    Ok(-0.5 * (LN_2PI + noise_var.ln()) - (d * d + var) / (2.0 * noise_var))
}

/// Sum over all entries of the closed-form variational expectation, on tape:
/// targets are constants, `mean`/`var` are N x P, `noise_var` a positive
/// scalar variable.
pub fn variational_expectation_sum_t<'t>(
    tape: &'t Tape,
    targets: &Tensor,
    mean: Var<'t>,
    var: Var<'t>,
    noise_var: Var<'t>,
) -> Result<Var<'t>> {
    if mean.shape() != targets.shape().to_vec() || var.shape() != targets.shape().to_vec() {
        return Err(Error::Shape {
            op: "variational_expectation",
            node: None,
            detail: format!(
                "targets {:?}, mean {:?}, var {:?}",
                targets.shape(),
                mean.shape(),
                var.shape()
            ),
        });
    }
    let n_total = targets.numel() as f64;
    let y = tape.constant(targets.clone())?;
    let quad = y.sub(mean)?.square()?.add(var)?.sum()?;
    let half_quad = quad.div(noise_var.scale(2.0)?)?;
    let log_term = noise_var.log()?.scale(0.5 * n_total)?;
    tape.scalar(0.5 * n_total * LN_2PI)
        .add(log_term)?
        .add(half_quad)?
        .neg()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_tape_builder, tape_builder, ParamMap};
    use proptest::prelude::*;

    #[test]
    fn jitter_on_identity_is_initial_only() {
        let (l, used) = cholesky_with_jitter(&Tensor::eye(2), &JitterPolicy::default()).unwrap();
        assert_eq!(used, 1e-6);
        let expect = (1.0 + 1e-6_f64).sqrt();
        assert!((l.get2(0, 0) - expect).abs() < 1e-15);
        assert!((l.get2(1, 1) - expect).abs() < 1e-15);
        assert_eq!(l.get2(1, 0), 0.0);
    }

    #[test]
    fn jitter_factor_reconstructs_a_plus_jitter() {
        let a = Tensor::matrix(2, 2, vec![4., 2., 2., 3.]).unwrap();
        let (l, used) = cholesky_with_jitter(&a, &JitterPolicy::default()).unwrap();
        assert_eq!(used, 1e-6);
        let rec = l.matmul(&l.t());
        let target = add_jitter(&a, 1e-6);
        for (x, y) in rec.data().iter().zip(target.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((l.get2(0, 0) - 2.0000002).abs() < 1e-6);
        assert!((l.get2(1, 0) - 0.9999999).abs() < 1e-6);
        assert!((l.get2(1, 1) - 1.4142137).abs() < 1e-6);
    }

    #[test]
    fn jitter_on_zero_matrix_gives_sqrt_initial() {
        let (l, used) =
            cholesky_with_jitter(&Tensor::zeros(&[2, 2]), &JitterPolicy::default()).unwrap();
        assert_eq!(used, 1e-6);
        assert_eq!(l.get2(0, 0), 1e-3);
        assert_eq!(l.get2(1, 1), 1e-3);
    }

    #[test]
    fn indefinite_matrix_reports_full_ladder() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 2., 1.]).unwrap();
        match cholesky_with_jitter(&a, &JitterPolicy::default()) {
            Err(Error::NotPositiveDefinite {
                size,
                attempted_jitters,
            }) => {
                assert_eq!(size, 2);
                let ladder = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
                assert_eq!(attempted_jitters.len(), ladder.len());
                for (got, want) in attempted_jitters.iter().zip(ladder) {
                    assert!((got / want - 1.0).abs() < 1e-9);
                }
            }
            other => panic!("expected ladder failure, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a = Tensor::matrix(2, 2, vec![1., 0.5, 0.0, 1.]).unwrap();
        assert!(cholesky_with_jitter(&a, &JitterPolicy::default()).is_err());
    }

    #[test]
    fn kl_whitened_known_values() {
        let q = FullGaussian::new(Tensor::vector(vec![0.0; 3]), Tensor::eye(3)).unwrap();
        assert_eq!(kl_whitened(&q).unwrap(), 0.0);

        let q = FullGaussian::new(Tensor::vector(vec![1.0, 0.0]), Tensor::eye(2)).unwrap();
        assert!((kl_whitened(&q).unwrap() - 0.5).abs() < 1e-15);

        // S = diag(2, 2): KL = 1 - ln 2
        let s = Tensor::diag_embed(&[2.0_f64.sqrt(), 2.0_f64.sqrt()]);
        let q = FullGaussian::new(Tensor::vector(vec![0.0, 0.0]), s).unwrap();
        assert!((kl_whitened(&q).unwrap() - (1.0 - 2.0_f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn kl_general_reduces_to_whitened_with_identity_prior() {
        let s = Tensor::matrix(3, 3, vec![1.3, 0., 0., -0.4, 0.8, 0., 0.2, 0.1, 1.7]).unwrap();
        let q = FullGaussian::new(Tensor::vector(vec![0.3, -1.2, 0.7]), s).unwrap();
        let a = kl_whitened(&q).unwrap();
        let b = kl_general(&q, &Tensor::eye(3)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn kl_of_prior_against_itself_is_zero() {
        let l = Tensor::matrix(3, 3, vec![1.5, 0., 0., 0.3, 0.9, 0., -0.2, 0.4, 1.1]).unwrap();
        let q = FullGaussian::new(Tensor::vector(vec![0.0; 3]), l.clone()).unwrap();
        assert!(kl_general(&q, &l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_non_positive_diagonal() {
        assert!(FullGaussian::new(
            Tensor::vector(vec![0.0, 0.0]),
            Tensor::diag_embed(&[1.0, -0.5]),
        )
        .is_err());
    }

    #[test]
    fn reparam_sample_known_values() {
        let mean = Tensor::vector(vec![1.0, -2.0]);
        let var = Tensor::vector(vec![4.0, 9.0]);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(reparam_sample(&mean, &var, &zero).unwrap(), mean);

        let s = reparam_sample(
            &Tensor::scalar(0.0),
            &Tensor::scalar(4.0),
            &Tensor::scalar(1.5),
        )
        .unwrap();
        assert_eq!(s.as_scalar().unwrap(), 3.0);

        assert!(reparam_sample(
            &Tensor::scalar(0.0),
            &Tensor::scalar(-1.0),
            &Tensor::scalar(0.0)
        )
        .is_err());
    }

    #[test]
    fn reparam_full_covariance_mode() {
        let l = Tensor::matrix(2, 2, vec![2.0, 0.0, 1.0, 3.0]).unwrap();
        let mean = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let noise = Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap();
        let s = reparam_sample(&mean, &l, &noise).unwrap();
        assert_eq!(s.data(), &[3.0, -1.0]); // 1 + 2*1, 1 + 1 - 3
    }

    #[test]
    fn logpdf_known_values() {
        assert!((gaussian_logpdf(0.0, 0.0, 1.0).unwrap() + 0.9189385332046727).abs() < 1e-15);
        assert!((gaussian_logpdf(1.0, 0.0, 1.0).unwrap() + 1.4189385332046727).abs() < 1e-15);
        assert!((gaussian_logpdf(2.0, 0.0, 4.0).unwrap() + 2.112085713764618).abs() < 1e-12);
        assert!(gaussian_logpdf(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn variational_expectation_known_values() {
        let a = gaussian_variational_expectation(0.7, 0.7, 0.0, 1.0).unwrap();
        assert!((a - gaussian_logpdf(0.7, 0.7, 1.0).unwrap()).abs() < 1e-15);

        let b = gaussian_variational_expectation(0.0, 1.0, 1.0, 1.0).unwrap();
        assert!((b + 1.9189385332046727).abs() < 1e-15);

        assert!(gaussian_variational_expectation(0.0, 0.0, 1.0, 0.0).is_err());
        assert!(gaussian_variational_expectation(0.0, 0.0, -0.1, 1.0).is_err());
    }

    #[test]
    fn variational_expectation_bounded_by_logpdf() {
        for var in [0.0, 0.01, 0.5, 2.0] {
            for y in [-1.0, 0.0, 2.5] {
                let ve = gaussian_variational_expectation(y, 0.3, var, 0.7).unwrap();
                let lp = gaussian_logpdf(y, 0.3, 0.7).unwrap();
                assert!(ve <= lp + 1e-15);
                if var == 0.0 {
                    assert!((ve - lp).abs() < 1e-15);
                } else {
                    assert!(ve < lp);
                }
            }
        }
    }

    #[test]
    fn gradients_of_gauss_ops() {
        // kl_whitened
        let f = tape_builder(|tape, v| {
            let mask = tape.constant(Tensor::lower_triangle_mask(3))?;
            kl_whitened_t(tape, v["m"], v["s"].mul(mask)?)
        });
        let mut p = ParamMap::new();
        p.insert("m".into(), Tensor::matrix(3, 1, vec![0.3, -0.7, 1.1]).unwrap());
        p.insert(
            "s".into(),
            Tensor::matrix(3, 3, vec![1.2, 0., 0., 0.3, 0.8, 0., -0.5, 0.2, 1.5]).unwrap(),
        );
        let report = check_tape_builder(&f, &p, 1e-6, 1e-9).unwrap();
        assert!(report.passes(1e-6), "kl_whitened:\n{report}");

        // kl_general with an on-tape prior factor
        let g = tape_builder(|tape, v| {
            let mask = tape.constant(Tensor::lower_triangle_mask(3))?;
            let boost = tape.constant(Tensor::eye(3).scale(2.0))?;
            let lk = v["k"].mul(mask)?.add(boost)?;
            kl_general_t(tape, v["m"], v["s"].mul(mask)?, lk)
        });
        let mut p2 = p.clone();
        p2.insert(
            "k".into(),
            Tensor::matrix(3, 3, vec![0.4, 0., 0., 0.2, 0.6, 0., 0.1, -0.3, 0.5]).unwrap(),
        );
        let report = check_tape_builder(&g, &p2, 1e-6, 1e-9).unwrap();
        assert!(report.passes(1e-6), "kl_general:\n{report}");

        // reparam sample (sum of entries) and variational expectation
        let noise = Tensor::matrix(2, 2, vec![0.3, -1.2, 0.8, 0.5]).unwrap();
        let h = tape_builder(move |tape, v| {
            reparam_sample_t(tape, v["mu"], v["var"], &noise)?.sum()
        });
        let mut p3 = ParamMap::new();
        p3.insert("mu".into(), Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        p3.insert("var".into(), Tensor::matrix(2, 2, vec![0.5, 1.0, 1.5, 2.0]).unwrap());
        let report = check_tape_builder(&h, &p3, 1e-6, 1e-9).unwrap();
        assert!(report.passes(1e-6), "reparam_sample:\n{report}");

        let y = Tensor::matrix(2, 1, vec![0.2, -0.4]).unwrap();
        let ve = tape_builder(move |tape, v| {
            variational_expectation_sum_t(tape, &y, v["mean"], v["var"], v["nv"])
        });
        let mut p4 = ParamMap::new();
        p4.insert("mean".into(), Tensor::matrix(2, 1, vec![0.1, 0.3]).unwrap());
        p4.insert("var".into(), Tensor::matrix(2, 1, vec![0.6, 1.2]).unwrap());
        p4.insert("nv".into(), Tensor::scalar(0.8));
        let report = check_tape_builder(&ve, &p4, 1e-6, 1e-9).unwrap();
        assert!(report.passes(1e-6), "variational expectation:\n{report}");

        // jittered cholesky end to end
        let j = tape_builder(|tape, v| {
            let sym = v["a"].add(v["a"].t()?)?.scale(0.5)?;
            let (l, _) = cholesky_with_jitter_t(tape, sym, &JitterPolicy::default())?;
            l.diag()?.log()?.sum()
        });
        let mut p5 = ParamMap::new();
        p5.insert(
            "a".into(),
            Tensor::matrix(3, 3, vec![4., 1., 0.5, 1., 3., 0.2, 0.5, 0.2, 2.]).unwrap(),
        );
        let report = check_tape_builder(&j, &p5, 1e-6, 1e-9).unwrap();
        assert!(report.passes(1e-6), "cholesky_with_jitter:\n{report}");
    }

    proptest! {
        #[test]
        fn kl_whitened_is_non_negative(
            mean in proptest::collection::vec(-3.0..3.0f64, 3),
            diag in proptest::collection::vec(0.05..3.0f64, 3),
            lower in proptest::collection::vec(-2.0..2.0f64, 3),
        ) {
            let mut l = Tensor::diag_embed(&diag);
            l.set2(1, 0, lower[0]);
            l.set2(2, 0, lower[1]);
            l.set2(2, 1, lower[2]);
            let q = FullGaussian::new(Tensor::vector(mean), l).unwrap();
            let kl = kl_whitened(&q).unwrap();
            prop_assert!(kl >= -1e-12);
        }
    }

    #[test]
    fn kl_whitened_zero_iff_standard_normal() {
        let q = FullGaussian::new(Tensor::vector(vec![0.0; 4]), Tensor::eye(4)).unwrap();
        assert!(kl_whitened(&q).unwrap().abs() < 1e-12);
        // any perturbation moves it strictly above zero
        let q = FullGaussian::new(Tensor::vector(vec![1e-3, 0.0, 0.0, 0.0]), Tensor::eye(4))
            .unwrap();
        assert!(kl_whitened(&q).unwrap() > 1e-12);
        let mut l = Tensor::eye(4);
        l.set2(2, 2, 1.01);
        let q = FullGaussian::new(Tensor::vector(vec![0.0; 4]), l).unwrap();
        assert!(kl_whitened(&q).unwrap() > 1e-12);
    }
}
