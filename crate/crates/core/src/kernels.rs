//! Stationary kernels with ARD lengthscales, and mean functions.
//!
//! Hyperparameters are stored log-transformed so optimisation is
//! unconstrained; positivity is enforced by construction. Pairwise squared
//! distances use the expanded-square identity with clamping at zero.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelFamily {
    SquaredExponential,
    Matern52,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::SquaredExponential => "squared-exponential",
            KernelFamily::Matern52 => "matern-5/2",
        }
    }
}

/// Kernel hyperparameters: a signal variance and one lengthscale per input
/// dimension, both carried as logs.
#[derive(Clone, Debug)]
pub struct KernelParams {
    pub family: KernelFamily,
    pub log_variance: Tensor,
    pub log_lengthscales: Tensor,
}

impl KernelParams {
    pub fn new(family: KernelFamily, variance: f64, lengthscales: &[f64]) -> Result<Self> {
        if variance <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "kernel variance must be positive, got {variance}"
            )));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel lengthscales must be positive, got {lengthscales:?}"
            )));
        }
        Ok(KernelParams {
            family,
            log_variance: Tensor::scalar(variance.ln()),
            log_lengthscales: Tensor::vector(lengthscales.iter().map(|l| l.ln()).collect()),
        })
    }

    /// Unit variance and unit lengthscales, the default after input
    /// normalisation.
    pub fn default_for_dim(family: KernelFamily, input_dim: usize) -> Self {
        KernelParams::new(family, 1.0, &vec![1.0; input_dim]).expect("unit hyperparameters")
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscales.shape()[0]
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.data()[0].exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.data().iter().map(|l| l.exp()).collect()
    }

    /// Binds the log-hyperparameters as leaves under `prefix` and returns
    /// the exponentiated (positive) on-tape values.
    pub fn bind<'t>(&self, tape: &'t Tape, prefix: &str) -> Result<KernelVars<'t>> {
        let lv = tape.var(
            &format!("{prefix}/kernel/log_variance"),
            self.log_variance.clone(),
        )?;
        let ll = tape.var(
            &format!("{prefix}/kernel/log_lengthscales"),
            self.log_lengthscales.clone(),
        )?;
        Ok(KernelVars {
            family: self.family,
            variance: lv.exp()?,
            lengthscales: ll.exp()?,
        })
    }
}

/// On-tape kernel hyperparameters (already exponentiated).
#[derive(Clone, Copy)]
pub struct KernelVars<'t> {
    pub family: KernelFamily,
    pub variance: Var<'t>,
    pub lengthscales: Var<'t>,
}

fn check_input(x: &[usize], dim: usize, op: &'static str) -> Result<()> {
    if x.len() != 2 || x[1] != dim {
        return Err(Error::Shape {
            op,
            node: None,
            detail: format!("input {x:?} does not match {dim} lengthscales"),
        });
    }
    Ok(())
}

/// Pairwise squared scaled distances between the rows of two matrices,
/// clamped at zero.
fn scaled_sqdist<'t>(
    tape: &'t Tape,
    kernel: &KernelVars<'t>,
    x1: Var<'t>,
    x2: Var<'t>,
) -> Result<Var<'t>> {
    let d = kernel.lengthscales.shape()[0];
    let (n, m) = (x1.shape()[0], x2.shape()[0]);
    let s1 = x1.div(kernel.lengthscales)?;
    let s2 = x2.div(kernel.lengthscales)?;
    let col = tape.constant(Tensor::ones(&[d, 1]))?;
    let row_sq = s1.square()?.matmul(col)?; // n x 1
    let col_sq = s2.square()?.matmul(col)?; // m x 1
    let ones_m = tape.constant(Tensor::ones(&[1, m]))?;
    let ones_n = tape.constant(Tensor::ones(&[n, 1]))?;
    let cross = s1.matmul(s2.t()?)?;
    row_sq
        .matmul(ones_m)?
        .add(ones_n.matmul(col_sq.t()?)?)?
        .sub(cross.scale(2.0)?)?
        .clamp_min(0.0)
}

/// Kernel matrix `k(x1_i, x2_j)` on tape, differentiable with respect to
/// both inputs and the hyperparameters.
pub fn kernel_matrix_t<'t>(
    tape: &'t Tape,
    kernel: &KernelVars<'t>,
    x1: Var<'t>,
    x2: Var<'t>,
) -> Result<Var<'t>> {
    let d = kernel.lengthscales.shape()[0];
    check_input(&x1.shape(), d, "kernel_matrix")?;
    check_input(&x2.shape(), d, "kernel_matrix")?;
    let d2 = scaled_sqdist(tape, kernel, x1, x2)?;
    match kernel.family {
        KernelFamily::SquaredExponential => d2.scale(-0.5)?.exp()?.mul(kernel.variance),
        KernelFamily::Matern52 => {
            // the offset keeps sqrt differentiable at zero distance
            let r = d2.add(tape.scalar(1e-300))?.sqrt()?;
            let sqrt5 = 5.0_f64.sqrt();
            let poly = r
                .scale(sqrt5)?
                .add(r.square()?.scale(5.0 / 3.0)?)?
                .add(tape.scalar(1.0))?;
            poly.mul(r.scale(-sqrt5)?.exp()?)?.mul(kernel.variance)
        }
    }
}

/// Diagonal of the kernel matrix as an `n x 1` column; constant for
/// stationary kernels.
pub fn kernel_diag_t<'t>(
    tape: &'t Tape,
    kernel: &KernelVars<'t>,
    x: Var<'t>,
) -> Result<Var<'t>> {
    let d = kernel.lengthscales.shape()[0];
    check_input(&x.shape(), d, "kernel_diag")?;
    let n = x.shape()[0];
    let ones = tape.constant(Tensor::ones(&[n, 1]))?;
    ones.mul(kernel.variance)
}

/// Kernel matrix on raw tensors.
pub fn kernel_matrix(params: &KernelParams, x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let k = params.bind(&tape, "k")?;
    let x1 = tape.constant(x1.clone())?;
    let x2 = tape.constant(x2.clone())?;
    Ok(kernel_matrix_t(&tape, &k, x1, x2)?.value())
}

/// Kernel diagonal on raw tensors, as an `n`-vector.
pub fn kernel_diag(params: &KernelParams, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let k = params.bind(&tape, "k")?;
    let xv = tape.constant(x.clone())?;
    let col = kernel_diag_t(&tape, &k, xv)?.value();
    Ok(Tensor::vector(col.data().to_vec()))
}

// ---------------------------------------------------------------------------
// mean functions
// ---------------------------------------------------------------------------

/// Mean function of a GP layer. The linear kind computes `X W + b`.
#[derive(Clone, Debug)]
pub enum MeanFunction {
    Zero { output_dim: usize },
    Linear { weights: Tensor, bias: Tensor },
}

impl MeanFunction {
    pub fn linear(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != weights.shape()[1] {
            return Err(Error::Shape {
                op: "MeanFunction::linear",
                node: None,
                detail: format!("weights {:?}, bias {:?}", weights.shape(), bias.shape()),
            });
        }
        if !weights.all_finite() || !bias.all_finite() {
            return Err(Error::InvalidArgument(
                "linear mean function parameters must be finite".into(),
            ));
        }
        Ok(MeanFunction::Linear { weights, bias })
    }

    /// Identity map, only valid when input and output widths agree.
    pub fn identity(dim: usize) -> Self {
        MeanFunction::Linear {
            weights: Tensor::eye(dim),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            MeanFunction::Zero { output_dim } => *output_dim,
            MeanFunction::Linear { weights, .. } => weights.shape()[1],
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, prefix: &str) -> Result<MeanVars<'t>> {
        match self {
            MeanFunction::Zero { output_dim } => Ok(MeanVars::Zero {
                output_dim: *output_dim,
            }),
            MeanFunction::Linear { weights, bias } => Ok(MeanVars::Linear {
                weights: tape.var(&format!("{prefix}/mean/weights"), weights.clone())?,
                bias: tape.var(&format!("{prefix}/mean/bias"), bias.clone())?,
            }),
        }
    }
}

pub enum MeanVars<'t> {
    Zero { output_dim: usize },
    Linear { weights: Var<'t>, bias: Var<'t> },
}

/// Applies a mean function to an `n x d` input on tape, producing `n x w`.
pub fn mean_apply_t<'t>(tape: &'t Tape, mean: &MeanVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "mean_apply",
            node: None,
            detail: format!("expected matrix input, got {shape:?}"),
        });
    }
    match mean {
        MeanVars::Zero { output_dim } => {
            tape.constant(Tensor::zeros(&[shape[0], *output_dim]))
        }
        MeanVars::Linear { weights, bias } => {
            if weights.shape()[0] != shape[1] {
                return Err(Error::Shape {
                    op: "mean_apply",
                    node: None,
                    detail: format!("input {:?} vs weights {:?}", shape, weights.shape()),
                });
            }
            x.matmul(*weights)?.add(*bias)
        }
    }
}

/// Mean function on raw tensors.
pub fn mean_apply(mean: &MeanFunction, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let mv = mean.bind(&tape, "m")?;
    let xv = tape.constant(x.clone())?;
    Ok(mean_apply_t(&tape, &mv, xv)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_tape_builder, tape_builder, ParamMap};
    use crate::gauss::{cholesky_with_jitter, JitterPolicy};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn se_unit(dim: usize) -> KernelParams {
        KernelParams::default_for_dim(KernelFamily::SquaredExponential, dim)
    }

    fn matern_unit(dim: usize) -> KernelParams {
        KernelParams::default_for_dim(KernelFamily::Matern52, dim)
    }

    #[test]
    fn zero_distance_gives_variance() {
        let k = KernelParams::new(KernelFamily::SquaredExponential, 2.5, &[0.7]).unwrap();
        let x = Tensor::matrix(1, 1, vec![0.3]).unwrap();
        let km = kernel_matrix(&k, &x, &x).unwrap();
        assert!((km.data()[0] - 2.5).abs() < 1e-12);
        let k = KernelParams::new(KernelFamily::Matern52, 1.7, &[0.7]).unwrap();
        let km = kernel_matrix(&k, &x, &x).unwrap();
        assert!((km.data()[0] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn se_at_unit_distance() {
        let x1 = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let x2 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let km = kernel_matrix(&se_unit(1), &x1, &x2).unwrap();
        assert!((km.data()[0] - (-0.5_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn matern52_at_unit_distance() {
        let x1 = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let x2 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let km = kernel_matrix(&matern_unit(1), &x1, &x2).unwrap();
        // direct formula: (1 + sqrt5 + 5/3) exp(-sqrt5)
        let sqrt5 = 5.0_f64.sqrt();
        let expect = (1.0 + sqrt5 + 5.0 / 3.0) * (-sqrt5).exp();
        assert!((km.data()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.52400).abs() < 1e-5);
    }

    #[test]
    fn se_ard_weights_each_dimension() {
        let k = KernelParams::new(KernelFamily::SquaredExponential, 1.0, &[1.0, 2.0]).unwrap();
        let x1 = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let x2 = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let km = kernel_matrix(&k, &x1, &x2).unwrap();
        // exp(-0.5 ((1/1)^2 + (2/2)^2)) = e^{-1}
        assert!((km.data()[0] - (-1.0_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn diag_is_constant_variance_and_matches_full() {
        let k = KernelParams::new(KernelFamily::SquaredExponential, 2.5, &[1.0, 1.0]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let x = Tensor::new(
            vec![6, 2],
            (0..12).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let diag = kernel_diag(&k, &x).unwrap();
        assert!(diag.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        let full = kernel_matrix(&k, &x, &x).unwrap();
        for i in 0..6 {
            assert!((diag.data()[i] - full.get2(i, i)).abs() < 1e-12);
        }
        let empty = Tensor::zeros(&[0, 2]);
        assert_eq!(kernel_diag(&k, &empty).unwrap().numel(), 0);
    }

    #[test]
    fn kernel_matrix_is_symmetric_and_jitter_factorable() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for family in [KernelFamily::SquaredExponential, KernelFamily::Matern52] {
            let k = KernelParams::new(family, 1.3, &[0.8, 1.4, 0.5]).unwrap();
            let x = Tensor::new(
                vec![50, 3],
                (0..150).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let km = kernel_matrix(&k, &x, &x).unwrap();
            for i in 0..50 {
                for j in 0..50 {
                    assert!((km.get2(i, j) - km.get2(j, i)).abs() < 1e-12);
                }
            }
            cholesky_with_jitter(&km, &JitterPolicy::default())
                .expect("kernel matrix factors after 1e-6 jitter");
        }
    }

    #[test]
    fn kernel_decreases_with_distance() {
        let x0 = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        for family in [KernelFamily::SquaredExponential, KernelFamily::Matern52] {
            let k = KernelParams::new(family, 1.0, &[1.0]).unwrap();
            let mut prev = f64::INFINITY;
            for step in 0..30 {
                let x = Tensor::matrix(1, 1, vec![0.1 * step as f64]).unwrap();
                let v = kernel_matrix(&k, &x0, &x).unwrap().data()[0];
                assert!(v < prev, "{family:?} not decreasing at step {step}");
                prev = v;
            }
        }
    }

    #[test]
    fn lengthscale_scaling_invariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x1 = Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let x2 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let c = 3.7;
        for family in [KernelFamily::SquaredExponential, KernelFamily::Matern52] {
            let k = KernelParams::new(family, 1.1, &[0.6, 1.9]).unwrap();
            let ks = KernelParams::new(family, 1.1, &[0.6 * c, 1.9 * c]).unwrap();
            let a = kernel_matrix(&k, &x1, &x2).unwrap();
            let b = kernel_matrix(&ks, &x1.scale(c), &x2.scale(c)).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_functions_known_values() {
        let x = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let zeros = mean_apply(&MeanFunction::Zero { output_dim: 3 }, &x).unwrap();
        assert_eq!(zeros.shape(), &[2, 3]);
        assert!(zeros.data().iter().all(|&v| v == 0.0));

        let ident = mean_apply(&MeanFunction::identity(2), &x).unwrap();
        assert_eq!(ident, x);

        // W = [[2], [0]], b = [1]: row (3, 5) -> 7
        let mf = MeanFunction::linear(
            Tensor::matrix(2, 1, vec![2.0, 0.0]).unwrap(),
            Tensor::vector(vec![1.0]),
        )
        .unwrap();
        let x = Tensor::matrix(1, 2, vec![3.0, 5.0]).unwrap();
        assert_eq!(mean_apply(&mf, &x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn hyperparameter_and_input_gradients() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let x1 = Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-1.5..1.5)).collect())
            .unwrap();
        let x2 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(-1.5..1.5)).collect())
            .unwrap();
        for family in [KernelFamily::SquaredExponential, KernelFamily::Matern52] {
            let f = tape_builder(move |tape, v| {
                let k = KernelVars {
                    family,
                    variance: v["lv"].exp()?,
                    lengthscales: v["ll"].exp()?,
                };
                kernel_matrix_t(tape, &k, v["x1"], v["x2"])?.square()?.sum()
            });
            let mut p = ParamMap::new();
            p.insert("lv".into(), Tensor::scalar(0.3));
            p.insert("ll".into(), Tensor::vector(vec![-0.2, 0.4]));
            p.insert("x1".into(), x1.clone());
            p.insert("x2".into(), x2.clone());
            let report = check_tape_builder(&f, &p, 1e-6, 1e-9).unwrap();
            assert!(report.passes(1e-6), "{family:?}:\n{report}");
        }

        // linear mean function parameters
        let x = Tensor::matrix(3, 2, vec![0.5, -0.2, 1.0, 0.3, -0.7, 0.9]).unwrap();
        let f = tape_builder(move |tape, v| {
            let mv = MeanVars::Linear {
                weights: v["w"],
                bias: v["b"],
            };
            let xv = tape.constant(x.clone())?;
            mean_apply_t(tape, &mv, xv)?.square()?.sum()
        });
        let mut p = ParamMap::new();
        p.insert("w".into(), Tensor::matrix(2, 2, vec![1.0, 0.2, -0.3, 0.8]).unwrap());
        p.insert("b".into(), Tensor::vector(vec![0.1, -0.4]));
        let report = check_tape_builder(&f, &p, 1e-6, 1e-9).unwrap();
        assert!(report.passes(1e-6), "linear mean:\n{report}");
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let k = se_unit(2);
        let x1 = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let x2 = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(kernel_matrix(&k, &x1, &x2).is_err());
    }
}
