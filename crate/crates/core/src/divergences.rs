//! Divergence and dependence estimators.
//!
//! Three estimators live here:
//!
//! * closed-form KL between a diagonal Gaussian and the standard normal,
//! * the unbiased Gaussian-kernel MMD U-statistic between two sample sets,
//! * a Monte-Carlo mutual-information estimate between inputs and latents,
//!   with an optional flow-corrected variant.
//!
//! Value-level and tape-level versions are provided where training needs
//! gradients; the value-level forms are used for reporting.

use crate::error::{CoreError, Result};
use crate::flows::FlowStack;
use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

const LN_2PI: f64 = 1.8378770664093453;

/// Minimum Monte-Carlo sample count for the mutual-information estimator.
pub const MIN_MC_SAMPLES: usize = 100;

/// A batch of diagonal Gaussians: row `b` holds the parameters of
/// `N(mu_b, diag(exp(log_sigma_b))^2)`.
#[derive(Clone, Debug)]
pub struct DiagGaussian {
    mu: Tensor,
    log_sigma: Tensor,
}

impl DiagGaussian {
    pub fn new(mu: Tensor, log_sigma: Tensor) -> Result<Self> {
        if mu.shape() != log_sigma.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "diagonal Gaussian parameters",
                lhs: mu.shape().to_vec(),
                rhs: log_sigma.shape().to_vec(),
            });
        }
        Ok(DiagGaussian { mu, log_sigma })
    }

    pub fn rows(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn log_sigma(&self) -> &Tensor {
        &self.log_sigma
    }
}

/// Where a latent sample set came from; carried for reporting only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSource {
    Prior,
    AggregatePosterior,
    FlowImage,
}

/// `n x d` matrix of latent samples. The unbiased MMD estimator needs at
/// least two samples per side, enforced at construction.
#[derive(Clone, Debug)]
pub struct SampleSet {
    samples: Tensor,
    pub source: SampleSource,
}

impl SampleSet {
    pub fn new(samples: Tensor, source: SampleSource) -> Result<Self> {
        if samples.rows() < 2 {
            return Err(CoreError::TooFewSamples { n: samples.rows() });
        }
        Ok(SampleSet { samples, source })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }
}

/// Log density of the standard normal at `z`.
pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|&v| v * v).sum();
    -0.5 * (z.len() as f64 * LN_2PI + sq)
}

/// Log density of `N(mu, diag(exp(log_sigma))^2)` at `z`.
pub fn diag_normal_logpdf(z: &[f64], mu: &[f64], log_sigma: &[f64]) -> f64 {
    debug_assert_eq!(z.len(), mu.len());
    debug_assert_eq!(z.len(), log_sigma.len());
    let mut acc = -0.5 * z.len() as f64 * LN_2PI;
    for i in 0..z.len() {
        let ls = log_sigma[i];
        let r = (z[i] - mu[i]) * (-ls).exp();
        acc -= ls + 0.5 * r * r;
    }
    acc
}

/// Per-row KL from `N(mu, sigma^2)` to the standard normal:
/// `0.5 * sum_j (mu_j^2 + sigma_j^2 - 1 - 2 log sigma_j)`. Returns `[B, 1]`.
pub fn kl_diag_gaussian(q: &DiagGaussian) -> Result<Tensor> {
    let (b, d) = (q.rows(), q.dim());
    let mut out = vec![0.0; b];
    for r in 0..b {
        let mu = q.mu.row_slice(r);
        let ls = q.log_sigma.row_slice(r);
        let mut acc = 0.0;
        for j in 0..d {
            let sig2 = (2.0 * ls[j]).exp();
            acc += mu[j] * mu[j] + sig2 - 1.0 - 2.0 * ls[j];
        }
        out[r] = 0.5 * acc;
    }
    Tensor::matrix(b, 1, out)
}

/// Tape version of [`kl_diag_gaussian`]; differentiable in `mu` and
/// `log_sigma`. Returns `[B, 1]`.
pub fn kl_diag_gaussian_tape(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let mu2 = tape.square(mu)?;
    let two_ls = tape.mul_scalar(log_sigma, 2.0)?;
    let sig2 = tape.exp(two_ls)?;
    let a = tape.add(mu2, sig2)?;
    let b = tape.add_scalar(a, -1.0)?;
    let c = tape.sub(b, two_ls)?;
    let rs = tape.row_sum(c)?;
    tape.mul_scalar(rs, 0.5)
}

fn gauss_kernel(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    (-d2).exp()
}

/// Unbiased Gaussian-kernel MMD estimate between two sample sets with
/// bandwidth fixed at 1: `k(z, z') = exp(-||z - z'||^2)`.
///
/// Within-set terms average over distinct ordered pairs; the cross term
/// averages over all pairs, so the estimate is symmetric and invariant to
/// row order on either side. The one exception: when the two sample
/// matrices are bitwise identical, index-equal cross pairs are skipped so
/// the three sums cancel term by term and `mmd(x, x)` is exactly zero
/// rather than zero up to rounding.
pub fn mmd_gaussian(x: &SampleSet, y: &SampleSet) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(CoreError::ShapeMismatch {
            op: "mmd_gaussian",
            lhs: x.samples.shape().to_vec(),
            rhs: y.samples.shape().to_vec(),
        });
    }
    let n = x.len();
    let m = y.len();
    let d = x.dim();
    let paired = x.samples.data() == y.samples.data();
    let work = d * 4;

    let sum_pairs = |a: &Tensor, b: &Tensor, skip_diag: bool| -> f64 {
        let rows = a.rows();
        par::chunked_sum(rows, work * b.rows(), |start, end| {
            let mut acc = 0.0;
            for i in start..end {
                let ai = a.row_slice(i);
                for j in 0..b.rows() {
                    if skip_diag && i == j {
                        continue;
                    }
                    acc += gauss_kernel(ai, b.row_slice(j));
                }
            }
            acc
        })
    };

    let sx = sum_pairs(&x.samples, &x.samples, true);
    let sy = sum_pairs(&y.samples, &y.samples, true);
    let sxy = sum_pairs(&x.samples, &y.samples, paired);
    let wx = sx / (n * (n - 1)) as f64;
    let wy = sy / (m * (m - 1)) as f64;
    let cross = if paired {
        sxy / (n * (n - 1)) as f64
    } else {
        sxy / (n * m) as f64
    };
    Ok(wx + wy - 2.0 * cross)
}

/// Gram matrix of the Gaussian kernel between the rows of `x` and `y` on the
/// tape, via `||a - b||^2 = ||a||^2 + ||b||^2 - 2 a.b`.
fn gram_tape(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let yt = tape.transpose(y)?;
    let cross = tape.matmul(x, yt)?; // [n, m]
    let x2 = tape.square(x)?;
    let xn = tape.row_sum(x2)?; // [n, 1]
    let y2 = tape.square(y)?;
    let yn = tape.row_sum(y2)?; // [m, 1]
    let ynt = tape.transpose(yn)?; // [1, m]
    let m2 = tape.mul_scalar(cross, -2.0)?;
    let a = tape.add_col(m2, xn)?;
    let d2 = tape.add_row(a, ynt)?;
    let neg = tape.mul_scalar(d2, -1.0)?;
    tape.exp(neg)
}

fn off_diag_mean(tape: &mut Tape, gram: Var, denom: f64) -> Result<Var> {
    let n = tape.value(gram).rows();
    let mut mask = vec![1.0; n * n];
    for i in 0..n {
        mask[i * n + i] = 0.0;
    }
    let mask = tape.constant(Tensor::matrix(n, n, mask)?);
    let masked = tape.mul(gram, mask)?;
    let s = tape.sum(masked)?;
    tape.mul_scalar(s, 1.0 / denom)
}

/// Tape version of [`mmd_gaussian`]; differentiable in both sample
/// matrices. Same pairing convention as the value-level form.
pub fn mmd_gaussian_tape(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (n, m) = (tape.value(x).rows(), tape.value(y).rows());
    if n < 2 || m < 2 {
        return Err(CoreError::TooFewSamples { n: n.min(m) });
    }
    if tape.value(x).cols() != tape.value(y).cols() {
        return Err(CoreError::ShapeMismatch {
            op: "mmd_gaussian",
            lhs: tape.value(x).shape().to_vec(),
            rhs: tape.value(y).shape().to_vec(),
        });
    }
    let paired = x == y || tape.value(x).data() == tape.value(y).data();
    let kxx = gram_tape(tape, x, x)?;
    let kyy = gram_tape(tape, y, y)?;
    let kxy = gram_tape(tape, x, y)?;
    let wx = off_diag_mean(tape, kxx, (n * (n - 1)) as f64)?;
    let wy = off_diag_mean(tape, kyy, (m * (m - 1)) as f64)?;
    let cross = if paired {
        off_diag_mean(tape, kxy, (n * (n - 1)) as f64)?
    } else {
        let s = tape.sum(kxy)?;
        tape.mul_scalar(s, 1.0 / (n * m) as f64)?
    };
    let within = tape.add(wx, wy)?;
    let twice = tape.mul_scalar(cross, 2.0)?;
    tape.sub(within, twice)
}

/// Mutual-information estimate with its ingredients. `value` is clamped at
/// zero for reporting; `raw` keeps the sign so tests can check calibration.
#[derive(Clone, Copy, Debug)]
pub struct MiEstimate {
    pub value: f64,
    pub raw: f64,
    /// Average KL of the per-input posteriors from the prior (the first term
    /// of the decomposition; sampled rather than closed-form in the flow
    /// variant).
    pub mean_kl: f64,
    /// Monte-Carlo standard error of the estimate.
    pub std_error: f64,
}

fn check_mi_inputs(q: &DiagGaussian, m: usize) -> Result<()> {
    if q.rows() == 0 {
        return Err(CoreError::EmptyInput {
            what: "posterior batch",
        });
    }
    if m < MIN_MC_SAMPLES {
        return Err(CoreError::TooFewMcSamples {
            m,
            min: MIN_MC_SAMPLES,
        });
    }
    Ok(())
}

/// Log density of the batch mixture `(1/B) sum_b q(z|x_b)` at `z`.
fn log_mixture(q: &DiagGaussian, z: &[f64]) -> f64 {
    let b = q.rows();
    let mut logs = Vec::with_capacity(b);
    for r in 0..b {
        logs.push(diag_normal_logpdf(
            z,
            q.mu.row_slice(r),
            q.log_sigma.row_slice(r),
        ));
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln() - (b as f64).ln()
}

/// Draw the `s`-th stratified mixture sample: component `s mod B`, then a
/// reparameterized draw from it.
fn draw_sample(q: &DiagGaussian, s: usize, rng: &mut ChaCha20Rng) -> (usize, Vec<f64>) {
    let b = s % q.rows();
    let mu = q.mu.row_slice(b);
    let ls = q.log_sigma.row_slice(b);
    let z: Vec<f64> = (0..q.dim())
        .map(|j| {
            let eps: f64 = StandardNormal.sample(rng);
            mu[j] + ls[j].exp() * eps
        })
        .collect();
    (b, z)
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// `I(z; x) = E_x[KL(q(z|x) || p(z))] - KL(q(z) || p(z))` with the aggregate
/// `q(z)` replaced by the within-batch mixture. The first term is closed
/// form; the second uses `m` stratified reparameterized samples.
pub fn mutual_information(q: &DiagGaussian, m: usize, seed: u64) -> Result<MiEstimate> {
    check_mi_inputs(q, m)?;
    let kl = kl_diag_gaussian(q)?;
    let mean_kl = kl.data().iter().sum::<f64>() / q.rows() as f64;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut integrand = Vec::with_capacity(m);
    for s in 0..m {
        let (_, z) = draw_sample(q, s, &mut rng);
        integrand.push(log_mixture(q, &z) - std_normal_logpdf(&z));
    }
    let (agg_kl, se) = mean_and_se(&integrand);
    let raw = mean_kl - agg_kl;
    Ok(MiEstimate {
        value: raw.max(0.0),
        raw,
        mean_kl,
        std_error: se,
    })
}

/// Mutual information between inputs and the flow image `z' = f(z)`, with
/// every density corrected by the accumulated raw log-determinant. The
/// correction cancels between the conditional and the mixture, so this
/// agrees with [`mutual_information`] up to estimator structure (both KL
/// terms are sampled here) and Monte-Carlo noise, which is the invariance
/// the tests pin down.
pub fn mutual_information_flow(
    q: &DiagGaussian,
    stack: &FlowStack,
    m: usize,
    seed: u64,
) -> Result<MiEstimate> {
    check_mi_inputs(q, m)?;
    if let Some(sd) = stack.dim() {
        if sd != q.dim() {
            return Err(CoreError::ShapeMismatch {
                op: "mutual_information_flow",
                lhs: vec![q.rows(), q.dim()],
                rhs: vec![1, sd],
            });
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut cond_terms = Vec::with_capacity(m);
    let mut integrand = Vec::with_capacity(m);
    for s in 0..m {
        let (b, z) = draw_sample(q, s, &mut rng);
        let row = Tensor::matrix(1, q.dim(), z.clone())?;
        let (img, logdet) = stack.apply(&row)?;
        let log_prior_img = std_normal_logpdf(img.row_slice(0));
        let log_cond_img =
            diag_normal_logpdf(&z, q.mu.row_slice(b), q.log_sigma.row_slice(b)) - logdet.item();
        let log_mix_img = log_mixture(q, &z) - logdet.item();
        cond_terms.push(log_cond_img - log_prior_img);
        integrand.push(log_cond_img - log_mix_img);
    }
    let mean_kl = cond_terms.iter().sum::<f64>() / m as f64;
    let (raw, se) = mean_and_se(&integrand);
    Ok(MiEstimate {
        value: raw.max(0.0),
        raw,
        mean_kl,
        std_error: se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::PlanarFlowParams;
    use rand::Rng;

    fn sample_matrix(rng: &mut ChaCha20Rng, n: usize, d: usize, spread: f64) -> Tensor {
        let data: Vec<f64> = (0..n * d)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                e * spread
            })
            .collect();
        Tensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        let q = DiagGaussian::new(Tensor::zeros(3, 4), Tensor::zeros(3, 4)).unwrap();
        let kl = kl_diag_gaussian(&q).unwrap();
        for &v in kl.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn kl_unit_mean_shift_matches_monte_carlo() {
        // Closed form first: d = 1, mu = 1, sigma = 1 gives exactly 0.5.
        let q = DiagGaussian::new(
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::zeros(1, 1),
        )
        .unwrap();
        let closed = kl_diag_gaussian(&q).unwrap().item();
        assert_eq!(closed, 0.5);

        // Independent oracle: Monte-Carlo estimate of E_q[log q - log p].
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = [1.0 + e];
            let v = diag_normal_logpdf(&z, &[1.0], &[0.0]) - std_normal_logpdf(&z);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (closed - mean).abs() < 3.0 * se,
            "closed {closed} mc {mean} se {se}"
        );
    }

    #[test]
    fn kl_is_nonnegative_for_random_parameters() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let d = rng.random_range(1..6);
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ls: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = DiagGaussian::new(
                Tensor::matrix(1, d, mu).unwrap(),
                Tensor::matrix(1, d, ls).unwrap(),
            )
            .unwrap();
            assert!(kl_diag_gaussian(&q).unwrap().item() >= 0.0);
        }
    }

    #[test]
    fn kl_tape_matches_value_and_finite_differences() {
        let mu0 = vec![0.4, -1.2];
        let ls0 = vec![0.3, -0.6];
        let value_kl = |mu: &[f64], ls: &[f64]| {
            let q = DiagGaussian::new(
                Tensor::matrix(1, 2, mu.to_vec()).unwrap(),
                Tensor::matrix(1, 2, ls.to_vec()).unwrap(),
            )
            .unwrap();
            kl_diag_gaussian(&q).unwrap().item()
        };

        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::matrix(1, 2, mu0.clone()).unwrap(), true);
        let ls = tape.leaf(Tensor::matrix(1, 2, ls0.clone()).unwrap(), true);
        let kl = kl_diag_gaussian_tape(&mut tape, mu, ls).unwrap();
        assert!((tape.value(kl).item() - value_kl(&mu0, &ls0)).abs() < 1e-14);
        let root = tape.sum(kl).unwrap();
        tape.backward(root).unwrap();

        let h = 1e-6;
        let grads = [
            tape.grad(mu).unwrap().to_vec(),
            tape.grad(ls).unwrap().to_vec(),
        ];
        for j in 0..2 {
            let mut p = mu0.clone();
            p[j] += h;
            let mut m = mu0.clone();
            m[j] -= h;
            let fd = (value_kl(&p, &ls0) - value_kl(&m, &ls0)) / (2.0 * h);
            assert!((grads[0][j] - fd).abs() < 1e-6);

            let mut p = ls0.clone();
            p[j] += h;
            let mut m = ls0.clone();
            m[j] -= h;
            let fd = (value_kl(&mu0, &p) - value_kl(&mu0, &m)) / (2.0 * h);
            assert!((grads[1][j] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn mmd_of_identical_sets_is_exactly_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let t = sample_matrix(&mut rng, 50, 3, 1.0);
        let x = SampleSet::new(t.clone(), SampleSource::Prior).unwrap();
        let y = SampleSet::new(t, SampleSource::AggregatePosterior).unwrap();
        assert_eq!(mmd_gaussian(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn mmd_two_point_sets_match_hand_expansion() {
        let x = SampleSet::new(
            Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap(),
            SampleSource::Prior,
        )
        .unwrap();
        let y = SampleSet::new(
            Tensor::matrix(2, 2, vec![2.0, 0.0, 2.0, 0.0]).unwrap(),
            SampleSource::Prior,
        )
        .unwrap();
        let want = 1.0 + 1.0 - 2.0 * (-4.0f64).exp();
        let got = mmd_gaussian(&x, &y).unwrap();
        assert!((got - want).abs() < 1e-12, "got {got}");
        assert!((got - 1.96337).abs() < 1e-5);
    }

    #[test]
    fn mmd_null_distribution_stays_small() {
        let n = 500;
        let bound = 3.0 / (n as f64).sqrt();
        for seed in 0..20 {
            let mut rng = ChaCha20Rng::seed_from_u64(1000 + seed);
            let x = SampleSet::new(sample_matrix(&mut rng, n, 2, 1.0), SampleSource::Prior)
                .unwrap();
            let y = SampleSet::new(sample_matrix(&mut rng, n, 2, 1.0), SampleSource::Prior)
                .unwrap();
            let v = mmd_gaussian(&x, &y).unwrap();
            assert!(v.abs() < bound, "seed {seed}: {v} vs {bound}");
        }
    }

    #[test]
    fn mmd_separates_shifted_distributions() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = SampleSet::new(sample_matrix(&mut rng, 200, 2, 1.0), SampleSource::Prior)
            .unwrap();
        let mut shifted = sample_matrix(&mut rng, 200, 2, 1.0);
        let moved: Vec<f64> = shifted.data().iter().map(|&v| v + 3.0).collect();
        shifted.set_data(moved).unwrap();
        let y = SampleSet::new(shifted, SampleSource::AggregatePosterior).unwrap();
        // Within-set kernel means are ~1/5 each and the cross mean is tiny,
        // so the estimate sits near 0.4.
        assert!(mmd_gaussian(&x, &y).unwrap() > 0.3);
    }

    #[test]
    fn mmd_is_symmetric_and_order_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let xt = sample_matrix(&mut rng, 40, 3, 1.0);
        let yt = sample_matrix(&mut rng, 40, 3, 1.5);
        let x = SampleSet::new(xt.clone(), SampleSource::Prior).unwrap();
        let y = SampleSet::new(yt.clone(), SampleSource::Prior).unwrap();
        let fwd = mmd_gaussian(&x, &y).unwrap();
        let bwd = mmd_gaussian(&y, &x).unwrap();
        assert!((fwd - bwd).abs() < 1e-12);

        // Shuffle the rows of x; the estimate is a pair statistic, so only
        // summation order changes.
        let mut order: Vec<usize> = (0..40).collect();
        for i in (1..40).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut shuffled = Vec::with_capacity(40 * 3);
        for &i in &order {
            shuffled.extend_from_slice(xt.row_slice(i));
        }
        let xs = SampleSet::new(
            Tensor::matrix(40, 3, shuffled).unwrap(),
            SampleSource::Prior,
        )
        .unwrap();
        let shuffled_est = mmd_gaussian(&xs, &y).unwrap();
        assert!((fwd - shuffled_est).abs() < 1e-12);
    }

    #[test]
    fn mmd_rejects_singletons() {
        let one = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            SampleSet::new(one, SampleSource::Prior),
            Err(CoreError::TooFewSamples { n: 1 })
        ));
    }

    #[test]
    fn mmd_tape_matches_value_version() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        for (n, m) in [(12, 12), (10, 14)] {
            let xt = sample_matrix(&mut rng, n, 3, 1.0);
            let yt = sample_matrix(&mut rng, m, 3, 1.2);
            let want = mmd_gaussian(
                &SampleSet::new(xt.clone(), SampleSource::Prior).unwrap(),
                &SampleSet::new(yt.clone(), SampleSource::Prior).unwrap(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(xt, true);
            let y = tape.leaf(yt, true);
            let v = mmd_gaussian_tape(&mut tape, x, y).unwrap();
            assert!((tape.value(v).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mmd_tape_on_identical_vars_is_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(39);
        let t = sample_matrix(&mut rng, 16, 2, 1.0);
        let mut tape = Tape::new();
        let x = tape.leaf(t, true);
        let v = mmd_gaussian_tape(&mut tape, x, x).unwrap();
        assert_eq!(tape.value(v).item(), 0.0);
    }

    #[test]
    fn mmd_tape_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let xt = sample_matrix(&mut rng, 5, 2, 1.0);
        let yt = sample_matrix(&mut rng, 5, 2, 1.3);

        let value = |xd: &[f64]| {
            let x = SampleSet::new(Tensor::matrix(5, 2, xd.to_vec()).unwrap(), SampleSource::Prior)
                .unwrap();
            let y = SampleSet::new(yt.clone(), SampleSource::Prior).unwrap();
            mmd_gaussian(&x, &y).unwrap()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), true);
        let y = tape.leaf(yt.clone(), true);
        let v = mmd_gaussian_tape(&mut tape, x, y).unwrap();
        tape.backward(v).unwrap();
        let grad = tape.grad(x).unwrap().to_vec();

        let h = 1e-6;
        for k in 0..10 {
            let mut p = xt.data().to_vec();
            p[k] += h;
            let mut m = xt.data().to_vec();
            m[k] -= h;
            let fd = (value(&p) - value(&m)) / (2.0 * h);
            assert!(
                (grad[k] - fd).abs() < 1e-6,
                "component {k}: grad {} fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn mi_rejects_small_sample_counts() {
        let q = DiagGaussian::new(Tensor::zeros(2, 2), Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(
            mutual_information(&q, 99, 0),
            Err(CoreError::TooFewMcSamples { m: 99, min: 100 })
        ));
    }

    #[test]
    fn mi_of_input_independent_posterior_is_near_zero() {
        // Every input maps to the same posterior, so latents carry no
        // information about inputs.
        let b = 8;
        let mu = Tensor::matrix(b, 2, vec![0.3; b * 2]).unwrap();
        let ls = Tensor::matrix(b, 2, vec![-0.2; b * 2]).unwrap();
        let q = DiagGaussian::new(mu, ls).unwrap();
        for seed in 0..20 {
            let est = mutual_information(&q, 1024, seed).unwrap();
            assert!(
                est.raw.abs() <= 3.0 * est.std_error.max(1e-12),
                "seed {seed}: raw {} se {}",
                est.raw,
                est.std_error
            );
            assert!(est.value >= 0.0);
        }
    }

    // Numerical integration of the mixture mutual information on a 1-D
    // grid: I = (1/B) sum_b integral q_b(z) log(q_b(z) / mix(z)) dz.
    fn mixture_mi_quadrature(mus: &[f64]) -> f64 {
        let b = mus.len();
        let n = 48_000;
        let (lo, hi) = (-12.0, 12.0);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for bi in 0..b {
            let f = |z: f64| {
                let qb = (-0.5 * (z - mus[bi]).powi(2)).exp() / (2.0 * std::f64::consts::PI).sqrt();
                let mix: f64 = mus
                    .iter()
                    .map(|&m| (-0.5 * (z - m).powi(2)).exp())
                    .sum::<f64>()
                    / (b as f64 * (2.0 * std::f64::consts::PI).sqrt());
                if qb <= 0.0 {
                    0.0
                } else {
                    qb * (qb.ln() - mix.ln())
                }
            };
            let mut acc = 0.5 * (f(lo) + f(hi));
            for i in 1..n {
                acc += f(lo + i as f64 * h);
            }
            total += acc * h;
        }
        total / b as f64
    }

    #[test]
    fn mi_matches_quadrature_on_two_component_toy() {
        let mu = 1.5;
        let want = mixture_mi_quadrature(&[-mu, mu]);
        let q = DiagGaussian::new(
            Tensor::matrix(2, 1, vec![-mu, mu]).unwrap(),
            Tensor::zeros(2, 1),
        )
        .unwrap();
        let est = mutual_information(&q, 20_000, 5).unwrap();
        assert!(
            (est.raw - want).abs() < 3.0 * est.std_error,
            "estimate {} oracle {want} se {}",
            est.raw,
            est.std_error
        );
        assert!(est.value > 0.1);
    }

    #[test]
    fn mi_never_exceeds_mean_kl_beyond_noise() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        for trial in 0..20 {
            let b = 6;
            let d = 2;
            let mu = sample_matrix(&mut rng, b, d, 1.0);
            let ls = sample_matrix(&mut rng, b, d, 0.3);
            let q = DiagGaussian::new(mu, ls).unwrap();
            let est = mutual_information(&q, 2048, 100 + trial).unwrap();
            assert!(
                est.value <= est.mean_kl + 3.0 * est.std_error,
                "trial {trial}: value {} mean_kl {}",
                est.value,
                est.mean_kl
            );
        }
    }

    #[test]
    fn flow_corrected_mi_agrees_with_base_estimator() {
        // Mutual information is invariant under invertible maps, and the
        // log-determinant corrections cancel sample by sample.
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let mu = sample_matrix(&mut rng, 4, 2, 1.2);
        let ls = sample_matrix(&mut rng, 4, 2, 0.2);
        let q = DiagGaussian::new(mu, ls).unwrap();
        let stack = FlowStack::new(vec![
            PlanarFlowParams::from_slices(&[0.8, -0.2], &[0.5, 0.9], 0.3).unwrap(),
            PlanarFlowParams::from_slices(&[-0.4, 0.6], &[1.0, -0.3], -0.2).unwrap(),
        ])
        .unwrap();
        let base = mutual_information(&q, 8192, 9).unwrap();
        let flowed = mutual_information_flow(&q, &stack, 8192, 9).unwrap();
        let tol = 3.0 * (base.std_error + flowed.std_error);
        assert!(
            (base.raw - flowed.raw).abs() < tol,
            "base {} flow {} tol {tol}",
            base.raw,
            flowed.raw
        );
    }
}
