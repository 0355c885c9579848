//! Training and evaluation objectives. Five losses share one assembly
//! routine: a plain autoencoding ELBO, its flow-transformed variant, and
//! three latent-matching objectives that add an MMD penalty between the
//! pre-flow posterior and the standard-normal prior, optionally with flows
//! and with the kernel-regularized Jacobian term.
//!
//! Every loss reports a [`LossBreakdown`] whose fields recombine to the
//! scalar total bit-for-bit; the trainer logs components, not totals, and
//! the recombination invariant keeps those logs trustworthy.

use std::str::FromStr;

use crate::data::TokenBatch;
use crate::divergences::{
    diag_normal_logpdf, kl_diag_gaussian, kl_diag_gaussian_tape, mmd_gaussian_tape,
    std_normal_logpdf, DiagGaussian,
};
use crate::error::{CoreError, Result};
use crate::flows::{stack_forward, FlowStack, PlanarFlowVars};
use crate::nets::{reparameterize, BnUpdate, BoundParams, Mode, SeqVae};
use crate::rnf::{stack_regularized_forward, ClusterSet, KernelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Linear ramp for the posterior-term weight: `alpha` climbs from 0 at
/// epoch 0 to `alpha_end` at `ramp_epochs` and stays there; the divergence
/// weight is tied as `lambda = 10 - alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub alpha_end: f64,
    pub ramp_epochs: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            alpha_end: 0.8,
            ramp_epochs: 21.0,
        }
    }
}

impl AnnealSchedule {
    /// `(alpha, lambda)` at a (possibly fractional) epoch.
    pub fn at(&self, epoch: f64) -> (f64, f64) {
        let frac = if self.ramp_epochs <= 0.0 {
            1.0
        } else {
            (epoch / self.ramp_epochs).clamp(0.0, 1.0)
        };
        let alpha = self.alpha_end * frac;
        (alpha, 10.0 - alpha)
    }
}

/// Which loss the trainer optimizes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Objective {
    /// Reconstruction + beta * KL.
    Vae,
    /// Reconstruction after the flow + beta * (KL - mean summed raw log-det).
    VaeNf,
    /// Reconstruction + lambda * MMD + alpha * KL.
    Wae,
    /// Flowed reconstruction + lambda * MMD + alpha * (KL - raw log-det).
    WaeNf,
    /// Flowed reconstruction + lambda * MMD + alpha * (KL - regularized
    /// log-det). The regularized determinant only steers training; density
    /// evaluation always uses the raw one.
    WaeRnf,
}

impl Objective {
    pub fn uses_flows(self) -> bool {
        matches!(self, Objective::VaeNf | Objective::WaeNf | Objective::WaeRnf)
    }

    pub fn uses_mmd(self) -> bool {
        matches!(self, Objective::Wae | Objective::WaeNf | Objective::WaeRnf)
    }

    pub fn uses_regularized_logdet(self) -> bool {
        matches!(self, Objective::WaeRnf)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Vae => "vae",
            Objective::VaeNf => "vae-nf",
            Objective::Wae => "wae",
            Objective::WaeNf => "wae-nf",
            Objective::WaeRnf => "wae-rnf",
        }
    }
}

impl FromStr for Objective {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Objective::Vae),
            "vae-nf" => Ok(Objective::VaeNf),
            "wae" => Ok(Objective::Wae),
            "wae-nf" => Ok(Objective::WaeNf),
            "wae-rnf" => Ok(Objective::WaeRnf),
            other => Err(CoreError::Parse {
                what: format!("unknown objective {other:?}"),
            }),
        }
    }
}

/// Scalar weights applied when assembling a step's total loss. `beta`
/// multiplies the KL term of the two ELBO objectives; `alpha` and `lambda`
/// weight the posterior and MMD terms of the latent-matching ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn elbo(beta: f64) -> LossWeights {
        LossWeights {
            beta,
            alpha: 0.0,
            lambda: 0.0,
        }
    }

    pub fn annealed(alpha: f64, lambda: f64) -> LossWeights {
        LossWeights {
            beta: 1.0,
            alpha,
            lambda,
        }
    }
}

/// Per-step loss components, all batch means: reconstruction NLL in nats
/// per sentence, closed-form KL, the MMD estimate, and the mean summed
/// log-Jacobians (raw and kernel-regularized). `None` marks terms the
/// active objective does not compute.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub mmd: Option<f64>,
    pub log_j_raw: Option<f64>,
    pub log_j_reg: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Reassemble the total from the reported components. Mirrors the tape
    /// assembly operation for operation, so the result equals `total`
    /// bit-for-bit.
    pub fn recombine(&self, objective: Objective, w: LossWeights) -> f64 {
        let raw = self.log_j_raw.unwrap_or(0.0);
        let reg = self.log_j_reg.unwrap_or(0.0);
        let mmd = self.mmd.unwrap_or(0.0);
        match objective {
            Objective::Vae => self.nll + self.kl * w.beta,
            Objective::VaeNf => self.nll + (self.kl - raw) * w.beta,
            Objective::Wae => self.nll + mmd * w.lambda + self.kl * w.alpha,
            Objective::WaeNf => self.nll + mmd * w.lambda + (self.kl - raw) * w.alpha,
            Objective::WaeRnf => self.nll + mmd * w.lambda + (self.kl - reg) * w.alpha,
        }
    }
}

/// Everything a single training step consumes besides the model: the token
/// batch, one standard-normal draw per datum for the reparameterization,
/// fresh prior samples for the MMD term, and optional per-step dropout
/// masks. Callers own all randomness, which keeps the loss a pure function.
pub struct StepInputs<'a> {
    pub batch: &'a TokenBatch,
    pub noise: &'a Tensor,
    pub prior: Option<&'a Tensor>,
    pub dropout: Option<&'a [(Tensor, Tensor)]>,
}

/// Build the training loss for `objective` on one batch. Returns the scalar
/// loss variable (for `backward`), the component breakdown, and any pending
/// batch-norm running-statistics updates from the encoder.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    tape: &mut Tape,
    model: &SeqVae,
    bound: &BoundParams,
    flows: &[PlanarFlowVars],
    rnf: Option<(&ClusterSet, &KernelConfig)>,
    objective: Objective,
    weights: LossWeights,
    inputs: &StepInputs,
) -> Result<(Var, LossBreakdown, Vec<BnUpdate>)> {
    let post = model.encode(tape, bound, inputs.batch, Mode::Train)?;
    let z0 = reparameterize(tape, post.mu, post.log_sigma, inputs.noise)?;

    let (z_final, raw_mean, reg_mean) = if objective.uses_flows() {
        if objective.uses_regularized_logdet() {
            let (clusters, kernel) = rnf.ok_or(CoreError::EmptyClusters)?;
            let (zt, raw, reg) = stack_regularized_forward(tape, flows, z0, clusters, kernel)?;
            let raw_mean = tape.mean(raw)?;
            let reg_mean = tape.mean(reg)?;
            (zt, Some(raw_mean), Some(reg_mean))
        } else {
            let (zt, raw) = stack_forward(tape, flows, z0)?;
            let raw_mean = tape.mean(raw)?;
            (zt, Some(raw_mean), None)
        }
    } else {
        (z0, None, None)
    };

    let nll_col = model.decode_teacher_forced(tape, bound, z_final, inputs.batch, inputs.dropout)?;
    let nll_mean = tape.mean(nll_col)?;
    let kl_col = kl_diag_gaussian_tape(tape, post.mu, post.log_sigma)?;
    let kl_mean = tape.mean(kl_col)?;

    let mmd = if objective.uses_mmd() {
        let prior = inputs.prior.ok_or(CoreError::EmptyInput {
            what: "prior samples for the latent divergence",
        })?;
        let prior_var = tape.constant(prior.clone());
        Some(mmd_gaussian_tape(tape, z0, prior_var)?)
    } else {
        None
    };

    // Assembly order matches LossBreakdown::recombine exactly.
    let total = match objective {
        Objective::Vae => {
            let k = tape.mul_scalar(kl_mean, weights.beta)?;
            tape.add(nll_mean, k)?
        }
        Objective::VaeNf => {
            let adj = tape.sub(kl_mean, raw_mean.expect("flow objective"))?;
            let k = tape.mul_scalar(adj, weights.beta)?;
            tape.add(nll_mean, k)?
        }
        Objective::Wae => {
            let m = tape.mul_scalar(mmd.expect("mmd objective"), weights.lambda)?;
            let t = tape.add(nll_mean, m)?;
            let k = tape.mul_scalar(kl_mean, weights.alpha)?;
            tape.add(t, k)?
        }
        Objective::WaeNf => {
            let m = tape.mul_scalar(mmd.expect("mmd objective"), weights.lambda)?;
            let t = tape.add(nll_mean, m)?;
            let adj = tape.sub(kl_mean, raw_mean.expect("flow objective"))?;
            let k = tape.mul_scalar(adj, weights.alpha)?;
            tape.add(t, k)?
        }
        Objective::WaeRnf => {
            let m = tape.mul_scalar(mmd.expect("mmd objective"), weights.lambda)?;
            let t = tape.add(nll_mean, m)?;
            let adj = tape.sub(kl_mean, reg_mean.expect("regularized objective"))?;
            let k = tape.mul_scalar(adj, weights.alpha)?;
            tape.add(t, k)?
        }
    };

    let breakdown = LossBreakdown {
        nll: tape.value(nll_mean).item(),
        kl: tape.value(kl_mean).item(),
        mmd: mmd.map(|v| tape.value(v).item()),
        log_j_raw: raw_mean.map(|v| tape.value(v).item()),
        log_j_reg: reg_mean.map(|v| tape.value(v).item()),
        total: tape.value(total).item(),
    };
    Ok((total, breakdown, post.bn_updates))
}

/// Per-sentence negative log-likelihood bound for evaluation, as a `[B, 1]`
/// column. Without flows this is the single-sample reconstruction plus the
/// closed-form KL. With flows it is the sampled change-of-variables bound
///   `nll(x | z_T) + log q(z0 | x) - log N(z_T; 0, I) - sum log|det J|`
/// using the raw log-determinants; the kernel-regularized ones are a
/// training surrogate and never enter density evaluation.
///
/// `eps` holds one standard-normal row per sentence. Drawing it per
/// sentence (rather than per batch) is what makes reported bounds
/// independent of how sentences are grouped.
pub fn eval_nll_bound(
    tape: &mut Tape,
    model: &SeqVae,
    bound: &BoundParams,
    stack: &FlowStack,
    batch: &TokenBatch,
    eps: &Tensor,
) -> Result<Tensor> {
    let post = model.encode(tape, bound, batch, Mode::Eval)?;
    let mu = tape.value(post.mu).clone();
    let ls = tape.value(post.log_sigma).clone();
    if eps.shape() != mu.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "eval noise",
            lhs: eps.shape().to_vec(),
            rhs: mu.shape().to_vec(),
        });
    }
    let (b, d) = (mu.rows(), mu.cols());
    let z0_data: Vec<f64> = mu
        .data()
        .iter()
        .zip(ls.data())
        .zip(eps.data())
        .map(|((&m, &l), &e)| m + l.exp() * e)
        .collect();
    let z0 = Tensor::matrix(b, d, z0_data)?;

    if stack.is_empty() {
        let zv = tape.constant(z0);
        let nll = model.decode_teacher_forced(tape, bound, zv, batch, None)?;
        let kl = kl_diag_gaussian(&DiagGaussian::new(mu, ls)?)?;
        let rows: Vec<f64> = tape
            .value(nll)
            .data()
            .iter()
            .zip(kl.data())
            .map(|(&n, &k)| n + k)
            .collect();
        Tensor::matrix(b, 1, rows)
    } else {
        let (zt, logdet) = stack.apply(&z0)?;
        let zv = tape.constant(zt.clone());
        let nll = model.decode_teacher_forced(tape, bound, zv, batch, None)?;
        let nll_rows = tape.value(nll);
        let rows: Vec<f64> = (0..b)
            .map(|r| {
                let q = diag_normal_logpdf(z0.row_slice(r), mu.row_slice(r), ls.row_slice(r));
                let p = std_normal_logpdf(zt.row_slice(r));
                nll_rows.get(r, 0) + q - p - logdet.get(r, 0)
            })
            .collect();
        Tensor::matrix(b, 1, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{bind_stack, PlanarFlowParams};
    use crate::nets::{ModelConfig, ParamId, ParamStore};
    use crate::nets::Injection;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    // ----- schedule -----

    #[test]
    fn schedule_endpoints_and_midpoint_are_exact() {
        let s = AnnealSchedule::default();
        assert_eq!(s.at(0.0), (0.0, 10.0));
        let (a21, l21) = s.at(21.0);
        assert_eq!(a21, 0.8);
        assert_eq!(l21, 10.0 - 0.8);
        assert_eq!(s.at(500.0), s.at(21.0));
        let (mid_a, mid_l) = s.at(10.5);
        assert_eq!(mid_a, 0.4);
        assert_eq!(mid_l, 10.0 - 0.4);
    }

    #[test]
    fn schedule_is_nondecreasing_and_lambda_tied() {
        let s = AnnealSchedule::default();
        let mut prev = -1.0;
        for i in 0..=300 {
            let e = i as f64 * 0.1;
            let (a, l) = s.at(e);
            assert!(a >= prev);
            assert_eq!(l, 10.0 - a);
            prev = a;
        }
    }

    // ----- shared fixtures -----

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab: 6,
            embedding: 3,
            hidden: 4,
            latent: 2,
            head_hidden: 5,
            injection: Injection::InitStateConcat,
            dropout: 0.2,
        }
    }

    fn batch(rows: &[&[usize]]) -> TokenBatch {
        TokenBatch::from_sentences(rows).unwrap()
    }

    /// Zero the encoder LSTM and both posterior MLPs, then pin the
    /// batch-norm shifts so a train-mode encode of any batch yields exactly
    /// `mu = mu_vals`, `log_sigma = ls_vals` on every row (an all-zero
    /// pre-norm batch standardizes to zero, leaving only the shift).
    fn force_posterior(
        store: &mut ParamStore,
        mu_vals: &[f64],
        ls_vals: &[f64],
    ) {
        let targets: Vec<(ParamId, usize, usize)> = store
            .iter()
            .filter(|(_, name, _, trainable)| {
                *trainable
                    && (name.starts_with("encoder.")
                        || (name.starts_with("posterior.") && !name.contains(".bn.")))
            })
            .map(|(id, _, t, _)| (id, t.rows(), t.cols()))
            .collect();
        for (id, r, c) in targets {
            store.set(id, Tensor::zeros(r, c)).unwrap();
        }
        let mu_id = store.find("posterior.mu.bn.beta").unwrap();
        store
            .set(mu_id, Tensor::row(mu_vals.to_vec()).unwrap())
            .unwrap();
        let ls_id = store.find("posterior.sigma.bn.beta").unwrap();
        store
            .set(ls_id, Tensor::row(ls_vals.to_vec()).unwrap())
            .unwrap();
    }

    fn run_loss(
        store: &ParamStore,
        model: &SeqVae,
        flows: &[PlanarFlowParams],
        rnf: Option<(&ClusterSet, &KernelConfig)>,
        objective: Objective,
        weights: LossWeights,
        inputs: &StepInputs,
    ) -> (LossBreakdown, f64) {
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape, false);
        let stack = FlowStack::new(flows.to_vec()).unwrap();
        let vars = bind_stack(&mut tape, &stack, false);
        let (total, breakdown, _) = training_loss(
            &mut tape, model, &bound, &vars, rnf, objective, weights, inputs,
        )
        .unwrap();
        let v = tape.value(total).item();
        (breakdown, v)
    }

    // ----- basic identities -----

    #[test]
    fn empty_flow_stack_matches_plain_elbo_bitwise() {
        let mut store = ParamStore::new();
        let model = SeqVae::new(tiny_config(), &mut store, 41).unwrap();
        let b = batch(&[&[4, 5], &[5, 5, 4]]);
        let noise = Tensor::matrix(2, 2, vec![0.3, -0.5, 0.1, 0.9]).unwrap();
        let inputs = StepInputs {
            batch: &b,
            noise: &noise,
            prior: None,
            dropout: None,
        };
        let w = LossWeights::elbo(0.73);
        let (plain, plain_total) = run_loss(&store, &model, &[], None, Objective::Vae, w, &inputs);
        let (flowed, flowed_total) =
            run_loss(&store, &model, &[], None, Objective::VaeNf, w, &inputs);
        assert_eq!(plain_total.to_bits(), flowed_total.to_bits());
        assert_eq!(plain.nll.to_bits(), flowed.nll.to_bits());
        assert_eq!(plain.kl.to_bits(), flowed.kl.to_bits());
        assert_eq!(flowed.log_j_raw, Some(0.0));
    }

    #[test]
    fn breakdown_recombines_exactly_for_every_objective() {
        let mut store = ParamStore::new();
        let model = SeqVae::new(tiny_config(), &mut store, 43).unwrap();
        let b = batch(&[&[4, 5, 4], &[5], &[4, 4]]);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let noise_data: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let noise = Tensor::matrix(3, 2, noise_data).unwrap();
        let prior_data: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let prior = Tensor::matrix(3, 2, prior_data).unwrap();
        let flows = vec![
            PlanarFlowParams::from_slices(&[0.4, -0.2], &[0.5, 0.3], 0.1).unwrap(),
            PlanarFlowParams::from_slices(&[-0.3, 0.1], &[0.2, -0.6], -0.2).unwrap(),
        ];
        let clusters =
            ClusterSet::new(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, -1.0]).unwrap()).unwrap();
        let kernel = KernelConfig::imq(2);
        let inputs = StepInputs {
            batch: &b,
            noise: &noise,
            prior: Some(&prior),
            dropout: None,
        };
        let w = LossWeights {
            beta: 0.8,
            alpha: 0.55,
            lambda: 7.3,
        };
        for objective in [
            Objective::Vae,
            Objective::VaeNf,
            Objective::Wae,
            Objective::WaeNf,
            Objective::WaeRnf,
        ] {
            let (bd, total) = run_loss(
                &store,
                &model,
                &flows,
                Some((&clusters, &kernel)),
                objective,
                w,
                &inputs,
            );
            assert_eq!(
                bd.recombine(objective, w).to_bits(),
                total.to_bits(),
                "{}",
                objective.name()
            );
            assert_eq!(bd.total.to_bits(), total.to_bits());
        }
    }

    #[test]
    fn beta_zero_reduces_elbo_to_reconstruction() {
        let mut store = ParamStore::new();
        let model = SeqVae::new(tiny_config(), &mut store, 47).unwrap();
        let b = batch(&[&[4], &[5, 4]]);
        let noise = Tensor::matrix(2, 2, vec![0.2, -0.1, 0.7, 0.0]).unwrap();
        let inputs = StepInputs {
            batch: &b,
            noise: &noise,
            prior: None,
            dropout: None,
        };
        let (bd, total) = run_loss(
            &store,
            &model,
            &[],
            None,
            Objective::Vae,
            LossWeights::elbo(0.0),
            &inputs,
        );
        assert_eq!(total.to_bits(), bd.nll.to_bits());
    }

    #[test]
    fn zero_alpha_and_lambda_reduce_to_reconstruction() {
        let mut store = ParamStore::new();
        let model = SeqVae::new(tiny_config(), &mut store, 53).unwrap();
        let b = batch(&[&[4, 5], &[5]]);
        let noise = Tensor::matrix(2, 2, vec![0.4, -0.6, 0.3, 0.2]).unwrap();
        let prior = Tensor::matrix(2, 2, vec![0.1, 0.5, -0.9, 0.4]).unwrap();
        let clusters =
            ClusterSet::new(Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap()).unwrap();
        let kernel = KernelConfig::imq(2);
        let flows =
            vec![PlanarFlowParams::from_slices(&[0.3, 0.2], &[0.4, -0.1], 0.0).unwrap()];
        let inputs = StepInputs {
            batch: &b,
            noise: &noise,
            prior: Some(&prior),
            dropout: None,
        };
        let (bd, total) = run_loss(
            &store,
            &model,
            &flows,
            Some((&clusters, &kernel)),
            Objective::WaeRnf,
            LossWeights::annealed(0.0, 0.0),
            &inputs,
        );
        assert_eq!(total.to_bits(), bd.nll.to_bits());
    }

    #[test]
    fn identity_flows_at_centers_match_flowless_objective() {
        // Flows with u = 0 move nothing and contribute zero raw log-dets;
        // with the posterior pinned to a cluster center, the gaussian
        // kernel is at its peak so the regularized log-dets are zero too.
        // The whole objective then collapses onto the flow-free one.
        let center = [0.5, -0.25];
        let mut store = ParamStore::new();
        let model = SeqVae::new(tiny_config(), &mut store, 59).unwrap();
        force_posterior(&mut store, &center, &[0.0, 0.0]);
        let b = batch(&[&[4, 5], &[5, 4, 4]]);
        let noise = Tensor::zeros(2, 2); // z0 lands exactly on the center
        let prior = Tensor::matrix(2, 2, vec![0.3, 1.0, -0.7, 0.2]).unwrap();
        let clusters = ClusterSet::new(
            Tensor::matrix(2, 2, vec![center[0], center[1], 3.0, 3.0]).unwrap(),
        )
        .unwrap();
        let kernel = KernelConfig::gaussian(2);
        let flows = vec![
            PlanarFlowParams::from_slices(&[0.0, 0.0], &[0.3, 0.4], 0.1).unwrap(),
            PlanarFlowParams::from_slices(&[0.0, 0.0], &[-0.2, 0.5], -0.3).unwrap(),
        ];
        let inputs = StepInputs {
            batch: &b,
            noise: &noise,
            prior: Some(&prior),
            dropout: None,
        };
        let w = LossWeights::annealed(0.7, 3.0);
        let (rnf_bd, rnf_total) = run_loss(
            &store,
            &model,
            &flows,
            Some((&clusters, &kernel)),
            Objective::WaeRnf,
            w,
            &inputs,
        );
        let (wae_bd, wae_total) =
            run_loss(&store, &model, &[], None, Objective::Wae, w, &inputs);
        assert_eq!(rnf_bd.log_j_raw, Some(0.0));
        assert_eq!(rnf_bd.log_j_reg, Some(0.0));
        assert_eq!(rnf_total.to_bits(), wae_total.to_bits());
        assert_eq!(rnf_bd.nll.to_bits(), wae_bd.nll.to_bits());
    }

    #[test]
    fn raw_logdet_report_matches_value_level_flows() {
        let center = [0.4, 0.6];
        let mut store = ParamStore::new();
        let model = SeqVae::new(tiny_config(), &mut store, 61).unwrap();
        force_posterior(&mut store, &center, &[0.2, -0.4]);
        let b = batch(&[&[4, 5], &[5]]);
        let noise = Tensor::matrix(2, 2, vec![0.5, -1.0, 0.25, 0.75]).unwrap();
        let flows = vec![
            PlanarFlowParams::from_slices(&[0.4, -0.2], &[0.5, 0.3], 0.1).unwrap(),
            PlanarFlowParams::from_slices(&[-0.1, 0.3], &[0.6, -0.2], 0.4).unwrap(),
        ];
        let inputs = StepInputs {
            batch: &b,
            noise: &noise,
            prior: None,
            dropout: None,
        };
        let (bd, _) = run_loss(
            &store,
            &model,
            &flows,
            None,
            Objective::VaeNf,
            LossWeights::elbo(1.0),
            &inputs,
        );
        // Recompute z0 by hand (the posterior is pinned) and push it through
        // the value-level stack.
        let sigma = [0.2f64.exp(), (-0.4f64).exp()];
        let mut z0 = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                z0.push(center[c] + sigma[c] * noise.get(r, c));
            }
        }
        let stack = FlowStack::new(flows).unwrap();
        let (_, logdet) = stack.apply(&Tensor::matrix(2, 2, z0).unwrap()).unwrap();
        let mean = logdet.data().iter().sum::<f64>() / 2.0;
        assert_eq!(bd.log_j_raw.unwrap().to_bits(), mean.to_bits());
    }

    #[test]
    fn missing_prior_samples_or_clusters_are_rejected() {
        let mut store = ParamStore::new();
        let model = SeqVae::new(tiny_config(), &mut store, 67).unwrap();
        let b = batch(&[&[4], &[5]]);
        let noise = Tensor::zeros(2, 2);
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape, false);
        let inputs = StepInputs {
            batch: &b,
            noise: &noise,
            prior: None,
            dropout: None,
        };
        let w = LossWeights::annealed(0.5, 9.5);
        assert!(training_loss(
            &mut tape, &model, &bound, &[], None, Objective::Wae, w, &inputs
        )
        .is_err());
        let prior = Tensor::zeros(2, 2);
        let inputs = StepInputs {
            batch: &b,
            noise: &noise,
            prior: Some(&prior),
            dropout: None,
        };
        assert!(training_loss(
            &mut tape, &model, &bound, &[], None, Objective::WaeRnf, w, &inputs
        )
        .is_err());
        assert!("wae-rnf".parse::<Objective>().is_ok());
        assert!("adam".parse::<Objective>().is_err());
    }

    // ----- hand-computed ELBO -----

    #[test]
    fn plain_elbo_matches_straight_line_hand_computation() {
        // Zero weights except the posterior shifts and the output bias:
        // the decoder's hidden state stays at zero, so every position
        // scores log-softmax(out_b) and the whole loss is computable with
        // scalar arithmetic.
        let mut cfg = tiny_config();
        cfg.vocab = 5;
        let mut store = ParamStore::new();
        let model = SeqVae::new(cfg, &mut store, 71).unwrap();
        let zero_ids: Vec<(ParamId, usize, usize)> = store
            .iter()
            .filter(|(_, _, _, trainable)| *trainable)
            .map(|(id, _, t, _)| (id, t.rows(), t.cols()))
            .collect();
        for (id, r, c) in zero_ids {
            store.set(id, Tensor::zeros(r, c)).unwrap();
        }
        let gamma_ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, name, _, _)| name.ends_with(".bn.gamma"))
            .map(|(id, ..)| id)
            .collect();
        for id in gamma_ids {
            store.set(id, Tensor::full(1, 2, 1.0).unwrap()).unwrap();
        }
        let mu_vals = [0.3, -0.2];
        let ls_vals = [0.1, -0.5];
        force_posterior(&mut store, &mu_vals, &ls_vals);
        let out_b = [0.2, 0.0, -0.1, 0.4, -0.3];
        let ob_id = store.find("output.b").unwrap();
        store
            .set(ob_id, Tensor::row(out_b.to_vec()).unwrap())
            .unwrap();

        let b = batch(&[&[4], &[4, 4]]);
        let noise = Tensor::matrix(2, 2, vec![0.6, -0.2, 0.1, 0.8]).unwrap();
        let inputs = StepInputs {
            batch: &b,
            noise: &noise,
            prior: None,
            dropout: None,
        };
        let beta = 0.7;
        let (_, total) = run_loss(
            &store,
            &model,
            &[],
            None,
            Objective::Vae,
            LossWeights::elbo(beta),
            &inputs,
        );

        // By hand: log-softmax of the bias row, then token scores.
        let lse = out_b.iter().map(|v| v.exp()).sum::<f64>().ln();
        let lp = |t: usize| out_b[t] - lse;
        let nll_a = -(lp(4) + lp(crate::data::EOS));
        let nll_b = -(lp(4) + lp(4) + lp(crate::data::EOS));
        let nll_mean = (nll_a + nll_b) / 2.0;
        let kl_row: f64 = mu_vals
            .iter()
            .zip(ls_vals)
            .map(|(&m, l)| 0.5 * (m * m + (2.0 * l).exp() - 1.0 - 2.0 * l))
            .sum();
        let want = nll_mean + beta * kl_row;
        assert!(
            (total - want).abs() < 1e-12,
            "total {total} hand-computed {want}"
        );
    }

    // ----- quadrature oracles for the flow bound -----

    /// Straight-line re-implementation of the decoder for a single latent
    /// row: embedding lookup, LSTM gate arithmetic, output affine, and
    /// log-softmax, all in scalar f64 code reading tensors from the store.
    fn decoder_nll_oracle(
        store: &ParamStore,
        cfg: &ModelConfig,
        z: &[f64],
        tokens: &[usize],
    ) -> f64 {
        let fetch = |name: &str| store.get(store.find(name).unwrap());
        let emb = fetch("embedding");
        let iw = fetch("decoder_init.w");
        let ib = fetch("decoder_init.b");
        let w_ih = fetch("decoder.w_ih");
        let w_hh = fetch("decoder.w_hh");
        let bias = fetch("decoder.bias");
        let ow = fetch("output.w");
        let ob = fetch("output.b");
        let hh = cfg.hidden;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());

        // Initial state: z * iw + ib, split into h and c halves.
        let mut state = vec![0.0; 2 * hh];
        for (j, s) in state.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &zi) in z.iter().enumerate() {
                acc += zi * iw.get(i, j);
            }
            *s = acc + ib.get(0, j);
        }
        let mut h = state[..hh].to_vec();
        let mut c = state[hh..].to_vec();

        let mut targets: Vec<usize> = tokens.to_vec();
        targets.push(crate::data::EOS);
        let mut inputs: Vec<usize> = vec![crate::data::BOS];
        inputs.extend_from_slice(tokens);

        let mut nll = 0.0;
        for (&input, &target) in inputs.iter().zip(&targets) {
            let mut x: Vec<f64> = emb.row_slice(input).to_vec();
            if cfg.injection == Injection::InitStateConcat {
                x.extend_from_slice(z);
            }
            let mut gates = vec![0.0; 4 * hh];
            for (j, g) in gates.iter_mut().enumerate() {
                let mut acc = bias.get(0, j);
                for (i, &xi) in x.iter().enumerate() {
                    acc += xi * w_ih.get(i, j);
                }
                for (i, &hi) in h.iter().enumerate() {
                    acc += hi * w_hh.get(i, j);
                }
                *g = acc;
            }
            for k in 0..hh {
                let i_g = sig(gates[k]);
                let f_g = sig(gates[hh + k]);
                let g_g = gates[2 * hh + k].tanh();
                let o_g = sig(gates[3 * hh + k]);
                c[k] = f_g * c[k] + i_g * g_g;
                h[k] = o_g * c[k].tanh();
            }
            let mut logits = vec![0.0; cfg.vocab];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut acc = ob.get(0, j);
                for (i, &hi) in h.iter().enumerate() {
                    acc += hi * ow.get(i, j);
                }
                *l = acc;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            nll -= logits[target] - lse;
        }
        nll
    }

    struct FlowScalar {
        u: f64,
        w: f64,
        b: f64,
    }

    impl FlowScalar {
        fn apply(&self, z: f64) -> (f64, f64) {
            let a = (self.w * z + self.b).tanh();
            let phi = (1.0 - a * a) * self.w;
            let logdet = (1.0 + self.u * phi).abs().ln();
            (z + self.u * a, logdet)
        }
    }

    /// One-latent-dimension model with a pinned posterior and a random
    /// decoder, used by both quadrature tests.
    fn pinned_1d_fixture() -> (ParamStore, SeqVae, f64, f64, FlowScalar) {
        let cfg = ModelConfig {
            vocab: 5,
            embedding: 2,
            hidden: 2,
            latent: 1,
            head_hidden: 2,
            injection: Injection::InitStateConcat,
            dropout: 0.2,
        };
        let mut store = ParamStore::new();
        let model = SeqVae::new(cfg, &mut store, 73).unwrap();
        let (mu, ls) = (0.4, -0.3);
        force_posterior(&mut store, &[mu], &[ls]);
        let flow = FlowScalar {
            u: 0.5,
            w: 0.8,
            b: 0.2,
        };
        (store, model, mu, ls, flow)
    }

    fn gauss_pdf(z: f64, mu: f64, sigma: f64) -> f64 {
        let t = (z - mu) / sigma;
        (-0.5 * t * t).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Trapezoid quadrature of `f` against `N(mu, sigma^2)` over +-10 sigma.
    fn gauss_quadrature(mu: f64, sigma: f64, f: impl Fn(f64) -> f64) -> f64 {
        let n = 20_000usize;
        let lo = mu - 10.0 * sigma;
        let hi = mu + 10.0 * sigma;
        let step = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let z = lo + step * i as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * gauss_pdf(z, mu, sigma) * f(z);
        }
        acc * step
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn flow_training_loss_matches_quadrature_oracle() {
        let (store, model, mu, ls, flow) = pinned_1d_fixture();
        let sigma = ls.exp();
        let tokens = [4usize];
        let b = batch(&[&tokens]);
        let cfg = *model.config();

        let kl = 0.5 * (mu * mu + (2.0 * ls).exp() - 1.0 - 2.0 * ls);
        let expected = gauss_quadrature(mu, sigma, |z0| {
            let (zt, logdet) = flow.apply(z0);
            decoder_nll_oracle(&store, &cfg, &[zt], &tokens) - logdet
        }) + kl;

        let trials = 10_000usize;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let params = PlanarFlowParams::from_slices(&[flow.u], &[flow.w], flow.b).unwrap();
        let stack = FlowStack::new(vec![params]).unwrap();
        let mut totals = Vec::with_capacity(trials);
        for _ in 0..trials {
            let e: f64 = StandardNormal.sample(&mut rng);
            let noise = Tensor::matrix(1, 1, vec![e]).unwrap();
            let mut tape = Tape::new();
            let bound = store.bind_all(&mut tape, false);
            let vars = bind_stack(&mut tape, &stack, false);
            let inputs = StepInputs {
                batch: &b,
                noise: &noise,
                prior: None,
                dropout: None,
            };
            let (_, bd, _) = training_loss(
                &mut tape,
                &model,
                &bound,
                &vars,
                None,
                Objective::VaeNf,
                LossWeights::elbo(1.0),
                &inputs,
            )
            .unwrap();
            totals.push(bd.total);
        }
        let (mc, se) = mean_and_se(&totals);
        assert!(
            (mc - expected).abs() < 3.0 * se + 1e-6,
            "monte carlo {mc} quadrature {expected} se {se}"
        );
    }

    #[test]
    fn eval_bound_with_flows_matches_quadrature_oracle() {
        let (store, model, mu, ls, flow) = pinned_1d_fixture();
        let sigma = ls.exp();
        let tokens = [4usize, 4];
        let b = batch(&[&tokens]);
        let cfg = *model.config();

        let expected = gauss_quadrature(mu, sigma, |z0| {
            let (zt, logdet) = flow.apply(z0);
            let q = diag_normal_logpdf(&[z0], &[mu], &[ls]);
            let p = std_normal_logpdf(&[zt]);
            decoder_nll_oracle(&store, &cfg, &[zt], &tokens) + q - p - logdet
        });

        let params = PlanarFlowParams::from_slices(&[flow.u], &[flow.w], flow.b).unwrap();
        let stack = FlowStack::new(vec![params]).unwrap();
        let trials = 10_000usize;
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let mut bounds = Vec::with_capacity(trials);
        for _ in 0..trials {
            let e: f64 = StandardNormal.sample(&mut rng);
            let eps = Tensor::matrix(1, 1, vec![e]).unwrap();
            let mut tape = Tape::new();
            let bd = store.bind_all(&mut tape, false);
            let col = eval_nll_bound(&mut tape, &model, &bd, &stack, &b, &eps).unwrap();
            bounds.push(col.item());
        }
        let (mc, se) = mean_and_se(&bounds);
        assert!(
            (mc - expected).abs() < 3.0 * se + 1e-6,
            "monte carlo {mc} quadrature {expected} se {se}"
        );
    }

    #[test]
    fn eval_bound_of_uniform_decoder_is_token_count_times_log_vocab() {
        // All-zero weights leave the posterior at the prior (KL = 0, and in
        // eval mode the running stats are still the identity) and the
        // decoder uniform, so the bound is exactly token-count * log V,
        // with or without identity flows.
        let mut cfg = tiny_config();
        cfg.vocab = 5;
        let mut store = ParamStore::new();
        let model = SeqVae::new(cfg, &mut store, 79).unwrap();
        let zero_ids: Vec<(ParamId, usize, usize)> = store
            .iter()
            .filter(|(_, name, _, trainable)| *trainable && !name.ends_with("gamma"))
            .map(|(id, _, t, _)| (id, t.rows(), t.cols()))
            .collect();
        for (id, r, c) in zero_ids {
            store.set(id, Tensor::zeros(r, c)).unwrap();
        }
        let b = batch(&[&[4, 4, 4], &[4]]);
        let eps = Tensor::matrix(2, 2, vec![0.7, -0.3, 0.2, 1.1]).unwrap();
        let want = [4.0 * 5.0f64.ln(), 2.0 * 5.0f64.ln()];

        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape, false);
        let col = eval_nll_bound(&mut tape, &model, &bound, &FlowStack::empty(), &b, &eps).unwrap();
        for (got, want) in col.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }

        let identity = FlowStack::new(vec![
            PlanarFlowParams::from_slices(&[0.0, 0.0], &[0.4, 0.3], 0.2).unwrap(),
        ])
        .unwrap();
        let mut tape2 = Tape::new();
        let bound2 = store.bind_all(&mut tape2, false);
        let col2 = eval_nll_bound(&mut tape2, &model, &bound2, &identity, &b, &eps).unwrap();
        for (got, want) in col2.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn every_parameter_receives_finite_gradients_over_random_steps() {
        let mut store = ParamStore::new();
        let model = SeqVae::new(tiny_config(), &mut store, 83).unwrap();
        let clusters =
            ClusterSet::new(Tensor::matrix(2, 2, vec![0.2, -0.4, -1.0, 0.8]).unwrap()).unwrap();
        let kernel = KernelConfig::imq(2);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for step in 0..100 {
            let n1 = rng.random_range(1..5);
            let n2 = rng.random_range(1..5);
            let s1: Vec<usize> = (0..n1).map(|_| rng.random_range(4..6)).collect();
            let s2: Vec<usize> = (0..n2).map(|_| rng.random_range(4..6)).collect();
            let b = batch(&[&s1, &s2]);
            let noise_data: Vec<f64> =
                (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise = Tensor::matrix(2, 2, noise_data).unwrap();
            let prior_data: Vec<f64> =
                (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let prior = Tensor::matrix(2, 2, prior_data).unwrap();
            let masks = model.sample_dropout_masks(2, b.max_len(), &mut rng);

            let mut tape = Tape::new();
            let bound = store.bind_all(&mut tape, true);
            let mut flow_vars = Vec::new();
            for _ in 0..2 {
                let fu: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
                let fw: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
                let fb = rng.random_range(-0.5..0.5);
                let u = tape.leaf(Tensor::row(fu).unwrap(), true);
                let w = tape.leaf(Tensor::row(fw).unwrap(), true);
                let b = tape.leaf(Tensor::matrix(1, 1, vec![fb]).unwrap(), true);
                flow_vars.push(PlanarFlowVars { u, w, b });
            }
            let inputs = StepInputs {
                batch: &b,
                noise: &noise,
                prior: Some(&prior),
                dropout: Some(&masks),
            };
            let (total, bd, _) = training_loss(
                &mut tape,
                &model,
                &bound,
                &flow_vars,
                Some((&clusters, &kernel)),
                Objective::WaeRnf,
                LossWeights::annealed(0.6, 9.4),
                &inputs,
            )
            .unwrap();
            assert!(bd.total.is_finite(), "step {step}");
            tape.backward(total).unwrap();
            for id in store.trainable_ids() {
                let g = tape
                    .grad(bound.var(id))
                    .unwrap_or_else(|| panic!("no gradient for {}", store.name(id)));
                assert!(g.iter().all(|v| v.is_finite()), "{}", store.name(id));
            }
            for fv in &flow_vars {
                for var in [fv.u, fv.w, fv.b] {
                    let g = tape.grad(var).expect("flow gradient");
                    assert!(g.iter().all(|v| v.is_finite()));
                }
            }
        }
    }
}
