//! Evaluation: per-sentence NLL bounds, perplexity, the closed-form KL,
//! divergence diagnostics, and mutual information on a held-out split.
//!
//! Everything is assembled from per-sentence values gathered in corpus
//! order, and the per-sentence noise comes from a per-sentence RNG stream,
//! so every reported number is invariant to the evaluation batch size.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rnf_core::data::Corpus;
use rnf_core::data::TokenBatch;
use rnf_core::divergences::{
    kl_diag_gaussian, mmd_gaussian, mutual_information, mutual_information_flow, DiagGaussian,
    MiEstimate, SampleSet, SampleSource,
};
use rnf_core::flows::{bind_stack, FlowStack};
use rnf_core::nets::{Mode, ParamStore, SeqVae};
use rnf_core::objectives::eval_nll_bound;
use rnf_core::rnf::{stack_regularized_forward, ClusterSet, KernelConfig};
use rnf_core::{CoreError, Tape, Tensor};

use crate::{HarnessError, Result};

/// RNG stream reserved for the prior-sample draw (per-sentence noise uses
/// streams 0..n, so this can never collide).
const PRIOR_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Seed of the per-sentence posterior noise (stream = sentence index).
    pub noise_seed: u64,
    /// Monte-Carlo sample count for the mutual-information estimate.
    pub mi_samples: usize,
    pub mi_seed: u64,
    /// Whether to report the latent MMD against fresh prior samples.
    pub want_mmd: bool,
}

/// One evaluation pass over a split.
#[derive(Clone, Copy, Debug)]
pub struct EvalMetrics {
    pub sentences: usize,
    /// Word count including the end-of-sentence token.
    pub tokens: usize,
    /// Sum of per-sentence NLL bounds over the split.
    pub total_bound: f64,
    /// Mean NLL bound per sentence.
    pub nll: f64,
    /// Mean reconstruction term per sentence (the bound minus its density
    /// corrections), i.e. the decoder's NLL at the sampled latent.
    pub recon: f64,
    /// Mean closed-form diagonal KL per sentence.
    pub kl: f64,
    pub mmd: Option<f64>,
    /// Mean summed raw log-determinant at the posterior samples.
    pub log_j_raw: Option<f64>,
    /// Mean summed kernel-regularized log-determinant.
    pub log_j_reg: Option<f64>,
    /// exp(total bound / token count).
    pub ppl: f64,
    pub mi: MiEstimate,
}

/// Per-sentence standard-normal noise: one ChaCha stream per sentence, so a
/// sentence draws the same noise regardless of how the split is batched.
fn sentence_noise(seed: u64, index: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn evaluate(
    model: &SeqVae,
    store: &ParamStore,
    stack: &FlowStack,
    rnf: Option<(&ClusterSet, &KernelConfig)>,
    corpus: &Corpus,
    opts: &EvalOptions,
) -> Result<EvalMetrics> {
    if corpus.is_empty() {
        return Err(HarnessError::Config(
            "cannot evaluate on an empty corpus".into(),
        ));
    }
    if opts.batch_size == 0 {
        return Err(HarnessError::Config("eval batch size must be positive".into()));
    }
    let n = corpus.len();
    let d = model.config().latent;

    let mut bounds = Vec::with_capacity(n);
    let mut recons = Vec::with_capacity(n);
    let mut mu_data = Vec::with_capacity(n * d);
    let mut ls_data = Vec::with_capacity(n * d);
    let mut z0_data = Vec::with_capacity(n * d);

    let mut start = 0;
    while start < n {
        let end = (start + opts.batch_size).min(n);
        let refs: Vec<&[usize]> = (start..end).map(|i| corpus.sentence(i)).collect();
        let batch = TokenBatch::from_sentences(&refs)?;
        let b = batch.batch_size();

        let mut eps_data = Vec::with_capacity(b * d);
        for i in start..end {
            eps_data.extend(sentence_noise(opts.noise_seed, i, d));
        }
        let eps = Tensor::matrix(b, d, eps_data.clone())?;

        // The bound itself, via the objective's evaluation form.
        let mut tape = Tape::new();
        let bound_params = store.bind_all(&mut tape, false);
        let col = eval_nll_bound(&mut tape, model, &bound_params, stack, &batch, &eps)?;
        bounds.extend_from_slice(col.data());

        // Posterior parameters for the diagnostics, and the reconstruction
        // term at the same per-sentence noise.
        let mut tape2 = Tape::new();
        let bound2 = store.bind_all(&mut tape2, false);
        let post = model.encode(&mut tape2, &bound2, &batch, Mode::Eval)?;
        let mu = tape2.value(post.mu).clone();
        let ls = tape2.value(post.log_sigma).clone();

        let mut z0_chunk = Vec::with_capacity(b * d);
        for i in 0..b * d {
            z0_chunk.push(mu.data()[i] + ls.data()[i].exp() * eps_data[i]);
        }
        let z0 = Tensor::matrix(b, d, z0_chunk.clone())?;
        let z_dec = if stack.is_empty() {
            z0
        } else {
            stack.apply(&z0)?.0
        };
        let mut tape3 = Tape::new();
        let bound3 = store.bind_all(&mut tape3, false);
        let zv = tape3.constant(z_dec);
        let recon_col = model.decode_teacher_forced(&mut tape3, &bound3, zv, &batch, None)?;
        recons.extend_from_slice(tape3.value(recon_col).data());

        mu_data.extend_from_slice(mu.data());
        ls_data.extend_from_slice(ls.data());
        z0_data.extend(z0_chunk);
        start = end;
    }

    let mu_all = Tensor::matrix(n, d, mu_data)?;
    let ls_all = Tensor::matrix(n, d, ls_data)?;
    let z0_all = Tensor::matrix(n, d, z0_data)?;

    let q = DiagGaussian::new(mu_all, ls_all)?;
    let kl_col = kl_diag_gaussian(&q)?;
    let kl = mean(kl_col.data());

    let mmd = if opts.want_mmd && n >= 2 {
        let mut prior_rng = ChaCha20Rng::seed_from_u64(opts.noise_seed);
        prior_rng.set_stream(PRIOR_STREAM);
        let prior = crate::standard_normal_matrix(&mut prior_rng, n, d);
        let x = SampleSet::new(z0_all.clone(), SampleSource::AggregatePosterior)?;
        let y = SampleSet::new(prior, SampleSource::Prior)?;
        Some(mmd_gaussian(&x, &y)?)
    } else {
        None
    };

    let log_j_raw = if stack.is_empty() {
        None
    } else {
        let (_, logdet) = stack.apply(&z0_all)?;
        Some(mean(logdet.data()))
    };

    let log_j_reg = match (rnf, stack.is_empty()) {
        (Some((clusters, kernel)), false) => {
            let mut tape = Tape::new();
            let vars = bind_stack(&mut tape, stack, false);
            let z0v = tape.constant(z0_all);
            let (_, _, reg) = stack_regularized_forward(&mut tape, &vars, z0v, clusters, kernel)?;
            Some(mean(tape.value(reg).data()))
        }
        _ => None,
    };

    let mi = if stack.is_empty() {
        mutual_information(&q, opts.mi_samples, opts.mi_seed)
    } else {
        mutual_information_flow(&q, stack, opts.mi_samples, opts.mi_seed)
    }
    .map_err(HarnessError::from)?;

    let total_bound = bounds.iter().sum::<f64>();
    let tokens = corpus.token_count_with_eos();
    if tokens == 0 {
        return Err(HarnessError::Core(CoreError::EmptyInput {
            what: "evaluation tokens",
        }));
    }
    let ppl = (total_bound / tokens as f64).exp();
    if !ppl.is_finite() {
        return Err(HarnessError::Numerical(format!(
            "perplexity overflowed (total bound {total_bound}, tokens {tokens})"
        )));
    }

    Ok(EvalMetrics {
        sentences: n,
        tokens,
        total_bound,
        nll: total_bound / n as f64,
        recon: mean(&recons),
        kl,
        mmd,
        log_j_raw,
        log_j_reg,
        ppl,
        mi,
    })
}
