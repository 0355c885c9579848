//! Model assembly: a sequence autoencoder plus a planar-flow stack living in
//! one parameter store, so the optimizer and the checkpoint see a single
//! flat list of named tensors.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rnf_core::flows::{FlowStack, PlanarFlowParams, PlanarFlowVars};
use rnf_core::nets::{BoundParams, ModelConfig, ParamId, ParamStore, SeqVae, INIT_RANGE};
use rnf_core::Tensor;

use crate::{mix_seed, Result};

/// Seed-mixing tag for flow parameter initialization.
const FLOW_SEED_TAG: u64 = 0x666c_6f77;

/// Store handles for one planar flow.
#[derive(Clone, Copy, Debug)]
pub struct FlowIds {
    pub u: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

/// The autoencoder plus the store handles of its flow stack.
pub struct Assembled {
    pub model: SeqVae,
    pub flow_ids: Vec<FlowIds>,
}

/// Register the full model in `store`: autoencoder weights first (their own
/// seeded stream), then `flows` planar flows named `flow.<i>.{u,w,b}` drawn
/// uniformly from the same +/-0.08 range on an independent stream. The
/// registration order is what makes checkpoints line up on reload.
pub fn build(
    config: ModelConfig,
    flows: usize,
    store: &mut ParamStore,
    seed: u64,
) -> Result<Assembled> {
    let model = SeqVae::new(config, store, seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, FLOW_SEED_TAG, 0));
    let d = config.latent;
    let mut flow_ids = Vec::with_capacity(flows);
    for i in 0..flows {
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
                .collect()
        };
        let u = Tensor::matrix(1, d, draw(d))?;
        let w = Tensor::matrix(1, d, draw(d))?;
        let b = Tensor::matrix(1, 1, draw(1))?;
        flow_ids.push(FlowIds {
            u: store.register(format!("flow.{i}.u"), u, true),
            w: store.register(format!("flow.{i}.w"), w, true),
            b: store.register(format!("flow.{i}.b"), b, true),
        });
    }
    Ok(Assembled { model, flow_ids })
}

/// Tape handles for the flow parameters out of an already-bound store.
pub fn bind_flows(bound: &BoundParams, flow_ids: &[FlowIds]) -> Vec<PlanarFlowVars> {
    flow_ids
        .iter()
        .map(|ids| PlanarFlowVars {
            u: bound.var(ids.u),
            w: bound.var(ids.w),
            b: bound.var(ids.b),
        })
        .collect()
}

/// Rebuild the store and model described by a checkpoint and fill in its
/// saved parameter values.
pub fn restore(state: &crate::checkpoint::TrainState) -> Result<(ParamStore, Assembled)> {
    let mut store = ParamStore::new();
    let asm = build(state.model_config(), state.flows, &mut store, state.seed)?;
    state.restore_params(&mut store)?;
    Ok((store, asm))
}

/// Value-level snapshot of the flow stack for evaluation, sampling, and
/// geometry.
pub fn flow_stack(store: &ParamStore, flow_ids: &[FlowIds]) -> Result<FlowStack> {
    let mut params = Vec::with_capacity(flow_ids.len());
    for ids in flow_ids {
        params.push(PlanarFlowParams::new(
            store.get(ids.u).clone(),
            store.get(ids.w).clone(),
            store.get(ids.b).clone(),
        )?);
    }
    Ok(FlowStack::new(params)?)
}
