//! Single-file binary checkpoints: a versioned header, the model shape, the
//! training position, the RNG position, every named parameter block with its
//! shape, the Adam moments, and the gathered clusters if any. All floats are
//! stored as little-endian IEEE-754 bits, so a save/load cycle is bit-exact
//! and resumed training replays the uninterrupted run.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rnf_core::nets::{Injection, ModelConfig, ParamStore};
use rnf_core::objectives::Objective;
use rnf_core::rnf::{ClusterSet, KernelKind};
use rnf_core::Tensor;

use crate::config::RunConfig;
use crate::{HarnessError, Result};

const MAGIC: &[u8; 8] = b"RNFCKPT\0";
const VERSION: u32 = 1;

/// Complete training state between two optimizer steps.
pub struct TrainState {
    // Model shape (enough to rebuild the parameter store skeleton).
    pub vocab: usize,
    pub embedding: usize,
    pub hidden: usize,
    pub latent: usize,
    pub head_hidden: usize,
    pub injection: Injection,
    pub dropout: f64,
    pub flows: usize,
    pub kernel: KernelKind,
    pub objective: Objective,
    // Hyperparameters pinned so a resume cannot silently diverge.
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta: f64,
    pub alpha_end: f64,
    pub ramp_epochs: f64,
    pub lr: f64,
    pub clip: f64,
    pub pretrain_fraction: f64,
    // Position: the NEXT epoch/step to execute.
    pub epoch: u64,
    pub step: u64,
    /// Running sums of the loss breakdown over the current epoch, so a
    /// mid-epoch resume reproduces the epoch's metrics row bitwise:
    /// (steps, nll, kl, mmd, raw log-det, regularized log-det) plus a
    /// presence bitmask (1 = mmd, 2 = raw, 4 = regularized).
    pub acc_steps: u64,
    pub acc_sums: [f64; 5],
    pub acc_flags: u8,
    /// Best dev selection score (dev loss under the steady-state
    /// objective weights) so far; +inf
    /// before the first eligible evaluation.
    pub best_score: f64,
    /// Epoch that produced `best_score`; u64::MAX before the first one.
    pub best_epoch: u64,
    /// Stream position of the training RNG (recreated from `seed`).
    pub rng_word_pos: u128,
    /// Named parameter blocks: (name, rows, cols, trainable, data).
    pub params: Vec<(String, usize, usize, bool, Vec<f64>)>,
    pub adam_t: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub clip_events: u64,
    pub clusters: Option<ClusterSet>,
}

impl TrainState {
    /// Capture the parameter store into named blocks.
    pub fn snapshot_params(store: &ParamStore) -> Vec<(String, usize, usize, bool, Vec<f64>)> {
        store
            .iter()
            .map(|(_, name, t, trainable)| {
                (
                    name.to_string(),
                    t.rows(),
                    t.cols(),
                    trainable,
                    t.data().to_vec(),
                )
            })
            .collect()
    }

    /// Write the blocks back into a freshly built store. Names, shapes, and
    /// order must match exactly; anything else means the checkpoint belongs
    /// to a different model.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != self.params.len() {
            return Err(HarnessError::Config(format!(
                "checkpoint has {} parameter blocks, model has {}",
                self.params.len(),
                ids.len()
            )));
        }
        for (id, (name, rows, cols, _, data)) in ids.into_iter().zip(&self.params) {
            if store.name(id) != name {
                return Err(HarnessError::Config(format!(
                    "checkpoint block `{name}` does not match model parameter `{}`",
                    store.name(id)
                )));
            }
            let tensor = Tensor::matrix(*rows, *cols, data.clone())?;
            store.set(id, tensor)?;
        }
        Ok(())
    }

    /// Refuse to resume under a config that disagrees with the checkpoint on
    /// anything that shapes the run.
    pub fn verify_config(&self, cfg: &RunConfig, model: &ModelConfig) -> Result<()> {
        fn need<T: PartialEq + std::fmt::Debug>(what: &str, saved: T, active: T) -> Result<()> {
            if saved == active {
                Ok(())
            } else {
                Err(HarnessError::Config(format!(
                    "checkpoint mismatch on {what}: saved {saved:?}, config {active:?}"
                )))
            }
        }
        need("vocab", self.vocab, model.vocab)?;
        need("embedding", self.embedding, model.embedding)?;
        need("hidden", self.hidden, model.hidden)?;
        need("latent", self.latent, model.latent)?;
        need("head_hidden", self.head_hidden, model.head_hidden)?;
        need("injection", self.injection, model.injection)?;
        need("dropout", self.dropout, model.dropout)?;
        // `flows` holds the effective (store) count, which the caller checks
        // against the objective-dependent count it derives from the config.
        need("kernel", self.kernel, cfg.kernel)?;
        need("objective", self.objective, cfg.objective)?;
        need("epochs", self.epochs, cfg.epochs)?;
        need("steps_per_epoch", self.steps_per_epoch, cfg.steps_per_epoch)?;
        need("batch_size", self.batch_size, cfg.batch_size)?;
        need("seed", self.seed, cfg.seed)?;
        need("beta", self.beta, cfg.beta)?;
        need("alpha_end", self.alpha_end, cfg.alpha_end)?;
        need("ramp_epochs", self.ramp_epochs, cfg.ramp_epochs)?;
        need("lr", self.lr, cfg.lr)?;
        need("clip", self.clip, cfg.clip)?;
        need(
            "pretrain_fraction",
            self.pretrain_fraction,
            cfg.pretrain_fraction,
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Wire helpers.

struct Sink<W: Write>(W);

impl<W: Write> Sink<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.0.write_all(&[v])?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for &v in vs {
            self.f64(v)?;
        }
        Ok(())
    }
    fn bytes(&mut self, v: &[u8]) -> Result<()> {
        self.u64(v.len() as u64)?;
        self.0.write_all(v)?;
        Ok(())
    }
}

struct Source<R: Read>(R);

impl<R: Read> Source<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.0.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        if n > (1 << 20) {
            return Err(corrupt("unreasonable string length"));
        }
        let mut v = vec![0u8; n];
        self.0.read_exact(&mut v)?;
        Ok(v)
    }
}

fn corrupt(what: &str) -> HarnessError {
    HarnessError::Config(format!("corrupt checkpoint: {what}"))
}

fn injection_tag(i: Injection) -> u8 {
    match i {
        Injection::InitState => 0,
        Injection::InitStateConcat => 1,
    }
}

fn kernel_tag(k: KernelKind) -> u8 {
    match k {
        KernelKind::InverseMultiquadratic => 0,
        KernelKind::Gaussian => 1,
    }
}

fn objective_tag(o: Objective) -> u8 {
    match o {
        Objective::Vae => 0,
        Objective::VaeNf => 1,
        Objective::Wae => 2,
        Objective::WaeNf => 3,
        Objective::WaeRnf => 4,
    }
}

// ---------------------------------------------------------------------------
// Save / load.

/// Serialize to `path` atomically (write a sibling temp file, then rename),
/// so an abort mid-write can never clobber the previous checkpoint.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp)?;
        let mut w = Sink(BufWriter::new(file));
        w.0.write_all(MAGIC)?;
        w.u32(VERSION)?;

        w.u64(state.vocab as u64)?;
        w.u64(state.embedding as u64)?;
        w.u64(state.hidden as u64)?;
        w.u64(state.latent as u64)?;
        w.u64(state.head_hidden as u64)?;
        w.u8(injection_tag(state.injection))?;
        w.f64(state.dropout)?;
        w.u64(state.flows as u64)?;
        w.u8(kernel_tag(state.kernel))?;
        w.u8(objective_tag(state.objective))?;

        w.u64(state.epochs as u64)?;
        w.u64(state.steps_per_epoch as u64)?;
        w.u64(state.batch_size as u64)?;
        w.u64(state.seed)?;
        w.f64(state.beta)?;
        w.f64(state.alpha_end)?;
        w.f64(state.ramp_epochs)?;
        w.f64(state.lr)?;
        w.f64(state.clip)?;
        w.f64(state.pretrain_fraction)?;

        w.u64(state.epoch)?;
        w.u64(state.step)?;
        w.u64(state.acc_steps)?;
        w.f64s(&state.acc_sums)?;
        w.u8(state.acc_flags)?;
        w.f64(state.best_score)?;
        w.u64(state.best_epoch)?;
        w.u64(state.rng_word_pos as u64)?;
        w.u64((state.rng_word_pos >> 64) as u64)?;

        w.u64(state.params.len() as u64)?;
        for (name, rows, cols, trainable, data) in &state.params {
            w.bytes(name.as_bytes())?;
            w.u64(*rows as u64)?;
            w.u64(*cols as u64)?;
            w.u8(u8::from(*trainable))?;
            w.f64s(data)?;
        }

        w.u64(state.adam_t)?;
        w.u64(state.clip_events)?;
        w.u64(state.adam_m.len() as u64)?;
        for m in &state.adam_m {
            w.u64(m.len() as u64)?;
            w.f64s(m)?;
        }
        w.u64(state.adam_v.len() as u64)?;
        for v in &state.adam_v {
            w.u64(v.len() as u64)?;
            w.f64s(v)?;
        }

        match &state.clusters {
            None => w.u8(0)?,
            Some(c) => {
                w.u8(1)?;
                w.u64(c.k() as u64)?;
                w.u64(c.dim() as u64)?;
                w.f64s(c.centers().data())?;
            }
        }
        w.0.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let file = std::fs::File::open(path).map_err(|e| {
        HarnessError::Config(format!("cannot open checkpoint {}: {e}", path.display()))
    })?;
    let mut r = Source(BufReader::new(file));

    let mut magic = [0u8; 8];
    r.0.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(HarnessError::Config(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }

    let vocab = r.u64()? as usize;
    let embedding = r.u64()? as usize;
    let hidden = r.u64()? as usize;
    let latent = r.u64()? as usize;
    let head_hidden = r.u64()? as usize;
    let injection = match r.u8()? {
        0 => Injection::InitState,
        1 => Injection::InitStateConcat,
        _ => return Err(corrupt("injection tag")),
    };
    let dropout = r.f64()?;
    let flows = r.u64()? as usize;
    let kernel = match r.u8()? {
        0 => KernelKind::InverseMultiquadratic,
        1 => KernelKind::Gaussian,
        _ => return Err(corrupt("kernel tag")),
    };
    let objective = match r.u8()? {
        0 => Objective::Vae,
        1 => Objective::VaeNf,
        2 => Objective::Wae,
        3 => Objective::WaeNf,
        4 => Objective::WaeRnf,
        _ => return Err(corrupt("objective tag")),
    };

    let epochs = r.u64()? as usize;
    let steps_per_epoch = r.u64()? as usize;
    let batch_size = r.u64()? as usize;
    let seed = r.u64()?;
    let beta = r.f64()?;
    let alpha_end = r.f64()?;
    let ramp_epochs = r.f64()?;
    let lr = r.f64()?;
    let clip = r.f64()?;
    let pretrain_fraction = r.f64()?;

    let epoch = r.u64()?;
    let step = r.u64()?;
    let acc_steps = r.u64()?;
    let acc_vec = r.f64s(5)?;
    let acc_sums = [acc_vec[0], acc_vec[1], acc_vec[2], acc_vec[3], acc_vec[4]];
    let acc_flags = r.u8()?;
    let best_score = r.f64()?;
    let best_epoch = r.u64()?;
    let pos_lo = r.u64()?;
    let pos_hi = r.u64()?;
    let rng_word_pos = (pos_lo as u128) | ((pos_hi as u128) << 64);

    let n_params = r.u64()? as usize;
    if n_params > (1 << 20) {
        return Err(corrupt("unreasonable parameter count"));
    }
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes()?).map_err(|_| corrupt("parameter name"))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(corrupt("trainable flag")),
        };
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| corrupt("parameter shape overflow"))?;
        let data = r.f64s(len)?;
        params.push((name, rows, cols, trainable, data));
    }

    let adam_t = r.u64()?;
    let clip_events = r.u64()?;
    let n_m = r.u64()? as usize;
    let mut adam_m = Vec::with_capacity(n_m);
    for _ in 0..n_m {
        let len = r.u64()? as usize;
        adam_m.push(r.f64s(len)?);
    }
    let n_v = r.u64()? as usize;
    let mut adam_v = Vec::with_capacity(n_v);
    for _ in 0..n_v {
        let len = r.u64()? as usize;
        adam_v.push(r.f64s(len)?);
    }

    let clusters = match r.u8()? {
        0 => None,
        1 => {
            let k = r.u64()? as usize;
            let d = r.u64()? as usize;
            let data = r.f64s(k * d)?;
            Some(ClusterSet::new(Tensor::matrix(k, d, data)?)?)
        }
        _ => return Err(corrupt("cluster flag")),
    };

    // Trailing garbage means the file is not what we wrote.
    let mut probe = [0u8; 1];
    if r.0.read(&mut probe)? != 0 {
        return Err(corrupt("trailing bytes"));
    }

    Ok(TrainState {
        vocab,
        embedding,
        hidden,
        latent,
        head_hidden,
        injection,
        dropout,
        flows,
        kernel,
        objective,
        epochs,
        steps_per_epoch,
        batch_size,
        seed,
        beta,
        alpha_end,
        ramp_epochs,
        lr,
        clip,
        pretrain_fraction,
        epoch,
        step,
        acc_steps,
        acc_sums,
        acc_flags,
        best_score,
        best_epoch,
        rng_word_pos,
        params,
        adam_t,
        adam_m,
        adam_v,
        clip_events,
        clusters,
    })
}

impl TrainState {
    /// The model shape stored in the header.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            embedding: self.embedding,
            hidden: self.hidden,
            latent: self.latent,
            head_hidden: self.head_hidden,
            injection: self.injection,
            dropout: self.dropout,
        }
    }
}
