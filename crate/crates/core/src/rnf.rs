//! Kernel-regularized log-determinants.
//!
//! The raw planar log-determinant is damped by a kernel centered on the
//! nearest of a fixed set of latent cluster centers:
//!
//! ```text
//! regularized_logdet(z) = raw_logdet(z) + log K(z, c_k),   k = argmin ||z - c_k||^2
//! ```
//!
//! Two kernels are supported. The inverse-multiquadratic kernel sums over a
//! fixed scale ladder, `K(z, c) = sum_s C_s / (C_s + ||z - c||^2)` with
//! `C_s = 2 d s`; the Gaussian kernel is `K(z, c) = exp(-beta ||z - c||^2)`.
//! Both peak at the center, so the extra term is largest (zero for the
//! Gaussian) on-cluster and increasingly negative away from the data.
//!
//! The argmin is treated as locally constant: gradients flow through the
//! distance to the chosen center but not through the choice itself.

use crate::error::{CoreError, Result};
use crate::flows::{planar_forward, PlanarFlowVars};
use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Default scale ladder for the inverse-multiquadratic kernel.
pub const IMQ_SCALES: [f64; 7] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

/// Default Gaussian kernel sharpness.
pub const DEFAULT_BETA: f64 = 10.0;

/// Immutable set of `K` cluster centers in `R^d`, row per center.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSet {
    centers: Tensor,
}

impl ClusterSet {
    /// Centers must be pairwise distinct so the nearest-center assignment is
    /// stable under perturbation.
    pub fn new(centers: Tensor) -> Result<Self> {
        if centers.rows() == 0 {
            return Err(CoreError::EmptyClusters);
        }
        let k = centers.rows();
        for a in 0..k {
            for b in (a + 1)..k {
                if centers.row_slice(a) == centers.row_slice(b) {
                    return Err(CoreError::DuplicateCenters { a, b });
                }
            }
        }
        Ok(ClusterSet { centers })
    }

    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn center(&self, k: usize) -> &[f64] {
        self.centers.row_slice(k)
    }

    /// Binary artifact layout: two little-endian u64 (`K`, `d`) followed by
    /// `K * d` little-endian f64 in row-major order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&(self.k() as u64).to_le_bytes())?;
        f.write_all(&(self.dim() as u64).to_le_bytes())?;
        for v in self.centers.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut buf8 = [0u8; 8];
        f.read_exact(&mut buf8)?;
        let k = u64::from_le_bytes(buf8) as usize;
        f.read_exact(&mut buf8)?;
        let d = u64::from_le_bytes(buf8) as usize;
        if k == 0 || d == 0 || k.saturating_mul(d) > (1 << 28) {
            return Err(CoreError::Parse {
                what: format!("cluster file header K={k}, d={d}"),
            });
        }
        let mut data = Vec::with_capacity(k * d);
        for _ in 0..k * d {
            f.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        let mut trailing = [0u8; 1];
        if f.read(&mut trailing)? != 0 {
            return Err(CoreError::Parse {
                what: "trailing bytes after cluster data".to_string(),
            });
        }
        ClusterSet::new(Tensor::matrix(k, d, data)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    InverseMultiquadratic,
    Gaussian,
}

/// Kernel family plus its scale parameters, tied to the latent dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelConfig {
    pub kind: KernelKind,
    /// Scale ladder `s` for the inverse-multiquadratic kernel; each scale
    /// contributes `C_s = 2 d s`.
    pub scales: Vec<f64>,
    /// Sharpness of the Gaussian kernel.
    pub beta: f64,
    pub dim: usize,
}

impl KernelConfig {
    pub fn imq(dim: usize) -> Self {
        KernelConfig {
            kind: KernelKind::InverseMultiquadratic,
            scales: IMQ_SCALES.to_vec(),
            beta: DEFAULT_BETA,
            dim,
        }
    }

    pub fn gaussian(dim: usize) -> Self {
        KernelConfig {
            kind: KernelKind::Gaussian,
            scales: IMQ_SCALES.to_vec(),
            beta: DEFAULT_BETA,
            dim,
        }
    }
}

/// Index and squared distance of the nearest center; ties resolve to the
/// lowest index.
pub fn nearest_cluster(z: &[f64], clusters: &ClusterSet) -> Result<(usize, f64)> {
    if z.len() != clusters.dim() {
        return Err(CoreError::ShapeMismatch {
            op: "nearest_cluster",
            lhs: vec![1, z.len()],
            rhs: vec![clusters.k(), clusters.dim()],
        });
    }
    let mut best = (0usize, f64::INFINITY);
    for k in 0..clusters.k() {
        let d2 = sq_dist(z, clusters.center(k));
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    Ok(best)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Kernel value `K(z, c)` for a single point and center.
pub fn kernel_value(z: &[f64], center: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if z.len() != cfg.dim || center.len() != cfg.dim {
        return Err(CoreError::ShapeMismatch {
            op: "kernel_value",
            lhs: vec![1, z.len()],
            rhs: vec![1, center.len()],
        });
    }
    let d2 = sq_dist(z, center);
    Ok(kernel_of_sq_dist(d2, cfg))
}

pub(crate) fn kernel_of_sq_dist(d2: f64, cfg: &KernelConfig) -> f64 {
    match cfg.kind {
        KernelKind::InverseMultiquadratic => {
            let d = cfg.dim as f64;
            cfg.scales
                .iter()
                .map(|&s| {
                    let c = 2.0 * d * s;
                    c / (c + d2)
                })
                .sum()
        }
        KernelKind::Gaussian => (-cfg.beta * d2).exp(),
    }
}

/// Log kernel value against each row's nearest center, on the tape.
/// Returns `[B, 1]`; gradients flow through `z` (the chosen centers are
/// constants).
pub fn log_nearest_kernel(
    tape: &mut Tape,
    z: Var,
    clusters: &ClusterSet,
    cfg: &KernelConfig,
) -> Result<Var> {
    let zt = tape.value(z);
    let (b, d) = (zt.rows(), zt.cols());
    if d != clusters.dim() || d != cfg.dim {
        return Err(CoreError::ShapeMismatch {
            op: "log_nearest_kernel",
            lhs: zt.shape().to_vec(),
            rhs: vec![clusters.k(), clusters.dim()],
        });
    }
    let mut picked = Vec::with_capacity(b * d);
    for r in 0..b {
        let (k, _) = nearest_cluster(zt.row_slice(r), clusters)?;
        picked.extend_from_slice(clusters.center(k));
    }
    let centers = tape.constant(Tensor::matrix(b, d, picked)?);
    let diff = tape.sub(z, centers)?;
    let sq = tape.square(diff)?;
    let d2 = tape.row_sum(sq)?; // [B, 1]
    let kernel = match cfg.kind {
        KernelKind::InverseMultiquadratic => {
            let dd = cfg.dim as f64;
            let mut acc: Option<Var> = None;
            for &s in &cfg.scales {
                let c = 2.0 * dd * s;
                let denom = tape.add_scalar(d2, c)?;
                let inv = tape.recip(denom)?;
                let term = tape.mul_scalar(inv, c)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            acc.ok_or(CoreError::EmptyInput {
                what: "kernel scale ladder",
            })?
        }
        KernelKind::Gaussian => {
            let scaled = tape.mul_scalar(d2, -cfg.beta)?;
            tape.exp(scaled)?
        }
    };
    tape.log(kernel)
}

/// One planar flow with its log-determinant regularized by the nearest
/// cluster kernel. Returns `(z', raw_logdet, regularized_logdet)`, each
/// `[B, 1]` besides `z'`.
pub fn regularized_logdet(
    tape: &mut Tape,
    flow: &PlanarFlowVars,
    z: Var,
    clusters: &ClusterSet,
    cfg: &KernelConfig,
) -> Result<(Var, Var, Var)> {
    let (z_out, raw) = planar_forward(tape, flow, z)?;
    let log_k = log_nearest_kernel(tape, z, clusters, cfg)?;
    let reg = tape.add(raw, log_k)?;
    Ok((z_out, raw, reg))
}

/// Compose a stack of flows, accumulating both raw and regularized
/// log-determinants per sample. Each flow's kernel term is evaluated at that
/// flow's input point against the shared cluster set.
pub fn stack_regularized_forward(
    tape: &mut Tape,
    flows: &[PlanarFlowVars],
    z0: Var,
    clusters: &ClusterSet,
    cfg: &KernelConfig,
) -> Result<(Var, Var, Var)> {
    let rows = tape.value(z0).rows();
    let mut z = z0;
    let mut raw_total: Option<Var> = None;
    let mut reg_total: Option<Var> = None;
    for f in flows {
        let (z_next, raw, reg) = regularized_logdet(tape, f, z, clusters, cfg)?;
        z = z_next;
        raw_total = Some(match raw_total {
            None => raw,
            Some(a) => tape.add(a, raw)?,
        });
        reg_total = Some(match reg_total {
            None => reg,
            Some(a) => tape.add(a, reg)?,
        });
    }
    let zero = || Tensor::zeros(rows, 1);
    let raw_total = raw_total.unwrap_or_else(|| unreachable_zero(tape, zero()));
    let reg_total = reg_total.unwrap_or_else(|| unreachable_zero(tape, zero()));
    Ok((z, raw_total, reg_total))
}

fn unreachable_zero(tape: &mut Tape, t: Tensor) -> Var {
    tape.constant(t)
}

/// Lloyd's k-means with k-means++ seeding. Deterministic for a given seed;
/// stops at the assignment fixpoint or after `max_iters` sweeps. Empty
/// clusters keep their previous center.
pub fn gather_clusters(codes: &Tensor, k: usize, seed: u64) -> Result<ClusterSet> {
    gather_clusters_iters(codes, k, seed, 100)
}

pub fn gather_clusters_iters(
    codes: &Tensor,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterSet> {
    let (n, d) = (codes.rows(), codes.cols());
    if k == 0 {
        return Err(CoreError::EmptyClusters);
    }
    if n < k {
        return Err(CoreError::TooFewPoints {
            points: n,
            clusters: k,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers: Vec<f64> = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(codes.row_slice(first));
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| sq_dist(codes.row_slice(i), &centers[0..d]))
        .collect();
    while centers.len() < k * d {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All remaining mass is on already-chosen points (duplicates):
            // fall back to the first point at maximal distance, which is 0
            // everywhere, so any unchosen index works deterministically.
            rng.random_range(0..n)
        };
        let new_center = codes.row_slice(pick).to_vec();
        centers.extend_from_slice(&new_center);
        for (i, slot) in dist2.iter_mut().enumerate() {
            let nd = sq_dist(codes.row_slice(i), &new_center);
            if nd < *slot {
                *slot = nd;
            }
        }
    }

    // Lloyd sweeps.
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let snapshot = centers.clone();
        let next: Vec<usize> = par::indexed_map(n, k * d, |i| {
            let p = codes.row_slice(i);
            let mut best = (0usize, f64::INFINITY);
            for c in 0..k {
                let d2 = sq_dist(p, &snapshot[c * d..(c + 1) * d]);
                if d2 < best.1 {
                    best = (c, d2);
                }
            }
            best.0
        });
        let changed = next != assignment;
        assignment = next;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (j, &v) in codes.row_slice(i).iter().enumerate() {
                sums[c * d + j] += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..d {
                centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }

    // Pairwise-distinct centers are required downstream; nudge any exact
    // duplicates apart deterministically (possible only with duplicated
    // input points).
    for a in 0..k {
        for b in (a + 1)..k {
            if centers[a * d..(a + 1) * d] == centers[b * d..(b + 1) * d] {
                centers[b * d] = centers[b * d] + 1e-9 * (b as f64 + 1.0);
            }
        }
    }

    ClusterSet::new(Tensor::matrix(k, d, centers)?)
}
