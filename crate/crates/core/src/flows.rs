//! Planar normalizing flows.
//!
//! A planar flow maps `f(z) = z + u_hat * tanh(w . z + b)` and has the exact
//! rank-one log-determinant `log |1 + u_hat^T phi(z) w|` with
//! `phi(z) = tanh'(w . z + b)`. Stacks compose flows left to right and sum
//! the per-flow log-determinants.
//!
//! [`planar_forward`] uses the parameters it is handed verbatim. Invertible
//! training is obtained by routing the raw direction `u` through
//! [`project_u`] before the flow is applied; the training graph does this on
//! the tape so gradients reach the unconstrained parameters.

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Threshold below which `|1 + u^T phi(z) w|` counts as singular.
pub const SINGULARITY_EPS: f64 = 1e-12;

/// Threshold below which `||w||` makes the invertibility projection
/// undefined.
pub const DEGENERATE_W_EPS: f64 = 1e-12;

/// Parameters of one planar flow, stored as plain values. `u` and `w` are
/// `[1, d]` rows, `b` is a `[1, 1]` scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarFlowParams {
    pub u: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

impl PlanarFlowParams {
    pub fn new(u: Tensor, w: Tensor, b: Tensor) -> Result<Self> {
        if u.rows() != 1 || w.rows() != 1 || u.cols() != w.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "planar_flow_params",
                lhs: u.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if b.len() != 1 {
            return Err(CoreError::ShapeMismatch {
                op: "planar_flow_params",
                lhs: b.shape().to_vec(),
                rhs: vec![1, 1],
            });
        }
        Ok(PlanarFlowParams { u, w, b })
    }

    pub fn from_slices(u: &[f64], w: &[f64], b: f64) -> Result<Self> {
        Self::new(
            Tensor::row(u.to_vec())?,
            Tensor::row(w.to_vec())?,
            Tensor::scalar(b)?,
        )
    }

    /// Identity flow: `u = 0` leaves every input unchanged.
    pub fn identity(dim: usize) -> Self {
        PlanarFlowParams {
            u: Tensor::zeros(1, dim),
            w: {
                let mut w = Tensor::zeros(1, dim);
                w.data_mut_unchecked()[0] = 1.0;
                w
            },
            b: Tensor::zeros(1, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.u.cols()
    }
}

/// Tape-bound handles for one flow's parameters.
#[derive(Clone, Copy, Debug)]
pub struct PlanarFlowVars {
    pub u: Var,
    pub w: Var,
    pub b: Var,
}

/// A sequence of planar flows applied left to right, stored as values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowStack {
    flows: Vec<PlanarFlowParams>,
}

impl FlowStack {
    pub fn new(flows: Vec<PlanarFlowParams>) -> Result<Self> {
        if let Some(first) = flows.first() {
            let d = first.dim();
            for f in &flows {
                if f.dim() != d {
                    return Err(CoreError::ShapeMismatch {
                        op: "flow_stack",
                        lhs: vec![1, d],
                        rhs: vec![1, f.dim()],
                    });
                }
            }
        }
        Ok(FlowStack { flows })
    }

    pub fn empty() -> Self {
        FlowStack { flows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn flows(&self) -> &[PlanarFlowParams] {
        &self.flows
    }

    pub fn dim(&self) -> Option<usize> {
        self.flows.first().map(|f| f.dim())
    }

    /// Bind all parameters onto a tape as constants and run the stack on a
    /// batch of values; returns the image and the per-sample summed raw
    /// log-determinant.
    pub fn apply(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let z0 = tape.constant(z.clone());
        let vars = bind_stack(&mut tape, self, false);
        let (zt, logdet) = stack_forward(&mut tape, &vars, z0)?;
        Ok((tape.value(zt).clone(), tape.value(logdet).clone()))
    }
}

/// Put a stack's parameters on a tape. With `requires_grad` the leaves are
/// trainable; geometry and evaluation paths bind constants.
pub fn bind_stack(tape: &mut Tape, stack: &FlowStack, requires_grad: bool) -> Vec<PlanarFlowVars> {
    stack
        .flows()
        .iter()
        .map(|f| PlanarFlowVars {
            u: tape.leaf(f.u.clone(), requires_grad),
            w: tape.leaf(f.w.clone(), requires_grad),
            b: tape.leaf(f.b.clone(), requires_grad),
        })
        .collect()
}

/// Invertibility projection
/// `u_hat = u + (m(w . u) - w . u) * w / ||w||^2` with
/// `m(x) = -1 + softplus(x)`, which guarantees `u_hat . w >= -1`.
pub fn project_u(tape: &mut Tape, u: Var, w: Var) -> Result<Var> {
    let w_norm2 = {
        let sq = tape.square(w)?;
        tape.sum(sq)?
    };
    let norm = tape.value(w_norm2).item().sqrt();
    if norm < DEGENERATE_W_EPS {
        return Err(CoreError::DegenerateDirection { norm });
    }
    let wu = {
        let prod = tape.mul(u, w)?;
        tape.sum(prod)?
    };
    let m = {
        let sp = tape.softplus(wu)?;
        tape.add_scalar(sp, -1.0)?
    };
    let gap = tape.sub(m, wu)?;
    let coef = tape.div(gap, w_norm2)?;
    let correction = tape.matmul(coef, w)?; // [1,1] x [1,d]
    tape.add(u, correction)
}

/// One planar flow applied to a batch `z` of shape `[B, d]`.
///
/// Returns `(z', raw_logdet)` where `raw_logdet` is `[B, 1]`. The parameters
/// are used as given; see [`project_u`] for the invertibility projection.
/// Fails with [`CoreError::SingularFlow`] if any sample sits within
/// [`SINGULARITY_EPS`] of the singular set.
pub fn planar_forward(tape: &mut Tape, p: &PlanarFlowVars, z: Var) -> Result<(Var, Var)> {
    let d = tape.value(z).cols();
    if tape.value(p.u).cols() != d || tape.value(p.w).cols() != d {
        return Err(CoreError::ShapeMismatch {
            op: "planar_forward",
            lhs: tape.value(z).shape().to_vec(),
            rhs: tape.value(p.w).shape().to_vec(),
        });
    }
    let wt = tape.transpose(p.w)?;
    let a = tape.matmul(z, wt)?; // [B, 1]
    let pre = tape.add_row(a, p.b)?;
    let t = tape.tanh(pre)?;
    let z_out = {
        let outer = tape.matmul(t, p.u)?; // [B, 1] x [1, d]
        tape.add(z, outer)?
    };
    // phi = tanh'(w.z + b) = 1 - t^2
    let phi = {
        let t2 = tape.square(t)?;
        let neg = tape.mul_scalar(t2, -1.0)?;
        tape.add_scalar(neg, 1.0)?
    };
    let uw = {
        let prod = tape.mul(p.u, p.w)?;
        tape.sum(prod)?
    };
    let inner = {
        let scaled = tape.mul_row(phi, uw)?; // [B,1] * [1,1]
        tape.add_scalar(scaled, 1.0)?
    };
    let min_abs = tape
        .value(inner)
        .data()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v.abs()));
    if min_abs < SINGULARITY_EPS {
        return Err(CoreError::SingularFlow { min_abs });
    }
    let logdet = {
        let abs = tape.abs(inner)?;
        tape.log(abs)?
    };
    Ok((z_out, logdet))
}

/// Compose a stack of flows: `z_0 -> z_1 -> ... -> z_T`, summing raw
/// log-determinants per sample. An empty stack is the identity with a zero
/// log-determinant.
pub fn stack_forward(tape: &mut Tape, flows: &[PlanarFlowVars], z0: Var) -> Result<(Var, Var)> {
    let rows = tape.value(z0).rows();
    let mut z = z0;
    let mut total: Option<Var> = None;
    for f in flows {
        let (z_next, ld) = planar_forward(tape, f, z)?;
        z = z_next;
        total = Some(match total {
            None => ld,
            Some(acc) => tape.add(acc, ld)?,
        });
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(Tensor::zeros(rows, 1)),
    };
    Ok((z, total))
}

/// Value-level single-point Jacobian-vector product through one flow:
/// `J(z) v = v + u_hat (phi(z) (w . v))`. Exposed for the geometry module.
pub fn planar_jvp(p: &PlanarFlowParams, z: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (u, w, b) = (p.u.data(), p.w.data(), p.b.item());
    let a: f64 = w.iter().zip(z).map(|(&wi, &zi)| wi * zi).sum::<f64>() + b;
    let t = a.tanh();
    let phi = 1.0 - t * t;
    let wv: f64 = w.iter().zip(v).map(|(&wi, &vi)| wi * vi).sum();
    let z_out: Vec<f64> = z.iter().zip(u).map(|(&zi, &ui)| zi + ui * t).collect();
    let v_out: Vec<f64> = v
        .iter()
        .zip(u)
        .map(|(&vi, &ui)| vi + ui * phi * wv)
        .collect();
    (z_out, v_out)
}
