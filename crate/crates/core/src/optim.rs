//! Adam with decoupled weight decay and SGD with momentum.
//!
//! Optimizer state serializes to a small `LOPT` container that stores every
//! value as raw `f64` bits, so checkpoints restore exactly.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ByteReader, Tensor};

const LOPT_MAGIC: &[u8; 4] = b"LOPT";
const LOPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    /// Learning rate 1e-4 and weight decay 1e-6, with the usual moment constants.
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    /// Momentum 0.99 and weight decay 5e-4; the learning rate is a
    /// desk-scale default, callers normally set their own.
    fn default() -> Self {
        SgdConfig {
            lr: 1e-3,
            momentum: 0.99,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    pub t: u64,
    pub velocity: Vec<Tensor>,
}

fn check_shapes(params: &[&mut Tensor], grads: &[Tensor], state: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::ShapeMismatch {
            axis: "parameter list",
            left: params.len(),
            right: grads.len(),
        });
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                axis: "parameter",
                left: p.len(),
                right: g.len(),
            });
        }
    }
    Ok(())
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| p.zeros_like()).collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl SgdState {
    pub fn new(config: SgdConfig, params: &[&Tensor]) -> Self {
        SgdState {
            config,
            t: 0,
            velocity: params.iter().map(|p| p.zeros_like()).collect(),
        }
    }
}

/// One bias-corrected Adam update. Weight decay is decoupled:
/// `θ ← θ − lr·wd·θ` is applied before the moment-based step.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    check_shapes(params, grads, &state.m)?;
    state.t += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut());
        for (((theta, &g), m), v) in iter {
            *theta -= c.lr * c.weight_decay * *theta;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// `v ← μv − lr·(g + wd·θ)`, then `θ ← θ + v`.
pub fn sgd_momentum_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut SgdState) -> Result<()> {
    check_shapes(params, grads, &state.velocity)?;
    state.t += 1;
    let c = state.config;
    for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let iter = p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut().iter_mut());
        for ((theta, &g), v) in iter {
            *v = c.momentum * *v - c.lr * (g + c.weight_decay * *theta);
            *theta += *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimState {
    Adam(AdamState),
    Sgd(SgdState),
}

impl OptimState {
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        match self {
            OptimState::Adam(s) => adam_step(params, grads, s),
            OptimState::Sgd(s) => sgd_momentum_step(params, grads, s),
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            OptimState::Adam(s) => s.t,
            OptimState::Sgd(s) => s.t,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LOPT_MAGIC);
        out.extend_from_slice(&LOPT_VERSION.to_le_bytes());
        let (kind, t, hyper, tensors): (u32, u64, Vec<f64>, Vec<&Tensor>) = match self {
            OptimState::Adam(s) => {
                let c = s.config;
                (
                    0,
                    s.t,
                    vec![c.lr, c.beta1, c.beta2, c.eps, c.weight_decay],
                    s.m.iter().chain(&s.v).collect(),
                )
            }
            OptimState::Sgd(s) => {
                let c = s.config;
                (1, s.t, vec![c.lr, c.momentum, c.weight_decay], s.velocity.iter().collect())
            }
        };
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&t.to_le_bytes());
        for h in hyper {
            out.extend_from_slice(&h.to_bits().to_le_bytes());
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != LOPT_MAGIC {
            return Err(Error::BadMagic {
                expected: "LOPT".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != LOPT_VERSION {
            return Err(Error::VersionMismatch {
                expected: LOPT_VERSION,
                found: version,
            });
        }
        let kind = r.u32()?;
        let t = r.u64()?;
        let n_hyper = match kind {
            0 => 5,
            1 => 3,
            _ => return Err(Error::Header(format!("unknown optimizer kind {kind}"))),
        };
        let hyper = (0..n_hyper).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::Header(format!("rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::ExtentOverflow(format!("{shape:?}")))?;
            if len.saturating_mul(8) > r.rest().len() {
                return Err(Error::Truncated {
                    needed: len.saturating_mul(8),
                    available: r.rest().len(),
                });
            }
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(shape, data)?);
        }
        if !r.rest().is_empty() {
            return Err(Error::Header(format!("{} trailing bytes", r.rest().len())));
        }
        match kind {
            0 => {
                if !count.is_multiple_of(2) {
                    return Err(Error::Header("odd Adam moment count".into()));
                }
                let v = tensors.split_off(count / 2);
                Ok(OptimState::Adam(AdamState {
                    config: AdamConfig {
                        lr: hyper[0],
                        beta1: hyper[1],
                        beta2: hyper[2],
                        eps: hyper[3],
                        weight_decay: hyper[4],
                    },
                    t,
                    m: tensors,
                    v,
                }))
            }
            _ => Ok(OptimState::Sgd(SgdState {
                config: SgdConfig {
                    lr: hyper[0],
                    momentum: hyper[1],
                    weight_decay: hyper[2],
                },
                t,
                velocity: tensors,
            })),
        }
    }
}
