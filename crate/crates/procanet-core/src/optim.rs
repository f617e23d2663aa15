//! Adam with bias correction and a cosine-annealing schedule with warm
//! restarts.
//!
//! Update math runs in f64 regardless of the parameter scalar; moments are
//! stored back in the parameter type so optimizer state serializes exactly.
//! A step either applies completely or — on any non-finite or mismatched
//! gradient — not at all.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::KernelGrad;
use crate::error::{Error, Result};
use crate::model::{GradientSet, ProcaNet};
use crate::scalar::Scalar;
use crate::weights::{read_container, write_container, Entry, OPTIMIZER_MAGIC};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Base learning rate for training runs.
pub const BASE_LR: f64 = 1e-4;

struct Moments<F> {
    m_weight: Vec<F>,
    v_weight: Vec<F>,
    m_bias: Vec<F>,
    v_bias: Vec<F>,
}

impl<F: Scalar> Moments<F> {
    fn zeros(weight_len: usize, bias_len: usize) -> Self {
        Moments {
            m_weight: vec![F::zero(); weight_len],
            v_weight: vec![F::zero(); weight_len],
            m_bias: vec![F::zero(); bias_len],
            v_bias: vec![F::zero(); bias_len],
        }
    }
}

pub struct AdamState<F> {
    step: u64,
    slots: BTreeMap<String, Moments<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(net: &ProcaNet<F>) -> Self {
        let slots = net
            .named_kernels()
            .into_iter()
            .map(|(name, k)| (name, Moments::zeros(k.weight.len(), k.bias.len())))
            .collect();
        AdamState { step: 0, slots }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One in-place Adam update over every parameter.
///
/// All gradients are validated (keys, shapes, finiteness) before anything
/// mutates, so a rejected step leaves parameters, moments and the step
/// counter untouched.
pub fn adam_step<F: Scalar>(
    net: &mut ProcaNet<F>,
    grads: &GradientSet<F>,
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    // Validation pass: read-only.
    {
        let named = net.named_kernels();
        if grads.len() != named.len() {
            return Err(Error::GradientMismatch {
                name: "<set>".into(),
                detail: format!("{} gradients for {} parameters", grads.len(), named.len()),
            });
        }
        for (name, k) in &named {
            let g = grads.get(name).ok_or_else(|| Error::GradientMismatch {
                name: name.clone(),
                detail: "missing gradient".into(),
            })?;
            if g.d_weight.len() != k.weight.len() || g.d_bias.len() != k.bias.len() {
                return Err(Error::GradientMismatch {
                    name: name.clone(),
                    detail: format!(
                        "gradient sizes {}/{} vs parameter sizes {}/{}",
                        g.d_weight.len(),
                        g.d_bias.len(),
                        k.weight.len(),
                        k.bias.len()
                    ),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient for {name}"),
                });
            }
            if !state.slots.contains_key(name.as_str()) {
                return Err(Error::GradientMismatch {
                    name: name.clone(),
                    detail: "no optimizer slot".into(),
                });
            }
        }
    }

    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for (name, k) in net.named_kernels_mut() {
        let g = &grads[&name];
        let slot = state.slots.get_mut(&name).expect("validated above");
        update(&mut k.weight, &g.d_weight, &mut slot.m_weight, &mut slot.v_weight, lr, bc1, bc2);
        update(&mut k.bias, &g.d_bias, &mut slot.m_bias, &mut slot.v_bias, lr, bc1, bc2);
    }
    Ok(())
}

fn update<F: Scalar>(
    theta: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..theta.len() {
        let g = grad[i].as_f64();
        let mi = BETA1 * m[i].as_f64() + (1.0 - BETA1) * g;
        let vi = BETA2 * v[i].as_f64() + (1.0 - BETA2) * g * g;
        m[i] = F::from_f64(mi);
        v[i] = F::from_f64(vi);
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        theta[i] = F::from_f64(theta[i].as_f64() - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
    }
}

/// Build an all-zero gradient set matching a network's parameters.
pub fn zero_gradients<F: Scalar>(net: &ProcaNet<F>) -> GradientSet<F> {
    net.named_kernels()
        .into_iter()
        .map(|(name, k)| (name, KernelGrad::zeros_like(k)))
        .collect()
}

pub fn save_optimizer_state<F: Scalar>(state: &AdamState<F>, path: &Path) -> Result<()> {
    debug_assert!(state.step < (1 << 24), "step counter exceeds exact f32 range");
    let mut entries = vec![Entry::new("step", vec![1], vec![state.step as f32])];
    for (name, s) in &state.slots {
        for (prefix, data) in [
            ("m", &s.m_weight),
            ("v", &s.v_weight),
        ] {
            entries.push(Entry::new(
                format!("{prefix}.{name}.weight"),
                vec![data.len()],
                data.iter().map(|x| x.as_f32()).collect(),
            ));
        }
        for (prefix, data) in [("m", &s.m_bias), ("v", &s.v_bias)] {
            entries.push(Entry::new(
                format!("{prefix}.{name}.bias"),
                vec![data.len()],
                data.iter().map(|x| x.as_f32()).collect(),
            ));
        }
    }
    write_container(path, OPTIMIZER_MAGIC, &entries)
}

pub fn load_optimizer_state<F: Scalar>(path: &Path) -> Result<AdamState<F>> {
    let entries = read_container(path, OPTIMIZER_MAGIC)?;
    let parse_err = |line: String| Error::ManifestParse {
        path: path.to_path_buf(),
        line,
    };
    let mut it = entries.into_iter();
    let step_entry = it
        .next()
        .ok_or_else(|| parse_err("missing step entry".into()))?;
    if step_entry.name != "step" || step_entry.data.len() != 1 {
        return Err(parse_err(format!("expected step entry, found {:?}", step_entry.name)));
    }
    let step = step_entry.data[0] as u64;

    let mut slots: BTreeMap<String, Moments<F>> = BTreeMap::new();
    let mut rest = it.collect::<Vec<_>>().into_iter();
    while let Some(mw) = rest.next() {
        let name = mw
            .name
            .strip_prefix("m.")
            .and_then(|n| n.strip_suffix(".weight"))
            .ok_or_else(|| parse_err(format!("expected m.<name>.weight, found {:?}", mw.name)))?
            .to_string();
        let mut take = |expected: String| -> Result<Entry> {
            match rest.next() {
                Some(e) if e.name == expected => Ok(e),
                Some(e) => Err(parse_err(format!(
                    "expected {expected:?}, found {:?}",
                    e.name
                ))),
                None => Err(parse_err(format!("expected {expected:?}, manifest ended"))),
            }
        };
        let vw = take(format!("v.{name}.weight"))?;
        let mb = take(format!("m.{name}.bias"))?;
        let vb = take(format!("v.{name}.bias"))?;
        if vw.data.len() != mw.data.len() || vb.data.len() != mb.data.len() {
            return Err(parse_err(format!("moment sizes disagree for {name:?}")));
        }
        let cvt = |e: Entry| e.data.into_iter().map(F::from_f32).collect::<Vec<F>>();
        slots.insert(
            name,
            Moments {
                m_weight: cvt(mw),
                v_weight: cvt(vw),
                m_bias: cvt(mb),
                v_bias: cvt(vb),
            },
        );
    }
    Ok(AdamState { step, slots })
}

/// Cosine annealing with warm restarts: period i spans `t0 * t_mult^i`
/// optimizer steps; within a period the rate falls from `lr_max` to
/// `lr_min` along a half cosine, and each restart snaps back to `lr_max`.
/// Steps past the last period hold `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub t0: u64,
    pub t_mult: u64,
    pub restarts: u32,
}

impl SchedulerConfig {
    pub fn new(t0: u64, lr_max: f64, lr_min: f64) -> Self {
        SchedulerConfig {
            lr_max,
            lr_min,
            t0: t0.max(1),
            t_mult: 2,
            restarts: 10,
        }
    }

    /// Size the first period so all doubling periods fit inside the run:
    /// with 10 periods the whole schedule spans t0 * (2^10 - 1) = 1023 * t0.
    pub fn for_total_steps(total_steps: u64, lr_max: f64, lr_min: f64) -> Self {
        Self::new(total_steps.div_ceil(1023), lr_max, lr_min)
    }

    pub fn period_len(&self, i: u32) -> u64 {
        self.t0 * self.t_mult.pow(i)
    }

    /// Total steps covered by all periods.
    pub fn span(&self) -> u64 {
        (0..self.restarts).map(|i| self.period_len(i)).sum()
    }

    /// First step of period i.
    pub fn period_start(&self, i: u32) -> u64 {
        (0..i).map(|j| self.period_len(j)).sum()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let mut rem = step;
        for i in 0..self.restarts {
            let len = self.period_len(i);
            if rem < len {
                let phase = rem as f64 / len as f64;
                return self.lr_min
                    + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * phase).cos());
            }
            rem -= len;
        }
        self.lr_min
    }
}
