// Independent reference computations for the schedules and the optimizers.
// Shared with the acceptance suite of the command-line crate.

#![allow(dead_code)]

use da2s::optim::{cosine_lr, Adam, AdamConfig, Sgd};
use da2s::regularizers::{ScheduleKind, ScheduleSpec};
use da2s::Tensor;

pub const SCHEDULE_EPOCHS: usize = 50;
pub const SCHEDULE_TOLERANCE: f64 = 1e-12;
pub const TRACE_TOLERANCE: f64 = 1e-12;

/// The five control functions written out directly.
fn reference_schedule(kind: ScheduleKind, activation: usize, epoch: usize, total: usize) -> f64 {
    if epoch < activation {
        return 0.0;
    }
    let span = (total - 1 - activation) as f64;
    let t = if span == 0.0 { 1.0 } else { (epoch - activation) as f64 / span };
    let k: f64 = 5.0;
    match kind {
        ScheduleKind::Const => 1.0,
        ScheduleKind::Linear => t,
        ScheduleKind::Exp => (f64::exp(k * t) - 1.0) / (f64::exp(k) - 1.0),
        ScheduleKind::Log => f64::ln(1.0 + k * t) / f64::ln(1.0 + k),
        ScheduleKind::Step => {
            if t >= 0.5 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Every violated schedule property over the epoch grid, for activation
/// epochs 0, 8 and 25. Empty when all hold.
pub fn schedule_violations() -> Vec<String> {
    let total = SCHEDULE_EPOCHS;
    let mut out = Vec::new();
    for kind in ScheduleKind::ALL {
        for activation in [0, 8, 25] {
            let spec = ScheduleSpec::new(kind).activated_at(activation);
            let values: Vec<f64> = (0..total).map(|e| spec.value(e, total).unwrap() as f64).collect();
            let tag = format!("{kind:?} activation {activation}");
            for (e, &v) in values.iter().enumerate() {
                let want = reference_schedule(kind, activation, e, total);
                if (v - want).abs() > SCHEDULE_TOLERANCE {
                    out.push(format!("{tag}: epoch {e} gives {v}, reference {want}"));
                }
                if !(0.0..=1.0).contains(&v) {
                    out.push(format!("{tag}: epoch {e} value {v} outside [0, 1]"));
                }
                if e < activation && v != 0.0 {
                    out.push(format!("{tag}: epoch {e} before activation gives {v}"));
                }
                if e > 0 && v + SCHEDULE_TOLERANCE < values[e - 1] {
                    out.push(format!("{tag}: decreases at epoch {e}"));
                }
            }
            let last = values[total - 1];
            if (last - 1.0).abs() > SCHEDULE_TOLERANCE {
                out.push(format!("{tag}: final value {last}, expected 1"));
            }
            let first = values[activation];
            let want_first = if kind == ScheduleKind::Const { 1.0 } else { 0.0 };
            if (first - want_first).abs() > SCHEDULE_TOLERANCE {
                out.push(format!("{tag}: value at activation {first}, expected {want_first}"));
            }
        }
    }
    let step = ScheduleSpec::new(ScheduleKind::Step);
    if step.value(24, 50).unwrap() != 0.0 || step.value(25, 50).unwrap() != 1.0 {
        out.push("step does not switch between epochs 24 and 25".into());
    }
    out
}

pub const GRADS: [f64; 5] = [0.8, -0.35, 1.2, 0.05, -0.6];

/// Largest deviation between the library SGD and a scalar momentum trace.
pub fn sgd_trace_gap() -> f64 {
    let (lr, momentum, wd) = (0.25, 0.9, 3e-4);
    let mut theta = vec![Tensor::from_vec(vec![0.7])];
    let mut sgd = Sgd::new(&theta, momentum, wd);
    let (mut p, mut v) = (0.7f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for &g in &GRADS {
        sgd.step(&mut theta, &[Tensor::from_vec(vec![g as _])], lr).unwrap();
        v = momentum * v + g + wd * p;
        p -= lr * v;
        worst = worst.max((theta[0].data()[0] as f64 - p).abs());
    }
    worst
}

/// Largest deviation between the library Adam and a scalar trace.
pub fn adam_trace_gap() -> f64 {
    let config = AdamConfig::default();
    let (lr, b1, b2, wd, eps) = (3e-4f64, 0.5f64, 0.999f64, 1e-3f64, 1e-8f64);
    let mut params = vec![Tensor::from_vec(vec![-0.4])];
    let mut adam = Adam::new(&params, config);
    let (mut p, mut m, mut s) = (-0.4f64, 0.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for (t, &g) in GRADS.iter().enumerate() {
        adam.step(&mut params, &[Tensor::from_vec(vec![g as _])]).unwrap();
        let g = g + wd * p;
        m = b1 * m + (1.0 - b1) * g;
        s = b2 * s + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
        let s_hat = s / (1.0 - b2.powi(t as i32 + 1));
        p -= lr * m_hat / (s_hat.sqrt() + eps);
        worst = worst.max((params[0].data()[0] as f64 - p).abs());
    }
    worst
}

/// `lr(0)` under the default initial rate.
pub fn initial_lr() -> f64 {
    cosine_lr(0, 50, 0.25).unwrap() as f64
}
