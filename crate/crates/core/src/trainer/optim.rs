use super::config::TrainConfig;
use super::model::Model;
use crate::autograd::{Scalar, Tensor};
use crate::encoder::decays;
use crate::error::{Error, Result};

/// Linear warmup from 0 to the peak over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    linear_schedule(step, cfg.warmup_steps, cfg.total_steps, cfg.peak_lr)
}

/// Learning rate at `step` for a linear ramp over `w` steps followed by a
/// linear decay reaching 0 at `total`.
pub fn linear_schedule(step: u64, w: u64, total: u64, peak: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < w {
        return peak * step as f64 / w as f64;
    }
    peak * (total - step) as f64 / (total - w) as f64
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        AdamConfig {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moments for every leaf, in model walk order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Model<Tensor<T>>) -> Self {
        let zeros: Vec<Tensor<T>> = model.leaves().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of a flat parameter slice with bias correction at step
/// `t` (1-based) and decoupled weight decay when `decay` is set.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    hp: &AdamConfig,
    decay: bool,
) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    let wd = if decay { hp.weight_decay } else { 0.0 };
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g.as_f64();
        let mn = hp.beta1 * m.as_f64() + (1.0 - hp.beta1) * g;
        let vn = hp.beta2 * v.as_f64() + (1.0 - hp.beta2) * g * g;
        let update = (mn / c1) / ((vn / c2).sqrt() + hp.eps);
        let pv = p.as_f64();
        *p = T::from_f64(pv - lr * (update + wd * pv));
        *m = T::from_f64(mn);
        *v = T::from_f64(vn);
    }
}

/// Applies one Adam step to every leaf of `model`. `grads[j]` is the
/// gradient of leaf `j` in walk order (`None` means zero). Any non-finite
/// gradient aborts before a single weight is touched.
pub fn adam_step<T: Scalar>(
    model: &mut Model<Tensor<T>>,
    grads: &[Option<Vec<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
    hp: &AdamConfig,
) -> Result<()> {
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() || state.m.len() != names.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} leaves, {} gradients, {} moments", names.len(), grads.len(), state.m.len()),
        ));
    }
    for (name, g) in names.iter().zip(grads) {
        if let Some(g) = g {
            let bad = g.iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFinite(format!(
                    "gradient of `{name}` ({bad} of {} entries non-finite) at optimizer step {}",
                    g.len(),
                    state.step + 1
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step;
    let mut j = 0;
    let mut shape_error = None;
    model.visit_mut(&mut |name, p| {
        let zero;
        let g: &[T] = match &grads[j] {
            Some(g) => g,
            None => {
                zero = vec![T::zero(); p.len()];
                &zero
            }
        };
        if g.len() != p.len() || state.m[j].len() != p.len() {
            shape_error.get_or_insert_with(|| name.to_string());
        } else {
            let (m, v) = (state.m[j].data_mut(), state.v[j].data_mut());
            adam_update(p.data_mut(), g, m, v, t, lr, hp, decays(name));
        }
        j += 1;
    });
    match shape_error {
        Some(name) => Err(Error::shape("adam_step", format!("gradient shape mismatch for `{name}`"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::config::Variant;

    fn hp(wd: f64) -> AdamConfig {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: wd,
        }
    }

    #[test]
    fn schedule_corners() {
        let cfg = TrainConfig::paper(Variant::McBert);
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(10_000, &cfg), 1e-4);
        assert_eq!(lr_at(1_000_000, &cfg), 0.0);
        assert!((lr_at(5_000, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_at(505_000, &cfg) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_continuous_and_peaks_at_warmup() {
        let mut cfg = TrainConfig::desk(Variant::Electra);
        cfg.total_steps = 300;
        cfg.warmup_steps = 30;
        let lrs: Vec<f64> = (0..=300).map(|s| lr_at(s, &cfg)).collect();
        let max = lrs.iter().copied().fold(0.0, f64::max);
        assert_eq!(lrs[30], max);
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= cfg.peak_lr / 30.0 + 1e-15);
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_without_decay() {
        let mut p = vec![0.3f64, -1.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 1e-3, &hp(0.0), true);
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + eps).
        // The gap to lr · sign(g) is lr · eps / (|g| + eps), below 1e-9 once |g| ≥ 1.
        for &g in &[2.5f64, -1.5, 1e3, -0.7, 1e-3] {
            let mut p = vec![1.0f64];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            let lr = 1e-3;
            adam_update(&mut p, &[g], &mut m, &mut v, 1, lr, &hp(0.0), false);
            let exact = 1.0 - lr * g / (g.abs() + 1e-6);
            assert!((p[0] - exact).abs() < 1e-15, "g={g}: {} vs {exact}", p[0]);
            if g.abs() >= 1.0 {
                let hand = 1.0 - lr * g.signum();
                assert!((p[0] - hand).abs() < 1e-9, "g={g}: {} vs {hand}", p[0]);
            }
        }
    }

    #[test]
    fn decoupled_decay_skips_biases_and_norms() {
        let cfg = TrainConfig::desk(Variant::Roberta);
        let mut model = super::super::model::init_model::<f64>(&cfg, 30).unwrap();
        let before = model.clone();
        let mut state = OptimizerState::new(&model);
        let grads = vec![None; model.leaves().len()];
        adam_step(&mut model, &grads, &mut state, 1e-2, &hp(0.5)).unwrap();
        let after = model.named();
        for ((name, a), (_, b)) in after.iter().zip(before.named()) {
            if decays(name) {
                let expect: Vec<f64> = b.data().iter().map(|x| x - 1e-2 * 0.5 * x).collect();
                assert_eq!(a.data(), expect.as_slice(), "{name}");
            } else {
                assert_eq!(a.data(), b.data(), "{name}");
            }
        }
    }

    #[test]
    fn nan_gradient_aborts_without_touching_weights() {
        let cfg = TrainConfig::desk(Variant::Roberta);
        let mut model = super::super::model::init_model::<f32>(&cfg, 30).unwrap();
        let before = model.clone();
        let mut state = OptimizerState::new(&model);
        let mut grads: Vec<Option<Vec<f32>>> = model.leaves().iter().map(|t| Some(vec![0.1; t.len()])).collect();
        grads[3].as_mut().unwrap()[0] = f32::NAN;
        let err = adam_step(&mut model, &grads, &mut state, 1e-3, &hp(0.01)).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains(&model.named()[3].0));
        assert_eq!(model, before);
        assert_eq!(state.step, 0);
    }
}
