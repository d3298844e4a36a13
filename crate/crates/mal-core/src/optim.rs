//! Named parameter storage and the Adam optimizer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{MalError, Result};

/// One parameter with its gradient and Adam state, all shape-aligned.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Name-keyed parameter map. Iteration order is the name order, so every
/// traversal is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(MalError::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| MalError::Config(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| MalError::Config(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| MalError::Config(format!("unknown parameter {name}")))
    }

    /// Accumulate `delta` into the gradient of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| MalError::Config(format!("unknown parameter {name}")))?;
        if p.grad.shape() != delta.shape() {
            return Err(MalError::Shape(format!(
                "grad shape {:?} vs {:?} for {name}",
                delta.shape(),
                p.grad.shape()
            )));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    /// Accumulate a row delta into row `row` of the gradient of a 2-d
    /// parameter (embedding tables).
    pub fn accumulate_grad_row(&mut self, name: &str, row: usize, delta: &[f64]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| MalError::Config(format!("unknown parameter {name}")))?;
        let cols = p.grad.cols();
        if delta.len() != cols || row >= p.grad.rows() {
            return Err(MalError::Shape(format!(
                "row grad {row}x{} vs {:?} for {name}",
                delta.len(),
                p.grad.shape()
            )));
        }
        let slice = &mut p.grad.data_mut()[row * cols..(row + 1) * cols];
        for (g, d) in slice.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Zero the gradients of every parameter whose name matches, so the
    /// next optimizer step leaves those parameters untouched.
    pub fn zero_grads_matching(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            if pred(name) {
                p.grad.fill(0.0);
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn optimizer_step(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update over every parameter; consumes the
    /// accumulated gradients (they are left untouched, call
    /// [`ParamStore::zero_grads`] before the next batch).
    pub fn adam_step(&mut self, hyper: &AdamHyper) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(hyper.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(hyper.beta2, t as f64);
        for (name, p) in self.params.iter_mut() {
            for i in 0..p.value.len() {
                let g = p.grad.data()[i];
                if !g.is_finite() {
                    return Err(MalError::Numeric(format!("non-finite gradient in {name}")));
                }
                let m = hyper.beta1 * p.m.data()[i] + (1.0 - hyper.beta1) * g;
                let v = hyper.beta2 * p.v.data()[i] + (1.0 - hyper.beta2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[i] -= hyper.lr * m_hat / (libm::sqrt(v_hat) + hyper.eps);
            }
        }
        Ok(())
    }
}

/// Finite-difference gradient check.
///
/// `loss_fn` evaluates the model loss from parameter values alone;
/// `analytic` holds the gradients to verify, keyed like `store`. A random
/// 1% of coordinates (at least `min_coords`, default 50) is probed with
/// central differences of step `eps`; returns the max relative error with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    loss_fn: F,
    store: &mut ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    eps: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(MalError::Domain(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let total = store.num_scalars();
    let sample = (total / 100).max(50).min(total);
    let mut rng = crate::rng::CounterRng::new(seed).stream(0x6763, 0);

    // Flat coordinate space across parameters in name order.
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let sizes: Vec<usize> = names
        .iter()
        .map(|n| store.value(n).map(|t| t.len()))
        .collect::<Result<_>>()?;

    let mut max_rel = 0.0f64;
    for _ in 0..sample {
        let mut flat = rng.below(total as u64) as usize;
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let name = &names[which];
        let a = analytic
            .get(name)
            .ok_or_else(|| MalError::Config(format!("no analytic grad for {name}")))?
            .data()[flat];

        let orig = store.value(name)?.data()[flat];
        store.value_mut(name)?.data_mut()[flat] = orig + eps;
        let up = loss_fn(store)?;
        store.value_mut(name)?.data_mut()[flat] = orig - eps;
        let down = loss_fn(store)?;
        store.value_mut(name)?.data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * eps);

        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn first_adam_step_is_signed_lr() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        s.accumulate_grad("w", &Tensor::scalar(3.7)).unwrap();
        let h = AdamHyper::default();
        s.adam_step(&h).unwrap();
        let got = s.value("w").unwrap().data()[0];
        // Bias-corrected first step moves by ~lr against the gradient sign.
        assert!((got - (1.0 - h.lr)).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn zero_grad_zero_update() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(2.5)).unwrap();
        s.adam_step(&AdamHyper::default()).unwrap();
        assert_eq!(s.value("w").unwrap().data()[0], 2.5);
    }

    #[test]
    fn adam_deterministic_over_100_steps() {
        let run = || {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap())
                .unwrap();
            let h = AdamHyper::default();
            for step in 0..100 {
                s.zero_grads();
                let w = s.value("w").unwrap().data().to_vec();
                // grad of (w0^2 + w1^2)/2 plus a step-varying term
                let g = Tensor::from_vec(&[2], vec![w[0] + 0.01 * step as f64, w[1]]).unwrap();
                s.accumulate_grad("w", &g).unwrap();
                s.adam_step(&h).unwrap();
            }
            s.value("w").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_exact_for_linear() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        // loss = 2*w0 - 3*w1 + 0.5*w2
        let loss = |st: &ParamStore| {
            let w = st.value("w")?.data();
            Ok(2.0 * w[0] - 3.0 * w[1] + 0.5 * w[2])
        };
        let mut analytic = BTreeMap::new();
        analytic.insert(
            "w".to_string(),
            Tensor::from_vec(&[3], vec![2.0, -3.0, 0.5]).unwrap(),
        );
        let err = grad_check(loss, &mut s, &analytic, 1e-5, 1).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn grad_check_detects_wrong_grad() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(0.3)).unwrap();
        let loss = |st: &ParamStore| Ok(st.value("w")?.data()[0] * 4.0);
        let mut analytic = BTreeMap::new();
        analytic.insert("w".to_string(), Tensor::scalar(-4.0));
        let err = grad_check(loss, &mut s, &analytic, 1e-5, 1).unwrap();
        assert!(err > 1e-2, "err {err}");
    }
}
