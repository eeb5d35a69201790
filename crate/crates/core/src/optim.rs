//! Adam restricted to the reachable region of each parameter.
//!
//! A tier only reaches the leading slice of a shared adapter. Entries outside
//! the region keep their value and their moment estimates, and each entry
//! carries its own step count for bias correction.

use std::collections::BTreeMap;

use crate::autodiff::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Entries of a parameter an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    All,
    /// Rows `[0, r)` of a 2-D tensor.
    LeadingRows(usize),
    /// Columns `[0, r)` of a 2-D tensor.
    LeadingCols(usize),
}

impl Region {
    fn contains(self, idx: usize, cols: usize) -> bool {
        match self {
            Region::All => true,
            Region::LeadingRows(r) => idx / cols < r,
            Region::LeadingCols(r) => idx % cols < r,
        }
    }
}

/// One parameter to move in an optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct Update<T> {
    pub id: ParamId,
    pub lr: T,
    pub region: Region,
    /// Lower bound applied after the update.
    pub floor: Option<T>,
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    state: BTreeMap<ParamId, Moments<T>>,
    steps: u64,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            state: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Number of `step` calls so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one Adam step to every listed parameter using its current grad.
    pub fn step(&mut self, store: &mut ParamStore<T>, updates: &[Update<T>]) {
        self.steps += 1;
        for u in updates {
            let grad = store.grad(u.id).data().to_vec();
            let cols = store.value(u.id).cols();
            let n = grad.len();
            let st = self.state.entry(u.id).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                t: vec![0; n],
            });
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let value = store.value_mut(u.id).data_mut();
            for i in (0..n).filter(|&i| u.region.contains(i, cols)) {
                let g = grad[i];
                st.t[i] += 1;
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                let t = st.t[i] as i32;
                let m_hat = st.m[i] / (T::one() - b1.powi(t));
                let v_hat = st.v[i] / (T::one() - b2.powi(t));
                value[i] -= u.lr * m_hat / (v_hat.sqrt() + eps);
                if let Some(f) = u.floor {
                    value[i] = value[i].max(f);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), true).unwrap();
        let mut tape = crate::autodiff::Tape::new();
        let w = tape.param(&s, id);
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let p = tape.mul(w, c).unwrap();
        let l = tape.sum(p);
        tape.backward(l, &mut s).unwrap();
        let mut opt = Adam::new();
        opt.step(&mut s, &[Update { id, lr: 0.1, region: Region::All, floor: None }]);
        let v = s.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] - 1.1).abs() < 1e-6);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn regions_leave_tail_untouched() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("a", Tensor::full(&[3, 2], 1.0), true).unwrap();
        let mut tape = crate::autodiff::Tape::new();
        let a = tape.param(&s, id);
        let l = tape.sum(a);
        tape.backward(l, &mut s).unwrap();
        let mut opt = Adam::new();
        opt.step(&mut s, &[Update { id, lr: 0.5, region: Region::LeadingRows(1), floor: None }]);
        assert_eq!(&s.value(id).data()[2..], &[1.0; 4]);
        assert!(s.value(id).data()[0] < 1.0);
        opt.step(&mut s, &[Update { id, lr: 0.5, region: Region::LeadingCols(1), floor: Some(0.7) }]);
        let d = s.value(id).data();
        assert_eq!([d[1], d[3], d[5]], [d[1], 1.0, 1.0]);
        assert!(d[0] >= 0.7 && d[2] < 1.0);
    }
}
