//! Named variable storage and the Adam optimizer.

use ndarray::ArrayD;

use super::Scalar;

/// Handle to a variable in a [`VarStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns the learnable arrays of one model.
pub struct VarStore<A: Scalar> {
    names: Vec<String>,
    vars: Vec<ArrayD<A>>,
}

impl<A: Scalar> Default for VarStore<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Scalar> VarStore<A> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            vars: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<A>) -> VarId {
        self.names.push(name.into());
        self.vars.push(value);
        VarId(self.vars.len() - 1)
    }

    pub fn get(&self, id: VarId) -> &ArrayD<A> {
        &self.vars[id.0]
    }

    pub fn get_mut(&mut self, id: VarId) -> &mut ArrayD<A> {
        &mut self.vars[id.0]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn name(&self, id: VarId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (VarId, &str, &ArrayD<A>)> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| (VarId(i), self.names[i].as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.vars.iter().map(|v| v.len()).sum()
    }
}

/// Adam with bias correction; hyperparameters beyond the learning rate
/// use the conventional (0.9, 0.999, 1e-8).
pub struct Adam<A: Scalar> {
    pub lr: A,
    pub beta1: A,
    pub beta2: A,
    pub eps: A,
    t: i32,
    m: Vec<ArrayD<A>>,
    v: Vec<ArrayD<A>>,
}

impl<A: Scalar> Adam<A> {
    pub fn new(lr: A, store: &VarStore<A>) -> Self {
        Self {
            lr,
            beta1: A::lit(0.9),
            beta2: A::lit(0.999),
            eps: A::lit(1e-8),
            t: 0,
            m: store.vars.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: store.vars.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    /// Apply one update; `grads` must be in store order.
    pub fn step(&mut self, store: &mut VarStore<A>, grads: &[ArrayD<A>]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.t += 1;
        let one = A::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for i in 0..store.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            azip_inplace(m, g, |mi, gi| self.beta1 * mi + (one - self.beta1) * gi);
            azip_inplace(v, g, |vi, gi| self.beta2 * vi + (one - self.beta2) * gi * gi);
            let p = store.get_mut(VarId(i));
            for ((pi, &mi), &vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi = *pi - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn azip_inplace<A: Scalar>(dst: &mut ArrayD<A>, src: &ArrayD<A>, f: impl Fn(A, A) -> A) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d = f(*d, s);
    }
}
