//! Reusable layer definitions: layers hold [`VarId`]s into a model's
//! [`VarStore`] plus their fixed hyperparameters.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NodeId, Scalar, Tape, VarId, VarStore};

/// 3x3-style convolution layer with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: VarId,
    pub b: Option<VarId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal initialization: std = sqrt(2 / fan_in).
    #[allow(clippy::too_many_arguments)]
    pub fn init<A: Scalar, R: Rng>(
        store: &mut VarStore<A>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.w"), normal_array(rng, &[cout, cin, k, k], std));
        let b = bias.then(|| store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout]))));
        Self { w, b, stride, pad }
    }

    pub fn forward<A: Scalar>(
        &self,
        tape: &mut Tape<A>,
        store: &VarStore<A>,
        x: NodeId,
        trainable: bool,
    ) -> NodeId {
        let w = bind(tape, store, self.w, trainable);
        let y = tape.conv2d(x, w, self.stride, self.pad);
        match self.b {
            Some(b) => {
                let b = bind(tape, store, b, trainable);
                tape.bias_add(y, b)
            }
            None => y,
        }
    }
}

/// Fully connected layer on 1-d vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: VarId,
    pub b: VarId,
}

impl Linear {
    pub fn init<A: Scalar, R: Rng>(
        store: &mut VarStore<A>,
        rng: &mut R,
        name: &str,
        dim_in: usize,
        dim_out: usize,
    ) -> Self {
        let std = (2.0 / dim_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), normal_array(rng, &[dim_out, dim_in], std));
        let b = store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[dim_out])));
        Self { w, b }
    }

    pub fn forward<A: Scalar>(
        &self,
        tape: &mut Tape<A>,
        store: &VarStore<A>,
        x: NodeId,
        trainable: bool,
    ) -> NodeId {
        let w = bind(tape, store, self.w, trainable);
        let b = bind(tape, store, self.b, trainable);
        let y = tape.matvec(w, x);
        tape.add(y, b)
    }
}

fn bind<A: Scalar>(tape: &mut Tape<A>, store: &VarStore<A>, id: VarId, trainable: bool) -> NodeId {
    if trainable {
        tape.var(store, id)
    } else {
        tape.frozen(store, id)
    }
}

pub fn normal_array<A: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<A> {
    let dist = Normal::new(0.0f64, std).expect("valid normal");
    let data: Vec<A> = (0..shape.iter().product::<usize>())
        .map(|_| A::lit(dist.sample(rng)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data agree")
}
