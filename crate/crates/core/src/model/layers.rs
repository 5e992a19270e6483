use super::params::{init, Binding, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{RngState, RunningStats, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut RngState,
    ) -> Self {
        let w = init::kaiming_uniform(&[c_out, c_in, k, k], c_in * k * k, rng).requiring_grad();
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]).requiring_grad());
        Conv { weight, bias, padding: (k - 1) / 2 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(x, b.var(self.weight), b.var(self.bias), self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c]).requiring_grad()),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]).requiring_grad()),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[c])),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        store: &mut ParamStore<T>,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let mut mean = store.get(self.running_mean).data().to_vec();
        let mut var = store.get(self.running_var).data().to_vec();
        let out = tape.batch_norm2d(
            x,
            b.var(self.gamma),
            b.var(self.beta),
            RunningStats { mean: &mut mean, var: &mut var },
            training,
        );
        store.get_mut(self.running_mean).data_mut().copy_from_slice(&mean);
        store.get_mut(self.running_var).data_mut().copy_from_slice(&var);
        out
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut RngState) -> Self {
        let w = init::xavier_uniform(&[d_in, d_out], d_in, d_out, rng).requiring_grad();
        Linear {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]).requiring_grad()),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, b.var(self.weight), b.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d]).requiring_grad()),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]).requiring_grad()),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, b.var(self.gamma), b.var(self.beta))
    }
}
