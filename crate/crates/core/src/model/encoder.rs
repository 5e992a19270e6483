use super::layers::{BatchNorm, Conv};
use super::params::{Binding, ParamStore};
use crate::error::Result;
use crate::tensor::{RngState, Scalar, Tape, Var};

/// Residual convolution block: two 3x3 conv/BN/ReLU stages on the main path
/// plus a conv/BN shortcut, summed.
#[derive(Clone, Debug)]
pub struct ResConv {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub skip: Conv,
    pub skip_bn: BatchNorm,
}

impl ResConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        skip_kernel: usize,
        rng: &mut RngState,
    ) -> Self {
        ResConv {
            conv1: Conv::new(store, &format!("{name}.conv1"), c_in, c_out, 3, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), c_out),
            conv2: Conv::new(store, &format!("{name}.conv2"), c_out, c_out, 3, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c_out),
            skip: Conv::new(store, &format!("{name}.skip"), c_in, c_out, skip_kernel, rng),
            skip_bn: BatchNorm::new(store, &format!("{name}.skip_bn"), c_out),
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
        let h = self.conv1.forward(tape, b, x)?;
        let h = self.bn1.forward(tape, b, store, h, training)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, b, h)?;
        let h = self.bn2.forward(tape, b, store, h, training)?;
        let main = tape.relu(h);
        let s = self.skip.forward(tape, b, x)?;
        let s = self.skip_bn.forward(tape, b, store, s, training)?;
        tape.add(main, s)
    }
}
