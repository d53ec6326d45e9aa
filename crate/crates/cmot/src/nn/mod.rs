//! Minimal dense-layer library in double precision: convolution, batch
//! normalization, affine maps and pooling, each with an explicit backward
//! pass, plus SGD with named parameter groups.
//!
//! Feature maps are `ndarray::Array4<f64>` indexed `(batch, channel, height,
//! width)`. Every layer's `forward` returns the output together with a cache;
//! `backward` consumes the cache, accumulates parameter gradients in place
//! and returns the input gradient.

pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod pool;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use optim::{Sgd, SgdConfig};

use ndarray::{Array4, ArrayD};

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Visit all trainable parameters under dotted names.
pub type ParamFn<'a> = dyn FnMut(&str, &mut Param) + 'a;

/// Visit all persistent state (parameter values plus normalization running
/// statistics) under dotted names, for checkpointing.
pub type StateFn<'a> = dyn FnMut(&str, &mut ArrayD<f64>) + 'a;

/// Rectified linear activation.
pub fn relu(x: &mut ArrayD<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn relu4(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Backward through ReLU given the *activated* output.
pub fn relu_backward(grad: &mut ArrayD<f64>, activated: &ArrayD<f64>) {
    for (g, y) in grad.iter_mut().zip(activated.iter()) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn relu4_backward(grad: &mut Array4<f64>, activated: &Array4<f64>) {
    for (g, y) in grad.iter_mut().zip(activated.iter()) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// FNV-1a over the exact bit patterns of an f64 slice; used for the
/// bit-identity freeze audits.
pub fn bits_digest(values: impl Iterator<Item = f64>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}
