//! Weight initialization: He-uniform (fan-in) for conv layers feeding ReLU,
//! Xavier-uniform for gate kernels and layers feeding sigmoid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// He-uniform over a conv kernel (out, in, kh, kw).
pub fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

/// Xavier-uniform over a conv kernel (out, in, kh, kw).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let fan_out: usize = shape[0] * shape[2..].iter().product::<usize>();
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}
