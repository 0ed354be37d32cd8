use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// `U(−√(6/fan_in), +√(6/fan_in))` over `shape`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
}

/// He-uniform weight of a `[O, C, kh, kw]` convolution and its zero bias.
pub fn conv_params(out: usize, inp: usize, k: usize, rng: &mut SplitMix64) -> (Tensor, Tensor) {
    (
        he_uniform(&[out, inp, k, k], inp * k * k, rng),
        Tensor::zeros(&[out]),
    )
}

/// He-uniform weight of a `[O, I]` affine layer and its zero bias.
pub fn linear_params(out: usize, inp: usize, rng: &mut SplitMix64) -> (Tensor, Tensor) {
    (he_uniform(&[out, inp], inp, rng), Tensor::zeros(&[out]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_and_deterministic() {
        let a = he_uniform(&[10, 100], 24, &mut SplitMix64::new(5));
        let b = he_uniform(&[10, 100], 24, &mut SplitMix64::new(5));
        assert!(a.bit_eq(&b));
        let bound = 0.5;
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        assert!(a.data().iter().any(|v| v.abs() > 0.4));
    }

    #[test]
    fn biases_are_zero() {
        let (_, b) = conv_params(8, 3, 5, &mut SplitMix64::new(1));
        assert!(b.data().iter().all(|&v| v == 0.0));
    }
}
