use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, 1e-3).unwrap();
        assert!(p.bit_eq(&before));
        assert!(st.m[0].data().iter().chain(st.v[0].data()).all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 1e-9]).unwrap();
        let mut st = AdamState::new(&[&p]);
        let lr = 1e-3;
        adam_step(&mut [&mut p], &[g.clone()], &mut st, lr).unwrap();
        for (d, gi) in p.data().iter().zip(g.data()) {
            // m̂ = g and v̂ = g² after one step
            let expect = -lr * gi / (gi.abs() + ADAM_EPS);
            assert!((d - expect).abs() < 1e-15);
            assert!(d.abs() <= lr);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[&p]);
        let r = adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, 1e-3);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
