//! Gradient-descent updates over [`Parameter`] sets.

use crate::tensor::{Element, Parameter, Tensor};

/// Plain stochastic gradient descent.
pub struct Sgd<E: Element> {
    pub lr: E,
}

impl<E: Element> Sgd<E> {
    pub fn new(lr: E) -> Self {
        Sgd { lr }
    }

    pub fn step(&mut self, params: &mut [&mut Parameter<E>]) {
        for p in params.iter_mut() {
            let grad = p.grad.data().to_vec();
            for (v, g) in p.value.data_mut().iter_mut().zip(grad) {
                *v -= self.lr * g;
            }
        }
    }
}

/// Adam with bias correction. Optimizer state is keyed by parameter
/// position, so the slice passed to `step` must keep a stable order.
pub struct Adam<E: Element> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    step_count: u32,
    first_moment: Vec<Tensor<E>>,
    second_moment: Vec<Tensor<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: E) -> Self {
        Adam {
            lr,
            beta1: E::lit(0.9),
            beta2: E::lit(0.999),
            eps: E::lit(1e-8),
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Parameter<E>]) {
        if self.first_moment.is_empty() {
            for p in params.iter() {
                self.first_moment.push(Tensor::zeros(p.value.shape().to_vec()));
                self.second_moment.push(Tensor::zeros(p.value.shape().to_vec()));
            }
        }
        assert_eq!(
            self.first_moment.len(),
            params.len(),
            "parameter set changed between Adam steps"
        );
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = E::one() - self.beta1.powi(t);
        let bc2 = E::one() - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for ((slot, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (E::one() - self.beta1) * g;
                *vi = self.beta2 * *vi + (E::one() - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *slot -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

pub fn zero_grads<E: Element>(params: &mut [&mut Parameter<E>]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}
