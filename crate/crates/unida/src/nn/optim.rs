//! Optimizers and training-progress schedules.

use ndarray::ArrayD;

use super::layers::Sequential;

/// Learning-rate decay `lr(p) = lr0 / (1 + alpha * p)^beta` over training
/// progress `p` in [0, 1], the schedule used with domain-adversarial
/// training (alpha = 10, beta = 0.75).
#[derive(Clone, Copy, Debug)]
pub struct InvDecay {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for InvDecay {
    fn default() -> Self {
        InvDecay { alpha: 10.0, beta: 0.75 }
    }
}

impl InvDecay {
    pub fn at(&self, lr0: f64, progress: f64) -> f64 {
        lr0 / (1.0 + self.alpha * progress).powf(self.beta)
    }
}

/// Gradient-reversal coefficient warm-up `2 / (1 + exp(-10 p)) - 1`,
/// ramping from 0 to 1 over training progress `p`.
pub fn grl_lambda(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

/// SGD with (optionally Nesterov) momentum and an optional decay schedule.
pub struct SgdMomentum {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub decay: Option<InvDecay>,
    velocity: Vec<ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(lr0: f64, momentum: f64, nesterov: bool, decay: Option<InvDecay>) -> Self {
        SgdMomentum { lr0, momentum, nesterov, decay, velocity: Vec::new() }
    }

    /// Apply one update to every parameter of `net`, reading each
    /// accumulated gradient and then clearing it. `progress` in [0, 1]
    /// drives the decay schedule.
    pub fn step(&mut self, net: &mut Sequential, progress: f64) {
        let lr = self
            .decay
            .map_or(self.lr0, |d| d.at(self.lr0, progress));
        let momentum = self.momentum;
        let nesterov = self.nesterov;
        let velocity = &mut self.velocity;
        let mut idx = 0usize;
        net.visit_params(&mut |p| {
            if velocity.len() <= idx {
                velocity.push(ArrayD::zeros(p.value.raw_dim()));
            }
            let v = &mut velocity[idx];
            // v <- momentum * v + grad ; update uses the Nesterov look-ahead
            ndarray::Zip::from(&mut *v)
                .and(&p.grad)
                .for_each(|v, &g| *v = momentum * *v + g);
            if nesterov {
                ndarray::Zip::from(&mut p.value)
                    .and(&*v)
                    .and(&p.grad)
                    .for_each(|x, &v, &g| *x -= lr * (momentum * v + g));
            } else {
                ndarray::Zip::from(&mut p.value)
                    .and(&*v)
                    .for_each(|x, &v| *x -= lr * v);
            }
            p.zero_grad();
            idx += 1;
        });
    }
}

/// Adam with the usual bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, net: &mut Sequential) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr;
        let eps = self.eps;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        net.visit_params(&mut |p| {
            if ms.len() <= idx {
                ms.push(ArrayD::zeros(p.value.raw_dim()));
                vs.push(ArrayD::zeros(p.value.raw_dim()));
            }
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            ndarray::Zip::from(&mut *m)
                .and(&p.grad)
                .for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut *v)
                .and(&p.grad)
                .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|x, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *x -= lr * mh / (vh.sqrt() + eps);
                });
            p.zero_grad();
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::default_mode;
    use crate::nn::layers::Linear;
    use crate::nn::Tensor;
    use ndarray::array;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grl_lambda_ramps_zero_to_one() {
        assert!(grl_lambda(0.0).abs() < 1e-12);
        assert!(grl_lambda(1.0) > 0.99);
        assert!(grl_lambda(0.5) > grl_lambda(0.25));
    }

    #[test]
    fn inv_decay_monotone() {
        let d = InvDecay::default();
        assert!((d.at(0.001, 0.0) - 0.001).abs() < 1e-15);
        assert!(d.at(0.001, 0.5) < 0.001);
        assert!(d.at(0.001, 1.0) < d.at(0.001, 0.5));
    }

    /// Both optimizers must reduce a simple quadratic.
    #[test]
    fn optimizers_descend_quadratic() {
        for use_adam in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut net = Sequential::new(vec![Box::new(Linear::new(2, 1, &mut rng))]);
            let x = Tensor::D2(array![[1.0, -0.5], [0.3, 2.0], [-1.0, 0.7]]);
            let target = array![[0.8], [-0.2], [0.4]];
            let mut sgd = SgdMomentum::new(0.05, 0.9, true, None);
            let mut adam = Adam::new(0.05);
            let mut losses = Vec::new();
            for step in 0..120 {
                let y = net.forward(&x, default_mode()).into_d2();
                let diff = &y - &target;
                losses.push((&diff * &diff).sum());
                let grad = Tensor::D2(2.0 * diff);
                net.backward(&grad, default_mode());
                if use_adam {
                    adam.step(&mut net);
                } else {
                    sgd.step(&mut net, step as f64 / 120.0);
                }
            }
            assert!(
                losses[losses.len() - 1] < 1e-3 * losses[0].max(1.0),
                "adam={use_adam}: {} -> {}",
                losses[0],
                losses[losses.len() - 1]
            );
        }
    }
}
