/// Heavy-ball gradient descent: `v <- mu v + g`, `theta <- theta - eta v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub const DEFAULT_LR: f64 = 1e-2;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(num_params: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step_with_lr(params, grad, self.lr);
    }

    pub fn step_with_lr(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Momentum::new(2, 0.05, 0.9);
        let mut x = [3.0, -2.0];
        for _ in 0..500 {
            let g = [2.0 * x[0], 4.0 * x[1]];
            opt.step(&mut x, &g);
        }
        assert!(x[0].abs() < 1e-6 && x[1].abs() < 1e-6);
    }

    #[test]
    fn first_step_is_plain_gradient_descent() {
        let mut opt = Momentum::new(1, 0.1, 0.9);
        let mut x = [1.0];
        opt.step(&mut x, &[2.0]);
        assert!((x[0] - 0.8).abs() < 1e-15);
    }
}
