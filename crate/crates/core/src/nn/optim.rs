use ndarray::ArrayD;

use crate::nn::network::Network;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    moments: Vec<Vec<Option<(ArrayD<f32>, ArrayD<f32>)>>>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update. `groups[k]` pairs a network with the gradients
    /// of its parameters; the group order must be the same on every call.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, groups: &mut [(&mut Network, Vec<Option<ArrayD<f32>>>)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        if self.moments.len() < groups.len() {
            self.moments.resize(groups.len(), Vec::new());
        }
        for (k, (net, grads)) in groups.iter_mut().enumerate() {
            let moments = &mut self.moments[k];
            if moments.len() < grads.len() {
                moments.resize(grads.len(), None);
            }
            for (i, (param, grad)) in net.params_mut().iter_mut().zip(grads.iter()).enumerate() {
                let Some(grad) = grad else { continue };
                let (m, v) = moments[i].get_or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
                let (b1, b2) = (self.beta1, self.beta2);
                ndarray::Zip::from(&mut *m).and(&mut *v).and(grad).for_each(|m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                });
                let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
                ndarray::Zip::from(param).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    *p -= lr * wd * *p;
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spec::{FeatureShape, LayerSpec, ModelGraphSpec};
    use crate::nn::graph::Graph;
    use crate::nn::network::Mode;
    use crate::rng::rng_for;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // With bias correction, the first Adam step is lr * sign(grad).
        let spec = ModelGraphSpec::new("d", FeatureShape::Vector { dim: 2 }, vec![LayerSpec::Dense { units: 1 }]).unwrap();
        let mut net = Network::new(&spec, &mut rng_for(0, "i", 0)).unwrap();
        let before: Vec<f32> = net.params()[0].iter().copied().collect();
        let grads = vec![
            Some(ArrayD::from_shape_vec(vec![2, 1], vec![0.5, -2.0]).unwrap()),
            None,
        ];
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut [(&mut net, grads)]);
        let after: Vec<f32> = net.params()[0].iter().copied().collect();
        assert!((before[0] - after[0] - 0.01).abs() < 1e-6);
        assert!((after[1] - before[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn fits_a_linear_map() {
        let spec = ModelGraphSpec::new("d", FeatureShape::Vector { dim: 2 }, vec![LayerSpec::Dense { units: 2 }]).unwrap();
        let mut net = Network::new(&spec, &mut rng_for(0, "i", 0)).unwrap();
        let x = ArrayD::from_shape_vec(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]).unwrap();
        let y = [0usize, 1, 1, 0];
        let mut opt = AdamW::new(0.1, 0.0);
        let mut last = f32::INFINITY;
        for _ in 0..200 {
            let mut g = Graph::new();
            let b = net.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let logits = net.forward(&mut g, &b, xv, Mode::Eval);
            let loss = g.cross_entropy(logits, &y);
            last = g.scalar(loss);
            let grads = g.backward(loss);
            let gr = net.gradients(&b, &grads);
            opt.step(&mut [(&mut net, gr)]);
        }
        assert!(last < 0.05, "loss {last}");
    }
}
