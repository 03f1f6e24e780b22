use crate::params::{GradientBundle, ModelParams, Module};

/// Adam over the parameters of a fixed set of modules.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    modules: Vec<Module>,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, modules: &[Module], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            modules: modules.to_vec(),
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn modules(&self) -> &[Module] {
        &self.modules
    }

    /// Descends along `grads`; parameters outside this optimizer's modules are untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientBundle) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for id in params.ids() {
            if !self.modules.contains(&id.module) {
                continue;
            }
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            m.zip_apply(g, |mi, gi| *mi = b1 * *mi + (1.0 - b1) * gi);
            let v = self.v.get_mut(id);
            v.zip_apply(g, |vi, gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
            let (m, v) = (self.m.get(id), self.v.get(id));
            let p = params.get_mut(id);
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::{Architecture, ParamId};
    use nalgebra::DMatrix;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ModelParams::init(&Architecture::new(2, 2), 3).unwrap();
        let before = p.clone();
        let id = ParamId { module: Module::Classifier, layer: 1, bias: true };
        let mut tape = Tape::new(&before);
        let b = tape.param(id);
        let picked = tape.pick_per_row(b, &[0]).unwrap();
        let zero = tape.constant(DMatrix::zeros(1, 1));
        let loss = tape.mine_bound(picked, zero, &[1.0]).unwrap();
        let grads = tape.backward(loss).unwrap();

        let mut opt = Adam::new(&p, &[Module::Classifier], 0.01);
        opt.step(&mut p, &grads);
        assert!((p.get(id)[(0, 0)] - (before.get(id)[(0, 0)] - 0.01)).abs() < 1e-9);
        assert_eq!(p.get(id)[(0, 1)], before.get(id)[(0, 1)]);
        assert_eq!(p.encoder, before.encoder);
    }
}
