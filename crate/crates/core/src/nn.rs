//! Forward passes of the encoder, classifier, projector, domain
//! discriminator and MI statistic network.
//!
//! Graph-building functions take a [`Tape`] so that the same code serves
//! training (with gradients) and inference (value only). The plain
//! `*_forward` functions wrap them for one-off evaluation.

use nalgebra::DMatrix;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Propagator;
use crate::params::{ModelParams, Module, ParamId};

/// One message-passing view of a graph with its first propagation cached.
///
/// The input features are constant, so `P X` is computed once and the first
/// layer becomes `(P X) W + b`.
pub struct ViewInput<'a> {
    pub propagator: &'a dyn Propagator,
    pub propagated_features: DMatrix<f64>,
}

impl<'a> ViewInput<'a> {
    pub fn new(propagator: &'a dyn Propagator, features: &DMatrix<f64>) -> Result<Self> {
        if features.nrows() != propagator.dim() {
            return Err(Error::Dimension(format!(
                "features have {} rows, propagator is {}-dimensional",
                features.nrows(),
                propagator.dim()
            )));
        }
        Ok(ViewInput {
            propagator,
            propagated_features: propagator.propagate(features)?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.propagator.dim()
    }
}

fn weight(module: Module, layer: usize) -> ParamId {
    ParamId { module, layer, bias: false }
}

fn bias(module: Module, layer: usize) -> ParamId {
    ParamId { module, layer, bias: true }
}

/// Graph convolution stack: `H_l = σ(P H_{l-1} W_l + b_l)`, ReLU on hidden
/// layers and a linear final layer. The same encoder weights serve every view.
pub fn encode<'a>(tape: &mut Tape<'a>, view: &ViewInput<'a>) -> Result<Var> {
    let layers = tape.params().encoder.len();
    if layers == 0 {
        return Err(Error::InvalidArgument("encoder has no layers".into()));
    }
    let px = tape.constant(view.propagated_features.clone());
    let w = tape.param(weight(Module::Encoder, 0));
    let mut h = tape.matmul(px, w)?;
    let b = tape.param(bias(Module::Encoder, 0));
    h = tape.add_row(h, b)?;
    for l in 1..layers {
        h = tape.relu(h);
        let w = tape.param(weight(Module::Encoder, l));
        let hw = tape.matmul(h, w)?;
        let phw = tape.propagate(view.propagator, hw)?;
        let b = tape.param(bias(Module::Encoder, l));
        h = tape.add_row(phw, b)?;
    }
    Ok(h)
}

/// Feed-forward stack with ReLU between layers and a linear output.
/// A module with no layers is the identity.
pub fn mlp(tape: &mut Tape<'_>, module: Module, x: Var) -> Result<Var> {
    let layers = tape.params().module(module).len();
    let mut h = x;
    for l in 0..layers {
        if l > 0 {
            h = tape.relu(h);
        }
        let w = tape.param(weight(module, l));
        let hw = tape.matmul(h, w)?;
        let b = tape.param(bias(module, l));
        h = tape.add_row(hw, b)?;
    }
    Ok(h)
}

pub fn classifier_logits(tape: &mut Tape<'_>, h: Var) -> Result<Var> {
    mlp(tape, Module::Classifier, h)
}

pub fn projector(tape: &mut Tape<'_>, h: Var) -> Result<Var> {
    mlp(tape, Module::Projector, h)
}

/// Discriminator logits on `[h, conditioning]`.
pub fn discriminator_logits(tape: &mut Tape<'_>, h: Var, conditioning: Var) -> Result<Var> {
    let x = tape.concat_cols(h, conditioning)?;
    mlp(tape, Module::Discriminator, x)
}

/// Statistic network on `[f, y]` for row-aligned `f` and `y`.
pub fn mi_statistic(tape: &mut Tape<'_>, f: Var, y: Var) -> Result<Var> {
    let x = tape.concat_cols(f, y)?;
    mlp(tape, Module::MiStatistic, x)
}

/// `T(f_i, e_c)` for every row `i` and every one-hot class `e_c`, as `N×C`.
///
/// The first layer's weight splits into a feature block and a label block;
/// a one-hot label selects one row of the label block, so each class column
/// costs one pass over the hidden layers.
pub fn mi_statistic_by_class(tape: &mut Tape<'_>, f: Var, num_classes: usize) -> Result<Var> {
    let layers = tape.params().mi_statistic.len();
    let dp = tape.value(f).ncols();
    let first = &tape.params().mi_statistic[0];
    if first.input_dim() != dp + num_classes {
        return Err(Error::Dimension(format!(
            "statistic input {} != {} + {}",
            first.input_dim(),
            dp,
            num_classes
        )));
    }
    let w = tape.param(weight(Module::MiStatistic, 0));
    let b = tape.param(bias(Module::MiStatistic, 0));
    let feature_rows: Vec<usize> = (0..dp).collect();
    let wf = tape.gather_rows(w, &feature_rows)?;
    let fw = tape.matmul(f, wf)?;
    let base = tape.add_row(fw, b)?;

    let mut columns: Option<Var> = None;
    for c in 0..num_classes {
        let wy = tape.gather_rows(w, &[dp + c])?;
        let mut h = tape.add_row(base, wy)?;
        for l in 1..layers {
            h = tape.relu(h);
            let w = tape.param(weight(Module::MiStatistic, l));
            let hw = tape.matmul(h, w)?;
            let b = tape.param(bias(Module::MiStatistic, l));
            h = tape.add_row(hw, b)?;
        }
        columns = Some(match columns {
            None => h,
            Some(prev) => tape.concat_cols(prev, h)?,
        });
    }
    columns.ok_or_else(|| Error::InvalidArgument("need at least one class".into()))
}

pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let m = row.max();
        row.apply(|x| *x = (*x - m).exp());
        let z = row.sum();
        row.unscale_mut(z);
    }
    p
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), num_classes, |i, c| f64::from(u8::from(labels[i] == c)))
}

pub fn gcn_forward(propagator: &dyn Propagator, x: &DMatrix<f64>, params: &ModelParams) -> Result<DMatrix<f64>> {
    let view = ViewInput::new(propagator, x)?;
    let mut tape = Tape::new(params);
    let h = encode(&mut tape, &view)?;
    Ok(tape.value(h).clone())
}

/// Row-stochastic class probabilities.
pub fn classifier_forward(h: &DMatrix<f64>, params: &ModelParams) -> Result<DMatrix<f64>> {
    let mut tape = Tape::new(params);
    let x = tape.constant(h.clone());
    let z = classifier_logits(&mut tape, x)?;
    Ok(softmax_rows(tape.value(z)))
}

pub fn projector_forward(h: &DMatrix<f64>, params: &ModelParams) -> Result<DMatrix<f64>> {
    let mut tape = Tape::new(params);
    let x = tape.constant(h.clone());
    let f = projector(&mut tape, x)?;
    Ok(tape.value(f).clone())
}

/// Probability that `[h, label_dist]` comes from the source domain.
pub fn discriminator_forward(h: &[f64], label_dist: &[f64], params: &ModelParams) -> Result<f64> {
    if let Some(&p) = label_dist.iter().find(|&&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidArgument(format!("label distribution entry {p} outside [0, 1]")));
    }
    let mut tape = Tape::new(params);
    let hv = tape.constant(DMatrix::from_row_slice(1, h.len(), h));
    let yv = tape.constant(DMatrix::from_row_slice(1, label_dist.len(), label_dist));
    let z = discriminator_logits(&mut tape, hv, yv)?;
    Ok(crate::losses::sigmoid(tape.scalar(z)))
}

pub fn mi_statistic_forward(f: &[f64], label_onehot: &[f64], params: &ModelParams) -> Result<f64> {
    let mut tape = Tape::new(params);
    let fv = tape.constant(DMatrix::from_row_slice(1, f.len(), f));
    let yv = tape.constant(DMatrix::from_row_slice(1, label_onehot.len(), label_onehot));
    let t = mi_statistic(&mut tape, fv, yv)?;
    Ok(tape.scalar(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SparseOperator;
    use crate::params::{Architecture, Dense};

    fn identity_op(n: usize) -> SparseOperator {
        SparseOperator::new(n, (0..n).map(|i| (i, i, 1.0)).collect()).unwrap()
    }

    fn zeroed(arch: &Architecture) -> ModelParams {
        ModelParams::init(arch, 0).unwrap().zeros_like()
    }

    #[test]
    fn zero_params_give_zero_or_neutral_outputs() {
        let arch = Architecture::new(3, 4);
        let p = zeroed(&arch);
        let x = DMatrix::from_fn(5, 3, |r, c| (r * 3 + c) as f64);
        let h = gcn_forward(&identity_op(5), &x, &p).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));

        let probs = classifier_forward(&h, &p).unwrap();
        assert!(probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(projector_forward(&h, &p).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(discriminator_forward(&[0.3; 16], &[0.25; 4], &p).unwrap(), 0.5);
        assert_eq!(mi_statistic_forward(&[1.0; 16], &[0.0, 1.0, 0.0, 0.0], &p).unwrap(), 0.0);
    }

    #[test]
    fn identity_single_layer_encoder() {
        let mut p = zeroed(&Architecture::new(3, 2));
        p.encoder = vec![Dense { weight: DMatrix::identity(3, 3), bias: DMatrix::zeros(1, 3) }];
        let x = DMatrix::from_fn(4, 3, |r, c| r as f64 - 0.5 * c as f64);
        assert_eq!(gcn_forward(&identity_op(4), &x, &p).unwrap(), x);
        assert!(gcn_forward(&identity_op(5), &x, &p).is_err());
    }

    #[test]
    fn identity_projector_passes_through() {
        let mut p = zeroed(&Architecture::new(3, 2));
        p.projector = vec![Dense { weight: DMatrix::identity(4, 4), bias: DMatrix::zeros(1, 4) }];
        let h = DMatrix::from_fn(3, 4, |r, c| (r as f64) * 0.1 - c as f64);
        assert_eq!(projector_forward(&h, &p).unwrap(), h);
    }

    #[test]
    fn saturating_discriminator_and_constant_statistic() {
        let arch = Architecture::new(3, 2);
        let mut p = zeroed(&arch);
        p.discriminator.last_mut().unwrap().bias[(0, 0)] = 40.0;
        let d = discriminator_forward(&[0.1; 16], &[1.0, 0.0], &p).unwrap();
        assert!(d > 1.0 - 1e-12 && d <= 1.0);
        assert!(discriminator_forward(&[0.1; 16], &[1.5, 0.0], &p).is_err());

        p.mi_statistic.last_mut().unwrap().bias[(0, 0)] = -2.75;
        for f in [[0.0; 16], [3.0; 16]] {
            assert_eq!(mi_statistic_forward(&f, &[0.0, 1.0], &p).unwrap(), -2.75);
        }
    }

    #[test]
    fn classifier_softmax_definition() {
        let mut p = zeroed(&Architecture::new(3, 3));
        // Route h[0] straight to logit 0 through an identity hidden layer.
        p.classifier[0].weight[(0, 0)] = 1.0;
        p.classifier[1].weight[(0, 0)] = 1.0;
        let mut h = DMatrix::zeros(1, 16);
        h[(0, 0)] = 10.0;
        let probs = classifier_forward(&h, &p).unwrap();
        let e10 = 10f64.exp();
        assert!((probs[(0, 0)] - e10 / (e10 + 2.0)).abs() < 1e-15);
        assert!((probs.row(0).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn by_class_statistic_matches_concatenated_input() {
        let arch = Architecture::new(3, 3);
        let p = ModelParams::init(&arch, 4).unwrap();
        let f = DMatrix::from_fn(5, arch.projector_dim, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.2 - 0.4);
        let mut tape = Tape::new(&p);
        let fv = tape.constant(f.clone());
        let scores = mi_statistic_by_class(&mut tape, fv, 3).unwrap();
        let scores = tape.value(scores).clone();
        for i in 0..5 {
            for c in 0..3 {
                let mut y = [0.0; 3];
                y[c] = 1.0;
                let direct = mi_statistic_forward(f.row(i).transpose().as_slice(), &y, &p).unwrap();
                assert!((scores[(i, c)] - direct).abs() < 1e-12);
            }
        }
    }
}
