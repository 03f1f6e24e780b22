//! Library routines against straightforward dense re-implementations.

use graph_transfer::autodiff::Tape;
use graph_transfer::graph::{normalize_adjacency, Graph, Propagator};
use graph_transfer::losses::{contrastive_loss, domain_adversarial_loss, mine_lower_bound, supervised_loss};
use graph_transfer::nn::{classifier_logits, encode, gcn_forward, ViewInput};
use graph_transfer::params::{Architecture, ModelParams, Module, ParamId};
use graph_transfer::spectral::{lowrank_propagate, truncated_svd};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_graph(n: usize, f: usize, p: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    Graph::new(n, edges, gaussian(n, f, &mut rng), Some(labels), 3).unwrap()
}

/// `D^{-1/2} (A + I) D^{-1/2}` built entry by entry.
fn dense_normalized(g: &Graph) -> DMatrix<f64> {
    let n = g.num_nodes();
    let mut a = DMatrix::<f64>::identity(n, n);
    for &(i, j) in g.edges() {
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]).sqrt())
}

fn small_arch(input_dim: usize) -> Architecture {
    Architecture {
        input_dim,
        encoder_dims: vec![7, 5],
        num_classes: 3,
        classifier_hidden: 4,
        projector_hidden: 6,
        projector_dim: 3,
        discriminator_hidden: 4,
        mi_hidden: 4,
    }
}

#[test]
fn normalized_adjacency_matches_dense_construction() {
    let g = random_graph(30, 4, 0.15, 1);
    let op = normalize_adjacency(&g, true);
    let diff = op.to_dense().unwrap() - dense_normalized(&g);
    assert!(diff.amax() < 1e-14);
    assert!(op.is_symmetric(0.0));
}

#[test]
fn gcn_matches_dense_forward() {
    let g = random_graph(25, 6, 0.2, 2);
    let params = ModelParams::init(&small_arch(6), 9).unwrap();
    let a = dense_normalized(&g);
    let enc = params.module(Module::Encoder);
    let affine = |h: DMatrix<f64>, l: usize| {
        let mut z = &a * h * &enc[l].weight;
        for mut row in z.row_iter_mut() {
            row += &enc[l].bias;
        }
        z
    };
    let h1 = affine(g.features().clone(), 0).map(|x| x.max(0.0));
    let expected = affine(h1, 1);
    let got = gcn_forward(&normalize_adjacency(&g, true), g.features(), &params).unwrap();
    assert!((got - expected).amax() < 1e-12);
}

#[test]
fn full_rank_svd_reconstructs_operator() {
    let g = random_graph(40, 2, 0.1, 3);
    let op = normalize_adjacency(&g, true);
    let f = truncated_svd(&op, 40, 10, 4, 5).unwrap();
    assert!((f.reconstruct() - dense_normalized(&g)).amax() < 1e-10);
    let u_gram = f.u.transpose() * &f.u;
    assert!((u_gram - DMatrix::identity(40, 40)).amax() < 1e-10);
}

#[test]
fn lowrank_propagation_matches_dense_product() {
    let g = random_graph(60, 2, 0.08, 4);
    let f = truncated_svd(&normalize_adjacency(&g, true), 12, 10, 4, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = gaussian(60, 5, &mut rng);
    let mut dense = DMatrix::zeros(60, 60);
    for k in 0..12 {
        dense += f.u.column(k) * f.v.column(k).transpose() * f.s[k];
    }
    assert!((lowrank_propagate(&f, &h).unwrap() - dense * &h).amax() < 1e-12);
    assert!((f.propagate(&h).unwrap() - lowrank_propagate(&f, &h).unwrap()).amax() < 1e-12);
}

#[test]
fn singular_values_are_sorted_and_bounded_by_dense_values() {
    let g = random_graph(50, 2, 0.1, 8);
    let f = truncated_svd(&normalize_adjacency(&g, true), 8, 10, 4, 1).unwrap();
    let mut exact: Vec<f64> = dense_normalized(&g).singular_values().iter().copied().collect();
    exact.sort_by(|a, b| b.total_cmp(a));
    for k in 0..8 {
        assert!(f.s[k] <= exact[k] + 1e-10);
        assert!(f.s[k] >= 0.9 * exact[k]);
        if k > 0 {
            assert!(f.s[k] <= f.s[k - 1]);
        }
    }
}

#[test]
fn contrastive_loss_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h = gaussian(9, 4, &mut rng);
    let hh = gaussian(9, 4, &mut rng);
    let tau = 0.7;
    let cos = |a: usize, b: usize| {
        let (x, y) = (h.row(a), hh.row(b));
        x.dot(&y) / (x.norm() * y.norm())
    };
    let mut expected = 0.0;
    for i in 0..9 {
        let denom: f64 = (0..9).map(|j| (cos(i, j) / tau).exp()).sum();
        expected -= ((cos(i, i) / tau).exp() / denom).ln();
    }
    assert!((contrastive_loss(&h, &hh, tau).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn supervised_and_domain_losses_match_formulas() {
    let probs = DMatrix::from_row_slice(3, 2, &[0.9, 0.1, 0.2, 0.8, 0.5, 0.5]);
    let labels = [0, 0, 1];
    let expected = -(0.9f64.ln() + 0.2f64.ln()) / 2.0;
    assert!((supervised_loss(&probs, &labels, &[0, 1]).unwrap() - expected).abs() < 1e-12);

    let (ds, dt) = ([0.7, 0.6], [0.2, 0.4, 0.1]);
    let expected: f64 = -ds.iter().map(|p: &f64| p.ln()).sum::<f64>() - dt.iter().map(|p: &f64| (1.0 - p).ln()).sum::<f64>();
    assert!((domain_adversarial_loss(&ds, &dt).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn mine_bound_matches_formula() {
    let joint = [0.5, -0.2, 1.0, 0.3];
    let product = DMatrix::from_row_slice(4, 2, &[0.1, 0.4, -0.3, 0.2, 0.6, 0.0, 0.2, -0.1]);
    let mean_joint = joint.iter().sum::<f64>() / 4.0;
    let mean_exp = product.iter().map(|t: &f64| t.exp()).sum::<f64>() / 8.0;
    let expected = mean_joint - mean_exp.ln();
    assert!((mine_lower_bound(&joint, &product).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn tape_cross_entropy_gradient_matches_finite_differences() {
    let g = random_graph(12, 4, 0.3, 11);
    let op = normalize_adjacency(&g, true);
    let params = ModelParams::init(&small_arch(4), 3).unwrap();
    let labels = g.labels().unwrap().to_vec();
    let rows: Vec<usize> = (0..12).collect();
    let loss = |p: &ModelParams| {
        let mut tape = Tape::new(p);
        let view = ViewInput::new(&op, g.features()).unwrap();
        let h = encode(&mut tape, &view).unwrap();
        let z = classifier_logits(&mut tape, h).unwrap();
        let l = tape.softmax_cross_entropy(z, &labels, &rows).unwrap();
        (tape.scalar(l), tape.backward(l).unwrap())
    };
    let (_, grads) = loss(&params);
    let id = ParamId { module: Module::Encoder, layer: 0, bias: false };
    for k in 0..params.get(id).len() {
        let mut plus = params.clone();
        plus.get_mut(id)[k] += 1e-6;
        let mut minus = params.clone();
        minus.get_mut(id)[k] -= 1e-6;
        let numeric = (loss(&plus).0 - loss(&minus).0) / 2e-6;
        assert!((numeric - grads.get(id)[k]).abs() < 1e-6 * (1.0 + numeric.abs()));
    }
}

#[test]
fn frozen_modules_receive_no_gradient() {
    let g = random_graph(10, 4, 0.3, 12);
    let op = normalize_adjacency(&g, true);
    let params = ModelParams::init(&small_arch(4), 4).unwrap();
    let labels = g.labels().unwrap().to_vec();
    let mut tape = Tape::new(&params).freeze([Module::Encoder]);
    let view = ViewInput::new(&op, g.features()).unwrap();
    let h = encode(&mut tape, &view).unwrap();
    let z = classifier_logits(&mut tape, h).unwrap();
    let l = tape.softmax_cross_entropy(z, &labels, &[0, 1, 2]).unwrap();
    let grads = tape.backward(l).unwrap();
    assert_eq!(grads.module_norm(Module::Encoder), 0.0);
    assert!(grads.module_norm(Module::Classifier) > 0.0);
}
