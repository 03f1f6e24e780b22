use graph_transfer::alignment::{class_counts, sample_balanced, PriorDistribution, SamplingDomain};
use graph_transfer::graph::{induced_subgraph, normalize_adjacency, Graph};
use graph_transfer::nn::{gcn_forward, one_hot};
use graph_transfer::noise::{apply_uniform_noise, NoiseSpec};
use graph_transfer::params::{Architecture, ModelParams};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn graph_strategy() -> impl Strategy<Value = Graph> {
    (3usize..16).prop_flat_map(|n| {
        let edges = prop::collection::vec((0..n, 0..n), 0..3 * n);
        let feats = prop::collection::vec(-2.0f64..2.0, n * 3);
        let labels = prop::collection::vec(0usize..3, n);
        (Just(n), edges, feats, labels).prop_map(|(n, edges, feats, labels)| {
            Graph::new(n, edges, DMatrix::from_row_slice(n, 3, &feats), Some(labels), 3).unwrap()
        })
    })
}

fn arch() -> Architecture {
    Architecture {
        input_dim: 3,
        encoder_dims: vec![6, 4],
        num_classes: 3,
        classifier_hidden: 4,
        projector_hidden: 4,
        projector_dim: 2,
        discriminator_hidden: 4,
        mi_hidden: 4,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gcn_is_permutation_equivariant(g in graph_strategy(), seed in 0u64..1000) {
        let n = g.num_nodes();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(seed as usize % n);
        perm.swap(0, n - 1);
        let (pg, map) = induced_subgraph(&g, &perm).unwrap();
        prop_assert_eq!(&map, &perm);
        let params = ModelParams::init(&arch(), seed).unwrap();
        let h = gcn_forward(&normalize_adjacency(&g, true), g.features(), &params).unwrap();
        let ph = gcn_forward(&normalize_adjacency(&pg, true), pg.features(), &params).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let d = (ph.row(new) - h.row(old)).amax();
            prop_assert!(d < 1e-10);
        }
    }

    #[test]
    fn normalized_adjacency_has_unit_spectral_radius_bound(g in graph_strategy()) {
        let dense = normalize_adjacency(&g, true).to_dense().unwrap();
        let eig = dense.symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|l| l.abs() <= 1.0 + 1e-10));
        prop_assert!(eig.iter().any(|l| (l - 1.0).abs() < 1e-10));
    }

    #[test]
    fn induced_subgraph_preserves_internal_edges(g in graph_strategy(), mask in prop::collection::vec(any::<bool>(), 16)) {
        let keep: Vec<usize> = (0..g.num_nodes()).filter(|&i| mask[i]).collect();
        prop_assume!(!keep.is_empty());
        let (sub, map) = induced_subgraph(&g, &keep).unwrap();
        let mut expected: Vec<(usize, usize)> = g
            .edges()
            .iter()
            .filter(|(a, b)| keep.contains(a) && keep.contains(b))
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect();
        expected.sort();
        let mut got: Vec<(usize, usize)> = sub.edges().iter().map(|&(a, b)| (map[a].min(map[b]), map[a].max(map[b]))).collect();
        got.sort();
        prop_assert_eq!(got, expected);
        for (new, &old) in map.iter().enumerate() {
            prop_assert_eq!(sub.labels().unwrap()[new], g.labels().unwrap()[old]);
            prop_assert_eq!(sub.features().row(new), g.features().row(old));
        }
    }

    #[test]
    fn uniform_noise_never_keeps_a_flipped_label(labels in prop::collection::vec(0usize..4, 1..200), rate in 0.0f64..1.0, seed in any::<u64>()) {
        let rec = apply_uniform_noise(&labels, rate, 4, seed).unwrap();
        prop_assert_eq!(&rec.original, &labels);
        for i in 0..labels.len() {
            prop_assert_eq!(rec.flipped[i], rec.corrupted[i] != labels[i]);
        }
    }

    #[test]
    fn noise_outside_subset_is_untouched(labels in prop::collection::vec(0usize..3, 2..100), seed in any::<u64>()) {
        let subset: Vec<usize> = (0..labels.len()).step_by(2).collect();
        let rec = NoiseSpec::uniform(0.9, seed).apply(&labels, 3, Some(&subset)).unwrap();
        for i in (1..labels.len()).step_by(2) {
            prop_assert_eq!(rec.corrupted[i], labels[i]);
        }
    }

    #[test]
    fn balanced_batches_are_class_balanced(labels in prop::collection::vec(0usize..3, 30..120), per_class in 1usize..10, seed in any::<u64>()) {
        prop_assume!(class_counts(&labels, 3).iter().all(|&c| c >= per_class));
        let n = labels.len();
        let g = Graph::new(n, (1..n).map(|i| (i - 1, i)), DMatrix::zeros(n, 1), None, 3).unwrap();
        let pool: Vec<usize> = (0..n).collect();
        let dom = SamplingDomain { graph: &g, labels: &labels, pool: &pool };
        let prior = PriorDistribution { probs: vec![0.5, 0.3, 0.2] };
        let s = sample_balanced(&dom, &dom, &one_hot(&labels, 3), &prior, per_class, seed).unwrap();
        for counts in [&s.src_class_counts, &s.tgt_class_counts] {
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }
}
