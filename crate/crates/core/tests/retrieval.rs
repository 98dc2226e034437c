mod common;

use autograd::Tensor;
use common::{brute_force_order, check_retrieval_instance, random_retrieval, RetrievalInstance};
use pdanet::evaluator::{cmc, mean_average_precision, rank_gallery};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn seeded_instances_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        check_retrieval_instance(&random_retrieval(&mut rng)).unwrap();
    }
}

#[test]
fn brute_force_breaks_ties_by_index() {
    let order = brute_force_order(&[0.0], &[vec![1.0], vec![-1.0], vec![0.5]]);
    assert_eq!(order.iter().map(|o| o.0).collect::<Vec<_>>(), vec![2, 0, 1]);
}

fn instance(n_q: usize, n_g: usize, d: usize, ids: u32) -> impl Strategy<Value = RetrievalInstance> {
    (
        prop::collection::vec(-2i32..=2, n_q * d),
        prop::collection::vec(-2i32..=2, n_g * d),
        prop::collection::vec(0..ids, n_q),
        prop::collection::vec(0..ids, n_g - ids as usize),
    )
        .prop_map(move |(q, g, ql, extra)| {
            let mut gallery_labels: Vec<u32> = (0..ids).collect();
            gallery_labels.extend(extra);
            RetrievalInstance {
                queries: Tensor::from_vec(vec![n_q, d], q.into_iter().map(f64::from).collect()).unwrap(),
                gallery: Tensor::from_vec(vec![n_g, d], g.into_iter().map(f64::from).collect()).unwrap(),
                query_labels: ql,
                gallery_labels,
            }
        })
}

proptest! {
    #[test]
    fn ranking_and_metrics_match_brute_force(inst in (1usize..6, 4usize..20, 1usize..4, 1u32..4)
        .prop_flat_map(|(q, g, d, ids)| instance(q, g, d, ids))) {
        prop_assert_eq!(check_retrieval_instance(&inst), Ok(()));
    }

    #[test]
    fn metrics_ignore_translation_and_scaling(inst in (1usize..6, 4usize..20, 1usize..4, 1u32..4)
        .prop_flat_map(|(q, g, d, ids)| instance(q, g, d, ids)), shift in -3.0f64..3.0) {
        let (ql, gl) = (&inst.query_labels, &inst.gallery_labels);
        let base = rank_gallery(&inst.queries, &inst.gallery).unwrap();
        // Powers of two keep every distance exact, so tie order is preserved.
        let moved = |t: &Tensor<f64>| t.map(|v| 4.0 * v + shift.round());
        let moved = rank_gallery(&moved(&inst.queries), &moved(&inst.gallery)).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            prop_assert_eq!(&a.indices, &b.indices);
        }
        prop_assert_eq!(cmc(&base, ql, gl, 1).unwrap(), cmc(&moved, ql, gl, 1).unwrap());
        prop_assert_eq!(mean_average_precision(&base, ql, gl).unwrap(), mean_average_precision(&moved, ql, gl).unwrap());
    }

    #[test]
    fn perfect_features_score_one(ids in 1u32..6, per in 2usize..4) {
        let labels: Vec<u32> = (0..ids).flat_map(|i| std::iter::repeat_n(i, per)).collect();
        let feats = |l: &[u32]| Tensor::from_vec(vec![l.len(), 1], l.iter().map(|&i| f64::from(i) * 10.0).collect()).unwrap();
        let ranked = rank_gallery(&feats(&labels), &feats(&labels)).unwrap();
        prop_assert_eq!(cmc(&ranked, &labels, &labels, 1).unwrap(), 1.0);
        prop_assert_eq!(mean_average_precision(&ranked, &labels, &labels).unwrap(), 1.0);
    }
}
