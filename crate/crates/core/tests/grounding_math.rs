mod common;

use common::{assert_close, random_mat};
use eta_grounding::encoder::Encoding;
use eta_grounding::eta::{
    awakening_gradients, awakening_loss, delta_as_prediction, grounding_scores, normalize, predict_concepts,
    pseudo_alignment, ConfidenceVector, CpHead, DeltaNorm, GroundingHead, PseudoAlignment, LOG_FLOOR,
};
use eta_grounding::tape::Mat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn col_argmax(m: &Mat, k: usize) -> usize {
    let mut best = 0;
    for n in 1..m.nrows() {
        if m[[n, k]] > m[[best, k]] {
            best = n;
        }
    }
    best
}

proptest! {
    #[test]
    fn delta_is_gated_clamped_and_bounded(seed in any::<u64>(), n in 1usize..6, k in 1usize..6) {
        let mut r = rng(seed);
        let p = ConfidenceVector((0..k).map(|_| r.gen_range(0.0..1.0)).collect());
        let erased = Mat::from_shape_fn((n, k), |_| r.gen_range(0.0..1.0));
        let labels: Vec<bool> = (0..k).map(|_| r.gen_bool(0.5)).collect();
        let delta = pseudo_alignment(&p, &erased, &labels).unwrap();
        let m = delta.matrix();
        for ((i, j), &v) in m.indexed_iter() {
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v <= p.0[j]);
            if labels[j] {
                prop_assert_eq!(v, (p.0[j] - erased[[i, j]]).max(0.0));
            } else {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn columns_stay_stochastic_at_extreme_scores(seed in any::<u64>(), n in 1usize..7, k in 1usize..5) {
        let mut r = rng(seed);
        let g = Mat::from_shape_fn((n, k), |_| if r.gen_bool(0.5) { 1e4 } else { -1e4 } * r.gen_range(0.0..1.0));
        let a = normalize(&g);
        for col in a.matrix().columns() {
            prop_assert!(col.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            prop_assert!((col.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn moderate_scores_give_interior_probabilities(seed in any::<u64>(), n in 1usize..7, k in 1usize..5) {
        let g = random_mat(&mut rng(seed), n, k, 5.0);
        for col in normalize(&g).matrix().columns() {
            prop_assert!(col.iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!((col.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn per_column_shift_leaves_alpha_unchanged(seed in any::<u64>(), n in 1usize..7, k in 1usize..5) {
        let mut r = rng(seed);
        let g = random_mat(&mut r, n, k, 10.0);
        let shifts: Vec<f64> = (0..k).map(|_| r.gen_range(-50.0..50.0)).collect();
        let shifted = Mat::from_shape_fn((n, k), |(i, j)| g[[i, j]] + shifts[j]);
        let (a, b) = (normalize(&g), normalize(&shifted));
        for (x, y) in a.matrix().iter().zip(b.matrix().iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn positive_scaling_keeps_column_argmax(seed in any::<u64>(), n in 2usize..7, k in 1usize..5, s in 0.01f64..100.0) {
        let g = random_mat(&mut rng(seed), n, k, 3.0);
        let a = normalize(&g);
        let b = normalize(&(&g * s));
        for j in 0..k {
            prop_assert_eq!(col_argmax(a.matrix(), j), col_argmax(b.matrix(), j));
        }
    }

    #[test]
    fn loss_matches_double_loop(seed in any::<u64>(), n in 1usize..5, k in 1usize..5) {
        let mut r = rng(seed);
        let alpha = normalize(&random_mat(&mut r, n, k, 4.0));
        let delta = PseudoAlignment::from_matrix(Mat::from_shape_fn((n, k), |_| r.gen_range(0.0..1.0))).unwrap();
        let mut oracle = 0.0;
        for i in 0..n {
            for j in 0..k {
                oracle -= delta.matrix()[[i, j]] * alpha.matrix()[[i, j]].max(1e-12).ln();
            }
        }
        let got = awakening_loss(&alpha, &delta).unwrap();
        prop_assert!((got - oracle).abs() < 1e-8);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn softmax_and_sum_modes_are_column_normalized(seed in any::<u64>(), n in 1usize..6, k in 1usize..5) {
        let mut r = rng(seed);
        let m = Mat::from_shape_fn((n, k), |_| if r.gen_bool(0.3) { 0.0 } else { r.gen_range(0.0..1.0) });
        let delta = PseudoAlignment::from_matrix(m.clone()).unwrap();
        let soft = delta_as_prediction(&delta, DeltaNorm::Softmax);
        let sum = delta_as_prediction(&delta, DeltaNorm::Sum);
        for j in 0..k {
            prop_assert!((soft.column(j).sum() - 1.0).abs() < 1e-9);
            let mass = m.column(j).sum();
            let expect = if mass > 0.0 { 1.0 } else { 0.0 };
            prop_assert!((sum.column(j).sum() - expect).abs() < 1e-9);
        }
        prop_assert_eq!(delta_as_prediction(&delta, DeltaNorm::Raw), m);
    }
}

#[test]
fn confidence_drop_example() {
    let p = ConfidenceVector(vec![0.92]);
    let d = pseudo_alignment(&p, &Mat::from_elem((1, 1), 0.65), &[true]).unwrap();
    assert_close(d.matrix()[[0, 0]], 0.27, 1e-12);
}

#[test]
fn erasure_raising_confidence_gives_zero() {
    let p = ConfidenceVector(vec![0.9]);
    let d = pseudo_alignment(&p, &Mat::from_elem((1, 1), 0.95), &[true]).unwrap();
    assert_eq!(d.matrix()[[0, 0]], 0.0);
}

#[test]
fn unlabelled_concept_column_is_zero_whatever_the_confidences() {
    let p = ConfidenceVector(vec![0.99, 0.99]);
    let erased = Mat::from_shape_vec((2, 2), vec![0.0, 0.0, 0.1, 0.1]).unwrap();
    let d = pseudo_alignment(&p, &erased, &[false, true]).unwrap();
    assert!(d.matrix().column(0).iter().all(|v| *v == 0.0));
    assert!(d.matrix().column(1).iter().all(|v| *v > 0.8));
}

#[test]
fn predict_concepts_matches_scalar_sigmoid() {
    let mut r = rng(3);
    let enc = Encoding::new(random_mat(&mut r, 2, 5, 1.0), random_mat(&mut r, 3, 5, 1.0)).unwrap();
    let head = CpHead {
        w: random_mat(&mut r, 1, 5, 1.0),
    };
    let p = predict_concepts(&enc, &head).unwrap();
    for k in 0..3 {
        let mut z = 0.0;
        for j in 0..5 {
            z += head.w[[0, j]] * enc.concept_reps[[k, j]];
        }
        assert_close(p.0[k], 1.0 / (1.0 + (-z).exp()), 1e-6);
    }
    assert_eq!(predict_concepts(&enc, &CpHead::zeros(5)).unwrap().0, vec![0.5; 3]);
    assert!(predict_concepts(&enc, &CpHead::zeros(4)).is_err());
}

#[test]
fn grounding_scores_match_triple_loop() {
    let mut r = rng(11);
    let d = 3;
    let enc = Encoding::new(random_mat(&mut r, 2, d, 1.0), random_mat(&mut r, 3, d, 1.0)).unwrap();
    let head = GroundingHead::random(d, 5);
    let g = grounding_scores(&enc, &head).unwrap();
    for n in 0..2 {
        for k in 0..3 {
            let mut s = 0.0;
            for i in 0..d {
                let mut we_e = 0.0;
                let mut wq_q = 0.0;
                for j in 0..d {
                    we_e += head.we[[i, j]] * enc.concept_reps[[k, j]];
                    wq_q += head.wq[[i, j]] * enc.token_reps[[n, j]];
                }
                s += we_e * wq_q;
            }
            assert_close(g[[n, k]], s / (d as f64).sqrt(), 1e-6);
        }
    }
}

#[test]
fn identity_head_on_equal_reps_gives_squared_norm() {
    let q = Mat::from_shape_vec((1, 4), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let enc = Encoding::new(q.clone(), q).unwrap();
    let g = grounding_scores(&enc, &GroundingHead::identity(4)).unwrap();
    assert_close(g[[0, 0]], 14.25 / 2.0, 1e-12);
    let zero_q = GroundingHead {
        we: Mat::eye(4),
        wq: Mat::zeros((4, 4)),
    };
    assert!(grounding_scores(&enc, &zero_q).unwrap().iter().all(|v| *v == 0.0));
    assert!(grounding_scores(&enc, &GroundingHead::identity(3)).is_err());
}

#[test]
fn normalize_examples() {
    let flat = normalize(&Mat::from_elem((4, 1), 2.5));
    assert!(flat.matrix().iter().all(|v| (v - 0.25).abs() < 1e-12));
    let big = normalize(&Mat::from_shape_vec((2, 1), vec![1000.0, 0.0]).unwrap());
    assert!((big.matrix()[[0, 0]] - 1.0).abs() < 1e-12 && big.matrix()[[1, 0]] < 1e-300);
}

#[test]
fn loss_examples() {
    let alpha = normalize(&Mat::zeros((2, 2)));
    let zero = PseudoAlignment::from_matrix(Mat::zeros((2, 2))).unwrap();
    assert_eq!(awakening_loss(&alpha, &zero).unwrap(), 0.0);
    let mut one = Mat::zeros((2, 2));
    one[[0, 0]] = 1.0;
    let one = PseudoAlignment::from_matrix(one).unwrap();
    assert_close(awakening_loss(&alpha, &one).unwrap(), 0.5f64.ln().abs(), 1e-12);
    // a vanishing alpha entry costs exactly the floor
    let spike = normalize(&Mat::from_shape_vec((2, 2), vec![-1e4, 0.0, 1e4, 0.0]).unwrap());
    assert_close(awakening_loss(&spike, &one).unwrap(), -LOG_FLOOR.ln(), 1e-9);
    assert!(awakening_loss(&normalize(&Mat::zeros((3, 2))), &one).is_err());
}

#[test]
fn sum_mode_examples() {
    let d = PseudoAlignment::from_matrix(Mat::from_shape_vec((2, 2), vec![0.2, 0.0, 0.2, 0.0]).unwrap()).unwrap();
    let s = delta_as_prediction(&d, DeltaNorm::Sum);
    assert_eq!(s.column(0).to_vec(), vec![0.5, 0.5]);
    assert_eq!(s.column(1).to_vec(), vec![0.0, 0.0]);
}

/// Central differences on every entry of both head matrices.
#[test]
fn analytic_gradient_matches_finite_differences() {
    let d = 8;
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let enc = Encoding::new(random_mat(&mut r, 3, d, 1.0), random_mat(&mut r, 3, d, 1.0)).unwrap();
        let head = GroundingHead::random(d, seed);
        let delta = PseudoAlignment::from_matrix(Mat::from_shape_fn((3, 3), |_| r.gen_range(0.0..1.0))).unwrap();
        let grads = awakening_gradients(&enc, &head, &delta).unwrap();
        let loss_at =
            |h: &GroundingHead| awakening_loss(&normalize(&grounding_scores(&enc, h).unwrap()), &delta).unwrap();
        assert_close(grads.loss, loss_at(&head), 1e-12);
        let h = 1e-5;
        for which in 0..2 {
            let analytic = if which == 0 { &grads.we } else { &grads.wq };
            for i in 0..d {
                for j in 0..d {
                    let mut plus = head.clone();
                    let mut minus = head.clone();
                    let (p, m) = if which == 0 {
                        (&mut plus.we, &mut minus.we)
                    } else {
                        (&mut plus.wq, &mut minus.wq)
                    };
                    p[[i, j]] += h;
                    m[[i, j]] -= h;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let a = analytic[[i, j]];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "seed {seed} matrix {which} [{i},{j}]: {a} vs {fd}");
                }
            }
        }
    }
}
