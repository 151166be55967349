mod common;

use common::{gaussian, grad_check, rng, GradFixture, Piece};
use mca::losses_grad::{
    consistency_kernel, entropy_kernel, instance_kernel, loss_total, prototype_kernel, semantic_kernel,
    soft_ce_kernel, Batch, EntropySign, LossConfig, Problem,
};
use ndarray::{array, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

fn softmax_rows(a: Array2<f64>) -> Array2<f64> {
    let mut a = a;
    for mut r in a.rows_mut() {
        let m = r.fold(f64::NEG_INFINITY, |x, &y| x.max(y));
        r.mapv_inplace(|v| (v - m).exp());
        let s = r.sum();
        r.mapv_inplace(|v| v / s);
    }
    a
}

#[test]
fn each_loss_matches_central_differences() {
    for seed in [3, 11] {
        for piece in Piece::ALL {
            let err = grad_check(seed, piece);
            assert!(err <= 1e-4, "seed {seed} {piece:?}: {err:e}");
        }
    }
}

#[test]
fn gradients_hold_without_bias_and_with_literal_sign() {
    let fx = GradFixture::new(5);
    let cfg = LossConfig {
        use_bias: false,
        entropy_sign: EntropySign::Literal,
        ..LossConfig::default()
    };
    let g = fx.grad(&cfg);
    let c = common::GRAD_C;
    let d = common::GRAD_D;
    // phi.bias and theta.bias blocks are zeroed
    assert!(g[c * d..c * d + c].iter().all(|&v| v == 0.0));
    assert!(g[2 * c * d + c..2 * c * d + 2 * c].iter().all(|&v| v == 0.0));
}

#[test]
fn instance_kernel_matches_direct_formula() {
    let mut r = rng(1);
    let q = softmax_rows(gaussian(6, 4, &mut r));
    let p = softmax_rows(gaussian(9, 4, &mut r));
    let pos: Vec<usize> = (0..6).map(|_| r.random_range(0..9)).collect();
    let tau = 0.3;
    let mut expected = 0.0;
    for i in 0..6 {
        let s = |l: usize| q.row(i).dot(&p.row(l)) / tau;
        let rest: f64 = (0..9).filter(|&l| l != pos[i]).map(|l| s(l).exp()).sum();
        expected += -(s(pos[i]) - rest.ln());
    }
    expected /= 6.0;
    let (v, _, _) = instance_kernel(q.view(), p.view(), &pos, tau).unwrap();
    assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
}

#[test]
fn prototype_kernel_is_instance_kernel_on_the_diagonal() {
    let mut r = rng(2);
    let a = softmax_rows(gaussian(4, 4, &mut r));
    let b = softmax_rows(gaussian(4, 4, &mut r));
    let (v, _, _) = prototype_kernel(a.view(), b.view(), 0.6).unwrap();
    let (w, _, _) = instance_kernel(a.view(), b.view(), &[0, 1, 2, 3], 0.6).unwrap();
    assert_eq!(v, w);
}

#[test]
fn small_kernels_by_hand() {
    let a = array![[0.5, 0.5], [0.9, 0.1]];
    let b = array![[1.0, 0.0], [0.5, 0.5]];
    let (v, _, _) = consistency_kernel(a.view(), b.view()).unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-15);

    let q = array![[0.2, 0.8], [0.6, 0.4]];
    let (e, _) = entropy_kernel(q.view(), 2.0, EntropySign::Balancing);
    let qbar: [f64; 2] = [0.4, 0.6];
    let expected = 2.0 * (qbar[0] * qbar[0].ln() + qbar[1] * qbar[1].ln());
    assert!((e - expected).abs() < 1e-15);
    let (lit, _) = entropy_kernel(q.view(), 2.0, EntropySign::Literal);
    assert_eq!(lit, -e);

    let (s, _) = semantic_kernel(q.view(), &[1, 0]);
    assert!((s - (-(0.8f64.ln() + 0.6f64.ln()) / 2.0)).abs() < 1e-15);

    let t = array![[0.5, 0.5]];
    let p = array![[0.25, 0.75]];
    let (ce, _) = soft_ce_kernel(t.view(), p.view());
    assert!((ce - (-(0.5 * 0.25f64.ln() + 0.5 * 0.75f64.ln()))).abs() < 1e-15);
}

#[test]
fn total_is_the_weighted_sum_of_its_parts() {
    let fx = GradFixture::new(9);
    let mut r = rng(90);
    for _ in 0..20 {
        let cfg = LossConfig {
            eta: r.random_range(0.0..20.0),
            lambda_a: r.random_range(0.0..10.0),
            lambda_pa: r.random_range(0.0..5.0),
            lambda_sa: r.random_range(0.0..5.0),
            tau_ia: r.random_range(0.05..1.0),
            tau_pa: r.random_range(0.05..1.0),
            ..LossConfig::default()
        };
        let l = fx.loss(&fx.params, &cfg);
        let expected = l.l_consistency
            + l.l_entropy_term
            + cfg.lambda_a
                * (l.l_instance + cfg.lambda_pa * l.l_prototype + cfg.lambda_sa * (l.l_semantic + l.l_attention));
        assert!((l.l_total - expected).abs() <= 1e-9, "{} vs {expected}", l.l_total);
    }
}

#[test]
fn losses_do_not_depend_on_batch_order() {
    let fx = GradFixture::new(4);
    let cfg = LossConfig::default();
    let base = fx.loss(&fx.params, &cfg);
    let mut r = rng(40);
    let mut order: Vec<usize> = (0..fx.batch.len()).collect();
    order.shuffle(&mut r);
    let pick = |v: &Vec<usize>| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let shuffled = Batch {
        rows: pick(&fx.batch.rows),
        img_partner: pick(&fx.batch.img_partner),
        txt_partner: pick(&fx.batch.txt_partner),
        txt_neighbors: order.iter().map(|&i| fx.batch.txt_neighbors[i].clone()).collect(),
        pseudo_labels: pick(&fx.batch.pseudo_labels),
        prototypes: fx.batch.prototypes.clone(),
    };
    let problem = Problem {
        images: &fx.images,
        words: &fx.words,
    };
    let l = loss_total(&problem, &shuffled, &fx.params, &cfg).unwrap();
    for (a, b) in [
        (l.l_consistency, base.l_consistency),
        (l.l_entropy_term, base.l_entropy_term),
        (l.l_instance, base.l_instance),
        (l.l_prototype, base.l_prototype),
        (l.l_semantic, base.l_semantic),
        (l.l_attention, base.l_attention),
        (l.l_total, base.l_total),
    ] {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn balancing_entropy_is_smallest_at_uniform() {
    let uniform = {
        let q = Array2::from_elem((1, 3), 1.0 / 3.0);
        entropy_kernel(q.view(), 1.0, EntropySign::Balancing).0
    };
    let steps = 30;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let (a, b) = (i as f64 / steps as f64, j as f64 / steps as f64);
            let q = array![[a, b, 1.0 - a - b]];
            let v = entropy_kernel(q.view(), 1.0, EntropySign::Balancing).0;
            assert!(v >= uniform - 1e-12, "({a}, {b}) gives {v} < {uniform}");
        }
    }
}
