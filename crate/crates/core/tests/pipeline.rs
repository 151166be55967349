mod common;

use common::{gaussian, rng, unit_rows};
use mca::embedding_io::{l2_normalize, DatasetBundle, EmbeddingMatrix};
use mca::losses_grad::attention_outputs;
use mca::metrics::accuracy_hungarian;
use mca::model_core::{head_forward, image_prototypes, text_prototypes, ModelParams, SoftAssignment};
use mca::pseudo_label_bench::{label_all, label_mca, label_pmcp};
use mca::semantic_space::{build_semantic_space, kmeans_fit, SemanticSpace};
use mca::synthetic_gen::{generate, SynthConfig, SynthData};
use mca::trainer::{init_seed, train, train_with, TrainConfig, TrainContext, TrainState};
use ndarray::Array2;

fn synth(seed: u64, noise: f64, misalignment_rate: f64) -> SynthData<f64> {
    generate(&SynthConfig {
        seed,
        noise,
        misalignment_rate,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn space_for(data: &SynthData<f64>, cfg: &TrainConfig) -> SemanticSpace<f64> {
    build_semantic_space(&data.dataset, &data.vocabulary, &cfg.space_config()).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn kmeans_separates_three_gaussians() {
    let mut r = rng(8);
    let centers = unit_rows(gaussian(3, 16, &mut r)) * 3.0;
    let mut rows = Array2::zeros((300, 16));
    let mut truth = Vec::new();
    let noise = gaussian(300, 16, &mut r) * 0.3;
    for i in 0..300 {
        let k = i % 3;
        rows.row_mut(i).assign(&(&centers.row(k) + &noise.row(i)));
        truth.push(k);
    }
    let u = l2_normalize(&EmbeddingMatrix::new(rows).unwrap()).unwrap();
    let km = kmeans_fit(&u, 3, 1, 100, 1e-9).unwrap();
    let acc = accuracy_hungarian(&km.assignments, &truth).unwrap();
    assert!(acc >= 0.95, "acc {acc}");
}

#[test]
fn generator_labels_are_recovered_by_kmeans_without_noise() {
    for seed in 0..3 {
        let data = synth(seed, 1e-9, 0.2);
        let u = l2_normalize(&data.dataset.images).unwrap();
        let km = kmeans_fit(&u, 3, seed, 100, 1e-12).unwrap();
        let acc = accuracy_hungarian(&km.assignments, &data.truth.image_labels).unwrap();
        assert_eq!(acc, 1.0, "seed {seed}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = synth(1, 0.15, 0.2);
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    let space = space_for(&data, &cfg);
    let ctx = TrainContext::new(&data.dataset.images, &space, &cfg).unwrap();
    let init = ModelParams::init(3, ctx.images.d(), init_seed(1));
    let state = train_with(&ctx, &cfg, init.clone(), |_, _| Ok(())).unwrap();
    assert_eq!(state.params, init);
    assert!(state.history.len() >= 2);
}

#[test]
fn consistency_loss_falls_when_it_is_the_only_term() {
    let data = generate::<f64>(&SynthConfig {
        seed: 4,
        noise: 0.05,
        misalignment_rate: 0.0,
        n_img: 128,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 50,
        batch_size: 128,
        eta: 0.0,
        lambda_a: 0.0,
        lambda_pa: 0.0,
        lambda_sa: 0.0,
        seed: 4,
        ..TrainConfig::default()
    };
    let space = space_for(&data, &cfg);
    let ctx = TrainContext::new(&data.dataset.images, &space, &cfg).unwrap();
    let init = ModelParams::init(3, ctx.images.d(), init_seed(4));
    let state = train_with(&ctx, &cfg, init, |_, _| Ok(())).unwrap();
    let l: Vec<f64> = state.history.iter().map(|b| b.l_consistency).collect();
    assert!(l.len() >= 50);
    assert!(l[l.len() - 1] < l[0], "{} -> {}", l[0], l[l.len() - 1]);
    assert!(mean(&l[l.len() - 5..]) < mean(&l[..5]));
}

#[test]
fn default_training_loss_trends_down() {
    let data = synth(2, 0.15, 0.2);
    let cfg = TrainConfig {
        epochs: 40,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train(&data.dataset, &space_for(&data, &cfg), &cfg).unwrap();
    let l: Vec<f64> = out.state.history.iter().map(|b| b.l_total).collect();
    let tenth = (l.len() / 10).max(1);
    let (head, tail) = (mean(&l[..tenth]), mean(&l[l.len() - tenth..]));
    assert!(tail <= head, "first {head} last {tail}");
}

fn run_in_pool(threads: usize, data: &SynthData<f64>, cfg: &TrainConfig) -> TrainState<f64> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| train(&data.dataset, &space_for(data, cfg), cfg).unwrap().state)
}

#[test]
fn training_is_bit_identical_across_thread_counts() {
    let data = synth(6, 0.15, 0.2);
    let cfg = TrainConfig {
        epochs: 5,
        seed: 6,
        ..TrainConfig::default()
    };
    let a = run_in_pool(1, &data, &cfg);
    let b = run_in_pool(4, &data, &cfg);
    let bits = |s: &TrainState<f64>| s.params.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.snapshot(), b.snapshot());
}

#[test]
fn smp_labels_are_the_argmax_of_q_every_epoch() {
    let data = synth(3, 0.15, 0.2);
    let cfg = TrainConfig {
        epochs: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let space = space_for(&data, &cfg);
    let ctx = TrainContext::new(&data.dataset.images, &space, &cfg).unwrap();
    let init = ModelParams::init(3, ctx.images.d(), init_seed(3));
    train_with(&ctx, &cfg, init, |ctx, state| {
        let [smp, _, _] = label_all(ctx, &state.params)?;
        let q = head_forward(&state.params.image_head, ctx.images.data().view())?;
        for (i, row) in q.probs().rows().into_iter().enumerate() {
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = row.iter().position(|&v| v == best).unwrap();
            assert_eq!(smp[i], first);
        }
        Ok(())
    })
    .unwrap();
}

#[test]
fn mca_with_one_neighbor_follows_the_nearest_word() {
    let data = synth(5, 0.15, 0.2);
    let cfg = TrainConfig {
        k_s: 1,
        seed: 5,
        ..TrainConfig::default()
    };
    let space = space_for(&data, &cfg);
    let ctx = TrainContext::new(&data.dataset.images, &space, &cfg).unwrap();
    let params = ModelParams::init(3, ctx.images.d(), init_seed(5));
    let got = label_mca(&ctx, &params).unwrap();
    let p = head_forward(&params.text_head, ctx.words.data().view()).unwrap();
    let sims = ctx.images.data().dot(&ctx.words.data().t());
    for (i, row) in sims.rows().into_iter().enumerate() {
        let mut j = 0;
        for (k, &s) in row.iter().enumerate() {
            if s > row[j] {
                j = k;
            }
        }
        let pj = p.row(j);
        let best = pj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(got[i], pj.iter().position(|&v| v == best).unwrap(), "image {i}");
    }
    // the attention output itself is that word's p
    let neighbors = ctx.all_txt_neighbors();
    let pp = attention_outputs(ctx.images.data().view(), &ctx.words, &neighbors, &params).unwrap();
    for i in 0..ctx.n() {
        let diff = (&pp.row(i) - &p.row(neighbors[i][0])).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }
}

/// PMCP accuracy with prototypes built from the true clusters.
fn oracle_pmcp_acc(data: &SynthData<f64>, cfg: &TrainConfig) -> f64 {
    let space = space_for(data, cfg);
    let ctx = TrainContext::new(&data.dataset.images, &space, cfg).unwrap();
    let truth = &data.truth.image_labels;
    let q = SoftAssignment::<f64>::one_hot(truth, 3);
    let h = image_prototypes(&q, ctx.images.data().view()).unwrap();
    let protos = text_prototypes(&h, &ctx.words, ctx.k_p).unwrap();
    accuracy_hungarian(&label_pmcp(&ctx.images, &protos).unwrap(), truth).unwrap()
}

#[test]
fn pmcp_degrades_with_misalignment() {
    let cfg = TrainConfig::default();
    // past 0.5 the misaligned share is a majority and the matching relabels
    let rates = [0.0, 0.15, 0.3, 0.45];
    let accs: Vec<f64> = rates
        .iter()
        .map(|&rate| mean(&(0..5).map(|s| oracle_pmcp_acc(&synth(s, 0.15, rate), &cfg)).collect::<Vec<_>>()))
        .collect();
    for w in accs.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{accs:?}");
    }
    assert!(accs[0] - accs[rates.len() - 1] >= 0.2, "{accs:?}");
}

#[test]
fn evaluation_on_a_perfect_and_a_constant_predictor() {
    let data = synth(0, 0.15, 0.2);
    let truth = data.truth.image_labels.clone();
    let ds = DatasetBundle::new(data.dataset.images.clone(), Some(truth.clone()), 3).unwrap();
    // a head whose weight is the class mean direction predicts the truth on clean data
    let u = l2_normalize(&ds.images).unwrap();
    let q = SoftAssignment::<f64>::one_hot(&truth, 3);
    let h = image_prototypes(&q, u.data().view()).unwrap();
    let mut params = ModelParams::<f64>::zeros(3, u.d());
    params.image_head.weight.assign(&(h * 50.0));
    let rep = mca::trainer::evaluate(&params, &ds).unwrap();
    assert_eq!((rep.acc, rep.ari), (1.0, 1.0));
    assert!((rep.nmi - 1.0).abs() < 1e-12);

    let zeros = ModelParams::<f64>::zeros(3, u.d());
    let rep = mca::trainer::evaluate(&zeros, &ds).unwrap();
    assert!((rep.acc - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(rep.ari, 0.0);
}
