use posdebias::corpus::Corpus;
use posdebias::metrics::Metric;
use posdebias::objective::LossConfig;
use posdebias::toy_model::{
    evaluate_relpos, finite_diff_check, run_experiment, sample_gradient, score_predictions, synth_corpus, train,
    ExperimentConfig, Prediction, SynthSpec, ToyModel, TrainConfig,
};

fn small(seed: u64, n_train: usize) -> posdebias::toy_model::SynthCorpora {
    synth_corpus(&SynthSpec {
        n_train,
        n_dev: 10,
        n_eval: 20,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

#[test]
fn fifty_epochs_on_twenty_samples_reduce_loss() {
    let d = small(4, 20);
    let model = ToyModel::for_corpora(&[&d.train], &[], 0).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let out = train(model, &d.train, &[], None, &cfg).unwrap();
    let first = &out.trace[0];
    let last = out.trace.last().unwrap();
    assert!(last.combined < 0.5 * first.combined, "{} -> {}", first.combined, last.combined);
    assert!(out.trace.iter().all(|t| t.grad_norm.is_finite()));
}

#[test]
fn gradient_check_degrades_with_large_epsilon() {
    let d = small(5, 10);
    let model = ToyModel::for_corpora(&[&d.train], &[], 1).unwrap().perturbed(0.5, 1);
    let s = &d.train.samples()[0];
    let aligned = [d.train.samples()[1].target.as_str()];
    let cfg = LossConfig::new(0.2).unwrap();
    let errs: Vec<f64> = [1e-5, 1e-2, 1.0]
        .iter()
        .map(|&eps| finite_diff_check(&model, s, &aligned, &cfg, eps, 50, 9).unwrap())
        .collect();
    assert!(errs[0] < 1e-4, "{errs:?}");
    assert!(errs[0] < errs[1] && errs[1] < errs[2], "{errs:?}");
    assert!(finite_diff_check(&model, s, &aligned, &cfg, 0.0, 1, 0).is_err());
}

#[test]
fn alpha_weights_the_two_gradients() {
    let d = small(6, 10);
    let model = ToyModel::for_corpora(&[&d.train], &[], 2).unwrap().perturbed(0.3, 2);
    let s = &d.train.samples()[0];
    let aligned = [d.train.samples()[2].target.as_str()];
    let g = |a: f64| sample_gradient(&model, s, &aligned, &LossConfig::new(a).unwrap()).unwrap();
    let (g0, g1, gm) = (g(0.0), g(1.0), g(0.3));
    for i in 0..g0.len() {
        assert!((gm[i] - (0.7 * g0[i] + 0.3 * g1[i])).abs() < 1e-12);
    }
}

#[test]
fn a_target_the_model_already_fits_has_near_zero_gradient() {
    let d = small(7, 10);
    let s = &d.train.samples()[0];
    let mut model = ToyModel::for_corpora(&[&d.train], &[], 3).unwrap();
    let cfg = TrainConfig {
        epochs: 400,
        learning_rate: 0.5,
        batch_size: 1,
        clip_norm: 100.0,
        ..TrainConfig::default()
    };
    let one = Corpus::new(d.train.task(), vec![s.clone()]).unwrap();
    model = train(model, &one, &[], None, &cfg).unwrap().model;
    let g = sample_gradient(&model, s, &[], &LossConfig::new(0.0).unwrap()).unwrap();
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm < 0.05, "gradient norm {norm}");
    assert_eq!(model.decode(s), s.target);
}

#[test]
fn perfect_predictions_score_one_everywhere() {
    let d = small(8, 10);
    for metric in [Metric::Accuracy, Metric::RougeL, Metric::Bleu2] {
        let preds: Vec<Prediction> = d
            .eval_biased
            .samples()
            .iter()
            .chain(d.eval_nonbiased.samples())
            .map(|s| Prediction {
                id: s.id.clone(),
                prediction: s.target.clone(),
                target: s.target.clone(),
                relpos: None,
                biased: Some(s.id.starts_with("eval-b")),
                score: metric.score(&s.target, &s.target).unwrap(),
            })
            .collect();
        let r = score_predictions(metric, preds).unwrap();
        assert_eq!(r.overall, Some(1.0));
        assert_eq!(r.biased, Some(1.0));
        assert_eq!(r.non_biased, Some(1.0));
    }
}

#[test]
fn relpos_eval_separates_the_synthetic_splits() {
    let d = small(9, 10);
    let model = ToyModel::for_corpora(&[&d.train], &[], 0).unwrap();
    let r = evaluate_relpos(&model, &[&d.eval_biased, &d.eval_nonbiased], Metric::Accuracy).unwrap();
    assert_eq!(r.biased_count, d.eval_biased.len());
    assert_eq!(r.non_biased_count, d.eval_nonbiased.len());
    for row in &r.by_relpos.rows {
        assert!(row.count > 0);
    }
}

#[test]
fn plain_fine_tuning_learns_the_position_shortcut() {
    let mut gap = 0.0;
    for seed in 0..5 {
        let mut cfg = ExperimentConfig::default();
        cfg.synth.biased_fraction = 1.0;
        cfg.synth.n_train = 200;
        cfg.synth.n_eval = 200;
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
        cfg.train.epochs = 40;
        cfg.train.loss = LossConfig::new(0.0).unwrap();
        let e = run_experiment(&cfg).unwrap().eval;
        gap += e.biased.unwrap() - e.non_biased.unwrap();
    }
    assert!(gap / 5.0 > 0.0, "mean gap {}", gap / 5.0);
}
