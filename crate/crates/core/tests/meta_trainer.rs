//! Outer-loop algebra and hypergradients against finite differences.

use metamirror::autodiff::{Graph, Tensor};
use metamirror::inner::{gd_adapt, InnerConfig, SplitLoss};
use metamirror::meta::{
    evaluate, meta_step, meta_train, task_hypergradient, validation_loss, MetaConfig, MetaError,
    MetaParams, MethodTag, Metric,
};
use metamirror::model::{loss, Head, MlpSpec};
use metamirror::tasks::{pool_task, FewShotTask, Pool, Split, TaskFamilyConfig, TaskKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const METHODS: [MethodTag; 3] = [MethodTag::Maml, MethodTag::Metasgd, MethodTag::Mirror];

fn sinusoid_tasks(n: u64) -> Vec<FewShotTask> {
    let cfg = TaskFamilyConfig::sinusoid(5, 8);
    (0..n)
        .map(|i| pool_task(&cfg, Pool::MetaTrain, i).unwrap())
        .collect()
}

/// Checks every prior coordinate; returns the number checked.
fn hypergradient_matches_fd(
    params: &MetaParams,
    spec: &MlpSpec,
    task: &FewShotTask,
    inner: &InnerConfig,
) -> usize {
    let tg = task_hypergradient(params, spec, task, inner).unwrap();
    let analytic: Vec<f64> = tg
        .grads
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let base = params.flat();
    assert_eq!(analytic.len(), base.len());
    let h = 1e-4;
    let eval = |v: &[f64]| {
        let mut p = params.clone();
        p.set_flat(v);
        validation_loss(&p, spec, task, inner).unwrap()
    };
    for (j, a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus[j] += h;
        let mut minus = base.clone();
        minus[j] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        assert!(
            rel <= 1e-3 || (a - numeric).abs() <= 1e-9,
            "{} coordinate {j}: {a} vs {numeric}",
            params.method
        );
    }
    analytic.len()
}

#[test]
fn hypergradients_match_finite_differences() {
    let spec = MlpSpec::new(vec![1, 3, 1], Head::Regression).unwrap();
    let task = &sinusoid_tasks(1)[0];
    let inner = InnerConfig::new(3, 1e-2).unwrap();
    for method in METHODS {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = MetaParams::initial(method, &spec, &mut rng).unwrap();
        if method == MethodTag::Mirror {
            // Leave the zero-output start so every map parameter is exercised.
            let part = metamirror::model::partition_by_layer(&spec);
            params.map = metamirror::mirror::MapKind::BlockIaf(
                metamirror::mirror::BlockIaf::random(&part, &mut rng),
            );
        }
        let n = hypergradient_matches_fd(&params, &spec, task, &inner);
        assert!(n >= 10);
    }
}

#[test]
fn two_parameter_quadratic_model() {
    let spec = MlpSpec::new(vec![1, 1], Head::Regression).unwrap();
    let task = &sinusoid_tasks(1)[0];
    let inner = InnerConfig::new(1, 1e-2).unwrap();
    for method in METHODS {
        let params = MetaParams::initial(method, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        hypergradient_matches_fd(&params, &spec, task, &inner);
    }
}

#[test]
fn duplicated_batch_gives_the_same_update() {
    let spec = MlpSpec::new(vec![1, 8, 1], Head::Regression).unwrap();
    let tasks = sinusoid_tasks(3);
    let doubled: Vec<FewShotTask> = tasks.iter().chain(tasks.iter()).cloned().collect();
    let cfg = MetaConfig::default();
    for method in METHODS {
        let params = MetaParams::initial(method, &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (a, _) = meta_step(&params, &tasks, &spec, &cfg).unwrap();
        let (b, _) = meta_step(
            &params,
            &doubled,
            &spec,
            &MetaConfig {
                batch_size: 6,
                ..cfg.clone()
            },
        )
        .unwrap();
        let diff = a
            .flat()
            .iter()
            .zip(b.flat())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-10, "{method}: {diff}");
    }
}

#[test]
fn permuting_the_batch_leaves_the_update_unchanged() {
    let spec = MlpSpec::new(vec![1, 8, 1], Head::Regression).unwrap();
    let tasks = sinusoid_tasks(4);
    let reversed: Vec<FewShotTask> = tasks.iter().rev().cloned().collect();
    let cfg = MetaConfig::default();
    for method in METHODS {
        let params = MetaParams::initial(method, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (a, _) = meta_step(&params, &tasks, &spec, &cfg).unwrap();
        let (b, _) = meta_step(&params, &reversed, &spec, &cfg).unwrap();
        let diff = a
            .flat()
            .iter()
            .zip(b.flat())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{method}: {diff}");
    }
}

#[test]
fn maml_step_matches_a_hand_built_update() {
    let spec = MlpSpec::new(vec![1, 6, 1], Head::Regression).unwrap();
    let tasks = sinusoid_tasks(4);
    let cfg = MetaConfig::default();
    let params =
        MetaParams::initial(MethodTag::Maml, &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (next, _) = meta_step(&params, &tasks, &spec, &cfg).unwrap();

    let inner = InnerConfig::new(cfg.steps, cfg.alpha).unwrap();
    let mut sum = vec![0.0; spec.param_count()];
    for task in &tasks {
        let mut g = Graph::new();
        let phi0 = g.leaf(params.init.clone());
        let r = gd_adapt(
            phi0,
            &SplitLoss {
                spec: &spec,
                data: &task.train,
            },
            &inner,
            &mut g,
        )
        .unwrap();
        let l = loss(&spec, r.adapted, &task.val, &mut g).unwrap();
        let grad = g.grad(l, &[phi0], false).unwrap()[0];
        for (s, v) in sum.iter_mut().zip(g.value(grad).data()) {
            *s += v;
        }
    }
    let scale = cfg.beta * cfg.pool_size as f64 / tasks.len() as f64;
    for ((x, s), y) in params.init.data().iter().zip(&sum).zip(next.init.data()) {
        assert!((x - scale * s - y).abs() <= 1e-12);
    }
}

#[test]
fn training_is_deterministic_and_zero_iterations_is_identity() {
    let spec = MlpSpec::new(vec![1, 8, 1], Head::Regression).unwrap();
    let family = TaskFamilyConfig::sinusoid(5, 21);
    let sampler = |i: u64| -> Result<FewShotTask, MetaError> {
        Ok(pool_task(&family, Pool::MetaTrain, i).unwrap())
    };
    for method in METHODS {
        let init = MetaParams::initial(method, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let zero = MetaConfig {
            iterations: 0,
            ..MetaConfig::default()
        };
        assert_eq!(
            meta_train(init.clone(), &sampler, &spec, &zero, |_, _| {}).unwrap(),
            init
        );
        let cfg = MetaConfig {
            iterations: 5,
            ..MetaConfig::default()
        };
        let mut losses_a = Vec::new();
        let a = meta_train(init.clone(), &sampler, &spec, &cfg, |_, r| {
            losses_a.push(r.mean_val_loss)
        })
        .unwrap();
        let mut losses_b = Vec::new();
        let b = meta_train(init.clone(), &sampler, &spec, &cfg, |_, r| {
            losses_b.push(r.mean_val_loss)
        })
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(losses_a, losses_b);
        assert_eq!(losses_a.len(), 5);
        assert_ne!(a, init);
    }
}

fn linear_task(slope: f64, offset: f64) -> FewShotTask {
    let split = |xs: Vec<f64>| {
        let ys = xs.iter().map(|x| slope * x + offset).collect();
        let n = xs.len();
        Split {
            inputs: Tensor::matrix(n, 1, xs).unwrap(),
            labels: Tensor::matrix(n, 1, ys).unwrap(),
        }
    };
    FewShotTask {
        train: split(vec![-1.0, 0.5, 2.0]),
        val: split(vec![-3.0, 0.0, 1.0, 4.0]),
        kind: TaskKind::Regression,
    }
}

#[test]
fn oracle_prior_on_noiseless_regression_scores_zero() {
    let spec = MlpSpec::new(vec![1, 1], Head::Regression).unwrap();
    let mut params =
        MetaParams::initial(MethodTag::Maml, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    params.init = Tensor::vector(vec![2.0, -1.0]);
    let tasks = vec![linear_task(2.0, -1.0); 5];
    let report = evaluate(&params, &tasks, &spec, &InnerConfig::new(5, 1e-2).unwrap()).unwrap();
    assert_eq!(report.metric, Metric::Mse);
    assert_eq!(report.mean, 0.0);
    assert_eq!(report.half_width, 0.0);
    assert_eq!(report.diverged, 0);
}

#[test]
fn uninformative_classifier_scores_at_chance() {
    let spec = MlpSpec::new(vec![2, 8, 5], Head::Classification).unwrap();
    let family = TaskFamilyConfig::blobs(5, 1, 2, 0.3, 6);
    let tasks: Vec<FewShotTask> = (0..40)
        .map(|i| pool_task(&family, Pool::MetaTest, i).unwrap())
        .collect();
    let mut params =
        MetaParams::initial(MethodTag::Maml, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    params.init = Tensor::zeros(&[spec.param_count()]);
    let report = evaluate(&params, &tasks, &spec, &InnerConfig::new(5, 1e-2).unwrap()).unwrap();
    assert_eq!(report.metric, Metric::Accuracy);
    assert!((report.mean - 0.2).abs() < 1e-12, "{}", report.mean);
    let trained =
        MetaParams::initial(MethodTag::Maml, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let report = evaluate(&trained, &tasks, &spec, &InnerConfig::new(5, 1e-2).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&report.mean));
}

#[test]
fn evaluation_trace_starts_at_the_prior_loss() {
    let spec = MlpSpec::new(vec![1, 8, 1], Head::Regression).unwrap();
    let family = TaskFamilyConfig::sinusoid(5, 9);
    let tasks: Vec<FewShotTask> = (0..6)
        .map(|i| pool_task(&family, Pool::MetaTest, i).unwrap())
        .collect();
    let inner = InnerConfig::new(4, 1e-2).unwrap();
    for method in METHODS {
        let params = MetaParams::initial(method, &spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let report = evaluate(&params, &tasks, &spec, &inner).unwrap();
        assert_eq!(report.trace_loss.len(), 5);
        assert_eq!(report.trace_grad_norm.len(), 5);
        // Every method starts from the same primal point for the same seed.
        let mut expected = 0.0;
        for task in &tasks {
            let mut g = Graph::new();
            let maml =
                MetaParams::initial(MethodTag::Maml, &spec, &mut ChaCha8Rng::seed_from_u64(7))
                    .unwrap();
            let phi = g.leaf(maml.init.clone());
            let l = loss(&spec, phi, &task.train, &mut g).unwrap();
            expected += g.value(l).item();
        }
        expected /= tasks.len() as f64;
        assert!(
            (report.trace_loss[0] - expected).abs() <= 1e-12 * expected,
            "{method}"
        );
    }
}
