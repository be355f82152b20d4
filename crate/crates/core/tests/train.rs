use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spectral_tf::linalg::Mat;
use spectral_tf::train::*;
use spectral_tf::transformer::*;

fn random_mat<R: Rng>(r: usize, c: usize, s: f64, rng: &mut R) -> Mat {
    Array2::from_shape_simple_fn((r, c), || s * rng.sample::<f64, _>(StandardNormal))
}

fn small_problem(seed: u64, layers: usize, activation: Activation) -> (TransformerParams, Episode) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Arch { layers, heads: 2, embed: 6, hidden: 6, d_out0: 3, d_out1: 2, n: 4 };
    let mut params = init_params(&arch, 1.0, &mut rng);
    for (a, _) in params.layers.iter_mut() {
        a.activation = activation;
    }
    let x = random_mat(3, 4, 0.7, &mut rng);
    (params, Episode::padded(x.view(), 6).unwrap())
}

/// Redraws until every ReLU input is at least `margin` from zero.
fn guarded_problem(seed: u64, layers: usize, activation: Activation, margin: f64) -> (TransformerParams, Episode) {
    (0..1000)
        .map(|i| small_problem(seed * 1000 + i, layers, activation))
        .find(|(p, e)| min_relu_margin(p, e).unwrap() >= margin)
        .expect("a guarded draw")
}

fn quadratic_loss(target: Mat) -> impl Fn(&Mat) -> (f64, Mat) {
    move |y: &Mat| {
        let d = y - &target;
        (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (params, ep) = small_problem(1, 2, Activation::Relu);
    let g = backward(&params, &ep, &Mat::zeros((3, 2))).unwrap();
    assert!(g.matrices().iter().all(|m| m.iter().all(|&v| v == 0.0)));
    assert!(matches!(backward(&params, &ep, &Mat::zeros((2, 2))), Err(TrainError::ShapeMismatch(_))));
}

#[test]
fn single_fc_layer_matches_hand_derivation() {
    // Attention is inert (V = 0) and the adapters are identities, so
    // Y = H + W2 relu(W1 H). With W1 H > 0 entrywise:
    // dL/dW2 = G (W1 H)^T and dL/dW1 = (W2^T G) H^T.
    let h = array![[1.0, 2.0], [0.5, 1.5]];
    let w1 = array![[1.0, 0.5], [0.2, 1.0]];
    let w2 = array![[0.3, -0.7], [1.1, 0.4]];
    let params = TransformerParams {
        layers: vec![(
            AttnLayer { heads: vec![AttnHead::zeros(2)], activation: Activation::Relu },
            FcLayer { w1: w1.clone(), w2: w2.clone() },
        )],
        w0_out: Mat::eye(2),
        w1_out: Mat::eye(2),
    };
    let ep = Episode::new(h.slice(ndarray::s![..1, ..]), h.slice(ndarray::s![1.., ..]), None).unwrap();
    let g_up = array![[0.2, -1.0], [0.6, 0.3]];
    let grads = backward(&params, &ep, &g_up).unwrap();
    let pre = w1.dot(&h);
    assert!(pre.iter().all(|&v| v > 0.0));
    assert_abs_diff_eq!(grads.layers[0].1.w2, g_up.dot(&pre.t()), epsilon = 1e-14);
    assert_abs_diff_eq!(grads.layers[0].1.w1, w2.t().dot(&g_up).dot(&h.t()), epsilon = 1e-14);
    let y = h.clone() + w2.dot(&pre);
    assert_abs_diff_eq!(grads.w0_out, g_up.dot(&y.t()), epsilon = 1e-14);
}

#[test]
fn finite_differences_on_small_nets() {
    for (seed, act) in [(2, Activation::Relu), (3, Activation::Relu), (4, Activation::Softmax)] {
        let (params, ep) = guarded_problem(seed, 2, act, 1e-4);
        let target = random_mat(3, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let r = grad_check(&params, &ep, &quadratic_loss(target), 1e-5).unwrap();
        assert_eq!(r.checked, params.num_params());
        assert!(r.max_rel_err <= 1e-5, "{act:?}: {r:?}");
    }
}

#[test]
fn one_layer_relu_net_is_exact_under_central_differences() {
    // Inside one activation region the output is affine in every single
    // coordinate, so the loss is quadratic and central differences are exact.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (params, ep) = guarded_problem(5, 1, Activation::Relu, 1e-3);
    let target = random_mat(3, 2, 1.0, &mut rng);
    let r = grad_check(&params, &ep, &quadratic_loss(target), 1e-5).unwrap();
    assert!(r.max_rel_err <= 1e-7, "{r:?}");
}

#[test]
fn stationary_point_passes() {
    let (params, ep) = guarded_problem(6, 2, Activation::Relu, 1e-4);
    let target = tf_forward(&params, &ep).unwrap();
    let loss = quadratic_loss(target);
    let (_, gy) = loss(&tf_forward(&params, &ep).unwrap());
    let g = backward(&params, &ep, &gy).unwrap();
    let norm = g.matrices().iter().flat_map(|m| m.iter()).map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm <= 1e-6);
    assert!(grad_check(&params, &ep, &loss, 1e-5).unwrap().max_rel_err <= 1e-4);
}

#[test]
fn corrupted_gradient_is_detected() {
    let (params, ep) = guarded_problem(7, 2, Activation::Relu, 1e-4);
    let target = random_mat(3, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
    let opts = GradCheckOptions { corrupt: Some(1.01), ..Default::default() };
    let r = grad_check_with(&params, &ep, &quadratic_loss(target), 1e-5, opts).unwrap();
    assert!(r.max_rel_err >= 5e-3, "{r:?}");
    assert!(r.worst.is_some());
}

#[test]
fn grad_check_step_contract() {
    let (params, ep) = small_problem(8, 1, Activation::Relu);
    let loss = quadratic_loss(Mat::zeros((3, 2)));
    assert!(matches!(grad_check(&params, &ep, &loss, 0.0), Err(TrainError::Config(_))));
    assert!(matches!(grad_check(&params, &ep, &loss, 0.1), Err(TrainError::Config(_))));
    let opts = GradCheckOptions { allow_coarse: true, ..Default::default() };
    assert!(grad_check_with(&params, &ep, &loss, 0.1, opts).is_ok());
}

#[test]
fn large_nets_check_a_one_percent_subset() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let arch = Arch { layers: 2, heads: 4, embed: 24, hidden: 32, d_out0: 2, d_out1: 2, n: 4 };
    let params = init_params(&arch, 0.3, &mut rng);
    assert!(params.num_params() > 10_000);
    let ep = Episode::padded(random_mat(2, 4, 1.0, &mut rng).view(), 24).unwrap();
    let r = grad_check(&params, &ep, &quadratic_loss(Mat::zeros((2, 2))), 1e-5).unwrap();
    assert_eq!(r.checked, params.num_params().div_ceil(100));
}

fn task_problem(task: Task, seed: u64) -> (TrainConfig, TransformerParams, Episode, Target) {
    for attempt in 0..500u64 {
        let cfg = TrainConfig {
            task,
            layers: 2,
            heads: 2,
            embed: 8,
            hidden: 8,
            d: 3,
            n: 5,
            init_scale: 1.0,
            input_norm: 3.0,
            seed: seed * 1000 + attempt,
            ..TrainConfig::default()
        };
        let params = initial_params(&cfg);
        let (ep, target) = sample_episode(&cfg, &mut stream(cfg.seed, 1)).unwrap();
        if min_relu_margin(&params, &ep).unwrap() >= 1e-4 {
            return (cfg, params, ep, target);
        }
    }
    panic!("no guarded draw");
}

#[test]
fn gradient_check_across_tasks() {
    let tasks = [
        Task::EigVec { k: 2, loss: VecLoss::Cos },
        Task::EigVec { k: 2, loss: VecLoss::Eigenspace },
        Task::EigVal { k: 2 },
        Task::Gmm { beta: 1.0 },
    ];
    for (i, task) in tasks.iter().cycle().take(20).enumerate() {
        let (cfg, params, ep, target) = task_problem(*task, i as u64);
        let loss = |y: &Mat| task_loss(&cfg.task, y, &target).unwrap();
        let r = grad_check(&params, &ep, &loss, 1e-5).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{task:?} #{i}: {r:?}");
    }
}

#[test]
fn eigenspace_loss_ignores_target_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let y = random_mat(4, 2, 1.0, &mut rng);
    let v = random_mat(4, 2, 1.0, &mut rng);
    let mut flipped = v.clone();
    flipped.column_mut(1).mapv_inplace(|x| -x);
    let task = Task::EigVec { k: 2, loss: VecLoss::Eigenspace };
    let a = task_loss(&task, &y, &Target::Vectors(v)).unwrap();
    let b = task_loss(&task, &y, &Target::Vectors(flipped)).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn aligned_cos_loss_ignores_target_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let task = Task::EigVec { k: 3, loss: VecLoss::Cos };
    for _ in 0..20 {
        let y = random_mat(4, 3, 1.0, &mut rng);
        let v = random_mat(4, 3, 1.0, &mut rng);
        let mut flipped = v.clone();
        for j in 0..3 {
            if rng.random_bool(0.5) {
                flipped.column_mut(j).mapv_inplace(|x| -x);
            }
        }
        let a = task_loss(&task, &y, &Target::Vectors(v)).unwrap();
        let b = task_loss(&task, &y, &Target::Vectors(flipped)).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}

#[test]
fn task_loss_examples() {
    let t = Task::EigVal { k: 2 };
    let (l, _) = task_loss(&t, &array![[2.0, 4.0]], &Target::Values(vec![2.0, 4.0])).unwrap();
    assert_eq!(l, 0.0);
    let g = Task::Gmm { beta: 5.0 };
    let (l, _) = task_loss(&g, &array![[10.0, -10.0, 10.0]], &Target::Labels(vec![0, 1, 0])).unwrap();
    assert!(l < 1e-8);
    assert!(matches!(task_loss(&t, &array![[1.0]], &Target::Values(vec![1.0, 2.0])), Err(TrainError::ShapeMismatch(_))));
    assert!(matches!(task_loss(&t, &array![[1.0]], &Target::Labels(vec![1])), Err(TrainError::ShapeMismatch(_))));
    assert_eq!(Task::EigVec { k: 2, loss: VecLoss::Cos }.output_shape(4, 8), (4, 2));
    assert_eq!(t.output_shape(4, 8), (1, 2));
    assert_eq!(g.output_shape(4, 8), (1, 8));
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig { steps: 50, seed, embed: 8, hidden: 8, eval_every: 25, eval_size: 4, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_keeps_init() {
    let cfg = TrainConfig { lr: 0.0, steps: 10, ..quick_cfg(12) };
    let out = train_loop(&cfg).unwrap();
    assert_eq!(out.params, initial_params(&cfg));
    assert_eq!(out.history.len(), 10);
}

#[test]
fn training_is_deterministic() {
    for task in [Task::EigVec { k: 1, loss: VecLoss::Cos }, Task::Gmm { beta: 5.0 }] {
        let cfg = TrainConfig { task, ..quick_cfg(13) };
        let a = train_loop(&cfg).unwrap();
        let b = train_loop(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![25, 50]);
    }
}

#[test]
fn first_step_descends_on_the_same_instance() {
    let tasks = [Task::EigVec { k: 1, loss: VecLoss::Cos }, Task::EigVal { k: 1 }];
    let mut descended = 0;
    for seed in 0..20u64 {
        let cfg = TrainConfig {
            task: tasks[seed as usize % 2],
            lr: 1e-4,
            steps: 2,
            fixed_dataset: true,
            n_instances: 1,
            eval_every: 0,
            ..quick_cfg(100 + seed)
        };
        let h = train_loop(&cfg).unwrap().history;
        if h[1] <= h[0] + 1e-9 {
            descended += 1;
        }
    }
    assert!(descended >= 18, "{descended}/20");
}

#[test]
fn divergence_is_reported_with_history() {
    let cfg = TrainConfig { task: Task::EigVal { k: 1 }, lr: 1e12, steps: 200, eval_every: 0, ..quick_cfg(14) };
    match train_loop(&cfg) {
        Err(TrainError::DivergenceDetected { step, history }) => {
            assert_eq!(history.len(), step + 1);
            assert!(!history[step].is_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history.last().copied())),
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(serde_json::from_str::<TrainConfig>(r#"{"steps": 5, "bogus": 1}"#).is_err());
    let cfg: TrainConfig = serde_json::from_str(r#"{"steps": 5, "task": {"kind": "eig_val", "k": 2}}"#).unwrap();
    assert_eq!(cfg.task, Task::EigVal { k: 2 });
    assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn auxiliary_matrix_is_embedded_when_requested() {
    let cfg = TrainConfig { use_aux: true, embed: 24, ..TrainConfig::default() };
    cfg.validate().unwrap();
    let (ep, _) = sample_episode(&cfg, &mut stream(0, 1)).unwrap();
    let d = cfg.d;
    // Rows: X, placeholder, identity block [I_d | 0], sphere, placeholder, padding.
    assert_eq!(ep.h.slice(ndarray::s![2 * d..3 * d, ..d]), Mat::eye(d));
    assert_eq!(ep.h.slice(ndarray::s![2 * d..3 * d, d..]), Mat::zeros((d, cfg.n - d)));
    assert!(TrainConfig { use_aux: true, embed: 16, ..TrainConfig::default() }.validate().is_err());
}
