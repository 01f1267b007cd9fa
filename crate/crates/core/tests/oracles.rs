use gradcache::autodiff::{finite_diff_check, Tape};
use gradcache::batch::{random_batch, random_matrix};
use gradcache::gradcache::{cached_grads, CacheConfig, ChunkOrder};
use gradcache::grads::tensor_rel_err;
use gradcache::loss::{analytic_rep_grads, contrastive_loss, direct_param_grads, loss_graph};
use gradcache::memtrace::{with_probe, Probe};
use gradcache::{Activation, Batch, DualEncoder, EncoderParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Loss of `model` with parameter tensor `k` replaced by `p`.
fn loss_with<'a>(
    batch: &'a Batch<f64>,
    model: &'a DualEncoder<f64>,
    k: usize,
    tau: f64,
) -> impl Fn(&Tape<f64>, &Tensor<f64>) -> gradcache::Result<Tensor<f64>> + 'a {
    move |tape, p| {
        let mut params = model.params();
        params[k] = p.clone();
        let split = model.anchor.num_tensors();
        let f = model.anchor.apply(tape, &params[..split], &batch.anchors)?;
        let g = model.target_encoder().apply(tape, &params[split..], &batch.targets)?;
        loss_graph(tape, &f, &g, &batch.positives, tau)
    }
}

#[test]
fn direct_gradients_match_finite_differences() {
    let batch = random_batch::<f64>(31, 6, 10, 6, 6).unwrap();
    let model = DualEncoder::init(32, &[6, 10, 4], &[6, 10, 4], Activation::Tanh).unwrap();
    for tau in [1.0, 0.2] {
        let (grads, _) = direct_param_grads(&batch, &model, tau).unwrap();
        let mut checked = 0;
        // the target tower's output bias receives Σ_j v_j = 0: only its magnitude is checkable
        let zero_bias = model.num_tensors() - 1;
        for (k, p) in model.params().iter().enumerate() {
            let report = finite_diff_check(loss_with(&batch, &model, k, tau), p, 1e-6, 1e-5, None).unwrap();
            if k == zero_bias {
                assert!(report.max_abs_err < 1e-9, "{report:?}");
                assert!(grads.tensors[k].data().iter().all(|g| g.abs() < 1e-15));
                continue;
            }
            assert!(report.passed, "tau {tau} tensor {k}: {report:?}");
            // the check's own analytic pass agrees with the training path
            let tape = Tape::new();
            let leaf = tape.leaf(p);
            let out = loss_with(&batch, &model, k, tau)(&tape, &leaf).unwrap();
            tape.backward(&out).unwrap();
            assert!(tensor_rel_err(&tape.grad(&leaf).unwrap(), &grads.tensors[k]) < 1e-12);
            checked += report.checked;
        }
        assert!(checked >= 200, "{checked}");
    }
}

#[test]
fn analytic_rep_grads_match_autodiff_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..100 {
        let m = rng.random_range(1..7);
        let n = rng.random_range(1..9);
        let d = rng.random_range(1..6);
        let tau = [1.0, 0.5, 0.05][rng.random_range(0..3)];
        let f: Tensor<f64> = random_matrix(&mut rng, m, d, -2.0, 2.0);
        let g: Tensor<f64> = random_matrix(&mut rng, n, d, -2.0, 2.0);
        let r: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();

        let res = contrastive_loss(&f, &g, &r, tau).unwrap();
        let oracle = analytic_rep_grads(&f, &g, &r, tau, &res).unwrap();
        let tape = Tape::new();
        let (fl, gl) = (tape.leaf(&f), tape.leaf(&g));
        let loss = loss_graph(&tape, &fl, &gl, &r, tau).unwrap();
        assert!((loss.item().unwrap() - res.loss).abs() <= 1e-12 * res.loss.abs().max(1.0));
        tape.backward(&loss).unwrap();
        let (u, v) = (tape.grad(&fl).unwrap(), tape.grad(&gl).unwrap());
        assert!(tensor_rel_err(&u, &oracle.u) <= 1e-10, "u m={m} n={n} d={d}");
        assert!(tensor_rel_err(&v, &oracle.v) <= 1e-10, "v m={m} n={n} d={d}");
    }
}

#[test]
fn probabilities_are_softmax_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let f: Tensor<f64> = random_matrix(&mut rng, 5, 3, -1.0, 1.0);
    let g: Tensor<f64> = random_matrix(&mut rng, 7, 3, -1.0, 1.0);
    let res = contrastive_loss(&f, &g, &[0, 1, 2, 3, 4], 0.1).unwrap();
    for i in 0..5 {
        let s: f64 = res.p.row(i).iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn zero_weights_give_log_target_count() {
    for n in [1usize, 2, 5, 64] {
        let layer = gradcache::encoder::Dense {
            weight: Tensor::zeros(&[3, 4]),
            bias: Tensor::zeros(&[4]),
            activation: Activation::Identity,
        };
        let enc = EncoderParams::new(3, vec![layer]).unwrap();
        let model = DualEncoder::tied(enc);
        let batch = random_batch::<f64>(42, 1, n, 3, 3).unwrap();
        let (_, loss) = direct_param_grads(&batch, &model, 0.05).unwrap();
        assert!((loss - (n as f64).ln()).abs() < 1e-12, "n={n}");
    }
}

#[test]
fn cached_step_costs_two_forwards_and_one_backward_per_example() {
    let batch = random_batch::<f64>(43, 16, 24, 5, 5).unwrap();
    let model = DualEncoder::init(44, &[5, 8, 4], &[5, 8, 4], Activation::Tanh).unwrap();
    let probe = Probe::new();
    with_probe(&probe, || cached_grads(&batch, &model, &CacheConfig::new(4, 6, 1.0), ChunkOrder::Forward)).unwrap();
    let ops = probe.ops();
    let examples = 16 + 24;
    assert_eq!(ops.encoder_forward_rows, 2 * examples);
    assert_eq!(ops.encoder_backward_rows, examples);

    probe.reset_ops();
    with_probe(&probe, || direct_param_grads(&batch, &model, 1.0)).unwrap();
    let ops = probe.ops();
    assert_eq!(ops.encoder_forward_rows, examples);
    assert_eq!(ops.encoder_backward_rows, examples);
}
