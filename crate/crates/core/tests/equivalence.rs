use gradcache::batch::random_batch;
use gradcache::gradcache::{
    accumulation_grads, cached_grads, plan_subbatches, step1_graphless_forward, step2_build_cache,
    step3_accumulate, train_step_cached, train_step_direct, CacheConfig, ChunkOrder,
};
use gradcache::loss::{analytic_rep_grads, contrastive_loss, direct_param_grads};
use gradcache::{grads::rel_err_norm, Activation, DualEncoder, EncoderParams, OptimizerState};

fn two_layer(seed: u64) -> DualEncoder<f64> {
    DualEncoder::init(seed, &[8, 32, 16], &[8, 32, 16], Activation::Tanh).unwrap()
}

#[test]
fn cached_matches_direct_across_sub_batch_sizes() {
    let batch = random_batch::<f64>(3, 32, 64, 8, 8).unwrap();
    let model = two_layer(5);
    for tau in [1.0, 0.05] {
        let (direct, direct_loss) = direct_param_grads(&batch, &model, tau).unwrap();
        for bs in [1, 2, 4, 8, 16, 32] {
            let out = cached_grads(&batch, &model, &CacheConfig::new(bs, bs, tau), ChunkOrder::Forward).unwrap();
            let err = out.grads.max_rel_err(&direct);
            assert!(err <= 1e-9, "tau {tau} bs {bs}: {err:e}");
            assert!(out.grads.rel_err(&direct) <= 1e-12);
            assert!((out.loss - direct_loss).abs() <= 1e-12 * direct_loss.abs());
        }
    }
}

#[test]
fn single_chunk_is_degenerate_direct() {
    let batch = random_batch::<f64>(4, 16, 16, 8, 8).unwrap();
    let model = two_layer(6);
    let (direct, _) = direct_param_grads(&batch, &model, 1.0).unwrap();
    let out = cached_grads(&batch, &model, &CacheConfig::new(16, 16, 1.0), ChunkOrder::Forward).unwrap();
    assert!(out.grads.rel_err(&direct) <= 1e-12);
}

#[test]
fn chunk_order_does_not_matter() {
    let batch = random_batch::<f64>(7, 24, 40, 8, 8).unwrap();
    let model = two_layer(8);
    let cfg = CacheConfig::new(4, 8, 0.1);
    let fwd = cached_grads(&batch, &model, &cfg, ChunkOrder::Forward).unwrap();
    let rev = cached_grads(&batch, &model, &cfg, ChunkOrder::Reverse).unwrap();
    assert!(fwd.grads.rel_err(&rev.grads) <= 1e-12);
}

#[test]
fn cache_equals_analytic_representation_gradients() {
    let batch = random_batch::<f64>(9, 12, 20, 8, 8).unwrap();
    let model = two_layer(10);
    let plan = plan_subbatches(12, 20, 5, 7).unwrap();
    let reps = step1_graphless_forward(&batch, &model, &plan).unwrap();
    let (cache, loss) = step2_build_cache(&reps.anchors, &reps.targets, &batch.positives, 0.5).unwrap();
    let res = contrastive_loss(&reps.anchors, &reps.targets, &batch.positives, 0.5).unwrap();
    let analytic = analytic_rep_grads(&reps.anchors, &reps.targets, &batch.positives, 0.5, &res).unwrap();
    assert!(rel_err_norm(&[cache.u_rows().clone()], &[analytic.u]) <= 1e-10);
    assert!(rel_err_norm(&[cache.v_rows().clone()], &[analytic.v]) <= 1e-10);
    assert_eq!(cache.float_count(), (12 + 20) * 16);
    assert!((loss - res.loss).abs() <= 1e-14);
}

#[test]
fn step1_matches_taped_full_forward_bit_for_bit() {
    let batch = random_batch::<f64>(11, 10, 10, 8, 8).unwrap();
    let model = two_layer(12);
    let plan = plan_subbatches(10, 10, 3, 4).unwrap();
    let reps = step1_graphless_forward(&batch, &model, &plan).unwrap();
    let full = gradcache::encoder::encode(&model.anchor, &batch.anchors, true).unwrap();
    assert!(reps.anchors.same_values(&full));
    assert!(!reps.anchors.is_attached() && !reps.targets.is_attached());
}

#[test]
fn identity_encoder_passes_inputs_through() {
    let batch = random_batch::<f64>(13, 5, 5, 4, 4).unwrap();
    let model = DualEncoder::new(EncoderParams::identity(4), EncoderParams::identity(4)).unwrap();
    let plan = plan_subbatches(5, 5, 2, 2).unwrap();
    let reps = step1_graphless_forward(&batch, &model, &plan).unwrap();
    assert!(reps.anchors.same_values(&batch.anchors));
}

#[test]
fn tied_towers_are_equivalent_too() {
    let batch = random_batch::<f64>(14, 16, 32, 8, 8).unwrap();
    let model = DualEncoder::tied(gradcache::encoder::init_params(15, &[8, 32, 16], Activation::Tanh).unwrap());
    let (direct, _) = direct_param_grads(&batch, &model, 0.2).unwrap();
    let out = cached_grads(&batch, &model, &CacheConfig::new(4, 4, 0.2), ChunkOrder::Forward).unwrap();
    assert!(out.grads.rel_err(&direct) <= 1e-9);
}

#[test]
fn relu_encoders_are_equivalent() {
    let batch = random_batch::<f64>(16, 16, 16, 8, 8).unwrap();
    let model = DualEncoder::init(17, &[8, 24, 24, 16], &[8, 24, 24, 16], Activation::Relu).unwrap();
    let (direct, _) = direct_param_grads(&batch, &model, 1.0).unwrap();
    let out = cached_grads(&batch, &model, &CacheConfig::new(3, 5, 1.0), ChunkOrder::Forward).unwrap();
    assert!(out.grads.rel_err(&direct) <= 1e-9);
}

#[test]
fn cached_and_direct_training_steps_agree() {
    let batch = random_batch::<f64>(18, 32, 64, 8, 8).unwrap();
    let mut a = two_layer(19);
    let mut b = a.clone();
    let mut oa = OptimizerState::adam(1e-2);
    let mut ob = oa.clone();
    for _ in 0..3 {
        let la = train_step_cached(&batch, &mut a, &mut oa, &CacheConfig::new(8, 8, 0.05)).unwrap();
        let lb = train_step_direct(&batch, &mut b, &mut ob, 0.05).unwrap();
        assert!((la - lb).abs() <= 1e-9 * lb.abs());
    }
    assert!(rel_err_norm(&a.params(), &b.params()) <= 1e-9);
}

#[test]
fn sgd_steps_agree_elementwise() {
    let batch = random_batch::<f64>(26, 32, 64, 8, 8).unwrap();
    for tau in [1.0, 0.05] {
        let (mut a, mut b) = (two_layer(27), two_layer(27));
        let (mut oa, mut ob) = (OptimizerState::sgd(0.1), OptimizerState::sgd(0.1));
        train_step_cached(&batch, &mut a, &mut oa, &CacheConfig::new(4, 4, tau)).unwrap();
        train_step_direct(&batch, &mut b, &mut ob, tau).unwrap();
        assert!(gradcache::grads::max_rel_err(&a.params(), &b.params()) <= 1e-9);
    }
}

#[test]
fn cached_step_is_pure_given_state() {
    let batch = random_batch::<f64>(20, 8, 8, 8, 8).unwrap();
    let model = two_layer(21);
    let opt = OptimizerState::adam(1e-3);
    let run = || {
        let (mut m, mut o) = (model.clone(), opt.clone());
        let l = train_step_cached(&batch, &mut m, &mut o, &CacheConfig::new(2, 2, 1.0)).unwrap();
        (l, m)
    };
    let (l1, m1) = run();
    let (l2, m2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(rel_err_norm(&m1.params(), &m2.params()), 0.0);
}

#[test]
fn accumulation_is_not_equivalent() {
    let batch = random_batch::<f64>(22, 32, 32, 8, 8).unwrap();
    let model = two_layer(23);
    let (direct, _) = direct_param_grads(&batch, &model, 1.0).unwrap();
    let acc = accumulation_grads(&batch, &model, 8, 1.0).unwrap();
    assert!(acc.grads.rel_err(&direct) > 1e-3);
    let whole = accumulation_grads(&batch, &model, 32, 1.0).unwrap();
    assert_eq!(whole.grads.rel_err(&direct), 0.0);
}

#[test]
fn step3_rejects_mismatched_cache() {
    let batch = random_batch::<f64>(24, 4, 4, 8, 8).unwrap();
    let other = random_batch::<f64>(24, 5, 5, 8, 8).unwrap();
    let model = two_layer(25);
    let plan = plan_subbatches(5, 5, 2, 2).unwrap();
    let reps = step1_graphless_forward(&other, &model, &plan).unwrap();
    let (cache, _) = step2_build_cache(&reps.anchors, &reps.targets, &other.positives, 1.0).unwrap();
    let plan4 = plan_subbatches(4, 4, 2, 2).unwrap();
    assert!(step3_accumulate(&batch, &model, &plan4, &cache, ChunkOrder::Forward).is_err());
}

#[test]
fn f32_cached_matches_direct() {
    let batch = random_batch::<f32>(30, 16, 24, 8, 8).unwrap();
    let model = DualEncoder::<f32>::init(31, &[8, 16, 8], &[8, 16, 8], Activation::Tanh).unwrap();
    let (direct, loss) = direct_param_grads(&batch, &model, 0.5).unwrap();
    let out = cached_grads(&batch, &model, &CacheConfig::new(4, 4, 0.5), ChunkOrder::Forward).unwrap();
    assert!(out.grads.rel_err(&direct) <= 1e-5, "{:e}", out.grads.rel_err(&direct));
    assert!((out.loss - loss).abs() <= 1e-5 * loss);
}
