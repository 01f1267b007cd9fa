use gradcache::encoder::init_params;
use gradcache::profile::{profile_sweep, StepMode};
use gradcache::{Activation, Category, DualEncoder};

fn model() -> DualEncoder<f64> {
    DualEncoder::init(1, &[16, 32, 16], &[16, 32, 16], Activation::Tanh).unwrap()
}

#[test]
fn cached_activation_peak_is_flat_in_batch_size() {
    let sizes = [64, 128, 256, 512];
    let reports = profile_sweep(StepMode::Cached { sub_batch_s: 8, sub_batch_t: 8 }, &sizes, &model(), 1.0, 3).unwrap();
    let first = reports[0].peak(Category::Activation);
    for (r, &n) in reports.iter().zip(&sizes) {
        eprintln!("cache n={n} activation={} cache={} total={}", r.peak(Category::Activation), r.peak(Category::GradientCache), r.total_peak);
        assert_eq!(r.peak(Category::Activation), first, "n={n}");
        assert_eq!(r.peak(Category::GradientCache), 2 * n * 16);
        assert_eq!(r.activation_live_after, 0);
        assert_eq!(r.violations, 0);
    }
}

#[test]
fn direct_activation_peak_grows_with_batch_size() {
    let reports = profile_sweep(StepMode::Direct, &[64, 256], &model(), 1.0, 3).unwrap();
    let ratio = reports[1].peak(Category::Activation) as f64 / reports[0].peak(Category::Activation) as f64;
    eprintln!("direct ratio {ratio}");
    assert!(ratio >= 3.9, "{ratio}");
    assert!(reports.iter().all(|r| r.activation_live_after == 0 && r.violations == 0));
}

#[test]
fn cached_peak_scales_with_sub_batch() {
    let m = model();
    let small = profile_sweep(StepMode::Cached { sub_batch_s: 4, sub_batch_t: 4 }, &[64], &m, 1.0, 3).unwrap();
    let large = profile_sweep(StepMode::Cached { sub_batch_s: 16, sub_batch_t: 16 }, &[64], &m, 1.0, 3).unwrap();
    assert_eq!(4 * small[0].peak(Category::Activation), large[0].peak(Category::Activation));
}

#[test]
fn tied_towers_profile_cleanly() {
    let m = DualEncoder::tied(init_params::<f64>(2, &[16, 32, 16], Activation::Relu).unwrap());
    for mode in [StepMode::Direct, StepMode::Cached { sub_batch_s: 8, sub_batch_t: 8 }, StepMode::Accumulation { chunk: 8 }] {
        let r = profile_sweep(mode, &[32], &m, 0.5, 4).unwrap();
        assert_eq!(r[0].activation_live_after, 0);
        assert_eq!(r[0].violations, 0);
    }
}
