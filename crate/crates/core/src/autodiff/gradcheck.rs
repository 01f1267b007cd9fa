//! Central-difference check of tape gradients.

use super::Tape;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Coordinates whose gradients are smaller than this fraction of the
/// largest one are measured against that floor instead of themselves.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<usize>,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, floor)`, and 0 when both are exactly zero.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(floor);
    if a == b {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        (a - b).abs() / scale
    }
}

/// Compare the tape gradient of scalar `f` at `params` against
/// `(f(p + h·e_k) − f(p − h·e_k)) / 2h` on the given coordinates (all of
/// them when `coords` is `None`). Relative errors use a floor of
/// [`REL_ERR_FLOOR`] times the largest analytic gradient magnitude.
///
/// `f` receives the tape and the parameter tensor; it must build its result
/// from that tensor so the analytic pass can see it.
pub fn finite_diff_check<T, F>(
    f: F,
    params: &Tensor<T>,
    h: T,
    tol: f64,
    coords: Option<&[usize]>,
) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, &Tensor<T>) -> Result<Tensor<T>>,
{
    assert!(h > T::zero(), "finite difference step must be positive");
    let tape = Tape::new();
    let leaf = tape.leaf(params);
    let out = f(&tape, &leaf)?;
    let analytic = if out.is_attached() {
        tape.backward(&out)?;
        tape.grad(&leaf)?
    } else {
        // f ignored its input
        Tensor::zeros(params.shape())
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.numel()).collect();
            &all
        }
    };

    let eval = |k: usize, delta: T| -> Result<T> {
        let mut data = params.data().to_vec();
        data[k] += delta;
        let p = Tensor::from_vec(params.shape().to_vec(), data)?;
        let scratch = Tape::new();
        scratch.no_graph(|| f(&scratch, &p))?.item()
    };

    let floor = REL_ERR_FLOOR * analytic.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let mut report = FdReport { checked: 0, max_rel_err: 0.0, max_abs_err: 0.0, worst: None, passed: true };
    let two_h = (h + h).as_f64();
    for &k in coords {
        let numeric = (eval(k, h)? - eval(k, -h)?).as_f64() / two_h;
        let a = analytic.data()[k].as_f64();
        let rel = rel_err(a, numeric, floor);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some(k);
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
