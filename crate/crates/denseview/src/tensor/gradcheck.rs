//! Central-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use super::{GradMap, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checks: usize,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (tol {:.1e}, {} checks, worst {}[{}])",
            if self.passed() { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.tol,
            self.checks,
            self.worst_param,
            self.worst_index
        )
    }
}

/// A scalar function of named parameters, expressed against a tape.
pub type ScalarFn<'a> = dyn Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + 'a;

/// Compares reverse-mode gradients of `f` against central finite differences
/// at every element of every parameter.
pub fn finite_diff_check(
    f: &ScalarFn,
    params: &BTreeMap<String, Tensor>,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    finite_diff_check_sampled(f, params, h, tol, usize::MAX)
}

/// Like [`finite_diff_check`] but caps the number of checked elements per
/// parameter, visiting a deterministic evenly-spaced subset.
pub fn finite_diff_check_sampled(
    f: &ScalarFn,
    params: &BTreeMap<String, Tensor>,
    h: f64,
    tol: f64,
    max_per_param: usize,
) -> Result<FdReport> {
    let grads = autodiff_grads(f, params)?;

    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: BTreeMap<String, Var> =
            p.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
        let out = f(&mut tape, &vars)?;
        out.tensor().item()
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checks: 0,
        tol,
    };

    for (name, tensor) in params {
        let grad = grads.get(name).cloned().unwrap_or_else(|| {
            // Unreachable parameters have an exactly-zero gradient.
            Tensor::zeros(tensor.shape().to_vec())
        });
        let n = tensor.len();
        let step = (n / max_per_param.max(1)).max(1);
        let mut i = 0;
        while i < n {
            let base = tensor.data()[i];
            let mut plus = params.clone();
            plus.insert(name.clone(), tensor.with_value(i, base + h));
            let mut minus = params.clone();
            minus.insert(name.clone(), tensor.with_value(i, base - h));
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let ad = grad.data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            report.checks += 1;
            i += step;
        }
    }
    Ok(report)
}

fn autodiff_grads(f: &ScalarFn, params: &BTreeMap<String, Tensor>) -> Result<GradMap> {
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
        .collect();
    let out = f(&mut tape, &vars)?;
    if out.tensor().len() != 1 {
        return Err(Error::Autodiff("finite_diff_check needs a scalar function".into()));
    }
    tape.backward(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(entries: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn linear_function_is_exact() {
        // f = sum(3x): central differences are exact for linear maps.
        let p = params(&[("x", Tensor::from_fn(vec![4], |i| i as f64 * 0.3 + 0.1))]);
        let report = finite_diff_check(
            &|tape, vars| {
                let y = tape.scale(&vars["x"], 3.0)?;
                tape.sum(&y)
            },
            &p,
            1e-4,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn mean_of_matmul_matches_finite_differences() {
        let a = Tensor::from_fn(vec![3, 4], |i| ((i * 7 + 3) % 11) as f64 * 0.21 - 1.0);
        let b = Tensor::from_fn(vec![4, 2], |i| ((i * 5 + 1) % 13) as f64 * 0.17 - 1.0);
        let p = params(&[("a", a), ("b", b)]);
        let report = finite_diff_check(
            &|tape, vars| {
                let c = tape.matmul(&vars["a"], &vars["b"])?;
                tape.mean(&c)
            },
            &p,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn softmax_attention_block_passes() {
        // One attention head: softmax(q kᵀ / √d) v, reduced to a scalar.
        let q = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.31).sin());
        let k = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.17).cos());
        let v = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.23).sin() * 0.5);
        let p = params(&[("q", q), ("k", k), ("v", v)]);
        let report = finite_diff_check(
            &|tape, vars| {
                let kt = tape.transpose(&vars["k"], &[1, 0])?;
                let scores = tape.matmul(&vars["q"], &kt)?;
                let scaled = tape.scale(&scores, 0.5)?;
                let w = tape.softmax(&scaled, 1)?;
                let out = tape.matmul(&w, &vars["v"])?;
                let sq = tape.mul(&out, &out)?;
                tape.mean(&sq)
            },
            &p,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn sampling_caps_checks() {
        let p = params(&[("x", Tensor::from_fn(vec![100], |i| i as f64 * 0.01))]);
        let report = finite_diff_check_sampled(
            &|tape, vars| {
                let sq = tape.mul(&vars["x"], &vars["x"])?;
                tape.sum(&sq)
            },
            &p,
            1e-4,
            1e-4,
            10,
        )
        .unwrap();
        assert!(report.checks <= 11);
        assert!(report.passed());
    }
}
