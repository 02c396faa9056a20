//! Multi-head attention over token groups, with optional low-rank adapters
//! on every linear projection.
//!
//! Tokens arrive as [G, L, C] (G independent groups, L tokens each); keys and
//! values may carry extra conditioning tokens ([G, L', C]). Heads split the
//! channel axis. The adapter path adds `scale · (x·down)·up` to a projection;
//! up-matrices start at zero, so a fresh adapter is exactly a no-op.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Resolves parameter names and applies projections for one attention block.
pub struct AttnProj<'a> {
    pub vars: &'a BTreeMap<String, Var>,
    /// e.g. "enc.l0.spatial"
    pub prefix: &'a str,
    pub use_adapters: bool,
    pub lora_scale: f64,
}

impl AttnProj<'_> {
    fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::data(format!("missing parameter `{}`", name)))
    }

    /// x·W + b with the adapter contribution when enabled.
    pub fn project(&self, tape: &mut Tape, x: &Var, proj: &str) -> Result<Var> {
        let w = self.var(&format!("{}.{}.w", self.prefix, proj))?;
        let b = self.var(&format!("{}.{}.b", self.prefix, proj))?;
        let mut y = tape.matmul(x, w)?;
        y = tape.add_broadcast(&y, b)?;
        if self.use_adapters {
            let down = self.var(&format!("lora.{}.{}.down", self.prefix, proj))?;
            let up = self.var(&format!("lora.{}.{}.up", self.prefix, proj))?;
            let mid = tape.matmul(x, down)?;
            let mut delta = tape.matmul(&mid, up)?;
            if self.lora_scale != 1.0 {
                delta = tape.scale(&delta, self.lora_scale)?;
            }
            y = tape.add(&y, &delta)?;
        }
        Ok(y)
    }
}

/// Multi-head attention: queries from `q_tokens` [G, Lq, C], keys/values from
/// `kv_tokens` [G, Lk, C]. Returns the projected output [G, Lq, C]; the
/// caller adds the residual.
pub fn attend(
    tape: &mut Tape,
    proj: &AttnProj,
    q_tokens: &Var,
    kv_tokens: &Var,
    heads: usize,
) -> Result<Var> {
    let shape = q_tokens.shape().to_vec();
    if shape.len() != 3 || kv_tokens.shape().len() != 3 {
        return Err(Error::shape(format!(
            "attend wants [G,L,C] tokens, got {:?} / {:?}",
            q_tokens.shape(),
            kv_tokens.shape()
        )));
    }
    let (g, lq, c) = (shape[0], shape[1], shape[2]);
    let lk = kv_tokens.shape()[1];
    if kv_tokens.shape()[0] != g || kv_tokens.shape()[2] != c {
        return Err(Error::shape(format!(
            "attend: kv {:?} incompatible with q {:?}",
            kv_tokens.shape(),
            q_tokens.shape()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!("channels {} not divisible by {} heads", c, heads)));
    }
    let hd = c / heads;

    let q = proj.project(tape, q_tokens, "q")?;
    let k = proj.project(tape, kv_tokens, "k")?;
    let v = proj.project(tape, kv_tokens, "v")?;

    let split = |tape: &mut Tape, x: &Var, l: usize| -> Result<Var> {
        let r = tape.reshape(x, &[g, l, heads, hd])?;
        tape.transpose(&r, &[0, 2, 1, 3]) // [G, H, L, hd]
    };
    let qh = split(tape, &q, lq)?;
    let kh = split(tape, &k, lk)?;
    let vh = split(tape, &v, lk)?;

    let kt = tape.transpose(&kh, &[0, 1, 3, 2])?; // [G, H, hd, Lk]
    let scores = tape.matmul(&qh, &kt)?;
    let scaled = tape.scale(&scores, 1.0 / (hd as f64).sqrt())?;
    let weights = tape.softmax(&scaled, 3)?;
    let mixed = tape.matmul(&weights, &vh)?; // [G, H, Lq, hd]

    let merged = tape.transpose(&mixed, &[0, 2, 1, 3])?;
    let flat = tape.reshape(&merged, &[g, lq, c])?;
    proj.project(tape, &flat, "o")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn proj_params(prefix: &str, c: usize, rank: usize) -> BTreeMap<String, Tensor> {
        let mut p = BTreeMap::new();
        for name in ["q", "k", "v", "o"] {
            p.insert(
                format!("{}.{}.w", prefix, name),
                Tensor::from_fn(vec![c, c], |i| ((i * 31 + 7) % 13) as f64 * 0.05 - 0.3),
            );
            p.insert(format!("{}.{}.b", prefix, name), Tensor::zeros(vec![c]));
            p.insert(
                format!("lora.{}.{}.down", prefix, name),
                Tensor::from_fn(vec![c, rank], |i| ((i * 17 + 3) % 11) as f64 * 0.04),
            );
            p.insert(format!("lora.{}.{}.up", prefix, name), Tensor::zeros(vec![rank, c]));
        }
        p
    }

    fn vars(tape: &mut Tape, params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Var> {
        params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect()
    }

    #[test]
    fn zero_init_adapters_are_a_noop() {
        let params = proj_params("blk.spatial", 8, 2);
        let x = Tensor::from_fn(vec![3, 5, 8], |i| (i as f64 * 0.13).sin());

        let run = |use_adapters: bool| {
            let mut tape = Tape::inference();
            let vs = vars(&mut tape, &params);
            let proj = AttnProj { vars: &vs, prefix: "blk.spatial", use_adapters, lora_scale: 1.0 };
            let xv = tape.constant(x.clone());
            attend(&mut tape, &proj, &xv, &xv, 2).unwrap()
        };
        let without = run(false);
        let with = run(true);
        assert_eq!(with.tensor().max_abs_diff(without.tensor()).unwrap(), 0.0);
    }

    #[test]
    fn singleton_token_gets_weight_one() {
        // One token: softmax of a 1-entry row is exactly 1, so the output is
        // the value path of that token.
        let c = 4;
        let mut params = proj_params("blk.spatial", c, 2);
        // identity v/o, zero q/k so scores are 0 regardless
        params.insert(
            "blk.spatial.v.w".into(),
            Tensor::from_fn(vec![c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }),
        );
        params.insert(
            "blk.spatial.o.w".into(),
            Tensor::from_fn(vec![c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }),
        );
        let x = Tensor::from_fn(vec![2, 1, c], |i| i as f64 * 0.3 - 0.5);
        let mut tape = Tape::inference();
        let vs = vars(&mut tape, &params);
        let proj = AttnProj { vars: &vs, prefix: "blk.spatial", use_adapters: false, lora_scale: 1.0 };
        let xv = tape.constant(x.clone());
        let out = attend(&mut tape, &proj, &xv, &xv, 2).unwrap();
        assert!(out.tensor().max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn token_permutation_equivariance() {
        let params = proj_params("blk.spatial", 8, 2);
        let x = Tensor::from_fn(vec![1, 6, 8], |i| ((i * 23 + 5) % 19) as f64 * 0.11 - 1.0);
        let run = |input: Tensor| {
            let mut tape = Tape::inference();
            let vs = vars(&mut tape, &params);
            let proj =
                AttnProj { vars: &vs, prefix: "blk.spatial", use_adapters: false, lora_scale: 1.0 };
            let xv = tape.constant(input);
            attend(&mut tape, &proj, &xv, &xv, 2).unwrap().tensor().clone()
        };
        let base = run(x.clone());
        // permute tokens 0..6 by rotation
        let perm: Vec<usize> = (0..6).map(|i| (i + 2) % 6).collect();
        let permuted_in = crate::tensor::ops::gather(&x, 1, &perm).unwrap();
        let out_permuted = run(permuted_in);
        let expected = crate::tensor::ops::gather(&base, 1, &perm).unwrap();
        assert!(out_permuted.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let c = 4;
        let params = proj_params("blk.spatial", c, 2);
        let x = Tensor::from_fn(vec![2, 3, c], |i| (i as f64 * 0.17).sin());
        let report = crate::tensor::finite_diff_check(
            &|tape, vars| {
                let proj = AttnProj {
                    vars,
                    prefix: "blk.spatial",
                    use_adapters: false,
                    lora_scale: 1.0,
                };
                let xv = vars.get("x").unwrap();
                let out = attend(tape, &proj, xv, xv, 2)?;
                let sq = tape.mul(&out, &out)?;
                tape.mean(&sq)
            },
            &{
                let mut p = params.clone();
                p.insert("x".into(), x);
                p
            },
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
