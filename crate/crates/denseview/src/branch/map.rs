//! Monocular appearance propagation: cross-attention where the reference
//! video supplies the queries and the multi-view layout features supply the
//! keys and values.
//!
//! Per frame, the reference features are repeated V times to form WHV query
//! tokens; shapes follow the fixed orientation Q: WHV×N_c, K: N_c×WHV,
//! V: WHV×N_c, and the attention is softmax(Q·K/√N_c)·V. The orientation is
//! switchable (`feature_as_q`) for the ablation that queries with the layout
//! features instead.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Projected attention operands for one frame, in the fixed orientation.
pub struct MapOperands {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Applies L_Q to the query source and L_K/L_V to the key/value source,
/// returning Q [WHV, N_c], K [N_c, WHV] (transposed on projection), and
/// V [WHV, N_c].
pub fn map_project(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    q_source: &Var,
    kv_source: &Var,
) -> Result<MapOperands> {
    let var = |name: &str| -> Result<&Var> {
        vars.get(name).ok_or_else(|| Error::data(format!("missing parameter `{}`", name)))
    };
    let linear = |tape: &mut Tape, x: &Var, stem: &str| -> Result<Var> {
        let w = var(&format!("{}.{}.w", prefix, stem))?;
        let b = var(&format!("{}.{}.b", prefix, stem))?;
        let y = tape.matmul(x, w)?;
        tape.add_broadcast(&y, b)
    };
    let q = linear(tape, q_source, "q")?;
    let k_rows = linear(tape, kv_source, "k")?;
    let k = tape.transpose(&k_rows, &[1, 0])?;
    let v = linear(tape, kv_source, "v")?;

    let tokens = q.shape()[0];
    let nc = q.shape()[1];
    debug_assert_eq!(k.shape(), &[nc, tokens]);
    debug_assert_eq!(v.shape(), &[tokens, nc]);
    Ok(MapOperands { q, k, v })
}

/// softmax(Q·K/√N_c)·V for one frame, optionally multi-head along channels.
pub fn map_attend_frame(tape: &mut Tape, ops: &MapOperands, heads: usize) -> Result<Var> {
    let tokens = ops.q.shape()[0];
    let nc = ops.q.shape()[1];
    if heads == 0 || nc % heads != 0 {
        return Err(Error::shape(format!("MAP channels {} not divisible by {} heads", nc, heads)));
    }
    let scale = 1.0 / (nc as f64).sqrt();
    if heads == 1 {
        let scores = tape.matmul(&ops.q, &ops.k)?;
        let scaled = tape.scale(&scores, scale)?;
        let weights = tape.softmax(&scaled, 1)?;
        return tape.matmul(&weights, &ops.v);
    }
    let hd = nc / heads;
    // [WHV, H, hd] → [H, WHV, hd]
    let split_rows = |tape: &mut Tape, x: &Var| -> Result<Var> {
        let r = tape.reshape(x, &[tokens, heads, hd])?;
        tape.transpose(&r, &[1, 0, 2])
    };
    let qh = split_rows(tape, &ops.q)?;
    let vh = split_rows(tape, &ops.v)?;
    // K is [nc, WHV] → [H, hd, WHV]
    let kh = tape.reshape(&ops.k, &[heads, hd, tokens])?;
    let scores = tape.matmul(&qh, &kh)?;
    let scaled = tape.scale(&scores, scale)?;
    let weights = tape.softmax(&scaled, 2)?;
    let mixed = tape.matmul(&weights, &vh)?; // [H, WHV, hd]
    let back = tape.transpose(&mixed, &[1, 0, 2])?;
    tape.reshape(&back, &[tokens, nc])
}
