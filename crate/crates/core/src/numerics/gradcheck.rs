//! Central-difference gradient checking.
//!
//! Both the analytic gradient and the finite differences are evaluated in
//! `f64` through the same generic op implementations the `f32` model uses, so
//! the comparison measures the backward formulas rather than `f32` round-off.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{AttnMask, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::positional::RopeTable;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub function: String,
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Names accepted by [`grad_check`].
pub const REGISTERED: &[&str] = &[
    "sum",
    "sum_sq",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "add_row",
    "mul_row",
    "matmul",
    "matmul_right",
    "layer_norm",
    "silu",
    "gelu",
    "softmax",
    "rope",
    "attention",
    "attention_masked",
    "attention_block",
    "concat_slice",
    "gather_row",
    "mse",
];

fn aux<F: Scalar>(id: &str, salt: u64, shape: &[usize]) -> Tensor<F> {
    let mut seed = 0xC0FF_EE00_u64 ^ salt;
    for b in id.bytes() {
        seed = seed.wrapping_mul(0x100_0000_01B3).wrapping_add(b as u64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::<f64>::randn(shape, 1.0, &mut rng).cast()
}

/// Weighted reduction `Σ w ⊙ y` with a fixed random `w`, so symmetric ops
/// (softmax rows, layer norm) still produce non-trivial gradients.
fn weighted_sum<F: Scalar>(tape: &mut Tape<F>, id: &str, y: Var) -> Result<Var> {
    let w = aux(id, 99, tape.value(y).shape());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn heads_for(d: usize) -> usize {
    if d.is_multiple_of(2) && d >= 4 {
        2
    } else {
        1
    }
}

/// Rotary table over the rows of `x` with positions `row − 2`, so negative
/// positions are exercised. Odd trailing channels stay unrotated.
fn test_rope_table<F: Scalar>(rows: usize, cols: usize) -> Arc<RopeTable<F>> {
    let positions: Vec<f64> = (0..rows).map(|r| r as f64 - 2.0).collect();
    Arc::new(RopeTable::rotary_1d(&positions, cols, cols / 2 * 2, 1, 10000.0))
}

/// Builds the registered scalar function of `x` on `tape`.
pub fn build_function<F: Scalar>(id: &str, tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (rows, cols) = (tape.value(x).rows(), tape.value(x).cols());
    let y = match id {
        "sum" => return tape.sum(x),
        "sum_sq" => {
            let sq = tape.mul(x, x)?;
            return tape.sum(sq);
        }
        "add" => {
            let c = tape.constant(aux(id, 1, &shape));
            tape.add(x, c)?
        }
        "sub" => {
            let c = tape.constant(aux(id, 1, &shape));
            tape.sub(c, x)?
        }
        "mul" => {
            let c = tape.constant(aux(id, 1, &shape));
            let y = tape.mul(x, c)?;
            tape.mul(y, x)?
        }
        "scale" => tape.scale(x, F::of(-1.7))?,
        "add_scalar" => {
            let y = tape.add_scalar(x, F::of(0.3))?;
            tape.mul(y, y)?
        }
        "add_row" | "mul_row" => {
            let xm = x_as_matrix(tape, x, rows, cols)?;
            let row = tape.slice_rows(xm, 0, 1)?;
            let row = tape.scale(row, F::of(0.5))?;
            if id == "add_row" {
                let y = tape.add_row(xm, row)?;
                tape.mul(y, y)?
            } else {
                tape.mul_row(xm, row)?
            }
        }
        "matmul" => {
            let b = tape.constant(aux(id, 1, &[cols, 5]));
            tape.matmul(x, b)?
        }
        "matmul_right" => {
            let a = tape.constant(aux(id, 1, &[3, rows]));
            let xm = x_as_matrix(tape, x, rows, cols)?;
            tape.matmul(a, xm)?
        }
        "layer_norm" => tape.layer_norm(x, F::of(1e-5))?,
        "silu" => tape.silu(x)?,
        "gelu" => tape.gelu(x)?,
        "softmax" => tape.softmax(x)?,
        "rope" => {
            let xm = x_as_matrix(tape, x, rows, cols)?;
            tape.rope(xm, test_rope_table(rows, cols))?
        }
        "attention" | "attention_masked" => {
            let xm = x_as_matrix(tape, x, rows, cols)?;
            let wk = tape.constant(aux(id, 1, &[cols, cols]).scale(F::of(0.5)));
            let wv = tape.constant(aux(id, 2, &[cols, cols]).scale(F::of(0.5)));
            let k = tape.matmul(xm, wk)?;
            let v = tape.matmul(xm, wv)?;
            let mask = (id == "attention_masked").then(|| AttnMask {
                n_q: rows,
                n_k: rows,
                allowed: (0..rows * rows).map(|i| i / rows >= i % rows).collect(),
            });
            tape.attention(xm, k, v, heads_for(cols), mask.as_ref())?
        }
        "attention_block" => {
            let xm = x_as_matrix(tape, x, rows, cols)?;
            let h = tape.layer_norm(xm, F::of(1e-5))?;
            let s = F::of(1.0 / (cols as f64).sqrt());
            let proj = |tape: &mut Tape<F>, salt: u64, input: Var| -> Result<Var> {
                let w = tape.constant(aux(id, salt, &[cols, cols]).scale(s));
                tape.matmul(input, w)
            };
            let q = proj(tape, 1, h)?;
            let k = proj(tape, 2, h)?;
            let v = proj(tape, 3, h)?;
            let table = test_rope_table(rows, cols);
            let q = tape.rope(q, table.clone())?;
            let k = tape.rope(k, table)?;
            let a = tape.attention(q, k, v, heads_for(cols), None)?;
            let o = proj(tape, 4, a)?;
            tape.add(xm, o)?
        }
        "concat_slice" => {
            let xm = x_as_matrix(tape, x, rows, cols)?;
            let c = tape.constant(aux(id, 1, &[2, cols]));
            let cat = tape.concat_rows(&[c, xm, c])?;
            let mid = tape.slice_rows(cat, 1, rows + 1)?;
            let y = tape.slice_cols(mid, cols / 2, cols - cols / 2)?;
            tape.mul(y, y)?
        }
        "gather_row" => {
            let xm = x_as_matrix(tape, x, rows, cols)?;
            let r = tape.gather_row(xm, rows / 2)?;
            tape.mul(r, r)?
        }
        "mse" => {
            let c = tape.constant(aux(id, 1, &shape));
            return tape.mse(x, c);
        }
        other => return Err(Error::UnknownFunction(other.to_string())),
    };
    weighted_sum(tape, id, y)
}

/// Views a rank-1/3 input as a `rows × cols` matrix on the tape.
fn x_as_matrix<F: Scalar>(tape: &mut Tape<F>, x: Var, rows: usize, cols: usize) -> Result<Var> {
    if tape.value(x).shape() == [rows, cols] {
        return Ok(x);
    }
    // concat of a single part reshapes without changing values
    let t = tape.concat_rows(&[x])?;
    debug_assert_eq!(tape.value(t).shape(), [rows, cols]);
    Ok(t)
}

/// Compares the analytic gradient of the registered function `id` at `input`
/// against central differences with step `eps`.
pub fn grad_check(id: &str, input: &Tensor, eps: f64) -> Result<GradCheckReport> {
    if !REGISTERED.contains(&id) {
        return Err(Error::UnknownFunction(id.to_string()));
    }
    let x: Tensor<f64> = input.cast();
    let mut report = check_gradient(|tape, v| build_function(id, tape, v), &x, eps)?;
    report.function = id.to_string();
    Ok(report)
}

/// Gradient check for an arbitrary scalar function built on a tape.
pub fn check_gradient(
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    input: &Tensor<f64>,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(input.clone(), true);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |x: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(x, false);
        let o = f(&mut t, v)?;
        let val = t.value(o).data()[0];
        if !val.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    let mut worst_index = 0;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        function: String::new(),
        max_rel_error: worst,
        worst_index,
        coordinates: input.len(),
    })
}
