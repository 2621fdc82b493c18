//! Recurrent cells and dot-product attention built from tape primitives.

use rand::Rng;

use super::params::{init_weight, ParamId, ParamStore};
use super::{NumericError, Tape, Tensor, Var};

fn check_len(tape: &Tape, v: Var, expected: usize, op: &'static str) -> Result<(), NumericError> {
    let t = tape.value(v);
    if t.rank() != 1 || t.numel() != expected {
        return Err(NumericError::ShapeMismatch {
            op,
            left: vec![expected],
            right: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
///
/// The input weights of the three gates are packed row-wise in `w`
/// (`[3·hidden, input]`), the recurrent weights of z and r in `u_zr`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    pub w: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b: ParamId,
}

impl GruCell {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        Ok(Self {
            input,
            hidden,
            w: store.add(format!("{prefix}.w"), init_weight(rng, 3 * hidden, input))?,
            u_zr: store.add(format!("{prefix}.u_zr"), init_weight(rng, 2 * hidden, hidden))?,
            u_h: store.add(format!("{prefix}.u_h"), init_weight(rng, hidden, hidden))?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[3 * hidden]))?,
        })
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var, NumericError> {
        check_len(tape, x, self.input, "gru_cell")?;
        check_len(tape, h, self.hidden, "gru_cell")?;
        let d = self.hidden;
        let (w, u_zr, u_h, b) = (
            tape.param(self.w)?,
            tape.param(self.u_zr)?,
            tape.param(self.u_h)?,
            tape.param(self.b)?,
        );
        let wx = tape.matvec(w, x)?;
        let gx = tape.add(wx, b)?;
        let gh = tape.matvec(u_zr, h)?;

        let zx = tape.slice(gx, 0, d)?;
        let zh = tape.slice(gh, 0, d)?;
        let z_pre = tape.add(zx, zh)?;
        let z = tape.sigmoid(z_pre);

        let rx = tape.slice(gx, d, d)?;
        let rh = tape.slice(gh, d, d)?;
        let r_pre = tape.add(rx, rh)?;
        let r = tape.sigmoid(r_pre);

        let rh = tape.hadamard(r, h)?;
        let uh = tape.matvec(u_h, rh)?;
        let cx = tape.slice(gx, 2 * d, d)?;
        let c_pre = tape.add(cx, uh)?;
        let cand = tape.tanh(c_pre);

        // h + z ⊙ (h̃ − h): same blend, and stays inside [-1, 1] under rounding.
        let diff = tape.sub(cand, h)?;
        let step = tape.hadamard(z, diff)?;
        tape.add(h, step)
    }
}

/// Hidden and cell state of an [`LstmCell`].
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Standard LSTM with gates packed as `[i; f; o; g]`; forget bias starts at 1.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl LstmCell {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Ok(Self {
            input,
            hidden,
            w: store.add(format!("{prefix}.w"), init_weight(rng, 4 * hidden, input))?,
            u: store.add(format!("{prefix}.u"), init_weight(rng, 4 * hidden, hidden))?,
            b: store.add(format!("{prefix}.b"), bias)?,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape) -> LstmState {
        LstmState {
            h: tape.constant(Tensor::zeros(&[self.hidden])),
            c: tape.constant(Tensor::zeros(&[self.hidden])),
        }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, state: LstmState) -> Result<LstmState, NumericError> {
        check_len(tape, x, self.input, "lstm_cell")?;
        check_len(tape, state.h, self.hidden, "lstm_cell")?;
        check_len(tape, state.c, self.hidden, "lstm_cell")?;
        let d = self.hidden;
        let (w, u, b) = (tape.param(self.w)?, tape.param(self.u)?, tape.param(self.b)?);
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, state.h)?;
        let pre = tape.add(wx, uh)?;
        let gates = tape.add(pre, b)?;

        let i_pre = tape.slice(gates, 0, d)?;
        let f_pre = tape.slice(gates, d, d)?;
        let o_pre = tape.slice(gates, 2 * d, d)?;
        let g_pre = tape.slice(gates, 3 * d, d)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let o = tape.sigmoid(o_pre);
        let g = tape.tanh(g_pre);

        let keep = tape.hadamard(f, state.c)?;
        let write = tape.hadamard(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.hadamard(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Scaled dot-product attention: `softmax_mask(Q Kᵀ / √d_k) V`.
///
/// `queries` is `[n_q, d_k]`, `keys` `[n_k, d_k]`, `values` `[n_k, d_v]`, and
/// `mask` is row-major `n_q × n_k`; each query row must keep at least one key.
pub fn attention(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    mask: &[bool],
) -> Result<Var, NumericError> {
    let (nq, dk) = dims(tape, queries)?;
    let (nk, dk2) = dims(tape, keys)?;
    let (nv, _) = dims(tape, values)?;
    if dk != dk2 || nk != nv || mask.len() != nq * nk {
        return Err(NumericError::ShapeMismatch {
            op: "attention",
            left: vec![nq, dk, nk],
            right: vec![nk, dk2, nv, mask.len()],
        });
    }
    let kt = tape.transpose(keys)?;
    let raw = tape.matmul(queries, kt)?;
    let scores = tape.scale(raw, 1.0 / (dk as f64).sqrt());
    let weights = tape.masked_softmax(scores, mask)?;
    tape.matmul(weights, values)
}

/// Lower-triangular mask: row `i` keeps columns `0..=i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

fn dims(tape: &Tape, v: Var) -> Result<(usize, usize), NumericError> {
    let t = tape.value(v);
    t.dims2().ok_or_else(|| NumericError::InvalidShape(t.shape().to_vec()))
}

/// Single-head self-attention with Q/K/V projections `[d_model, d_in]`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub d_in: usize,
    pub d_model: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl SelfAttention {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self, NumericError> {
        Ok(Self {
            d_in,
            d_model,
            wq: store.add(format!("{prefix}.wq"), init_weight(rng, d_model, d_in))?,
            wk: store.add(format!("{prefix}.wk"), init_weight(rng, d_model, d_in))?,
            wv: store.add(format!("{prefix}.wv"), init_weight(rng, d_model, d_in))?,
        })
    }

    /// Projects `inputs` (`[n, d_in]`) and attends under `mask`.
    pub fn forward(&self, tape: &mut Tape, inputs: Var, mask: &[bool]) -> Result<Var, NumericError> {
        let project = |tape: &mut Tape, w: ParamId| -> Result<Var, NumericError> {
            let wv = tape.param(w)?;
            let wt = tape.transpose(wv)?;
            tape.matmul(inputs, wt)
        };
        let q = project(tape, self.wq)?;
        let k = project(tape, self.wk)?;
        let v = project(tape, self.wv)?;
        attention(tape, q, k, v, mask)
    }
}
