//! Central finite-difference checks of tape gradients.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumericError, ParamId, ParamStore, Tape, Tensor, Var};

pub const EPSILON: f64 = 1e-5;
/// Floor of the relative-error denominator; absolute errors below it count
/// as relative errors against `1e-6`.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Number of scalar coordinates compared.
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
}

/// The coordinate with the largest relative error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Worst {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }

    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(Worst {
                tensor: label.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64, NumericError> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(NumericError::NotScalar(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Reduces `v` to a scalar through fixed pseudo-random weights in
/// `(-0.5, 0.5)`, none zero, so every output coordinate contributes and shared
/// offsets such as a log-partition mostly cancel.
pub fn project(tape: &mut Tape, v: Var) -> Result<Var, NumericError> {
    let shape = tape.value(v).shape().to_vec();
    let n = tape.value(v).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 + 13) % 101) as f64 / 101.0 - 0.5).collect();
    let c = tape.constant(Tensor::new(shape, w)?);
    tape.dot(v, c)
}

/// Checks the gradient of `f` with respect to each tracked input tensor.
///
/// `f` receives one leaf per entry of `inputs` and must return a scalar.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], f: F) -> Result<CheckResult, NumericError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, NumericError> {
        let mut tape = Tape::detached();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::detached();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut result = CheckResult::new(name);
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.wrt(*v).unwrap_or(&zeros).clone();
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + EPSILON;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - EPSILON;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            result.record(&format!("input{k}"), i, analytic.data()[i], (up - down) / (2.0 * EPSILON));
        }
    }
    Ok(result)
}

/// Checks the gradient of `f` with respect to the parameters of `store` whose
/// names start with `prefix`.
///
/// At most `per_param` coordinates of each parameter are compared, chosen by
/// `rng`; `None` compares every coordinate. `f` must return a scalar.
pub fn check_params<F, E, R>(
    name: &str,
    store: &ParamStore,
    prefix: &str,
    per_param: Option<usize>,
    rng: &mut R,
    f: F,
) -> Result<CheckResult, E>
where
    F: Fn(&mut Tape) -> Result<Var, E>,
    E: From<NumericError>,
    R: Rng + ?Sized,
{
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new(s);
        let out = f(&mut tape)?;
        Ok(scalar_of(&tape, out)?)
    };
    let grads = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };

    let mut result = CheckResult::new(name);
    let mut work = store.clone();
    for (id, p) in store.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
        let n = p.value.numel();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => {
                let mut c = index::sample(rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let zeros = Tensor::zeros(p.value.shape());
        let analytic = grads.param(id).unwrap_or(&zeros).clone();
        for i in coords {
            let x0 = p.value.data()[i];
            nudge(&mut work, id, i, x0 + EPSILON);
            let up = eval(&work)?;
            nudge(&mut work, id, i, x0 - EPSILON);
            let down = eval(&work)?;
            nudge(&mut work, id, i, x0);
            result.record(&p.name, i, analytic.data()[i], (up - down) / (2.0 * EPSILON));
        }
    }
    Ok(result)
}

fn nudge(store: &mut ParamStore, id: ParamId, i: usize, value: f64) {
    store.value_mut(id).data_mut()[i] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // At relu's kink the central difference is 0.5, the analytic value is not.
        let r = check_inputs("kink", &[Tensor::vector(vec![0.0])], |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn square_matches() {
        let r = check_inputs("square", &[Tensor::vector(vec![3.0, -2.0])], |t, v| t.dot(v[0], v[0])).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn params_check_covers_every_coordinate() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = store.add("w", random(&mut rng, &[3, 2])).unwrap();
        let x = random(&mut rng, &[2]);
        let r = check_params::<_, NumericError, _>("matvec", &store, "", None, &mut rng, |t| {
            let wv = t.param(w)?;
            let xv = t.constant(x.clone());
            let y = t.matvec(wv, xv)?;
            let y = t.tanh(y);
            project(t, y)
        })
        .unwrap();
        assert_eq!(r.checked, 6);
        assert!(r.passed(), "{r:?}");
    }

    /// One vector-valued step of a random composition over a 4-vector and a
    /// fixed `[4, 4]` matrix.
    fn apply(t: &mut Tape, op: u8, x: Var, m: Var, other: Var) -> Result<Var, NumericError> {
        Ok(match op % 12 {
            0 => t.sigmoid(x),
            1 => t.tanh(x),
            2 => {
                let s = t.affine(x, 0.5, 0.3);
                t.relu(s)
            }
            3 => t.matvec(m, x)?,
            4 => t.add(x, other)?,
            5 => t.hadamard(x, other)?,
            6 => t.sub(x, other)?,
            7 => t.softmax(x)?,
            8 => t.log_softmax(x)?,
            9 => t.masked_softmax(x, &[true, false, true, true])?,
            10 => {
                let a = t.slice(x, 0, 2)?;
                let b = t.slice(x, 2, 2)?;
                t.concat(&[b, a])?
            }
            _ => {
                let s = t.stack(&[x, other])?;
                let st = t.transpose(s)?;
                let p = t.matmul(st, s)?;
                let r = t.gather_rows(p, &[1])?;
                let r = t.row(r, 0)?;
                t.scale(r, 0.5)
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_compositions_match(seed in any::<u64>(), ops in prop::collection::vec(any::<u8>(), 1..=6)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[4]), random(&mut rng, &[4, 4]), random(&mut rng, &[4])];
            let r = check_inputs("composition", &inputs, |t, v| {
                let mut x = v[0];
                for &op in &ops {
                    x = apply(t, op, x, v[1], v[2])?;
                }
                let s = t.sum(x);
                let xs = t.pick(x, 0)?;
                let y = t.add(s, xs)?;
                project(t, y)
            }).unwrap();
            let near_kink = {
                let mut t = Tape::detached();
                let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
                let mut x = vars[0];
                let mut close = false;
                for &op in &ops {
                    if op % 12 == 2 {
                        let s = t.affine(x, 0.5, 0.3);
                        close |= t.value(s).data().iter().any(|v| v.abs() < 1e-3);
                    }
                    x = apply(&mut t, op, x, vars[1], vars[2]).unwrap();
                }
                close
            };
            prop_assume!(!near_kink);
            prop_assert!(r.passed(), "{:?} ops {:?}", r, ops);
        }
    }
}
