//! The finite-difference gradient suite: every tape primitive, the recurrent
//! and attention cells, the dialogue encoder, the policy, and the training
//! surrogate on frozen rollouts.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{synthesize_graph, GeneratorSpec, IntentGraph};
use crate::model::{Model, ModelConfig};
use crate::numeric::finite_diff::{check_inputs, check_params, project, CheckResult, TOLERANCE};
use crate::numeric::{attention, causal_mask, GruCell, LstmCell, NumericError, ParamStore, SelfAttention, Tape, Tensor, Var};
use crate::reasoner::action_space;
use crate::training::{
    build_vocabulary, freeze_rollouts, frozen_surrogate, synthesize_dialogues, PreparedSample, TrainConfig, TrainError,
    DEFAULT_FILLERS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Coordinates compared per parameter tensor of the encoder, policy and
    /// surrogate checks.
    pub per_param: usize,
    pub model: ModelConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            per_param: 6,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("nonempty shape")
}

/// Random values bounded away from zero, for relu inputs.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector(
        (0..n)
            .map(|_| {
                let m = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect(),
    )
}

type Unary = fn(&mut Tape, &[Var]) -> Result<Var, NumericError>;

fn primitive_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>, NumericError> {
    let v3 = |rng: &mut ChaCha8Rng| random(rng, &[3]);
    let m23 = |rng: &mut ChaCha8Rng| random(rng, &[2, 3]);
    let cases: Vec<(&str, Vec<Tensor>, Unary)> = vec![
        ("matmul", vec![m23(rng), random(rng, &[3, 2])], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        }),
        ("matvec", vec![m23(rng), v3(rng)], |t, v| {
            let y = t.matvec(v[0], v[1])?;
            project(t, y)
        }),
        ("transpose", vec![m23(rng)], |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y)
        }),
        ("add", vec![v3(rng), v3(rng)], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
        ("sub", vec![v3(rng), v3(rng)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y)
        }),
        ("hadamard", vec![v3(rng), v3(rng)], |t, v| {
            let y = t.hadamard(v[0], v[1])?;
            project(t, y)
        }),
        ("affine", vec![v3(rng)], |t, v| {
            let y = t.affine(v[0], -1.5, 0.25);
            project(t, y)
        }),
        ("scale", vec![v3(rng)], |t, v| {
            let y = t.scale(v[0], 2.5);
            project(t, y)
        }),
        ("relu", vec![off_kink(rng, 4)], |t, v| {
            let y = t.relu(v[0]);
            project(t, y)
        }),
        ("sigmoid", vec![v3(rng)], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y)
        }),
        ("tanh", vec![v3(rng)], |t, v| {
            let y = t.tanh(v[0]);
            project(t, y)
        }),
        ("concat", vec![v3(rng), random(rng, &[2])], |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]])?;
            project(t, y)
        }),
        ("concat_cols", vec![m23(rng), random(rng, &[2, 1])], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            project(t, y)
        }),
        ("slice", vec![random(rng, &[5])], |t, v| {
            let y = t.slice(v[0], 1, 3)?;
            project(t, y)
        }),
        ("row", vec![m23(rng)], |t, v| {
            let y = t.row(v[0], 1)?;
            project(t, y)
        }),
        ("gather_rows", vec![random(rng, &[3, 2])], |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2])?;
            project(t, y)
        }),
        ("stack", vec![v3(rng), v3(rng)], |t, v| {
            let y = t.stack(&[v[0], v[1]])?;
            project(t, y)
        }),
        ("sum", vec![m23(rng)], |t, v| {
            let y = t.sum(v[0]);
            let y = t.tanh(y);
            project(t, y)
        }),
        ("dot", vec![v3(rng), v3(rng)], |t, v| t.dot(v[0], v[1])),
        ("masked_softmax", vec![m23(rng)], |t, v| {
            let y = t.masked_softmax(v[0], &[true, false, true, true, true, false])?;
            project(t, y)
        }),
        ("softmax", vec![random(rng, &[4])], |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y)
        }),
        ("log_softmax", vec![random(rng, &[4])], |t, v| {
            let y = t.log_softmax(v[0])?;
            project(t, y)
        }),
        ("pick", vec![m23(rng)], |t, v| {
            let y = t.pick(v[0], 4)?;
            let y = t.sigmoid(y);
            project(t, y)
        }),
        ("attention", vec![random(rng, &[3, 2]), random(rng, &[3, 2]), random(rng, &[3, 4])], |t, v| {
            let y = attention(t, v[0], v[1], v[2], &causal_mask(3))?;
            project(t, y)
        }),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| check_inputs(name, &inputs, f))
        .collect()
}

fn cell_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>, NumericError> {
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let gru = GruCell::register(&mut store, "gru", 3, 4, rng)?;
    let (xs, h0) = ([random(rng, &[3]), random(rng, &[3])], random(rng, &[4]));
    out.push(check_params("gru_cell", &store, "", None, rng, |t| {
        let mut h = t.constant(h0.clone());
        for x in &xs {
            let x = t.constant(x.clone());
            h = gru.step(t, x, h)?;
        }
        project(t, h)
    })?);

    let mut store = ParamStore::new();
    let lstm = LstmCell::register(&mut store, "lstm", 3, 4, rng)?;
    out.push(check_params("lstm_cell", &store, "", None, rng, |t| {
        let mut s = lstm.zero_state(t);
        for x in &xs {
            let x = t.constant(x.clone());
            s = lstm.step(t, x, s)?;
        }
        let both = t.concat(&[s.h, s.c])?;
        project(t, both)
    })?);

    let mut store = ParamStore::new();
    let att = SelfAttention::register(&mut store, "att", 4, 3, rng)?;
    let inputs = random(rng, &[3, 4]);
    out.push(check_params("self_attention", &store, "", None, rng, |t| {
        let u = t.constant(inputs.clone());
        let y = att.forward(t, u, &causal_mask(3))?;
        project(t, y)
    })?);
    Ok(out)
}

struct Fixture {
    graph: IntentGraph,
    model: Model,
    sample: PreparedSample,
}

/// Default-sized model on a three-kind synthetic graph with a three-turn
/// dialogue.
fn fixture(cfg: &GradCheckConfig) -> Result<Fixture, TrainError> {
    let graph = synthesize_graph(&GeneratorSpec::new(3, 4, 20, 2), cfg.seed)?;
    let samples = synthesize_dialogues(&graph, 1, (3, 3), cfg.seed)?;
    let vocab = build_vocabulary(&graph, &samples, DEFAULT_FILLERS);
    let model = Model::new(&graph, vocab.len(), cfg.model, cfg.seed)?;
    let sample = samples[0].prepare(&graph, &vocab)?;
    Ok(Fixture { graph, model, sample })
}

fn encoder_check(f: &Fixture, per_param: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult, TrainError> {
    let enc = &f.model.encoder;
    check_params("dialogue_encoder", &f.model.store, "enc.", Some(per_param), rng, |t| {
        let c = enc.encode_context(t, &f.sample.turns)?;
        Ok(project(t, c)?)
    })
}

fn policy_check(f: &Fixture, per_param: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult, TrainError> {
    let (policy, g) = (&f.model.policy, &f.graph);
    let ctx = random(rng, &[f.model.config.encoder.d_ctx]);
    check_params("policy", &f.model.store, "pol.", Some(per_param), rng, |t| {
        let c = t.constant(ctx.clone());
        let mut state = policy.start_state(t)?;
        let mut at = g.root();
        let mut terms = Vec::new();
        // Two hops so the history LSTM and both embedding tables participate.
        for _ in 0..2 {
            let actions = action_space(g, at)?;
            let a_mat = policy.action_matrix(t, &actions)?;
            terms.push(policy.log_distribution(t, state.h, at, c, a_mat)?);
            let pick = actions.iter().position(|a| !a.is_stay()).unwrap_or(0);
            let row = t.row(a_mat, pick)?;
            state = policy.encode_history(t, state, row)?;
            at = actions[pick].target;
        }
        let all = t.concat(&terms)?;
        Ok(project(t, all)?)
    })
}

fn surrogate_check(f: &Fixture, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult, TrainError> {
    let train_cfg = TrainConfig {
        model: f.model.config,
        seed: cfg.seed,
        // Nonzero so the entropy term is differentiated too.
        entropy_weight: 0.1,
        ..Default::default()
    };
    let frozen = freeze_rollouts(&f.model, &f.graph, &f.sample, &train_cfg, cfg.seed)?;
    check_params("surrogate", &f.model.store, "", Some(cfg.per_param), rng, |t| {
        frozen_surrogate(t, &f.model, &f.graph, &f.sample, &frozen, train_cfg.entropy_weight)
    })
}

/// Runs every check; a check passes when its largest relative error is below
/// [`TOLERANCE`].
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport, TrainError> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = primitive_checks(&mut rng)?;
    checks.extend(cell_checks(&mut rng)?);
    let f = fixture(cfg)?;
    checks.push(encoder_check(&f, cfg.per_param, &mut rng)?);
    checks.push(policy_check(&f, cfg.per_param, &mut rng)?);
    checks.push(surrogate_check(&f, cfg, &mut rng)?);
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < TOLERANCE,
        max_rel_error,
        tolerance: TOLERANCE,
        checks,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let r = run(&GradCheckConfig::default()).unwrap();
        for c in &r.checks {
            assert!(c.passed(), "{c:?}");
            assert!(c.checked > 0, "{}", c.name);
        }
        assert!(r.passed);
        let names: Vec<&str> = r.checks.iter().map(|c| c.name.as_str()).collect();
        for want in ["gru_cell", "lstm_cell", "self_attention", "dialogue_encoder", "policy", "surrogate"] {
            assert!(names.contains(&want), "{want}");
        }
    }
}
