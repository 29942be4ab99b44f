//! Cross-entropy training of both parameterizations with analytic gradients.
//!
//! The loss is the mean over train triples of -log p(answer | prefix) with
//! the softmax restricted to the answer set. Gradients are computed in
//! closed form: with E(a, pair) = 1{a = answer} - q(a) aggregated per token
//! into M(a, z) = sum over pairs whose prefix contains z,
//!
//!   dW_OV(a, z)  = -kq(z) * M(a, z) / |train|      (Trainable attention)
//!   dW_KQ(z,EOS) = -sum_a W_OV_eff(a, z) * M(a, z) / |train|
//!
//! and the factorized chain rule dW_O = G W_V, dW_V = G^T W_O with G the
//! combined-matrix gradient. FixedUniform attention drops the kq factor and
//! the EOS column, and leaves W_KQ untouched.
//!
//! Two optimizers: plain full-batch gradient descent (the gradient-flow
//! discretization the margin theory speaks about) and AdamW (the recipe that
//! reaches the reference losses at learning rate 5e-4 in 2e4 steps). Both
//! update every parameter entry through an identical operation sequence, so
//! the answer-set permutation symmetry of a symmetric initialization is
//! preserved to floating-point noise under either.

use crate::error::{Error, Result};
use crate::model::{
    logits_fixed_attention, logits_full, predict_prob, AttentionMode, FactorizedParams,
    ModelParams, NonFactorizedParams, ReducedOV,
};
use crate::numerics::DenseMatrix;
use crate::task::{Dataset, TaskSpec, Triple};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Recorded in run manifests so a checkpoint's provenance is reproducible.
pub const GENERATOR_ID: &str =
    "chacha8(seed); normal(0, scale) entries, row-major, matrices in order (w_o, w_v, w_kq) or (w_ov, w_kq)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// All answer rows of the effective output-value matrix at `alpha` and
    /// the live key-query column at `alpha * sqrt(|A| + 1)`; only valid for
    /// the non-factorized parameterization.
    Symmetric { alpha: f64 },
    /// Every weight entry i.i.d. Gaussian with the given scale.
    Random { seed: u64, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parameterization {
    Factorized { d_h: usize },
    NonFactorized,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_weight_decay() -> f64 {
    0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    #[serde(rename = "adamw")]
    AdamW {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_weight_decay")]
        weight_decay: f64,
    },
}

impl Optimizer {
    /// AdamW with the standard constants and no weight decay.
    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            weight_decay: default_weight_decay(),
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adamw()
    }
}

fn default_eval_every() -> usize {
    500
}

fn default_attention_mode() -> AttentionMode {
    AttentionMode::Trainable
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub init: Init,
    pub parameterization: Parameterization,
    #[serde(default = "default_attention_mode")]
    pub attention_mode: AttentionMode,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate = {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        match self.init {
            Init::Symmetric { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "symmetric alpha = {alpha} must be positive and finite"
                    )));
                }
                if matches!(self.parameterization, Parameterization::Factorized { .. }) {
                    return Err(Error::InvalidConfig(
                        "symmetric init is defined on the combined output-value matrix; \
                         use the non-factorized parameterization"
                            .into(),
                    ));
                }
            }
            Init::Random { scale, .. } => {
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "random init scale = {scale} must be positive and finite"
                    )));
                }
            }
        }
        if let Parameterization::Factorized { d_h } = self.parameterization {
            if d_h == 0 {
                return Err(Error::InvalidConfig("d_h must be >= 1".into()));
            }
        }
        if let Optimizer::AdamW {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::InvalidConfig(format!(
                    "adamw betas ({beta1}, {beta2}) must lie in [0, 1)"
                )));
            }
            if !(epsilon > 0.0) || weight_decay < 0.0 {
                return Err(Error::InvalidConfig(
                    "adamw needs epsilon > 0 and weight_decay >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub min_test_margin: f64,
    pub mean_rank_test: f64,
    pub symmetry_residual: f64,
}

/// Per-evaluation metrics plus the final parameters.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub rows: Vec<MetricsRow>,
    pub final_params: ModelParams,
}

impl TrainLog {
    /// Comma-separated metrics table; formatting round-trips every double.
    pub fn metrics_csv(&self) -> String {
        let mut s =
            String::from("step,train_loss,test_loss,min_test_margin,mean_rank_test,symmetry_residual\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step,
                r.train_loss,
                r.test_loss,
                r.min_test_margin,
                r.mean_rank_test,
                r.symmetry_residual
            ));
        }
        s
    }
}

pub const METRICS_HEADER: &str =
    "step,train_loss,test_loss,min_test_margin,mean_rank_test,symmetry_residual";

/// Parses a metrics table produced by [`TrainLog::metrics_csv`]; exact
/// inverse of the writer (every double round-trips).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "bad metrics header: {:?}",
                other.unwrap_or("<empty>")
            )))
        }
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse(format!(
                "metrics row {k} has {} fields, expected 6",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("metrics row {k} field {i}: {e}")))
        };
        rows.push(MetricsRow {
            step: fields[0]
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("metrics row {k} step: {e}")))?,
            train_loss: num(1)?,
            test_loss: num(2)?,
            min_test_margin: num(3)?,
            mean_rank_test: num(4)?,
            symmetry_residual: num(5)?,
        });
    }
    Ok(rows)
}

/// Builds initial parameters per the config's init scheme.
pub fn init_params(config: &TrainConfig, spec: &TaskSpec) -> Result<ModelParams> {
    config.validate()?;
    let d = spec.vocab_size();
    let mode = config.attention_mode;
    match (config.parameterization, config.init) {
        (Parameterization::NonFactorized, Init::Symmetric { alpha }) => {
            let mut p = NonFactorizedParams::zeros(d, mode);
            for a in spec.answer_range() {
                for z in 0..d {
                    p.w_ov.set(a, z, alpha);
                }
            }
            let kq = alpha * ((spec.answer_range().len() + 1) as f64).sqrt();
            for z in 0..d {
                p.w_kq.set(z, spec.eos(), kq);
            }
            Ok(ModelParams::NonFactorized(p))
        }
        (Parameterization::Factorized { .. }, Init::Symmetric { .. }) => Err(Error::InvalidConfig(
            "symmetric init requires the non-factorized parameterization".into(),
        )),
        (parameterization, Init::Random { seed, scale }) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, scale)
                .map_err(|e| Error::InvalidConfig(format!("random init: {e}")))?;
            let mut fill = |m: &mut DenseMatrix| {
                for v in m.data_mut() {
                    *v = normal.sample(&mut rng);
                }
            };
            match parameterization {
                Parameterization::Factorized { d_h } => {
                    let mut p = FactorizedParams::zeros(d, d_h, mode);
                    fill(&mut p.w_o);
                    fill(&mut p.w_v);
                    fill(&mut p.w_kq);
                    Ok(ModelParams::Factorized(p))
                }
                Parameterization::NonFactorized => {
                    let mut p = NonFactorizedParams::zeros(d, mode);
                    fill(&mut p.w_ov);
                    fill(&mut p.w_kq);
                    Ok(ModelParams::NonFactorized(p))
                }
            }
        }
    }
}

/// Per-token error aggregate M and the mean cross-entropy of `triples`.
///
/// `ov_a` holds the answer rows of the effective output-value matrix;
/// `kq` is the EOS column of W_KQ (ignored under FixedUniform).
struct ForwardStats {
    /// |A| x d; row a (answer index), column z (token id).
    m: DenseMatrix,
    mean_loss: f64,
}

fn forward_stats(
    ov_a: &DenseMatrix,
    kq: &[f64],
    mode: AttentionMode,
    spec: &TaskSpec,
    triples: &[Triple],
) -> Result<ForwardStats> {
    if triples.is_empty() {
        return Err(Error::InvalidConfig("empty triple list".into()));
    }
    let d = spec.vocab_size();
    let a0 = spec.answer_range().start;
    let n_answers = spec.answer_range().len();
    let eos = spec.eos();
    let mut m = DenseMatrix::zeros(n_answers, d);
    let mut loss_sum = 0.0;
    let mut logits = vec![0.0; n_answers];
    let mut q = vec![0.0; n_answers];
    for t in triples {
        let (s, r) = (t.subject, t.relation);
        match mode {
            AttentionMode::Trainable => {
                let (ks, kr, ke) = (kq[s], kq[r], kq[eos]);
                for (a, l) in logits.iter_mut().enumerate() {
                    let row = ov_a.row(a);
                    *l = row[s] * ks + row[r] * kr + row[eos] * ke;
                }
            }
            AttentionMode::FixedUniform => {
                for (a, l) in logits.iter_mut().enumerate() {
                    let row = ov_a.row(a);
                    *l = row[s] + row[r];
                }
            }
        }
        let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        if !mx.is_finite() {
            return Err(Error::NonFinite("training logits"));
        }
        let mut z = 0.0;
        for (qa, &l) in q.iter_mut().zip(&logits) {
            *qa = (l - mx).exp();
            z += *qa;
        }
        let a_star = t.answer - a0;
        loss_sum += mx + z.ln() - logits[a_star];
        for (a, qa) in q.iter_mut().enumerate() {
            let e = if a == a_star { 1.0 - *qa / z } else { -*qa / z };
            m.set(a, s, m.get(a, s) + e);
            m.set(a, r, m.get(a, r) + e);
            if mode == AttentionMode::Trainable {
                m.set(a, eos, m.get(a, eos) + e);
            }
        }
    }
    Ok(ForwardStats {
        m,
        mean_loss: loss_sum / triples.len() as f64,
    })
}

fn mean_loss(params: &ModelParams, spec: &TaskSpec, triples: &[Triple]) -> Result<f64> {
    let answers = spec.answer_range();
    let ov_a = params.ov_eff_rows(answers.start, answers.len())?;
    let kq_col: Vec<f64> = (0..spec.vocab_size())
        .map(|z| params.w_kq().get(z, spec.eos()))
        .collect();
    let stats = forward_stats(&ov_a, &kq_col, params.attention_mode(), spec, triples)?;
    Ok(stats.mean_loss)
}

/// Mean cross-entropy over the train split.
pub fn train_loss(params: &ModelParams, spec: &TaskSpec, dataset: &Dataset) -> Result<f64> {
    mean_loss(params, spec, dataset.train())
}

/// Mean cross-entropy over the held-out test split.
pub fn test_loss(params: &ModelParams, spec: &TaskSpec, dataset: &Dataset) -> Result<f64> {
    mean_loss(params, spec, dataset.test())
}

#[derive(Debug, Clone)]
pub struct NonFactorizedGrad {
    pub d_w_ov: DenseMatrix,
    pub d_w_kq: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct FactorizedGrad {
    pub d_w_o: DenseMatrix,
    pub d_w_v: DenseMatrix,
    pub d_w_kq: DenseMatrix,
}

/// The combined-matrix gradient restricted to answer rows (|A| x d), the
/// full d x d key-query gradient (live only in the EOS column), and the
/// pre-update train loss.
fn combined_grad(
    ov_a: &DenseMatrix,
    kq_col: &[f64],
    mode: AttentionMode,
    spec: &TaskSpec,
    triples: &[Triple],
) -> Result<(DenseMatrix, DenseMatrix, f64)> {
    let stats = forward_stats(ov_a, kq_col, mode, spec, triples)?;
    let d = spec.vocab_size();
    let n_answers = spec.answer_range().len();
    let p = 1.0 / triples.len() as f64;
    let mut g = DenseMatrix::zeros(n_answers, d);
    for a in 0..n_answers {
        let mr = stats.m.row(a);
        let gr = g.row_mut(a);
        match mode {
            AttentionMode::Trainable => {
                for z in 0..d {
                    gr[z] = -p * kq_col[z] * mr[z];
                }
            }
            AttentionMode::FixedUniform => {
                for z in 0..d {
                    gr[z] = -p * mr[z];
                }
            }
        }
    }
    let mut d_w_kq = DenseMatrix::zeros(d, d);
    if mode == AttentionMode::Trainable {
        let eos = spec.eos();
        for z in 0..d {
            let mut acc = 0.0;
            for a in 0..n_answers {
                acc += ov_a.get(a, z) * stats.m.get(a, z);
            }
            d_w_kq.set(z, eos, -p * acc);
        }
    }
    Ok((g, d_w_kq, stats.mean_loss))
}

fn kq_column(w_kq: &DenseMatrix, spec: &TaskSpec) -> Vec<f64> {
    (0..w_kq.rows()).map(|z| w_kq.get(z, spec.eos())).collect()
}

fn grad_nonfactorized_with_loss(
    params: &NonFactorizedParams,
    spec: &TaskSpec,
    dataset: &Dataset,
) -> Result<(NonFactorizedGrad, f64)> {
    let answers = spec.answer_range();
    let ov_a = DenseMatrix::from_fn(answers.len(), spec.vocab_size(), |i, j| {
        params.w_ov.get(answers.start + i, j)
    });
    let kq_col = kq_column(&params.w_kq, spec);
    let (g, d_w_kq, loss) =
        combined_grad(&ov_a, &kq_col, params.attention_mode, spec, dataset.train())?;
    let mut d_w_ov = DenseMatrix::zeros(params.d(), params.d());
    for a in 0..answers.len() {
        d_w_ov.row_mut(answers.start + a).copy_from_slice(g.row(a));
    }
    Ok((NonFactorizedGrad { d_w_ov, d_w_kq }, loss))
}

fn grad_factorized_with_loss(
    params: &FactorizedParams,
    spec: &TaskSpec,
    dataset: &Dataset,
) -> Result<(FactorizedGrad, f64)> {
    let answers = spec.answer_range();
    let w_o_a = DenseMatrix::from_fn(answers.len(), params.d_h(), |i, j| {
        params.w_o.get(answers.start + i, j)
    });
    let ov_a = w_o_a.matmul_transpose(&params.w_v)?;
    let kq_col = kq_column(&params.w_kq, spec);
    let (g, d_w_kq, loss) =
        combined_grad(&ov_a, &kq_col, params.attention_mode, spec, dataset.train())?;
    // Chain rule: dW_O = G W_V (answer rows only), dW_V = G^T W_O.
    let d_w_o_a = g.matmul(&params.w_v)?;
    let mut d_w_o = DenseMatrix::zeros(params.d(), params.d_h());
    for a in 0..answers.len() {
        d_w_o
            .row_mut(answers.start + a)
            .copy_from_slice(d_w_o_a.row(a));
    }
    let d_w_v = g.transpose().matmul(&w_o_a)?;
    Ok((
        FactorizedGrad {
            d_w_o,
            d_w_v,
            d_w_kq,
        },
        loss,
    ))
}

/// Gradient of the mean train loss for the non-factorized parameterization.
/// Entries outside the reachable set (non-answer rows of dW_OV, non-EOS
/// columns of dW_KQ) are zero.
pub fn grad_nonfactorized(
    params: &NonFactorizedParams,
    spec: &TaskSpec,
    dataset: &Dataset,
) -> Result<NonFactorizedGrad> {
    Ok(grad_nonfactorized_with_loss(params, spec, dataset)?.0)
}

/// Gradient of the mean train loss for the factorized parameterization.
pub fn grad_factorized(
    params: &FactorizedParams,
    spec: &TaskSpec,
    dataset: &Dataset,
) -> Result<FactorizedGrad> {
    Ok(grad_factorized_with_loss(params, spec, dataset)?.0)
}

/// Optimizer state; Adam moments are allocated on first use, one slot per
/// parameter matrix.
enum OptState {
    Gd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
        t: u32,
        m: Vec<DenseMatrix>,
        v: Vec<DenseMatrix>,
    },
}

impl OptState {
    fn new(optimizer: Optimizer) -> Self {
        match optimizer {
            Optimizer::GradientDescent => OptState::Gd,
            Optimizer::AdamW {
                beta1,
                beta2,
                epsilon,
                weight_decay,
            } => OptState::Adam {
                beta1,
                beta2,
                epsilon,
                weight_decay,
                t: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    fn update(&mut self, lr: f64, params: &mut [&mut DenseMatrix], grads: &[&DenseMatrix]) {
        debug_assert_eq!(params.len(), grads.len());
        match self {
            OptState::Gd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.scaled_add(-lr, g).expect("shape fixed by caller");
                }
            }
            OptState::Adam {
                beta1,
                beta2,
                epsilon,
                weight_decay,
                t,
                m,
                v,
            } => {
                if m.is_empty() {
                    for g in grads {
                        m.push(DenseMatrix::zeros(g.rows(), g.cols()));
                        v.push(DenseMatrix::zeros(g.rows(), g.cols()));
                    }
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for k in 0..grads.len() {
                    let g = grads[k].data();
                    let mk = m[k].data_mut();
                    let vk = v[k].data_mut();
                    let pk = params[k].data_mut();
                    for i in 0..g.len() {
                        mk[i] = *beta1 * mk[i] + (1.0 - *beta1) * g[i];
                        vk[i] = *beta2 * vk[i] + (1.0 - *beta2) * g[i] * g[i];
                        let mhat = mk[i] / bc1;
                        let vhat = vk[i] / bc2;
                        pk[i] -= lr * (mhat / (vhat.sqrt() + *epsilon) + *weight_decay * pk[i]);
                    }
                }
            }
        }
    }
}

/// One gradient step in place; returns the pre-update train loss.
fn apply_step(
    params: &mut ModelParams,
    opt: &mut OptState,
    lr: f64,
    spec: &TaskSpec,
    dataset: &Dataset,
) -> Result<f64> {
    match params {
        ModelParams::NonFactorized(p) => {
            let (g, loss) = grad_nonfactorized_with_loss(p, spec, dataset)?;
            opt.update(lr, &mut [&mut p.w_ov, &mut p.w_kq], &[&g.d_w_ov, &g.d_w_kq]);
            Ok(loss)
        }
        ModelParams::Factorized(p) => {
            let (g, loss) = grad_factorized_with_loss(p, spec, dataset)?;
            opt.update(
                lr,
                &mut [&mut p.w_o, &mut p.w_v, &mut p.w_kq],
                &[&g.d_w_o, &g.d_w_v, &g.d_w_kq],
            );
            Ok(loss)
        }
    }
}

/// Mean over `triples` of the number of answers scored strictly above the
/// ground truth; 0 means every ground truth is (possibly tied) top-1.
pub fn mean_rank(params: &ModelParams, spec: &TaskSpec, triples: &[Triple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::InvalidConfig("empty triple list".into()));
    }
    let a0 = spec.answer_range().start;
    let mut total = 0usize;
    for t in triples {
        let probs = predict_prob(params, spec, [t.subject, t.relation, spec.eos()])?;
        let target = probs[t.answer - a0];
        total += probs.iter().filter(|&&p| p > target).count();
    }
    Ok(total as f64 / triples.len() as f64)
}

/// Fixed-attention margin h = logit(a*) - logit(a') on a reduced matrix.
pub fn margin(w: &ReducedOV, spec: &TaskSpec, s: usize, r: usize, a_prime: usize) -> Result<f64> {
    let a_star = spec.answer(s, r)?;
    if a_prime == a_star {
        return Err(Error::InvalidConfig(format!(
            "margin needs a' != a*, got {a_prime}"
        )));
    }
    let logits = logits_fixed_attention(w, spec, s, r)?;
    let i_star = w.answer_row(spec, a_star)?;
    let i_prime = w.answer_row(spec, a_prime)?;
    Ok(logits[i_star] - logits[i_prime])
}

/// Minimum over test triples of logit(a*) minus the best wrong-answer logit,
/// under the model's own attention mode.
pub fn min_test_margin(params: &ModelParams, spec: &TaskSpec, dataset: &Dataset) -> Result<f64> {
    let a0 = spec.answer_range().start;
    let mut min = f64::INFINITY;
    for t in dataset.test() {
        let logits = logits_full(params, spec, [t.subject, t.relation, spec.eos()])?;
        let target = logits[t.answer - a0];
        let best_other = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != t.answer - a0)
            .map(|(_, &l)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        min = min.min(target - best_other);
    }
    Ok(min)
}

/// Max spread of effective output-value entries across the implication
/// answers, over test-subject, relation, and EOS columns. Zero means the
/// model cannot distinguish implications for unseen subjects.
pub fn symmetry_residual(params: &ModelParams, spec: &TaskSpec) -> Result<f64> {
    let imps = spec.implication_range();
    let rows = params.ov_eff_rows(imps.start, imps.len())?;
    let mut cols: Vec<usize> = spec
        .subject_range()
        .filter(|&s| spec.is_test_subject(s))
        .collect();
    cols.push(spec.r1());
    cols.push(spec.r2());
    cols.push(spec.eos());
    let mut residual = 0.0f64;
    for &z in &cols {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for a in 0..imps.len() {
            let v = rows.get(a, z);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        residual = residual.max(hi - lo);
    }
    Ok(residual)
}

fn metrics_row(
    step: usize,
    params: &ModelParams,
    spec: &TaskSpec,
    dataset: &Dataset,
) -> Result<MetricsRow> {
    Ok(MetricsRow {
        step,
        train_loss: train_loss(params, spec, dataset)?,
        test_loss: test_loss(params, spec, dataset)?,
        min_test_margin: min_test_margin(params, spec, dataset)?,
        mean_rank_test: mean_rank(params, spec, dataset.test())?,
        symmetry_residual: symmetry_residual(params, spec)?,
    })
}

/// Full-batch training. Deterministic for a fixed config: the log and the
/// final parameters are byte-identical across runs. Metrics are recorded at
/// step 0, every `eval_every` steps, and at the final step. Aborts with
/// [`Error::Diverged`] when the train loss exceeds 10x its initial value.
pub fn train(config: &TrainConfig, spec: &TaskSpec, dataset: &Dataset) -> Result<TrainLog> {
    config.validate()?;
    let mut params = init_params(config, spec)?;
    let mut opt = OptState::new(config.optimizer);
    let initial = train_loss(&params, spec, dataset)?;
    let guard = 10.0 * initial;
    let mut rows = vec![metrics_row(0, &params, spec, dataset)?];
    for step in 1..=config.steps {
        let loss = apply_step(&mut params, &mut opt, config.learning_rate, spec, dataset)?;
        if !loss.is_finite() || loss > guard {
            return Err(Error::Diverged { step, loss, guard });
        }
        if step % config.eval_every == 0 || step == config.steps {
            let row = metrics_row(step, &params, spec, dataset)?;
            if !row.train_loss.is_finite() || row.train_loss > guard {
                return Err(Error::Diverged {
                    step,
                    loss: row.train_loss,
                    guard,
                });
            }
            rows.push(row);
        }
    }
    Ok(TrainLog {
        rows,
        final_params: params,
    })
}

/// Structured-text run manifest: the full config, the generator identity,
/// and a content hash of the serialized dataset.
pub fn run_manifest(config: &TrainConfig, dataset: &Dataset, spec: &TaskSpec) -> String {
    #[derive(Serialize)]
    struct Doc<'a> {
        n: usize,
        m: usize,
        m_train: usize,
        generator: &'a str,
        dataset_sha256: String,
        config: &'a TrainConfig,
    }
    toml::to_string(&Doc {
        n: spec.n(),
        m: spec.m(),
        m_train: spec.m_train(),
        generator: GENERATOR_ID,
        dataset_sha256: format!("sha256:{}", dataset.sha256_hex()),
        config,
    })
    .expect("plain struct serializes")
}
