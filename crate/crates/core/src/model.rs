//! One-layer linear attention over one-hot tokens, in two parameterizations.
//!
//! With prefix [s, r, EOS] and one-hot embeddings, the model's logit for an
//! answer token `a` collapses to
//! `sum over prefix tokens z of W_OV_eff(a, z) * W_KQ(z, EOS)`,
//! where `W_OV_eff = W_O * W_V^T` for the factorized model and `W_OV` for the
//! non-factorized one. The FixedUniform attention mode drops `W_KQ` and the
//! EOS term, scoring `W_OV_eff(a, s) + W_OV_eff(a, r)`.

use crate::error::{Error, Result};
use crate::numerics::{softmax_over_subset, svd, DenseMatrix};
use crate::task::TaskSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Relative singular-value threshold used by [`factorize`] by default.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Full path: logits weight every prefix token (including EOS) by the
    /// trainable key-query score of that token against EOS.
    Trainable,
    /// Fixed uniform attention on subject and relation; EOS excluded and
    /// W_KQ ignored.
    FixedUniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedParams {
    pub w_o: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_kq: DenseMatrix,
    pub attention_mode: AttentionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonFactorizedParams {
    pub w_ov: DenseMatrix,
    pub w_kq: DenseMatrix,
    pub attention_mode: AttentionMode,
}

/// Either parameterization behind one evaluation interface.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Factorized(FactorizedParams),
    NonFactorized(NonFactorizedParams),
}

impl FactorizedParams {
    pub fn zeros(d: usize, d_h: usize, attention_mode: AttentionMode) -> Self {
        Self {
            w_o: DenseMatrix::zeros(d, d_h),
            w_v: DenseMatrix::zeros(d, d_h),
            w_kq: DenseMatrix::zeros(d, d),
            attention_mode,
        }
    }

    pub fn d(&self) -> usize {
        self.w_o.rows()
    }

    pub fn d_h(&self) -> usize {
        self.w_o.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        let d_h = self.d_h();
        if d_h == 0 {
            return Err(Error::InvalidConfig("d_h must be >= 1".into()));
        }
        if self.w_v.rows() != d || self.w_v.cols() != d_h {
            return Err(Error::Dim(format!(
                "w_v is {}x{}, expected {d}x{d_h}",
                self.w_v.rows(),
                self.w_v.cols()
            )));
        }
        if self.w_kq.rows() != d || self.w_kq.cols() != d {
            return Err(Error::Dim(format!(
                "w_kq is {}x{}, expected {d}x{d}",
                self.w_kq.rows(),
                self.w_kq.cols()
            )));
        }
        Ok(())
    }
}

impl NonFactorizedParams {
    pub fn zeros(d: usize, attention_mode: AttentionMode) -> Self {
        Self {
            w_ov: DenseMatrix::zeros(d, d),
            w_kq: DenseMatrix::zeros(d, d),
            attention_mode,
        }
    }

    pub fn d(&self) -> usize {
        self.w_ov.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.w_ov.cols() != d {
            return Err(Error::Dim(format!(
                "w_ov is {}x{}, expected square",
                self.w_ov.rows(),
                self.w_ov.cols()
            )));
        }
        if self.w_kq.rows() != d || self.w_kq.cols() != d {
            return Err(Error::Dim(format!(
                "w_kq is {}x{}, expected {d}x{d}",
                self.w_kq.rows(),
                self.w_kq.cols()
            )));
        }
        Ok(())
    }
}

impl ModelParams {
    pub fn d(&self) -> usize {
        match self {
            ModelParams::Factorized(p) => p.d(),
            ModelParams::NonFactorized(p) => p.d(),
        }
    }

    pub fn attention_mode(&self) -> AttentionMode {
        match self {
            ModelParams::Factorized(p) => p.attention_mode,
            ModelParams::NonFactorized(p) => p.attention_mode,
        }
    }

    pub fn w_kq(&self) -> &DenseMatrix {
        match self {
            ModelParams::Factorized(p) => &p.w_kq,
            ModelParams::NonFactorized(p) => &p.w_kq,
        }
    }

    /// One effective output-value entry.
    pub fn ov_eff(&self, a: usize, z: usize) -> f64 {
        match self {
            ModelParams::Factorized(p) => {
                let ro = p.w_o.row(a);
                let rv = p.w_v.row(z);
                ro.iter().zip(rv).map(|(x, y)| x * y).sum()
            }
            ModelParams::NonFactorized(p) => p.w_ov.get(a, z),
        }
    }

    /// Rows `row_start..row_start+count` of the effective output-value
    /// matrix, materialized dense (count x d). The training loop reads only
    /// answer rows, so this keeps the factorized product small.
    pub fn ov_eff_rows(&self, row_start: usize, count: usize) -> Result<DenseMatrix> {
        let d = self.d();
        if row_start + count > d {
            return Err(Error::Dim(format!(
                "ov rows {row_start}..{} out of range for d = {d}",
                row_start + count
            )));
        }
        match self {
            ModelParams::NonFactorized(p) => Ok(DenseMatrix::from_fn(count, d, |i, j| {
                p.w_ov.get(row_start + i, j)
            })),
            ModelParams::Factorized(p) => {
                let rows =
                    DenseMatrix::from_fn(count, p.d_h(), |i, j| p.w_o.get(row_start + i, j));
                rows.matmul_transpose(&p.w_v)
            }
        }
    }

    /// Key-query score of token `z` against the EOS query.
    pub fn kq(&self, z: usize, spec: &TaskSpec) -> f64 {
        self.w_kq().get(z, spec.eos())
    }
}

fn check_prefix(spec: &TaskSpec, prefix: [usize; 3]) -> Result<()> {
    let [s, r, e] = prefix;
    if !spec.subject_range().contains(&s) {
        return Err(Error::InvalidConfig(format!("prefix subject {s} not a subject token")));
    }
    if r != spec.r1() && r != spec.r2() {
        return Err(Error::InvalidConfig(format!("prefix relation {r} not a relation token")));
    }
    if e != spec.eos() {
        return Err(Error::InvalidConfig(format!("prefix must end with EOS, got {e}")));
    }
    Ok(())
}

/// Logits over the answer set A (facts then implications) for the prefix
/// [s, r, EOS], under the parameterization's attention mode.
pub fn logits_full(params: &ModelParams, spec: &TaskSpec, prefix: [usize; 3]) -> Result<Vec<f64>> {
    if params.d() != spec.vocab_size() {
        return Err(Error::Dim(format!(
            "model d = {} but vocab = {}",
            params.d(),
            spec.vocab_size()
        )));
    }
    check_prefix(spec, prefix)?;
    let answers = spec.answer_range();
    let a0 = answers.start;
    let ov = params.ov_eff_rows(a0, answers.len())?;
    let mut out = Vec::with_capacity(answers.len());
    match params.attention_mode() {
        AttentionMode::Trainable => {
            let kq: Vec<f64> = prefix.iter().map(|&z| params.kq(z, spec)).collect();
            for i in 0..answers.len() {
                let row = ov.row(i);
                out.push(row[prefix[0]] * kq[0] + row[prefix[1]] * kq[1] + row[prefix[2]] * kq[2]);
            }
        }
        AttentionMode::FixedUniform => {
            for i in 0..answers.len() {
                let row = ov.row(i);
                out.push(row[prefix[0]] + row[prefix[1]]);
            }
        }
    }
    Ok(out)
}

/// Next-token distribution over A for the prefix, per the restricted softmax.
pub fn predict_prob(params: &ModelParams, spec: &TaskSpec, prefix: [usize; 3]) -> Result<Vec<f64>> {
    let logits = logits_full(params, spec, prefix)?;
    let subset: Vec<usize> = (0..logits.len()).collect();
    softmax_over_subset(&logits, &subset)
}

/// `W_O * W_V^T`.
pub fn combine(w_o: &DenseMatrix, w_v: &DenseMatrix) -> Result<DenseMatrix> {
    w_o.matmul_transpose(w_v)
}

/// Splits `W_OV` into `(W_O, W_V)` with `combine(W_O, W_V) = W_OV` via the
/// SVD square root; fails when the numerical rank (relative threshold
/// `rank_tol`) exceeds `d_h`. Surplus head columns are zero.
pub fn factorize_with_tol(
    w_ov: &DenseMatrix,
    d_h: usize,
    rank_tol: f64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let dec = svd(w_ov)?;
    let sigma_max = dec.sigma.first().copied().unwrap_or(0.0);
    let rank = dec.sigma.iter().filter(|&&s| s > rank_tol * sigma_max).count();
    if rank > d_h {
        return Err(Error::RankExceedsHead {
            required: rank,
            available: d_h,
        });
    }
    let keep = rank.min(d_h);
    let mut w_o = DenseMatrix::zeros(w_ov.rows(), d_h);
    let mut w_v = DenseMatrix::zeros(w_ov.cols(), d_h);
    for k in 0..keep {
        let root = dec.sigma[k].sqrt();
        for i in 0..w_ov.rows() {
            w_o.set(i, k, dec.u.get(i, k) * root);
        }
        for j in 0..w_ov.cols() {
            w_v.set(j, k, dec.v.get(j, k) * root);
        }
    }
    Ok((w_o, w_v))
}

/// [`factorize_with_tol`] at [`DEFAULT_RANK_TOL`].
pub fn factorize(w_ov: &DenseMatrix, d_h: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    factorize_with_tol(w_ov, d_h, DEFAULT_RANK_TOL)
}

/// Answer rows by [subjects, r1, r2] columns of the effective output-value
/// matrix: the part of the model the fixed-attention theory talks about.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedOV {
    matrix: DenseMatrix,
    n: usize,
    m: usize,
}

impl ReducedOV {
    pub fn new(matrix: DenseMatrix, n: usize, m: usize) -> Result<Self> {
        if matrix.rows() != 2 * n || matrix.cols() != n * m + 2 {
            return Err(Error::Dim(format!(
                "reduced matrix is {}x{}, expected {}x{}",
                matrix.rows(),
                matrix.cols(),
                2 * n,
                n * m + 2
            )));
        }
        Ok(Self { matrix, n, m })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Row index of an answer token id within the reduced matrix.
    pub fn answer_row(&self, spec: &TaskSpec, a: usize) -> Result<usize> {
        if !spec.answer_range().contains(&a) {
            return Err(Error::InvalidConfig(format!("{a} is not an answer token")));
        }
        Ok(a - spec.answer_range().start)
    }

    /// Column index of a subject or relation token id.
    pub fn token_col(&self, spec: &TaskSpec, z: usize) -> Result<usize> {
        if spec.subject_range().contains(&z) {
            Ok(z)
        } else if z == spec.r1() {
            Ok(self.n * self.m)
        } else if z == spec.r2() {
            Ok(self.n * self.m + 1)
        } else {
            Err(Error::InvalidConfig(format!(
                "{z} is neither a subject nor a relation token"
            )))
        }
    }
}

/// Fixed-attention logits over A from a reduced matrix:
/// `logit(a) = W(a, s) + W(a, r)`.
pub fn logits_fixed_attention(
    w: &ReducedOV,
    spec: &TaskSpec,
    s: usize,
    r: usize,
) -> Result<Vec<f64>> {
    let cs = w.token_col(spec, s)?;
    let cr = w.token_col(spec, r)?;
    if !spec.subject_range().contains(&s) {
        return Err(Error::InvalidConfig(format!("{s} is not a subject token")));
    }
    if r != spec.r1() && r != spec.r2() {
        return Err(Error::InvalidConfig(format!("{r} is not a relation token")));
    }
    Ok((0..2 * w.n())
        .map(|row| w.matrix().get(row, cs) + w.matrix().get(row, cr))
        .collect())
}

/// Slices the effective output-value matrix down to [`ReducedOV`].
pub fn reduced_ov(params: &ModelParams, spec: &TaskSpec) -> Result<ReducedOV> {
    if params.d() != spec.vocab_size() {
        return Err(Error::Dim(format!(
            "model d = {} but vocab = {}",
            params.d(),
            spec.vocab_size()
        )));
    }
    let answers = spec.answer_range();
    let full = params.ov_eff_rows(answers.start, answers.len())?;
    let nm = spec.n() * spec.m();
    let reduced = DenseMatrix::from_fn(answers.len(), nm + 2, |i, j| {
        let z = if j < nm { j } else { spec.r1() + (j - nm) };
        full.get(i, z)
    });
    ReducedOV::new(reduced, spec.n(), spec.m())
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    parameterization: String,
    d: usize,
    d_h: Option<usize>,
    attention_mode: AttentionMode,
}

/// Writes one text file per matrix plus `checkpoint.toml` into `dir`.
pub fn save_checkpoint(params: &ModelParams, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = match params {
        ModelParams::Factorized(p) => {
            std::fs::write(dir.join("w_o.txt"), p.w_o.to_text())?;
            std::fs::write(dir.join("w_v.txt"), p.w_v.to_text())?;
            std::fs::write(dir.join("w_kq.txt"), p.w_kq.to_text())?;
            CheckpointManifest {
                parameterization: "factorized".into(),
                d: p.d(),
                d_h: Some(p.d_h()),
                attention_mode: p.attention_mode,
            }
        }
        ModelParams::NonFactorized(p) => {
            std::fs::write(dir.join("w_ov.txt"), p.w_ov.to_text())?;
            std::fs::write(dir.join("w_kq.txt"), p.w_kq.to_text())?;
            CheckpointManifest {
                parameterization: "non_factorized".into(),
                d: p.d(),
                d_h: None,
                attention_mode: p.attention_mode,
            }
        }
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("checkpoint.toml"), text)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let manifest_text = std::fs::read_to_string(dir.join("checkpoint.toml"))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let manifest: CheckpointManifest = toml::from_str(&manifest_text)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let read = |name: &str| -> Result<DenseMatrix> {
        let text = std::fs::read_to_string(dir.join(name))
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        DenseMatrix::from_text(&text)
    };
    let params = match manifest.parameterization.as_str() {
        "factorized" => ModelParams::Factorized(FactorizedParams {
            w_o: read("w_o.txt")?,
            w_v: read("w_v.txt")?,
            w_kq: read("w_kq.txt")?,
            attention_mode: manifest.attention_mode,
        }),
        "non_factorized" => ModelParams::NonFactorized(NonFactorizedParams {
            w_ov: read("w_ov.txt")?,
            w_kq: read("w_kq.txt")?,
            attention_mode: manifest.attention_mode,
        }),
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown parameterization {other:?}"
            )))
        }
    };
    let d = params.d();
    if d != manifest.d {
        return Err(Error::Checkpoint(format!(
            "manifest d = {} but matrices have d = {d}",
            manifest.d
        )));
    }
    match &params {
        ModelParams::Factorized(p) => p.validate()?,
        ModelParams::NonFactorized(p) => p.validate()?,
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::build_task;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_zero_logits_and_uniform_probs() {
        let spec = build_task(2, 2, 1).unwrap();
        let d = spec.vocab_size();
        let params = ModelParams::NonFactorized(NonFactorizedParams::zeros(
            d,
            AttentionMode::Trainable,
        ));
        let prefix = [0, spec.r1(), spec.eos()];
        let logits = logits_full(&params, &spec, prefix).unwrap();
        assert!(logits.iter().all(|&x| x == 0.0));
        let probs = predict_prob(&params, &spec, prefix).unwrap();
        for p in probs {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn factorized_matches_combined_logits() {
        let spec = build_task(3, 3, 1).unwrap();
        let d = spec.vocab_size();
        let d_h = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fac = FactorizedParams {
            w_o: random_matrix(&mut rng, d, d_h),
            w_v: random_matrix(&mut rng, d, d_h),
            w_kq: random_matrix(&mut rng, d, d),
            attention_mode: AttentionMode::Trainable,
        };
        let non = NonFactorizedParams {
            w_ov: combine(&fac.w_o, &fac.w_v).unwrap(),
            w_kq: fac.w_kq.clone(),
            attention_mode: AttentionMode::Trainable,
        };
        for s in spec.subject_range() {
            for r in [spec.r1(), spec.r2()] {
                let prefix = [s, r, spec.eos()];
                let a = logits_full(&ModelParams::Factorized(fac.clone()), &spec, prefix).unwrap();
                let b =
                    logits_full(&ModelParams::NonFactorized(non.clone()), &spec, prefix).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert_abs_diff_eq!(x, y, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn fixed_uniform_ignores_kq_and_eos() {
        let spec = build_task(2, 3, 2).unwrap();
        let d = spec.vocab_size();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = NonFactorizedParams {
            w_ov: random_matrix(&mut rng, d, d),
            w_kq: random_matrix(&mut rng, d, d),
            attention_mode: AttentionMode::FixedUniform,
        };
        let prefix = [1, spec.r2(), spec.eos()];
        let before = logits_full(&ModelParams::NonFactorized(p.clone()), &spec, prefix).unwrap();
        // Perturbing W_KQ and the EOS column of W_OV changes nothing.
        p.w_kq = random_matrix(&mut rng, d, d);
        for a in 0..d {
            p.w_ov.set(a, spec.eos(), 99.0);
        }
        let after = logits_full(&ModelParams::NonFactorized(p), &spec, prefix).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn logits_reject_malformed_prefix() {
        let spec = build_task(2, 2, 1).unwrap();
        let params = ModelParams::NonFactorized(NonFactorizedParams::zeros(
            spec.vocab_size(),
            AttentionMode::Trainable,
        ));
        assert!(logits_full(&params, &spec, [spec.r1(), spec.r1(), spec.eos()]).is_err());
        assert!(logits_full(&params, &spec, [0, spec.eos(), spec.eos()]).is_err());
        assert!(logits_full(&params, &spec, [0, spec.r1(), 0]).is_err());
    }

    #[test]
    fn factorize_round_trips_rank_one() {
        let d = 6;
        let u: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).sin()).collect();
        let v: Vec<f64> = (0..d).map(|i| (i as f64 * 1.3).cos()).collect();
        let w = DenseMatrix::from_fn(d, d, |i, j| u[i] * v[j]);
        let (w_o, w_v) = factorize(&w, 1).unwrap();
        let back = combine(&w_o, &w_v).unwrap();
        let mut diff = w.clone();
        diff.scaled_add(-1.0, &back).unwrap();
        assert!(diff.max_abs() < 1e-12);
    }

    #[test]
    fn factorize_rejects_insufficient_head() {
        let w = DenseMatrix::identity(4);
        assert!(matches!(
            factorize(&w, 3),
            Err(Error::RankExceedsHead {
                required: 4,
                available: 3
            })
        ));
        assert!(factorize(&w, 4).is_ok());
    }

    #[test]
    fn reduced_ov_slices_expected_entries() {
        let spec = build_task(2, 2, 1).unwrap();
        let d = spec.vocab_size();
        let w_ov = DenseMatrix::from_fn(d, d, |i, j| (i * d + j) as f64);
        let params = ModelParams::NonFactorized(NonFactorizedParams {
            w_ov: w_ov.clone(),
            w_kq: DenseMatrix::zeros(d, d),
            attention_mode: AttentionMode::FixedUniform,
        });
        let red = reduced_ov(&params, &spec).unwrap();
        assert_eq!(red.matrix().rows(), 4);
        assert_eq!(red.matrix().cols(), 6);
        let a0 = spec.answer_range().start;
        assert_eq!(red.matrix().get(0, 0), w_ov.get(a0, 0));
        assert_eq!(red.matrix().get(3, 4), w_ov.get(a0 + 3, spec.r1()));
        assert_eq!(red.matrix().get(2, 5), w_ov.get(a0 + 2, spec.r2()));
    }

    #[test]
    fn fixed_attention_logits_sum_two_columns() {
        let spec = build_task(2, 2, 1).unwrap();
        let m = DenseMatrix::from_fn(4, 6, |i, j| (10 * i + j) as f64);
        let red = ReducedOV::new(m, 2, 2).unwrap();
        let logits = logits_fixed_attention(&red, &spec, 3, spec.r2()).unwrap();
        assert_eq!(logits, vec![3.0 + 5.0, 13.0 + 15.0, 23.0 + 25.0, 33.0 + 35.0]);
        assert!(logits_fixed_attention(&red, &spec, spec.eos(), spec.r2()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let spec = build_task(2, 2, 1).unwrap();
        let d = spec.vocab_size();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let fac = ModelParams::Factorized(FactorizedParams {
            w_o: random_matrix(&mut rng, d, 3),
            w_v: random_matrix(&mut rng, d, 3),
            w_kq: random_matrix(&mut rng, d, d),
            attention_mode: AttentionMode::FixedUniform,
        });
        let dir = std::env::temp_dir().join(format!("ocr-core-ckpt-{}", std::process::id()));
        save_checkpoint(&fac, &dir).unwrap();
        let loaded = load_checkpoint(&dir).unwrap();
        assert_eq!(fac, loaded);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
