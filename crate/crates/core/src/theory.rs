//! Closed-form max-margin solutions over the reduced output-value matrix,
//! their spectra, and numeric oracles that recover them independently.
//!
//! The reduced matrix has answer rows (facts b_1..b_n, implications
//! c_1..c_n) and subject-then-relation columns. Both closed forms are block
//! matrices built from twelve scalars: subject blocks `x1*I + x2*E` (E the
//! all-ones n x n matrix) for each subject copy, plus constant relation
//! columns. The nuclear-norm minimizer propagates fact structure onto the
//! test-implication block (scaled by rho = sqrt(m_train/m_test) when
//! m_test >= m_train); the Frobenius minimizer leaves that block at zero.
//!
//! Every closed form here is cross-checked two ways: against the dense SVD
//! of the assembled matrix, and against independent numeric max-margin
//! searches (hinge-penalty subgradient descent for Frobenius, long-horizon
//! factorized gradient descent for nuclear).

use crate::error::{Error, Result};
use crate::model::{reduced_ov, AttentionMode, ReducedOV};
use crate::numerics::DenseMatrix;
use crate::task::{build_dataset, TaskSpec};
use crate::training::{self, Init, Optimizer, Parameterization, TrainConfig};
use serde::Serialize;

/// Train-margin tolerance used when flagging constraint violations.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Hinge-penalty weight of the Frobenius oracle; any value above the
/// largest dual multiplier makes the penalized minimizer exact.
const FROBENIUS_PENALTY: f64 = 100.0;

/// Residual slack accepted before the final rescale of a numeric oracle.
const ORACLE_SLACK: f64 = 1e-6;

/// Hyperparameters of the nuclear oracle's gradient-descent route.
const NUCLEAR_ORACLE_LR: f64 = 0.2;
const NUCLEAR_ORACLE_SEED: u64 = 7;
const NUCLEAR_ORACLE_SCALE: f64 = 0.01;

/// The twelve scalars of the restricted solution form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockCoefficients {
    pub p1: f64,
    pub p2: f64,
    pub q1: f64,
    pub q2: f64,
    pub f1: f64,
    pub f2: f64,
    pub g1: f64,
    pub g2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl BlockCoefficients {
    pub fn zero() -> Self {
        Self {
            p1: 0.0,
            p2: 0.0,
            q1: 0.0,
            q2: 0.0,
            f1: 0.0,
            f2: 0.0,
            g1: 0.0,
            g2: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            gamma1: 0.0,
            gamma2: 0.0,
        }
    }

    /// The restricted-form feasibility inequalities. Returns a description
    /// of each violated inequality (empty when the coefficients describe a
    /// feasible margin-1 solution).
    pub fn feasibility_violations(&self, tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        let mut demand = |name: &str, lhs: f64, rhs: f64| {
            if lhs < rhs - tol {
                out.push(format!("{name}: {lhs} < {rhs}"));
            }
        };
        demand("p1 >= 1", self.p1, 1.0);
        demand("f1 >= 1", self.f1, 1.0);
        demand("q1 >= 1", self.q1, 1.0);
        demand(
            "train fact beats implications",
            self.p1 + self.p2 + self.beta1,
            self.q1 + self.q2 + self.gamma1 + 1.0,
        );
        demand(
            "train implication beats facts",
            self.q1 + self.q2 + self.gamma2,
            self.p1 + self.p2 + self.beta2 + 1.0,
        );
        demand(
            "test fact beats implications",
            self.f1 + self.f2 + self.beta1,
            self.g1.max(0.0) + self.g2 + self.gamma1 + 1.0,
        );
        out
    }
}

fn validate_sizes(n: usize, m_train: usize, m_test: usize) -> Result<()> {
    if n < 2 || m_train == 0 || m_test == 0 {
        return Err(Error::InvalidConfig(format!(
            "need n >= 2, m_train >= 1, m_test >= 1; got ({n}, {m_train}, {m_test})"
        )));
    }
    Ok(())
}

/// Minimizer of the nuclear-norm SVM program. When m_test >= m_train the
/// test-implication block carries rho = sqrt(m_train/m_test); otherwise it
/// matches the train-implication block.
pub fn nuclear_solution(n: usize, m_train: usize, m_test: usize) -> Result<BlockCoefficients> {
    validate_sizes(n, m_train, m_test)?;
    let nf = n as f64;
    let rho = if m_test >= m_train {
        (m_train as f64 / m_test as f64).sqrt()
    } else {
        1.0
    };
    Ok(BlockCoefficients {
        p1: 1.0,
        p2: -1.0 / nf,
        q1: 1.0,
        q2: -1.0 / nf,
        f1: 1.0,
        f2: -1.0 / nf,
        g1: rho,
        g2: -rho / nf,
        beta1: 0.5,
        beta2: -0.5,
        gamma1: -0.5,
        gamma2: 0.5,
    })
}

/// Minimizer of the Frobenius-norm SVM program: identical to the nuclear
/// form except the test-implication block is zero.
pub fn frobenius_solution(n: usize, m_train: usize, m_test: usize) -> Result<BlockCoefficients> {
    validate_sizes(n, m_train, m_test)?;
    let mut c = nuclear_solution(n, m_train, m_test)?;
    c.g1 = 0.0;
    c.g2 = 0.0;
    Ok(c)
}

/// Closed-form minimum nuclear norm over the margin-1 constraint set.
pub fn min_nuclear_norm(n: usize, m_train: usize, m_test: usize) -> Result<f64> {
    validate_sizes(n, m_train, m_test)?;
    let nf = n as f64;
    let (mtr, mte) = (m_train as f64, m_test as f64);
    Ok(if m_test >= m_train {
        nf.sqrt() + (nf - 1.0) * (mtr.sqrt() + mte.sqrt())
    } else {
        nf.sqrt() + (nf - 1.0) * (2.0 * (mtr + mte)).sqrt()
    })
}

/// Closed-form minimum Frobenius norm over the margin-1 constraint set.
pub fn min_frobenius_norm(n: usize, m_train: usize, m_test: usize) -> Result<f64> {
    validate_sizes(n, m_train, m_test)?;
    let nf = n as f64;
    let (mtr, mte) = (m_train as f64, m_test as f64);
    Ok((nf * (2.0 * mtr * (1.0 - 1.0 / nf) + mte * (1.0 - 1.0 / nf) + 1.0)).sqrt())
}

/// Builds the 2n x (n*m + 2) reduced matrix from block coefficients.
pub fn assemble_block_matrix(
    c: &BlockCoefficients,
    n: usize,
    m_train: usize,
    m_test: usize,
) -> Result<ReducedOV> {
    validate_sizes(n, m_train, m_test)?;
    let m = m_train + m_test;
    let nm = n * m;
    let matrix = DenseMatrix::from_fn(2 * n, nm + 2, |row, col| {
        let (is_implication, i) = if row < n { (false, row) } else { (true, row - n) };
        if col < nm {
            let partition = col % n;
            let copy = col / n;
            let train_copy = copy < m_train;
            let (diag, all) = match (is_implication, train_copy) {
                (false, true) => (c.p1, c.p2),
                (false, false) => (c.f1, c.f2),
                (true, true) => (c.q1, c.q2),
                (true, false) => (c.g1, c.g2),
            };
            if partition == i {
                diag + all
            } else {
                all
            }
        } else if col == nm {
            if is_implication {
                c.gamma1
            } else {
                c.beta1
            }
        } else if is_implication {
            c.gamma2
        } else {
            c.beta2
        }
    });
    ReducedOV::new(matrix, n, m)
}

/// Gram coefficients of the restricted form; the SVD of the assembled
/// matrix reduces to two 2x2 eigenproblems built from these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GramCoefficients {
    pub c_a1: f64,
    pub c_a2: f64,
    pub c_d1: f64,
    pub c_d2: f64,
    pub c_b1: f64,
    pub c_b2: f64,
}

/// Closed-form spectrum: sigma1 values with multiplicity one from the
/// shifted Gram block H1, sigma2 values with multiplicity n - 1 from H2.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralSummary {
    pub n: usize,
    pub gram: GramCoefficients,
    pub h1: [[f64; 2]; 2],
    pub h2: [[f64; 2]; 2],
    pub sigma1: [f64; 2],
    pub sigma2: [f64; 2],
}

impl SpectralSummary {
    /// All 2n singular values, descending, with multiplicities applied.
    pub fn spectrum(&self) -> Vec<f64> {
        let mut out = vec![self.sigma1[0], self.sigma1[1]];
        for _ in 0..self.n - 1 {
            out.push(self.sigma2[0]);
            out.push(self.sigma2[1]);
        }
        out.sort_by(|a, b| b.partial_cmp(a).unwrap());
        out
    }

    /// Sum of singular values with multiplicity.
    pub fn nuclear_norm(&self) -> f64 {
        self.sigma1[0]
            + self.sigma1[1]
            + (self.n as f64 - 1.0) * (self.sigma2[0] + self.sigma2[1])
    }
}

/// Eigenvalues of a symmetric 2x2 matrix, descending.
fn sym_eig2(h: [[f64; 2]; 2]) -> (f64, f64) {
    let half_tr = (h[0][0] + h[1][1]) / 2.0;
    let half_diff = (h[0][0] - h[1][1]) / 2.0;
    let disc = (half_diff * half_diff + h[0][1] * h[0][1]).sqrt();
    (half_tr + disc, half_tr - disc)
}

/// Square root of a Gram eigenvalue with a noise floor: eigenvalues within
/// rounding error of zero (relative to the block's scale) are snapped to an
/// exact zero before the square root, which would otherwise inflate
/// O(eps)-sized cancellation residue to O(sqrt(eps))-sized singular values.
fn checked_sqrt(lambda: f64, scale: f64) -> Result<f64> {
    let floor = 64.0 * f64::EPSILON * scale;
    if lambda < -floor.max(1e-12) {
        return Err(Error::InvalidConfig(format!(
            "gram eigenvalue {lambda} is negative; coefficients corrupt"
        )));
    }
    if lambda <= floor {
        return Ok(0.0);
    }
    Ok(lambda.sqrt())
}

fn sym_scale(h: [[f64; 2]; 2]) -> f64 {
    h[0][0].abs() + h[1][1].abs() + 2.0 * h[0][1].abs()
}

/// Closed-form SVD of the assembled block matrix.
pub fn block_svd(
    c: &BlockCoefficients,
    n: usize,
    m_train: usize,
    m_test: usize,
) -> Result<SpectralSummary> {
    validate_sizes(n, m_train, m_test)?;
    let nf = n as f64;
    let (mtr, mte) = (m_train as f64, m_test as f64);
    let gram = GramCoefficients {
        c_a1: mtr * c.p1 * c.p1 + mte * c.f1 * c.f1,
        c_a2: mtr * (2.0 * c.p1 * c.p2 + nf * c.p2 * c.p2)
            + mte * (2.0 * c.f1 * c.f2 + nf * c.f2 * c.f2)
            + c.beta1 * c.beta1
            + c.beta2 * c.beta2,
        c_d1: mtr * c.q1 * c.q1 + mte * c.g1 * c.g1,
        c_d2: mtr * (2.0 * c.q1 * c.q2 + nf * c.q2 * c.q2)
            + mte * (2.0 * c.g1 * c.g2 + nf * c.g2 * c.g2)
            + c.gamma1 * c.gamma1
            + c.gamma2 * c.gamma2,
        c_b1: mtr * c.p1 * c.q1 + mte * c.f1 * c.g1,
        c_b2: mtr * (c.p1 * c.q2 + c.p2 * c.q1 + nf * c.p2 * c.q2)
            + mte * (c.f1 * c.g2 + c.f2 * c.g1 + nf * c.f2 * c.g2)
            + c.beta1 * c.gamma1
            + c.beta2 * c.gamma2,
    };
    let h1 = [
        [gram.c_a1 + nf * gram.c_a2, gram.c_b1 + nf * gram.c_b2],
        [gram.c_b1 + nf * gram.c_b2, gram.c_d1 + nf * gram.c_d2],
    ];
    let h2 = [
        [gram.c_a1, gram.c_b1],
        [gram.c_b1, gram.c_d1],
    ];
    let (l1a, l1b) = sym_eig2(h1);
    let (l2a, l2b) = sym_eig2(h2);
    let (s1, s2) = (sym_scale(h1), sym_scale(h2));
    Ok(SpectralSummary {
        n,
        gram,
        h1,
        h2,
        sigma1: [checked_sqrt(l1a, s1)?, checked_sqrt(l1b, s1)?],
        sigma2: [checked_sqrt(l2a, s2)?, checked_sqrt(l2b, s2)?],
    })
}

/// One violated margin constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub subject: usize,
    pub relation: usize,
    pub wrong_answer: usize,
    pub margin: f64,
}

/// Evaluates every train constraint h >= 1 under fixed-attention logits;
/// returns the minimum margin and all constraints below 1 - FEASIBILITY_TOL.
pub fn check_feasibility(w: &ReducedOV, spec: &TaskSpec) -> Result<(f64, Vec<Violation>)> {
    let dataset = build_dataset(spec);
    let mut min = f64::INFINITY;
    let mut violations = Vec::new();
    for t in dataset.train() {
        for a_prime in spec.answer_range() {
            if a_prime == t.answer {
                continue;
            }
            let h = training::margin(w, spec, t.subject, t.relation, a_prime)?;
            min = min.min(h);
            if h < 1.0 - FEASIBILITY_TOL {
                violations.push(Violation {
                    subject: t.subject,
                    relation: t.relation,
                    wrong_answer: a_prime,
                    margin: h,
                });
            }
        }
    }
    Ok((min, violations))
}

/// Margins on the held-out test implications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestMargins {
    /// Minimum over test triples and wrong answers anywhere in A.
    pub min_over_answers: f64,
    /// Minimum over wrong answers within the implication set only.
    pub min_over_implications: f64,
}

pub fn test_margins(w: &ReducedOV, spec: &TaskSpec) -> Result<TestMargins> {
    let dataset = build_dataset(spec);
    let mut over_a = f64::INFINITY;
    let mut over_a2 = f64::INFINITY;
    for t in dataset.test() {
        for a_prime in spec.answer_range() {
            if a_prime == t.answer {
                continue;
            }
            let h = training::margin(w, spec, t.subject, t.relation, a_prime)?;
            over_a = over_a.min(h);
            if spec.implication_range().contains(&a_prime) {
                over_a2 = over_a2.min(h);
            }
        }
    }
    Ok(TestMargins {
        min_over_answers: over_a,
        min_over_implications: over_a2,
    })
}

/// Cosine similarity of two reduced matrices after Frobenius normalization.
pub fn direction_similarity(a: &ReducedOV, b: &ReducedOV) -> Result<f64> {
    let (ma, mb) = (a.matrix(), b.matrix());
    if ma.rows() != mb.rows() || ma.cols() != mb.cols() {
        return Err(Error::Dim(format!(
            "direction_similarity: {}x{} vs {}x{}",
            ma.rows(),
            ma.cols(),
            mb.rows(),
            mb.cols()
        )));
    }
    let (na, nb) = (ma.frobenius_norm(), mb.frobenius_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidConfig(
            "direction_similarity needs nonzero matrices".into(),
        ));
    }
    let dot: f64 = ma.data().iter().zip(mb.data()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Frobenius,
    Nuclear,
}

/// Rescales a reduced matrix so its minimum train margin is exactly 1;
/// errors if the matrix is not strictly feasible.
pub fn normalize_to_unit_margin(w: ReducedOV, spec: &TaskSpec) -> Result<ReducedOV> {
    let (min_margin, _) = check_feasibility(&w, spec)?;
    if !(min_margin > ORACLE_SLACK) {
        return Err(Error::Infeasible(format!(
            "minimum train margin {min_margin} is not positive"
        )));
    }
    let mut m = w.matrix().clone();
    m.scale(1.0 / min_margin);
    ReducedOV::new(m, w.n(), w.m())
}

/// Finds a max-margin direction numerically, without the closed forms.
///
/// Frobenius: subgradient descent on 0.5*||W||_F^2 plus hinge penalties
/// `FROBENIUS_PENALTY * max(0, 1 - h)` with step 1/(10 + t); the penalty
/// weight exceeds every dual multiplier at these sizes, so the penalized
/// minimizer is the constrained one. Nuclear: fixed-attention factorized
/// gradient descent with d_h = 2n, whose implicit bias selects the
/// nuclear-norm direction. Both end with an exact rescale to margin 1.
pub fn numeric_max_margin(spec: &TaskSpec, norm: NormKind, budget: usize) -> Result<ReducedOV> {
    if spec.n() > 4 || spec.m() > 4 {
        return Err(Error::InvalidConfig(format!(
            "numeric oracle is for desk sizes (n <= 4, m <= 4); got n = {}, m = {}",
            spec.n(),
            spec.m()
        )));
    }
    if budget == 0 {
        return Err(Error::Infeasible("budget 0".into()));
    }
    match norm {
        NormKind::Frobenius => numeric_frobenius(spec, budget),
        NormKind::Nuclear => numeric_nuclear(spec, budget),
    }
}

fn numeric_frobenius(spec: &TaskSpec, budget: usize) -> Result<ReducedOV> {
    let n = spec.n();
    let nm = n * spec.m();
    let dataset = build_dataset(spec);
    let a0 = spec.answer_range().start;
    // Constraints as reduced-matrix index quadruples (row*, row', col_s, col_r).
    let mut constraints = Vec::new();
    for t in dataset.train() {
        let col_r = if t.relation == spec.r1() { nm } else { nm + 1 };
        for a_prime in spec.answer_range() {
            if a_prime == t.answer {
                continue;
            }
            constraints.push((t.answer - a0, a_prime - a0, t.subject, col_r));
        }
    }
    let mut w = DenseMatrix::zeros(2 * n, nm + 2);
    for t in 0..budget {
        let step = 1.0 / (10.0 + t as f64);
        // Subgradient of the regularizer.
        let mut grad = w.clone();
        for &(star, prime, cs, cr) in &constraints {
            let h = w.get(star, cs) + w.get(star, cr) - w.get(prime, cs) - w.get(prime, cr);
            if h < 1.0 {
                grad.set(star, cs, grad.get(star, cs) - FROBENIUS_PENALTY);
                grad.set(star, cr, grad.get(star, cr) - FROBENIUS_PENALTY);
                grad.set(prime, cs, grad.get(prime, cs) + FROBENIUS_PENALTY);
                grad.set(prime, cr, grad.get(prime, cr) + FROBENIUS_PENALTY);
            }
        }
        w.scaled_add(-step, &grad).expect("same shape");
    }
    let reduced = ReducedOV::new(w, n, spec.m())?;
    let (min_margin, _) = check_feasibility(&reduced, spec)?;
    if min_margin < 1.0 - ORACLE_SLACK {
        return Err(Error::Infeasible(format!(
            "frobenius oracle margin {min_margin} after {budget} iterations"
        )));
    }
    normalize_to_unit_margin(reduced, spec)
}

fn numeric_nuclear(spec: &TaskSpec, budget: usize) -> Result<ReducedOV> {
    let config = TrainConfig {
        learning_rate: NUCLEAR_ORACLE_LR,
        steps: budget,
        init: Init::Random {
            seed: NUCLEAR_ORACLE_SEED,
            scale: NUCLEAR_ORACLE_SCALE,
        },
        parameterization: Parameterization::Factorized {
            d_h: 2 * spec.n(),
        },
        attention_mode: AttentionMode::FixedUniform,
        optimizer: Optimizer::GradientDescent,
        eval_every: budget,
    };
    let dataset = build_dataset(spec);
    let log = training::train(&config, spec, &dataset)?;
    let reduced = reduced_ov(&log.final_params, spec)?;
    normalize_to_unit_margin(reduced, spec)
}

/// One grid cell of the closed-form report.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryCell {
    pub n: usize,
    pub m_train: usize,
    pub m_test: usize,
    pub min_nuclear: f64,
    pub min_frobenius: f64,
    pub min_train_margin_nuclear: f64,
    pub min_train_margin_frobenius: f64,
    pub test_margin_nuclear: f64,
    pub test_margin_frobenius_implications: f64,
    pub svd_max_deviation: f64,
}

/// Evaluates one grid cell: closed-form norms, margins of both assembled
/// solutions, and the worst disagreement between the closed-form spectrum
/// and the dense SVD.
pub fn theory_cell(n: usize, m_train: usize, m_test: usize) -> Result<TheoryCell> {
    let spec = TaskSpec::new(n, m_train + m_test, m_train)?;
    let nuc = nuclear_solution(n, m_train, m_test)?;
    let fro = frobenius_solution(n, m_train, m_test)?;
    let w_nuc = assemble_block_matrix(&nuc, n, m_train, m_test)?;
    let w_fro = assemble_block_matrix(&fro, n, m_train, m_test)?;
    let mut svd_max_deviation = 0.0f64;
    for (c, w) in [(&nuc, &w_nuc), (&fro, &w_fro)] {
        let closed = block_svd(c, n, m_train, m_test)?.spectrum();
        let dense = crate::numerics::svd(w.matrix())?.sigma;
        for (a, b) in closed.iter().zip(dense.iter().chain(std::iter::repeat(&0.0))) {
            svd_max_deviation = svd_max_deviation.max((a - b).abs());
        }
    }
    Ok(TheoryCell {
        n,
        m_train,
        m_test,
        min_nuclear: min_nuclear_norm(n, m_train, m_test)?,
        min_frobenius: min_frobenius_norm(n, m_train, m_test)?,
        min_train_margin_nuclear: check_feasibility(&w_nuc, &spec)?.0,
        min_train_margin_frobenius: check_feasibility(&w_fro, &spec)?.0,
        test_margin_nuclear: test_margins(&w_nuc, &spec)?.min_over_answers,
        test_margin_frobenius_implications: test_margins(&w_fro, &spec)?.min_over_implications,
        svd_max_deviation,
    })
}

/// Structured-text report over a grid of (n, m_train, m_test) cells.
pub fn theory_report(grid: &[(usize, usize, usize)]) -> Result<String> {
    #[derive(Serialize)]
    struct Report {
        cell: Vec<TheoryCell>,
    }
    let mut cells = Vec::with_capacity(grid.len());
    for &(n, m_train, m_test) in grid {
        cells.push(theory_cell(n, m_train, m_test)?);
    }
    toml::to_string(&Report { cell: cells })
        .map_err(|e| Error::Parse(format!("report serialization: {e}")))
}
