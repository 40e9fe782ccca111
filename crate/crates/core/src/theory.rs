//! Numerical checks of the well-posedness and boundedness claims behind
//! derivative similarities.
//!
//! The uniqueness argument works with a *linearized* constraint system: for a
//! fixed anchor `a` and unknown `x`, each derivative order contributes one
//! equation `(A_q a)ᵀ(A_q x) = s_q`, with norms dropped because features are
//! normalized. Everything here verifies that linearized statement together
//! with the rank facts about the stacked operators; the joint multi-vector
//! claim is not asserted.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::derivative::{build_operator_matrix, diff, diff_columns, induced_one_norm, DerivativeVariant};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, pseudo_solve, singular_values, to_dmatrix};
use crate::similarity::{cosine, gram, CosineConvention};
use crate::tensor::{entrywise_l1, Tensor};

const FORWARD: DerivativeVariant = DerivativeVariant::Forward;

/// Seeded generator for trial `index`: one ChaCha stream per trial, so
/// results do not depend on evaluation order.
pub fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub claim: String,
    pub instances: usize,
    pub violations: usize,
    /// Smallest slack seen (positive means the claim held with room to spare).
    pub worst_margin: f64,
    pub passed: bool,
    pub notes: Vec<String>,
}

impl VerificationReport {
    fn new(claim: impl Into<String>) -> Self {
        Self {
            claim: claim.into(),
            instances: 0,
            violations: 0,
            worst_margin: f64::INFINITY,
            passed: true,
            notes: Vec::new(),
        }
    }

    fn record(&mut self, margin: f64, ok: bool) {
        self.instances += 1;
        self.worst_margin = self.worst_margin.min(margin);
        if !ok {
            self.violations += 1;
        }
    }

    fn finish(mut self) -> Self {
        self.passed = self.violations == 0;
        self
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "[{}] {}: {} instances, {} violations, worst margin {:.6e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.claim,
            self.instances,
            self.violations,
            self.worst_margin
        )?;
        for n in &self.notes {
            writeln!(f, "    - {n}")?;
        }
        Ok(())
    }
}

/// `[I; A_1; …; A_{D−1}]` with the row range of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSystem {
    pub d: usize,
    pub matrix: Tensor,
    /// `(order, first row, row count)` per block.
    pub blocks: Vec<(usize, usize, usize)>,
}

/// Stacks the forward operators of the given orders (0 means identity) for dimension `d`.
pub fn stack_operators(d: usize, orders: &[usize]) -> Result<StackedSystem> {
    let mut data = Vec::new();
    let mut blocks = Vec::new();
    let mut row = 0;
    for &q in orders {
        let block = if q == 0 {
            Tensor::identity(d)
        } else {
            build_operator_matrix(q, d, FORWARD)?.matrix().clone()
        };
        blocks.push((q, row, block.rows()));
        row += block.rows();
        data.extend_from_slice(block.data());
    }
    Ok(StackedSystem {
        d,
        matrix: Tensor::matrix(row, d, data)?,
        blocks,
    })
}

/// The joint coefficient matrix over orders `0..D`, with `D(D+1)/2` rows.
pub fn joint_coefficient_matrix(d: usize) -> Result<StackedSystem> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("joint system needs D >= 2, got {d}")));
    }
    stack_operators(d, &(0..d).collect::<Vec<_>>())
}

fn rank_with_margin(a: &Tensor, tol: f64) -> (usize, Vec<f64>) {
    let s = singular_values(a);
    let max = s.first().copied().unwrap_or(0.0);
    let rank = if max == 0.0 {
        0
    } else {
        s.iter().filter(|&&x| x > tol * max).count()
    };
    let rel = s.iter().map(|x| if max > 0.0 { x / max } else { 0.0 }).collect();
    (rank, rel)
}

/// Full rank of the stacked system plus `rank(A_q) = D − q` for every block.
pub fn verify_well_posedness(d: usize, tol: f64) -> VerificationReport {
    let mut report = VerificationReport::new(format!("stacked derivative operators are full rank (D={d})"));
    let sys = match joint_coefficient_matrix(d) {
        Ok(s) => s,
        Err(e) => {
            report.notes.push(e.to_string());
            report.violations += 1;
            return report.finish();
        }
    };
    let check = |name: String, a: &Tensor, expected: usize, report: &mut VerificationReport| {
        let (rank, rel) = rank_with_margin(a, tol);
        // Slack of the smallest singular value that must survive the cut.
        let margin = rel.get(expected.saturating_sub(1)).map_or(-tol, |s| s - tol);
        report.record(margin, rank == expected);
        if rank != expected {
            report.notes.push(format!("{name}: rank {rank}, expected {expected}"));
        }
    };
    check("stack".into(), &sys.matrix, d, &mut report);
    for q in 1..d {
        let a = build_operator_matrix(q, d, FORWARD).expect("q < d");
        check(format!("A_{q}"), a.matrix(), d - q, &mut report);
    }
    report.finish()
}

/// Equations `(A_q a)ᵀ (A_q x) = s_q` for `q = 0..orders` around a fixed anchor `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem {
    anchor: Vec<f64>,
    /// Row `q` is `(A_qᵀ A_q a)ᵀ`.
    matrix: Tensor,
}

impl LinearizedSystem {
    pub fn new(anchor: &[f64], orders: usize) -> Result<Self> {
        let d = anchor.len();
        if orders == 0 || orders > d {
            return Err(Error::InvalidArgument(format!(
                "need 1..={d} orders for a {d}-dimensional anchor, got {orders}"
            )));
        }
        let mut data = Vec::with_capacity(orders * d);
        for q in 0..orders {
            if q == 0 {
                data.extend_from_slice(anchor);
            } else {
                let op = build_operator_matrix(q, d, FORWARD)?;
                let col = Tensor::matrix(d, 1, anchor.to_vec())?;
                let aq = op.matrix().matmul(&col)?;
                data.extend(op.matrix().transpose().matmul(&aq)?.into_data());
            }
        }
        Ok(Self {
            anchor: anchor.to_vec(),
            matrix: Tensor::matrix(orders, d, data)?,
        })
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn orders(&self) -> usize {
        self.matrix.rows()
    }

    /// Similarity targets `(Δ^q a)ᵀ(Δ^q v)` generated by a known feature vector.
    pub fn targets_for(&self, v: &[f64]) -> Result<Vec<f64>> {
        (0..self.orders())
            .map(|q| {
                let da = diff(&self.anchor, q, FORWARD)?;
                let dv = diff(v, q, FORWARD)?;
                Ok(da.iter().zip(&dv).map(|(a, b)| a * b).sum())
            })
            .collect()
    }

    /// Largest absolute equation residual at `x`.
    pub fn residual(&self, x: &[f64], targets: &[f64]) -> f64 {
        (0..self.orders())
            .map(|q| {
                let lhs: f64 = self.matrix.row(q).iter().zip(x).map(|(a, b)| a * b).sum();
                (lhs - targets[q]).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn solve(&self, targets: &[f64], tol: f64) -> Result<SolveOutcome> {
        if targets.len() != self.orders() {
            return Err(Error::ShapeMismatch {
                op: "LinearizedSystem::solve",
                expected: format!("{} targets", self.orders()),
                found: format!("{}", targets.len()),
            });
        }
        let d = self.anchor.len();
        let s = singular_values(&self.matrix);
        let max = s.first().copied().unwrap_or(0.0);
        let rank = if max == 0.0 {
            0
        } else {
            s.iter().filter(|&&x| x > tol * max).count()
        };
        let x = pseudo_solve(&self.matrix, targets, tol);
        let residual = self.residual(&x, targets);
        Ok(SolveOutcome {
            unique: rank == d,
            null_space_dim: d - rank,
            rank,
            condition: condition_number(&self.matrix),
            residual,
            solution: x,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOutcome {
    /// Minimum-norm least-squares solution; the unique one when `unique`.
    pub solution: Vec<f64>,
    pub residual: f64,
    pub rank: usize,
    pub condition: f64,
    pub null_space_dim: usize,
    pub unique: bool,
}

/// Tolerance used when deciding the rank of a linearized system.
pub const SOLVE_TOL: f64 = 1e-10;

/// Solves the linearized system built from `anchor` with one equation per target.
pub fn solve_features_from_similarities(anchor: &[f64], targets: &[f64]) -> Result<SolveOutcome> {
    LinearizedSystem::new(anchor, targets.len())?.solve(targets, SOLVE_TOL)
}

/// Grid search over the L1 unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniquenessSearch {
    /// Grid step on each coordinate.
    pub resolution: f64,
    /// Largest accepted absolute equation residual.
    pub tolerance: f64,
    /// Include every sign pattern, not just the nonnegative simplex.
    pub signed: bool,
}

impl Default for UniquenessSearch {
    fn default() -> Self {
        Self {
            resolution: 1e-3,
            tolerance: 1e-2,
            signed: true,
        }
    }
}

fn for_each_composition(d: usize, n: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(buf: &mut Vec<usize>, d: usize, left: usize, f: &mut impl FnMut(&[usize])) {
        if buf.len() == d - 1 {
            buf.push(left);
            f(buf);
            buf.pop();
            return;
        }
        for k in 0..=left {
            buf.push(k);
            rec(buf, d, left - k, f);
            buf.pop();
        }
    }
    rec(&mut Vec::with_capacity(d), d, n, f);
}

/// Greedy leader clustering of grid points satisfying the system.
/// A point joins the first leader within `radius` (Euclidean), else starts a new cluster.
pub fn solution_clusters(
    system: &LinearizedSystem,
    targets: &[f64],
    search: &UniquenessSearch,
    radius: f64,
) -> Vec<Vec<f64>> {
    let d = system.anchor.len();
    let n = (1.0 / search.resolution).round() as usize;
    let rows: Vec<Vec<f64>> = (0..system.orders()).map(|q| system.matrix.row(q).to_vec()).collect();
    let r2 = radius * radius;
    let mut leaders: Vec<Vec<f64>> = Vec::new();
    let mut x = vec![0.0; d];
    for_each_composition(d, n, &mut |counts| {
        let patterns = if search.signed { 1usize << d } else { 1 };
        'signs: for mask in 0..patterns {
            for (i, &c) in counts.iter().enumerate() {
                let negative = mask >> i & 1 == 1;
                if negative && c == 0 {
                    continue 'signs;
                }
                let mag = c as f64 / n as f64;
                x[i] = if negative { -mag } else { mag };
            }
            let ok = rows.iter().zip(targets).all(|(row, t)| {
                let lhs: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
                (lhs - t).abs() <= search.tolerance
            });
            if !ok {
                continue;
            }
            let near = leaders
                .iter()
                .any(|l| l.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2);
            if !near {
                leaders.push(x.clone());
            }
        }
    });
    leaders
}

/// Largest distance between two points that both satisfy a full-rank system
/// to `tolerance` in every equation.
///
/// For a square system this is the exact diameter of the parallelepiped
/// `|A (x − x*)| ≤ tolerance`, i.e. `2 · tolerance · max_w ‖A⁻¹ w‖₂` over sign
/// vectors `w`. Other shapes fall back to `2 √rows · tolerance / σ_min`.
pub fn uncertainty_radius(system: &LinearizedSystem, tolerance: f64) -> f64 {
    let a = to_dmatrix(system.matrix());
    if a.is_square() && a.nrows() <= 16 {
        if let Some(inv) = a.clone().try_inverse() {
            let n = a.nrows();
            let widest = (0..1usize << n)
                .map(|mask| {
                    let w = nalgebra::DVector::from_iterator(n, (0..n).map(|k| if mask >> k & 1 == 1 { 1.0 } else { -1.0 }));
                    (&inv * w).norm()
                })
                .fold(0.0, f64::max);
            return 2.0 * tolerance * widest;
        }
    }
    let s = singular_values(system.matrix());
    let smin = s.last().copied().unwrap_or(0.0);
    2.0 * (system.orders() as f64).sqrt() * tolerance / smin
}

fn random_simplex_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    // Uniform on the simplex via normalized exponentials.
    let e: Vec<f64> = (0..d).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Anchors whose full linearized system has a smallest singular value below
/// this are considered degenerate and skipped.
pub const GENERIC_SIGMA_MIN: f64 = 0.1;

/// One uniqueness experiment: anchor, true features and what the search found.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessTrial {
    pub anchor: Vec<f64>,
    pub truth: Vec<f64>,
    pub radius: f64,
    pub clusters_order0: usize,
    pub clusters_full: usize,
    pub solver_residual: f64,
    pub solver_error: f64,
}

/// Draws a generic anchor and truth on the simplex for trial `index`.
pub fn generic_instance(d: usize, seed: u64, index: u64) -> Result<(LinearizedSystem, Vec<f64>)> {
    let mut rng = trial_rng(seed, index);
    for _ in 0..10_000 {
        let anchor = random_simplex_point(&mut rng, d);
        let system = LinearizedSystem::new(&anchor, d)?;
        let smin = singular_values(system.matrix()).last().copied().unwrap_or(0.0);
        if smin >= GENERIC_SIGMA_MIN {
            let truth = random_simplex_point(&mut rng, d);
            return Ok((system, truth));
        }
    }
    Err(Error::InvalidArgument("no generic anchor found".into()))
}

pub fn uniqueness_trial(d: usize, seed: u64, index: u64, search: &UniquenessSearch) -> Result<UniquenessTrial> {
    let (full, truth) = generic_instance(d, seed, index)?;
    let targets = full.targets_for(&truth)?;
    let radius = uncertainty_radius(&full, search.tolerance);
    let order0 = LinearizedSystem::new(full.anchor(), 1)?;
    let clusters_order0 = solution_clusters(&order0, &targets[..1], search, radius).len();
    let clusters_full = solution_clusters(&full, &targets, search, radius).len();
    let solved = full.solve(&targets, SOLVE_TOL)?;
    let solver_error = solved
        .solution
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(UniquenessTrial {
        anchor: full.anchor().to_vec(),
        truth,
        radius,
        clusters_order0,
        clusters_full,
        solver_residual: solved.residual,
        solver_error,
    })
}

/// Brute-force uniqueness experiment over `anchors` generic seeded anchors.
pub fn verify_uniqueness(d: usize, anchors: usize, seed: u64, search: &UniquenessSearch) -> Result<(VerificationReport, Vec<UniquenessTrial>)> {
    let mut report = VerificationReport::new(format!(
        "order-0 constraint alone is ambiguous, full linearized stack is unique (D={d})"
    ));
    let mut trials = Vec::with_capacity(anchors);
    for i in 0..anchors {
        let t = uniqueness_trial(d, seed, i as u64, search)?;
        let ok = t.clusters_order0 >= 2 && t.clusters_full == 1 && t.solver_residual < 1e-8;
        report.record(1e-8 - t.solver_residual, ok);
        if !ok {
            report.notes.push(format!(
                "anchor {:?}: {} clusters with q=0 only, {} with full stack, residual {:.3e}",
                t.anchor, t.clusters_order0, t.clusters_full, t.solver_residual
            ));
        }
        trials.push(t);
    }
    report.notes.push(format!(
        "grid step {}, residual tolerance {}, signed={}",
        search.resolution, search.tolerance, search.signed
    ));
    Ok((report.finish(), trials))
}

fn random_bounded_features(rng: &mut ChaCha8Rng, d: usize, m: usize) -> Tensor {
    let mut data = vec![0.0; d * m];
    for j in 0..m {
        let col: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm: f64 = col.iter().map(|x| x.abs()).sum();
        // Every other column sits exactly on the unit L1 sphere.
        let target = if j % 2 == 0 { 1.0 } else { rng.random_range(0.0..1.0) };
        for i in 0..d {
            data[i * m + j] = if norm > 0.0 { col[i] / norm * target } else { 0.0 };
        }
    }
    Tensor::matrix(d, m, data).expect("finite by construction")
}

/// Slack tolerated on the boundedness inequality.
pub const BOUND_SLACK: f64 = 1e-9;

/// Checks `‖Δ^q S‖₁ ≤ (2^{q−2} ‖Δ² V‖₁)²` for `q = 2..D−1` on random features with `‖v‖₁ ≤ 1`.
pub fn verify_boundedness(trials: usize, d: usize, m: usize, seed: u64) -> VerificationReport {
    boundedness_suite(trials, d, m, seed).remove(0)
}

/// The boundedness bound plus its two intermediate steps:
/// `‖Δ^q v‖₁ ≤ 2^{q−2}‖Δ² v‖₁` per column and `‖Δ^q S‖₁ ≤ (Σ_i ‖Δ^q v_i‖₁)²`.
pub fn boundedness_suite(trials: usize, d: usize, m: usize, seed: u64) -> Vec<VerificationReport> {
    let mut bound = VerificationReport::new(format!(
        "||Δ^q S||_1 <= (2^(q-2) ||Δ²V||_1)^2 (D={d}, M={m})"
    ));
    let mut column = VerificationReport::new(format!("||Δ^q v||_1 <= 2^(q-2) ||Δ²v||_1 (D={d})"));
    let mut gram_step = VerificationReport::new(format!(
        "||Δ^q S||_1 <= (sum_i ||Δ^q v_i||_1)^2 (D={d}, M={m})"
    ));
    if d < 4 || m == 0 {
        for r in [&mut bound, &mut column, &mut gram_step] {
            r.notes.push("needs D >= 4 and M >= 1".into());
            r.violations += 1;
        }
    } else {
        for t in 0..trials {
            let mut rng = trial_rng(seed, t as u64);
            let v = random_bounded_features(&mut rng, d, m);
            let d2 = diff_columns(&v, 2, FORWARD).expect("d >= 4");
            let d2_l1 = entrywise_l1(&d2);
            for q in 2..d {
                let dq = diff_columns(&v, q, FORWARD).expect("q < d");
                let lhs = entrywise_l1(&gram(&dq));
                let rhs = (2f64.powi(q as i32 - 2) * d2_l1).powi(2);
                bound.record(rhs - lhs, lhs <= rhs + BOUND_SLACK);
                let col_sum: f64 = entrywise_l1(&dq);
                gram_step.record(col_sum * col_sum - lhs, lhs <= col_sum * col_sum + BOUND_SLACK);
                for j in 0..m {
                    let a: f64 = dq.column(j).iter().map(|x| x.abs()).sum();
                    let b: f64 = d2.column(j).iter().map(|x| x.abs()).sum::<f64>() * 2f64.powi(q as i32 - 2);
                    column.record(b - a, a <= b + BOUND_SLACK);
                }
            }
        }
        bound.notes.push(format!("{trials} seeded trials, seed {seed}, slack {BOUND_SLACK:e}"));
    }
    vec![bound.finish(), column.finish(), gram_step.finish()]
}

/// Induced-norm facts about forward operators and the L1 amplification bound
/// `‖A_q v‖₁ ≤ ‖A_q‖_{1→1} ‖v‖₁ ≤ 2^q ‖v‖₁` on random vectors.
pub fn verify_lemma1(trials: usize, d: usize, seed: u64) -> VerificationReport {
    let mut report = VerificationReport::new(format!("L1 amplification of A_q is at most 2^q (D={d})"));
    let mut narrow = Vec::new();
    for q in 1..d {
        let op = build_operator_matrix(q, d, FORWARD).expect("q < d");
        let norm = induced_one_norm(op.matrix());
        let pow = 2f64.powi(q as i32);
        // Columns see the whole band only when D >= 2q + 1.
        let expect_equal = d > 2 * q;
        let ok = norm <= pow && (!expect_equal || norm == pow);
        report.record(pow - norm, ok);
        if !expect_equal {
            narrow.push(format!("q={q}: {norm}"));
        }
        for t in 0..trials {
            let mut rng = trial_rng(seed, (q * trials + t) as u64);
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v_l1: f64 = v.iter().map(|x| x.abs()).sum();
            let out: f64 = diff(&v, q, FORWARD).expect("q < d").iter().map(|x| x.abs()).sum();
            let ok = out <= norm * v_l1 + BOUND_SLACK && norm * v_l1 <= pow * v_l1 + BOUND_SLACK;
            report.record(pow * v_l1 - out, ok);
        }
    }
    if !narrow.is_empty() {
        report.notes.push(format!(
            "column norm below 2^q where D <= 2q: {}",
            narrow.join(", ")
        ));
    }
    report.finish()
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Everything the introductory counterexample shows, computed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub anchor: Vec<f64>,
    pub correct: Vec<f64>,
    pub impostor: Vec<f64>,
    pub cosine_correct: f64,
    pub cosine_impostor: f64,
    /// Residuals of both L2-normalized candidates in the q=0-only linearized system.
    pub order0_residuals: [f64; 2],
    pub order0_admits_both: bool,
    /// Δ¹ of the constant anchor is the zero vector.
    pub anchor_first_difference: Vec<f64>,
    pub derivative_cosine_defined: bool,
    pub constant_anchor_rank: usize,
    pub constant_anchor_disambiguated: bool,
    pub generic_anchor: Vec<f64>,
    pub generic_candidates: [Vec<f64>; 2],
    pub generic_order0_values: [f64; 2],
    pub generic_order1_values: [f64; 2],
    pub generic_rank: usize,
    pub generic_disambiguated: bool,
}

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn counterexample_demo() -> Result<CounterexampleReport> {
    let anchor = vec![1.0, 1.0, 1.0];
    let correct = vec![2.0 + SQRT3, 1.0, 0.0];
    let impostor = vec![2.0 - SQRT3, 1.0, 0.0];
    let cosine_correct = cosine(&anchor, &correct, CosineConvention::L2)?;
    let cosine_impostor = cosine(&anchor, &impostor, CosineConvention::L2)?;

    let a_hat = l2_normalized(&anchor);
    let order0 = LinearizedSystem::new(&a_hat, 1)?;
    let target = [cosine_correct];
    let r_correct = order0.residual(&l2_normalized(&correct), &target);
    let r_impostor = order0.residual(&l2_normalized(&impostor), &target);

    let anchor_first_difference = diff(&anchor, 1, FORWARD)?;
    let derivative_cosine_defined = cosine(&anchor_first_difference, &diff(&correct, 1, FORWARD)?, CosineConvention::L2).is_ok();
    let constant = LinearizedSystem::new(&a_hat, 3)?;
    let constant_rank = constant.solve(&[0.0; 3], SOLVE_TOL)?.rank;

    // A generic anchor and two simplex points with the same order-0 similarity:
    // move from v1 along the direction orthogonal to both the anchor and the
    // all-ones vector, which keeps both the dot product and the L1 mass.
    let generic = vec![0.5, 0.3, 0.2];
    let v1 = vec![0.2, 0.5, 0.3];
    let ones = [1.0, 1.0, 1.0];
    let dir = [
        ones[1] * generic[2] - ones[2] * generic[1],
        ones[2] * generic[0] - ones[0] * generic[2],
        ones[0] * generic[1] - ones[1] * generic[0],
    ];
    // Largest step keeping every coordinate nonnegative, then go half way.
    let step = v1
        .iter()
        .zip(&dir)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(f64::INFINITY, f64::min);
    let v2: Vec<f64> = v1.iter().zip(&dir).map(|(x, d)| x + 0.5 * step * d).collect();
    let full = LinearizedSystem::new(&generic, 3)?;
    let t1 = full.targets_for(&v1)?;
    let t2 = full.targets_for(&v2)?;
    let generic_rank = full.solve(&t1, SOLVE_TOL)?.rank;

    Ok(CounterexampleReport {
        anchor,
        correct,
        impostor,
        cosine_correct,
        cosine_impostor,
        order0_residuals: [r_correct, r_impostor],
        order0_admits_both: r_correct < 1e-12 && r_impostor < 1e-12,
        anchor_first_difference,
        derivative_cosine_defined,
        constant_anchor_rank: constant_rank,
        constant_anchor_disambiguated: constant_rank == 3,
        generic_anchor: generic,
        generic_candidates: [v1, v2],
        generic_order0_values: [t1[0], t2[0]],
        generic_order1_values: [t1[1], t2[1]],
        generic_rank,
        generic_disambiguated: generic_rank == 3 && (t1[1] - t2[1]).abs() > 1e-9,
    })
}

impl fmt::Display for CounterexampleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let half_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        for (name, c) in [("2+sqrt3", self.cosine_correct), ("2-sqrt3", self.cosine_impostor)] {
            writeln!(
                f,
                "cos_l2({:?}, [{name}, 1, 0]) = {c} (sqrt(2)/2 = {half_sqrt2}, difference {:.1e})",
                self.anchor,
                c - half_sqrt2
            )?;
        }
        writeln!(
            f,
            "q=0-only linearized system (L2-normalized): residuals {:.3e} / {:.3e} -> {}",
            self.order0_residuals[0],
            self.order0_residuals[1],
            if self.order0_admits_both { "both candidates satisfy it" } else { "candidates separated" }
        )?;
        writeln!(
            f,
            "constant anchor: first difference {:?}, derivative cosine {}; stacked rank {} of 3 -> {}",
            self.anchor_first_difference,
            if self.derivative_cosine_defined { "defined" } else { "undefined (zero vector)" },
            self.constant_anchor_rank,
            if self.constant_anchor_disambiguated { "disambiguated" } else { "not disambiguated" }
        )?;
        writeln!(
            f,
            "generic anchor {:?}: candidates {:?} and {:?}",
            self.generic_anchor, self.generic_candidates[0], self.generic_candidates[1]
        )?;
        writeln!(
            f,
            "  q=0 values {:.12} / {:.12}; q=1 values {:.12} / {:.12}; stacked rank {} -> {}",
            self.generic_order0_values[0],
            self.generic_order0_values[1],
            self.generic_order1_values[0],
            self.generic_order1_values[1],
            self.generic_rank,
            if self.generic_disambiguated { "disambiguated" } else { "not disambiguated" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_matrix_small_cases() {
        let s2 = joint_coefficient_matrix(2).unwrap();
        assert_eq!(s2.matrix.dims(), &[3, 2]);
        assert_eq!(s2.matrix.data(), &[1.0, 0.0, 0.0, 1.0, -1.0, 1.0]);
        let s3 = joint_coefficient_matrix(3).unwrap();
        assert_eq!(s3.matrix.dims(), &[6, 3]);
        assert_eq!(
            s3.matrix.data(),
            &[
                1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, //
                -1.0, 1.0, 0.0, 0.0, -1.0, 1.0, //
                1.0, -2.0, 1.0
            ]
        );
        assert!(joint_coefficient_matrix(1).is_err());
    }

    #[test]
    fn joint_matrix_blocks() {
        for d in 2..=10 {
            let s = joint_coefficient_matrix(d).unwrap();
            assert_eq!(s.matrix.rows(), d * (d + 1) / 2);
            for &(q, start, len) in &s.blocks {
                assert_eq!(len, d - q);
                if q > 0 {
                    let op = build_operator_matrix(q, d, FORWARD).unwrap();
                    let block = &s.matrix.data()[start * d..(start + len) * d];
                    assert_eq!(block, op.matrix().data());
                }
            }
        }
    }

    #[test]
    fn well_posedness_examples() {
        assert!(verify_well_posedness(4, 1e-10).passed);
        assert!(verify_well_posedness(16, 1e-10).passed);
    }

    #[test]
    fn truncated_stack_rank_matches_exact_elimination() {
        // Blocks A_1, A_2 only for D = 3. Exact fraction-free elimination as the oracle.
        let s = stack_operators(3, &[1, 2]).unwrap();
        let mut rows: Vec<Vec<i64>> = (0..s.matrix.rows())
            .map(|r| s.matrix.row(r).iter().map(|&x| x as i64).collect())
            .collect();
        let mut rank = 0;
        for col in 0..3 {
            if let Some(p) = (rank..rows.len()).find(|&r| rows[r][col] != 0) {
                rows.swap(rank, p);
                for r in 0..rows.len() {
                    if r != rank && rows[r][col] != 0 {
                        let (a, b) = (rows[rank][col], rows[r][col]);
                        for c in 0..3 {
                            rows[r][c] = rows[r][c] * a - rows[rank][c] * b;
                        }
                    }
                }
                rank += 1;
            }
        }
        assert_eq!(crate::linalg::numerical_rank(&s.matrix, 1e-10), rank);
        // [1, −2, 1] = −([−1, 1, 0] − [0, −1, 1]) lies in the span of A_1's rows.
        assert_eq!(rank, 2);
    }

    #[test]
    fn solver_recovers_known_features() {
        let anchor = [0.5, 0.3, 0.2];
        let truth = [0.2, 0.5, 0.3];
        let sys = LinearizedSystem::new(&anchor, 3).unwrap();
        let targets = sys.targets_for(&truth).unwrap();
        let out = solve_features_from_similarities(&anchor, &targets).unwrap();
        assert!(out.unique);
        for (a, b) in out.solution.iter().zip(truth) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(out.residual < 1e-8);
    }

    #[test]
    fn solver_grid_cross_check() {
        // Non-signed simplex search at 1e-3 must find a single cluster around the truth.
        let anchor = [0.5, 0.3, 0.2];
        let truth = [0.2, 0.5, 0.3];
        let sys = LinearizedSystem::new(&anchor, 3).unwrap();
        let targets = sys.targets_for(&truth).unwrap();
        let search = UniquenessSearch { signed: false, ..Default::default() };
        let radius = uncertainty_radius(&sys, search.tolerance);
        let clusters = solution_clusters(&sys, &targets, &search, radius);
        assert_eq!(clusters.len(), 1);
        let dist: f64 = clusters[0].iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist <= radius);
    }

    #[test]
    fn radius_covers_the_tolerance_box() {
        let sys = LinearizedSystem::new(&[0.5, 0.3, 0.2], 3).unwrap();
        let tol = 1e-2;
        let r = uncertainty_radius(&sys, tol);
        let smin = *singular_values(sys.matrix()).last().unwrap();
        assert!(r <= 2.0 * 3f64.sqrt() * tol / smin + 1e-15);
        // Solve A z = w for every corner w of the box and a few random interior points.
        let mut rng = trial_rng(4, 0);
        let mut widest: f64 = 0.0;
        for k in 0..200 {
            let w: Vec<f64> = if k < 8 {
                (0..3).map(|i| if k >> i & 1 == 1 { tol } else { -tol }).collect()
            } else {
                (0..3).map(|_| rng.random_range(-tol..tol)).collect()
            };
            let z = pseudo_solve(sys.matrix(), &w, 1e-14);
            widest = widest.max(2.0 * z.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        assert!((widest - r).abs() < 1e-12, "{widest} vs {r}");
    }

    #[test]
    fn constant_anchor_is_rank_deficient() {
        let anchor = [1.0 / 3.0; 3];
        let sys = LinearizedSystem::new(&anchor, 3).unwrap();
        for q in 1..3 {
            assert!(sys.matrix().row(q).iter().all(|&x| x == 0.0));
        }
        let out = sys.solve(&sys.targets_for(&[0.2, 0.5, 0.3]).unwrap(), SOLVE_TOL).unwrap();
        assert_eq!(out.rank, 1);
        assert_eq!(out.null_space_dim, 2);
        assert!(!out.unique);
    }

    #[test]
    fn counterexample_report() {
        let r = counterexample_demo().unwrap();
        let target = std::f64::consts::SQRT_2 / 2.0;
        assert!((r.cosine_correct - target).abs() < 1e-12);
        assert!((r.cosine_impostor - target).abs() < 1e-12);
        assert!(r.order0_admits_both);
        assert!(!r.derivative_cosine_defined);
        assert_eq!(r.constant_anchor_rank, 1);
        assert!(!r.constant_anchor_disambiguated);
        assert!((r.generic_order0_values[0] - r.generic_order0_values[1]).abs() < 1e-12);
        assert!(r.generic_disambiguated);
        let text = r.to_string();
        assert!(text.contains("not disambiguated"));
    }

    #[test]
    fn boundedness_small_run() {
        for r in boundedness_suite(200, 6, 5, 3) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn boundedness_tight_on_affine_columns() {
        let v = Tensor::from_rows(&[[0.1, -0.2], [0.15, -0.1], [0.2, 0.0], [0.25, 0.1], [0.3, 0.2]]).unwrap();
        let d2 = diff_columns(&v, 2, FORWARD).unwrap();
        assert!(entrywise_l1(&d2) < 1e-15);
        for q in 2..5 {
            let lhs = entrywise_l1(&gram(&diff_columns(&v, q, FORWARD).unwrap()));
            assert!(lhs < 1e-28);
        }
    }

    #[test]
    fn lemma1_report() {
        let r = verify_lemma1(100, 8, 1);
        assert!(r.passed, "{r}");
        assert!(r.notes[0].contains("q=4"));
    }

    #[test]
    fn trial_streams_are_independent_of_order() {
        let a: f64 = trial_rng(7, 3).random();
        let _ = trial_rng(7, 2).random::<f64>();
        let b: f64 = trial_rng(7, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, trial_rng(7, 4).random::<f64>());
    }
}
