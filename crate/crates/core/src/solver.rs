//! Levenberg-Marquardt driver and the structured linear solvers behind it.
//!
//! The driver is generic over the state and over how the damped normal
//! equations are solved. Three linearizations are provided:
//!
//! * [`DenseSystem`] for small per-frame problems,
//! * [`ArrowSystem`] for many frame blocks sharing a small set of global
//!   parameters (frame blocks are eliminated first),
//! * [`BlockTridiagonal`] for frame chains where only a few "coupled"
//!   variables interact across neighboring frames; the remaining per-frame
//!   variables are eliminated by a Schur complement and the reduced chain is
//!   solved by block Cholesky.
//!
//! Damping is Marquardt-scaled: `H + mu * diag(max(H_ii, floor))`. A step is
//! accepted only if it does not increase the cost, so the sequence of accepted
//! costs is non-increasing.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::geom::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSettings {
    pub max_iterations: usize,
    /// Converged when the step norm falls to this value.
    pub tol_step: f64,
    /// Converged when the accepted relative cost decrease falls below this.
    pub tol_cost: f64,
    pub initial_damping: f64,
    pub damping_floor: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tol_step: 1e-10,
            tol_cost: 1e-12,
            initial_damping: 1e-4,
            damping_floor: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub iterations: usize,
    pub converged: bool,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
}

/// A linearized problem able to produce a damped Gauss-Newton step.
pub trait Linearization {
    /// Solves `(H + mu D) dx = -g`; `None` when the damped system is not
    /// positive definite.
    fn solve_damped(&self, mu: f64, floor: f64) -> Option<DVector<f64>>;
}

pub trait LmProblem {
    type State: Clone;
    type Lin: Linearization;
    fn cost(&self, state: &Self::State) -> f64;
    fn linearize(&self, state: &Self::State) -> Self::Lin;
    fn apply(&self, state: &Self::State, dx: &DVector<f64>) -> Self::State;
}

pub fn minimize<P: LmProblem>(problem: &P, init: P::State, settings: &LmSettings) -> (P::State, LmReport) {
    let mut state = init;
    let mut cost = problem.cost(&state);
    let mut report = LmReport {
        iterations: 0,
        converged: false,
        initial_cost: cost,
        final_cost: cost,
        accepted_costs: vec![cost],
    };
    if !cost.is_finite() {
        return (state, report);
    }
    if cost == 0.0 {
        report.converged = true;
        return (state, report);
    }
    let mut mu = settings.initial_damping;
    let mut lin = problem.linearize(&state);
    for it in 0..settings.max_iterations {
        report.iterations = it + 1;
        let Some(dx) = lin.solve_damped(mu, settings.damping_floor) else {
            mu *= 10.0;
            if mu > 1e16 {
                break;
            }
            continue;
        };
        if dx.iter().any(|v| !v.is_finite()) {
            mu *= 10.0;
            continue;
        }
        if dx.norm() <= settings.tol_step {
            report.converged = true;
            break;
        }
        let candidate = problem.apply(&state, &dx);
        let c = problem.cost(&candidate);
        if c.is_finite() && c <= cost {
            let decrease = cost - c;
            state = candidate;
            cost = c;
            report.accepted_costs.push(c);
            mu = (mu / 3.0).max(1e-12);
            if cost == 0.0 || decrease <= settings.tol_cost * cost.max(f64::MIN_POSITIVE) {
                report.converged = true;
                break;
            }
            lin = problem.linearize(&state);
        } else {
            mu *= 4.0;
            if mu > 1e16 {
                // no descent direction left at this precision
                report.converged = true;
                break;
            }
        }
    }
    report.final_cost = cost;
    (state, report)
}

fn damped(h: &DMatrix<f64>, mu: f64, floor: f64) -> DMatrix<f64> {
    let mut m = h.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += mu * h[(i, i)].max(floor);
    }
    m
}

/// Accumulates `J^T J` and `J^T r` row by row from sparse rows.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub cost: f64,
}

impl NormalEquations {
    pub fn new(n: usize) -> Self {
        Self {
            h: DMatrix::zeros(n, n),
            g: DVector::zeros(n),
            cost: 0.0,
        }
    }

    /// Adds one residual row `r` with sparse Jacobian entries `(col, value)`.
    pub fn add_row(&mut self, r: f64, row: &[(usize, f64)]) {
        for &(i, a) in row {
            self.g[i] += a * r;
            for &(j, b) in row {
                self.h[(i, j)] += a * b;
            }
        }
        self.cost += r * r;
    }

    /// Adds a 3-vector residual whose Jacobian has column `d` at `col` for
    /// every `(col, d)` entry. Columns must be distinct.
    pub fn add_block3(&mut self, r: &Vec3, entries: &[(usize, Vec3)]) {
        for (a, &(i, di)) in entries.iter().enumerate() {
            self.g[i] += di.dot(r);
            self.h[(i, i)] += di.norm_squared();
            for &(j, dj) in &entries[a + 1..] {
                let v = di.dot(&dj);
                self.h[(i, j)] += v;
                self.h[(j, i)] += v;
            }
        }
        self.cost += r.norm_squared();
    }

    /// Adds a residual whose Jacobian is `w` times the unit vector of `col`.
    pub fn add_diag(&mut self, col: usize, w: f64, r: f64) {
        self.h[(col, col)] += w * w;
        self.g[col] += w * r;
        self.cost += r * r;
    }
}

#[derive(Debug, Clone)]
pub struct DenseSystem(pub NormalEquations);

impl Linearization for DenseSystem {
    fn solve_damped(&self, mu: f64, floor: f64) -> Option<DVector<f64>> {
        let m = damped(&self.0.h, mu, floor);
        Some(Cholesky::new(m)?.solve(&(-&self.0.g)))
    }
}

/// Frame blocks `H_kk`, couplings `H_k,s` to the shared block and the shared
/// block `H_ss`. Frame blocks never couple with each other.
#[derive(Debug, Clone)]
pub struct ArrowSystem {
    pub frames: Vec<ArrowBlock>,
    pub h_shared: DMatrix<f64>,
    pub g_shared: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ArrowBlock {
    pub h: DMatrix<f64>,
    pub coupling: DMatrix<f64>,
    pub g: DVector<f64>,
}

/// Factored frame block with `H⁻¹ C` and `H⁻¹ g`.
type FrameFactor = (Cholesky<f64, Dyn>, DMatrix<f64>, DVector<f64>);

impl Linearization for ArrowSystem {
    /// Step layout: all frame blocks in order, then the shared block.
    fn solve_damped(&self, mu: f64, floor: f64) -> Option<DVector<f64>> {
        let ns = self.h_shared.nrows();
        let parts: Vec<Option<FrameFactor>> = exec::map_slice(&self.frames, |b| {
            let chol = Cholesky::new(damped(&b.h, mu, floor))?;
            let hinv_c = chol.solve(&b.coupling);
            let hinv_g = chol.solve(&b.g);
            Some((chol, hinv_c, hinv_g))
        });
        let mut s = damped(&self.h_shared, mu, floor);
        let mut rhs = -&self.g_shared;
        let mut facts = Vec::with_capacity(parts.len());
        for (b, p) in self.frames.iter().zip(parts) {
            let (chol, hinv_c, hinv_g) = p?;
            s -= b.coupling.transpose() * &hinv_c;
            rhs += b.coupling.transpose() * &hinv_g;
            facts.push((chol, hinv_c, hinv_g));
        }
        let d_shared = Cholesky::new(s)?.solve(&rhs);
        let total: usize = self.frames.iter().map(|b| b.g.len()).sum::<usize>() + ns;
        let mut out = DVector::zeros(total);
        let mut off = 0;
        for (b, (_, hinv_c, hinv_g)) in self.frames.iter().zip(&facts) {
            let dk = -hinv_g - hinv_c * &d_shared;
            out.rows_mut(off, b.g.len()).copy_from(&dk);
            off += b.g.len();
        }
        out.rows_mut(off, ns).copy_from(&d_shared);
        Some(out)
    }
}

/// A chain of frames. Each frame has `n` variables whose first `nc` are the
/// coupled ones; `off[k]` is the `nc x nc` block between frame `k`'s and
/// frame `k+1`'s coupled variables.
#[derive(Debug, Clone)]
pub struct BlockTridiagonal {
    pub nc: usize,
    pub frames: Vec<NormalEquations>,
    pub off: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn cost(&self) -> f64 {
        self.frames.iter().map(|f| f.cost).sum()
    }
}

struct Reduced {
    s: DMatrix<f64>,
    r: DVector<f64>,
    // D^-1 B^T and D^-1 g_l for back substitution
    dinv_bt: DMatrix<f64>,
    dinv_gl: DVector<f64>,
}

impl Linearization for BlockTridiagonal {
    fn solve_damped(&self, mu: f64, floor: f64) -> Option<DVector<f64>> {
        let nc = self.nc;
        let reduced: Vec<Option<Reduced>> = exec::map_slice(&self.frames, |f| {
            let n = f.g.len();
            let nl = n - nc;
            let h = damped(&f.h, mu, floor);
            let a = h.view((0, 0), (nc, nc));
            let b = h.view((0, nc), (nc, nl));
            let d = h.view((nc, nc), (nl, nl)).into_owned();
            let gc = f.g.rows(0, nc);
            let gl = f.g.rows(nc, nl).into_owned();
            let chol = Cholesky::new(d)?;
            let dinv_bt = chol.solve(&b.transpose());
            let dinv_gl = chol.solve(&gl);
            let s = a - b * &dinv_bt;
            let r = -gc + b * &dinv_gl;
            Some(Reduced { s, r, dinv_bt, dinv_gl })
        });
        let reduced: Vec<Reduced> = reduced.into_iter().collect::<Option<_>>()?;
        let m = reduced.len();
        // block LDL^T forward sweep
        let mut chols: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(m);
        let mut ys: Vec<DVector<f64>> = Vec::with_capacity(m);
        for k in 0..m {
            let mut mk = reduced[k].s.clone();
            let mut yk = reduced[k].r.clone();
            if k > 0 {
                let o = &self.off[k - 1];
                let prev = &chols[k - 1];
                let minv_o = prev.solve(o);
                mk -= o.transpose() * minv_o;
                yk -= o.transpose() * prev.solve(&ys[k - 1]);
            }
            chols.push(Cholesky::new(mk)?);
            ys.push(yk);
        }
        let mut cs: Vec<DVector<f64>> = vec![DVector::zeros(nc); m];
        for k in (0..m).rev() {
            let mut rhs = ys[k].clone();
            if k + 1 < m {
                rhs -= &self.off[k] * &cs[k + 1];
            }
            cs[k] = chols[k].solve(&rhs);
        }
        let n = self.frames.first().map_or(0, |f| f.g.len());
        let mut out = DVector::zeros(n * m);
        for k in 0..m {
            let l = -&reduced[k].dinv_gl - &reduced[k].dinv_bt * &cs[k];
            out.rows_mut(k * n, nc).copy_from(&cs[k]);
            out.rows_mut(k * n + nc, n - nc).copy_from(&l);
        }
        Some(out)
    }
}
