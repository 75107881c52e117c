//! Viscous boundary layer in the stretched variable `y = x₃/ε`.
//!
//! Holds the drift–diffusion solver for `(ū₁, ū₂, θ̄)`, the Neumann data
//! obtained from wall matching, the derived normal velocity and pressure,
//! and the kinetic layer terms `(I-P₀) f̄₂` and `J̄₁` built from wall Taylor
//! data of the background.

use serde::{Deserialize, Serialize};

use crate::collision::{CollisionBackend, TransportCoeffs};
use crate::error::{HilbexError, Result};
use crate::interior::source_moments;
use crate::quad::{lagrange_derivative_weights, trapezoid};
use crate::velocity::{
    macro_slice, sqrt_maxwellian, FluidPoint, MacroBasis, MacroCoeffs, VelocityGrid,
};

/// Largest mismatch allowed between initial data and the Neumann datum at `t = 0`.
pub const COMPAT_TOL: f64 = 1e-8;

/// Warn when the weighted-norm stability constant exceeds this.
pub const STABILITY_WARN: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerGridSpec {
    pub y_max: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub ratio: f64,
    /// Exponent `l` of the weight `(1+y)^l` in the monitored norm.
    pub weight_l: f64,
}

impl Default for LayerGridSpec {
    fn default() -> Self {
        LayerGridSpec {
            y_max: 20.0,
            h_min: 0.02,
            h_max: 0.25,
            ratio: 1.08,
            weight_l: 1.0,
        }
    }
}

impl LayerGridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_min > 0.0 && self.h_min <= self.h_max) {
            return Err(HilbexError::config(
                "layer.h_min",
                "need 0 < h_min <= h_max",
            ));
        }
        if !(self.y_max.is_finite() && self.y_max >= 10.0 * self.h_max) {
            return Err(HilbexError::config(
                "layer.y_max",
                "must be finite and at least 10 h_max",
            ));
        }
        if !(self.ratio > 1.0 && self.ratio <= 2.0) {
            return Err(HilbexError::config("layer.ratio", "must lie in (1, 2]"));
        }
        if !(self.weight_l >= 0.0 && self.weight_l.is_finite()) {
            return Err(HilbexError::config(
                "layer.weight_l",
                "must be a nonnegative number",
            ));
        }
        Ok(())
    }
}

/// Graded nodes on `[0, Y_max]` with the time step of the fluid solver.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrid {
    pub y: Vec<f64>,
    pub dt: f64,
    pub n_steps: usize,
    pub weight_l: f64,
}

impl LayerGrid {
    pub fn build(spec: &LayerGridSpec, dt: f64, n_steps: usize) -> Result<Self> {
        spec.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(HilbexError::config("dt", "must be positive"));
        }
        let mut y = vec![0.0];
        let mut h = spec.h_min;
        while y[y.len() - 1] + 1.5 * h < spec.y_max {
            let next = y[y.len() - 1] + h;
            y.push(next);
            h = (h * spec.ratio).min(spec.h_max);
        }
        y.push(spec.y_max);
        Ok(LayerGrid {
            y,
            dt,
            n_steps,
            weight_l: spec.weight_l,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y_max(&self) -> f64 {
        self.y[self.y.len() - 1]
    }

    pub fn n_levels(&self) -> usize {
        self.n_steps + 1
    }

    /// Weights of the one-sided three-point derivative at `y = 0`.
    pub fn wall_weights(&self) -> [f64; 3] {
        let w = lagrange_derivative_weights(&self.y[..3], 0.0);
        [w[0], w[1], w[2]]
    }

    /// One-sided derivative at the wall.
    pub fn wall_derivative(&self, f: &[f64]) -> f64 {
        let w = self.wall_weights();
        w[0] * f[0] + w[1] * f[1] + w[2] * f[2]
    }

    /// Three-point derivative at every node, one-sided at both ends.
    pub fn derivative(&self, f: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|j| self.derivative_at(f, j)).collect()
    }

    pub fn derivative_at(&self, f: &[f64], j: usize) -> f64 {
        let (lo, w) = self.stencil(j);
        w[0] * f[lo] + w[1] * f[lo + 1] + w[2] * f[lo + 2]
    }

    /// First node and derivative weights of the stencil used at node `j`.
    pub fn stencil(&self, j: usize) -> (usize, [f64; 3]) {
        let n = self.len();
        let lo = j.saturating_sub(1).min(n - 3);
        let w = lagrange_derivative_weights(&self.y[lo..lo + 3], self.y[j]);
        (lo, [w[0], w[1], w[2]])
    }

    /// `(∫ (1+y)^{2l} f² dy)^{1/2}`.
    pub fn weighted_norm(&self, f: &[f64]) -> f64 {
        let g: Vec<f64> = self
            .y
            .iter()
            .zip(f)
            .map(|(y, v)| (1.0 + y).powf(2.0 * self.weight_l) * v * v)
            .collect();
        trapezoid(&self.y, &g).sqrt()
    }

    /// Index of the node closest to `Y_max / 2`.
    pub fn mid_index(&self) -> usize {
        let half = 0.5 * self.y_max();
        (0..self.len())
            .min_by(|&a, &b| {
                (self.y[a] - half)
                    .abs()
                    .total_cmp(&(self.y[b] - half).abs())
            })
            .unwrap_or(0)
    }
}

/// Wall coefficients of the layer system at one time level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerWall {
    pub rho: f64,
    pub t: f64,
    pub mu: f64,
    pub kappa: f64,
    /// `∂₃u₃⁰`, the slope of the linear drift.
    pub drift_slope: f64,
    /// `u⁰_{1,3}`, the constant part of the drift.
    pub drift_offset: f64,
    /// Zeroth-order coefficients of `(ū₁, ū₂, θ̄)`; `(2/3)ρ⁰ div u⁰` for `θ̄`.
    pub reaction: [f64; 3],
    /// `∂ᵢp⁰ / (3T⁰)`, multiplying `θ̄` in the `ūᵢ` equations.
    pub coupling: [f64; 2],
}

impl LayerWall {
    pub fn diffusion(&self, c: usize) -> f64 {
        if c < 2 {
            self.mu
        } else {
            0.6 * self.kappa
        }
    }
}

/// Wall values of `∂_y ū_∥` (`b`) and `∂_y θ̄` (`a`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NeumannData {
    pub b: [f64; 2],
    pub a: f64,
}

impl NeumannData {
    pub fn as_array(&self) -> [f64; 3] {
        [self.b[0], self.b[1], self.a]
    }

    pub fn max_abs(&self) -> f64 {
        self.as_array().iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn lerp(&self, o: &Self, w: f64) -> Self {
        let a = self.as_array();
        let b = o.as_array();
        let c: [f64; 3] = std::array::from_fn(|i| (1.0 - w) * a[i] + w * b[i]);
        NeumannData {
            b: [c[0], c[1]],
            a: c[2],
        }
    }
}

/// Linear interpolation in time of per-level data sampled at `levels`.
pub fn interpolate_neumann(
    levels: &[usize],
    values: &[NeumannData],
    n_levels: usize,
) -> Vec<NeumannData> {
    (0..n_levels)
        .map(|n| match levels.binary_search(&n) {
            Ok(k) => values[k],
            Err(k) => {
                let (a, b) = (levels[k - 1], levels[k]);
                values[k - 1].lerp(&values[k], (n - a) as f64 / (b - a) as f64)
            }
        })
        .collect()
}

/// Inputs of one layer order: coefficients and data per level, sources and
/// initial profile per node.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProblem {
    pub k: usize,
    pub wall: Vec<LayerWall>,
    pub neumann: Vec<NeumannData>,
    /// Right-hand sides `(𝔣̄₁, 𝔣̄₂, 𝔤̄)` per level and node.
    pub sources: Vec<Vec<[f64; 3]>>,
    pub init: Vec<[f64; 3]>,
}

impl LayerProblem {
    /// Homogeneous problem with the given coefficients.
    pub fn zero(k: usize, wall: Vec<LayerWall>, n_nodes: usize) -> Self {
        let nl = wall.len();
        LayerProblem {
            k,
            wall,
            neumann: vec![NeumannData::default(); nl],
            sources: vec![vec![[0.0; 3]; n_nodes]; nl],
            init: vec![[0.0; 3]; n_nodes],
        }
    }
}

/// Solution `(ū₁, ū₂, θ̄)` of one layer order at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerField {
    pub k: usize,
    pub grid: LayerGrid,
    pub levels: Vec<Vec<[f64; 3]>>,
    pub neumann: Vec<NeumannData>,
    /// Largest `|(ū_∥, θ̄)|` at `y ≈ Y_max/2` over all levels.
    pub contamination: f64,
    /// `max_t ‖w(t)‖ / (‖w(0)‖ + ∫‖S/ρ⁰‖ + ∫|b|)` in the weighted norm.
    pub stability: f64,
    pub warnings: Vec<String>,
}

impl LayerField {
    pub fn component(&self, level: usize, c: usize) -> Vec<f64> {
        self.levels[level].iter().map(|w| w[c]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.iter().flat_map(|w| w.iter()))
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest gap between the one-sided wall derivative and the datum.
    pub fn neumann_residual(&self) -> f64 {
        let mut r: f64 = 0.0;
        for (lvl, nd) in self.levels.iter().zip(&self.neumann) {
            let d = nd.as_array();
            for (c, dc) in d.iter().enumerate() {
                let f: Vec<f64> = lvl.iter().take(3).map(|w| w[c]).collect();
                r = r.max((self.grid.wall_derivative(&f) - dc).abs());
            }
        }
        r
    }
}

/// Initial profile `-d e^{-y}` per component, adjusted at the wall so the
/// discrete wall derivative equals `d` exactly and zero at `Y_max`.
pub fn compatible_init(grid: &LayerGrid, nd: &NeumannData) -> Vec<[f64; 3]> {
    let d = nd.as_array();
    let n = grid.len();
    let mut w: Vec<[f64; 3]> = grid
        .y
        .iter()
        .map(|y| std::array::from_fn(|c| -d[c] * (-y).exp()))
        .collect();
    w[n - 1] = [0.0; 3];
    let e = grid.wall_weights();
    for c in 0..3 {
        w[0][c] = (d[c] - e[1] * w[1][c] - e[2] * w[2][c]) / e[0];
    }
    w
}

/// Second-derivative and first-derivative weights at interior node `j`.
fn interior_weights(y: &[f64], j: usize) -> ([f64; 3], [f64; 3]) {
    let hm = y[j] - y[j - 1];
    let hp = y[j + 1] - y[j];
    let s = hm + hp;
    (
        [2.0 / (hm * s), -2.0 / (hm * hp), 2.0 / (hp * s)],
        [-hp / (hm * s), (hp - hm) / (hm * hp), hm / (hp * s)],
    )
}

/// Tridiagonal rows `(lower, diag, upper)` of the spatial operator at one level.
fn operator_rows(grid: &LayerGrid, wall: &LayerWall, c: usize) -> Vec<[f64; 3]> {
    let n = grid.len();
    let a = wall.diffusion(c) / wall.rho;
    let r = wall.reaction[c] / wall.rho;
    let mut rows = vec![[0.0; 3]; n];
    for (j, row) in rows.iter_mut().enumerate().take(n - 1).skip(1) {
        let (d2, d1) = interior_weights(&grid.y, j);
        let b = wall.drift_slope * grid.y[j] + wall.drift_offset;
        *row = [
            a * d2[0] - b * d1[0],
            a * d2[1] - b * d1[1] - r,
            a * d2[2] - b * d1[2],
        ];
    }
    rows
}

fn apply_rows(rows: &[[f64; 3]], w: &[f64], j: usize) -> f64 {
    rows[j][0] * w[j - 1] + rows[j][1] * w[j] + rows[j][2] * w[j + 1]
}

/// Crank–Nicolson step for one component with the algebraic Neumann row at
/// the wall and a homogeneous Dirichlet value at `Y_max`.
#[allow(clippy::too_many_arguments)]
fn cn_step(
    grid: &LayerGrid,
    rows_n: &[[f64; 3]],
    rows_np: &[[f64; 3]],
    w: &[f64],
    forcing: &[f64],
    b_np: f64,
) -> Vec<f64> {
    let n = grid.len();
    let h = 0.5 * grid.dt;
    let mut lo = vec![0.0; n];
    let mut di = vec![0.0; n];
    let mut up = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for j in 1..n - 1 {
        lo[j] = -h * rows_np[j][0];
        di[j] = 1.0 - h * rows_np[j][1];
        up[j] = -h * rows_np[j][2];
        rhs[j] = w[j] + h * apply_rows(rows_n, w, j) + grid.dt * forcing[j];
    }
    di[n - 1] = 1.0;
    // Wall row e₀w₀ + e₁w₁ + e₂w₂ = b, with w₂ eliminated through row 1.
    let e = grid.wall_weights();
    let k = e[2] / up[1];
    di[0] = e[0] - k * lo[1];
    up[0] = e[1] - k * di[1];
    rhs[0] = b_np - k * rhs[1];
    for j in 1..n {
        let m = lo[j] / di[j - 1];
        di[j] -= m * up[j - 1];
        rhs[j] -= m * rhs[j - 1];
    }
    let mut out = vec![0.0; n];
    out[n - 1] = rhs[n - 1] / di[n - 1];
    for j in (0..n - 1).rev() {
        out[j] = (rhs[j] - up[j] * out[j + 1]) / di[j];
    }
    out
}

/// Solves the layer system of one order on `grid`.
pub fn solve_layer_parabolic(problem: &LayerProblem, grid: &LayerGrid) -> Result<LayerField> {
    let nl = grid.n_levels();
    let nx = grid.len();
    if problem.wall.len() != nl
        || problem.neumann.len() != nl
        || problem.sources.len() != nl
        || problem.init.len() != nx
        || problem.sources.iter().any(|s| s.len() != nx)
    {
        return Err(HilbexError::Precondition(
            "layer problem does not match the layer grid".into(),
        ));
    }
    for (n, w) in problem.wall.iter().enumerate() {
        if !(w.rho > 0.0 && w.t > 0.0) {
            return Err(HilbexError::Numerical(format!(
                "nonpositive wall state at level {n}"
            )));
        }
        if !(w.mu > 0.0 && w.kappa > 0.0) {
            return Err(HilbexError::Numerical(format!(
                "degenerate transport coefficients at level {n}"
            )));
        }
    }
    let d0 = problem.neumann[0].as_array();
    for c in 0..3 {
        let f: Vec<f64> = problem.init.iter().take(3).map(|w| w[c]).collect();
        let gap = (grid.wall_derivative(&f) - d0[c]).abs();
        if gap > COMPAT_TOL * (1.0 + d0[c].abs()) {
            return Err(HilbexError::Precondition(format!(
                "initial layer profile of component {c} is incompatible with the Neumann datum (gap {gap:e})"
            )));
        }
        if problem.init[nx - 1][c] != 0.0 {
            return Err(HilbexError::Precondition(
                "initial layer profile must vanish at Y_max".into(),
            ));
        }
    }
    let mut levels = Vec::with_capacity(nl);
    levels.push(problem.init.clone());
    let mut cur: [Vec<f64>; 3] =
        std::array::from_fn(|c| problem.init.iter().map(|w| w[c]).collect());
    let order = [2usize, 0, 1];
    let mut rows_n: [Vec<[f64; 3]>; 3] =
        std::array::from_fn(|c| operator_rows(grid, &problem.wall[0], c));
    for n in 0..grid.n_steps {
        let (wn, wp) = (&problem.wall[n], &problem.wall[n + 1]);
        let rows_np: [Vec<[f64; 3]>; 3] = std::array::from_fn(|c| operator_rows(grid, wp, c));
        let mut next: [Vec<f64>; 3] = Default::default();
        for &c in &order {
            let forcing: Vec<f64> = (0..nx)
                .map(|j| {
                    let mut s = 0.5
                        * (problem.sources[n][j][c] / wn.rho
                            + problem.sources[n + 1][j][c] / wp.rho);
                    if c < 2 {
                        s += 0.5
                            * (wn.coupling[c] * cur[2][j] / wn.rho
                                + wp.coupling[c] * next[2][j] / wp.rho);
                    }
                    s
                })
                .collect();
            next[c] = cn_step(
                grid,
                &rows_n[c],
                &rows_np[c],
                &cur[c],
                &forcing,
                problem.neumann[n + 1].as_array()[c],
            );
        }
        if next.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(HilbexError::Numerical(format!(
                "layer solution not finite at level {}",
                n + 1
            )));
        }
        levels.push(
            (0..nx)
                .map(|j| [next[0][j], next[1][j], next[2][j]])
                .collect(),
        );
        cur = next;
        rows_n = rows_np;
    }
    let norm_of = |lvl: &[[f64; 3]]| -> f64 {
        (0..3)
            .map(|c| {
                grid.weighted_norm(&lvl.iter().map(|w| w[c]).collect::<Vec<_>>())
                    .powi(2)
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut budget = norm_of(&problem.init);
    let mut worst: f64 = 0.0;
    let mut stability: f64 = 0.0;
    for n in 0..nl {
        if n > 0 {
            let s: Vec<[f64; 3]> = problem.sources[n]
                .iter()
                .map(|w| std::array::from_fn(|c| w[c] / problem.wall[n].rho))
                .collect();
            budget += grid.dt * (norm_of(&s) + problem.neumann[n].max_abs());
        }
        let nrm = norm_of(&levels[n]);
        worst = worst.max(nrm);
        if budget > 0.0 {
            stability = stability.max(nrm / budget);
        }
    }
    let mid = grid.mid_index();
    let contamination = levels
        .iter()
        .flat_map(|l| l[mid].iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let mut warnings = Vec::new();
    if stability > STABILITY_WARN {
        warnings.push(format!(
            "layer order {}: weighted-norm stability constant {stability:.3e}",
            problem.k
        ));
    }
    if worst > 0.0 && contamination > 1e-3 * worst {
        warnings.push(format!(
            "layer order {}: solution at Y_max/2 is {contamination:.3e}; Y_max may be too small",
            problem.k
        ));
    }
    Ok(LayerField {
        k: problem.k,
        grid: grid.clone(),
        levels,
        neumann: problem.neumann.clone(),
        contamination,
        stability,
        warnings,
    })
}

/// Wall fluxes `(T⟨A₃₁,g⟩, T⟨A₃₂,g⟩, T⟨A₃₃,g⟩, 2T^{3/2}⟨B₃,g⟩)` at `state`.
pub fn wall_moments(state: &FluidPoint, g: &[f64], grid: &VelocityGrid) -> [f64; 4] {
    let m = source_moments(state, g, grid);
    let u = state.u;
    [
        m[0],
        m[1],
        m[2],
        m[3] - 2.0 * (u[0] * m[0] + u[1] * m[1] + u[2] * m[2]),
    ]
}

/// The bracketed wall expressions of the order-`k` matching conditions.
#[derive(Debug, Clone, Copy)]
pub struct MatchingInputs<'a> {
    pub state: FluidPoint,
    pub transport: TransportCoeffs,
    /// `u⁰_{1,∥} + ū_{1,∥}` at the wall.
    pub u1_total: [f64; 2],
    /// `θ⁰₁ + θ̄₁` at the wall.
    pub theta1_total: f64,
    /// `ū_{k-1,3}` at the wall.
    pub ubar3: f64,
    /// `J̄_{k-2}` at the wall; `None` when it vanishes.
    pub jbar: Option<&'a [f64]>,
    /// `(I-P) f_k` at the wall.
    pub micro_f: &'a [f64],
    pub b_hat: [f64; 2],
    pub c_hat: f64,
}

/// Neumann data of layer order `k-1` from the wall matching conditions.
pub fn neumann_from_matching(inp: &MatchingInputs, grid: &VelocityGrid) -> Result<NeumannData> {
    let TransportCoeffs { mu, kappa } = inp.transport;
    if !(mu > 0.0 && kappa > 0.0) {
        return Err(HilbexError::Numerical(format!(
            "degenerate transport coefficients mu={mu} kappa={kappa}"
        )));
    }
    let s = &inp.state;
    let (rho, t) = (s.rho, s.t);
    let mf = wall_moments(s, inp.micro_f, grid);
    let mj = inp
        .jbar
        .map(|j| wall_moments(s, j, grid))
        .unwrap_or([0.0; 4]);
    let b: [f64; 2] = std::array::from_fn(|i| {
        (rho * inp.u1_total[i] * inp.ubar3 + mj[i] + mf[i] + rho * t * t * inp.b_hat[i]) / mu
    });
    let a = (5.0 / 3.0 * rho * inp.theta1_total * inp.ubar3
        + mj[3]
        + mf[3]
        + 10.0 * rho * t * t * t * inp.c_hat)
        / kappa;
    Ok(NeumannData { b, a })
}

/// A field obtained by integrating `∂_y X = rhs` inward from `X(Y_max) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Integrated {
    pub values: Vec<f64>,
    /// Estimate of `∫_{Y_max}^∞ rhs` from an algebraic tail fitted on the last nodes.
    pub tail: f64,
}

/// `X(y) = -∫_y^{Y_max} rhs` by the end-corrected trapezoid rule, with a
/// fitted algebraic tail estimate.
pub fn integrate_from_far(grid: &LayerGrid, rhs: &[f64]) -> Integrated {
    let n = grid.len();
    let d = grid.derivative(rhs);
    let mut values = vec![0.0; n];
    for i in (0..n - 1).rev() {
        let h = grid.y[i + 1] - grid.y[i];
        values[i] =
            values[i + 1] - 0.5 * h * (rhs[i] + rhs[i + 1]) + h * h / 12.0 * (d[i + 1] - d[i]);
    }
    let last = rhs[n - 1].abs();
    let tail = if last == 0.0 {
        0.0
    } else {
        let k = n.saturating_sub(10);
        let (y0, y1) = (grid.y[k], grid.y[n - 1]);
        let (f0, f1) = (rhs[k].abs(), last);
        let p = if f0 > 0.0 {
            -(f1 / f0).ln() / (y1 / y0).ln()
        } else {
            0.0
        };
        if p > 1.0 {
            last * y1 / (p - 1.0)
        } else {
            f64::INFINITY
        }
    };
    Integrated { values, tail }
}

/// `ū_{k+1,3}` from `∂_y ū_{k+1,3} = -(1/ρ⁰) ∂_t ρ̄_k` (slab geometry).
pub fn derive_normal_velocity(grid: &LayerGrid, rho0: f64, dt_rho_bar: &[f64]) -> Integrated {
    let rhs: Vec<f64> = dt_rho_bar.iter().map(|d| -d / rho0).collect();
    integrate_from_far(grid, &rhs)
}

/// Right-hand side of the pressure relation for `∂_y p̄_{k+1}` in slab
/// geometry, given `ū_{k,3}`, its time derivative and `T⁰⟨J̄_{k-1}, A₃₃⟩`.
pub fn pressure_rhs(
    grid: &LayerGrid,
    wall: &LayerWall,
    u3: &[f64],
    dt_u3: &[f64],
    jbar_a33: Option<&[f64]>,
) -> Vec<f64> {
    let rho = wall.rho;
    let a = wall.drift_slope;
    let flux: Vec<f64> = grid
        .y
        .iter()
        .zip(u3)
        .map(|(y, u)| (a * y + wall.drift_offset) * u)
        .collect();
    let dflux = grid.derivative(&flux);
    let d2u = grid.derivative(&grid.derivative(u3));
    let dj = jbar_a33.map(|j| grid.derivative(j));
    (0..grid.len())
        .map(|j| {
            let mut r = -rho * dt_u3[j] + rho * a * u3[j] - 4.0 / 3.0 * rho * dflux[j]
                + 4.0 / 3.0 * wall.mu * d2u[j];
            if let Some(dj) = &dj {
                r -= dj[j];
            }
            r
        })
        .collect()
}

/// `p̄_{k+1}` integrated from `p̄ = 0` at `Y_max`.
pub fn derive_pressure(grid: &LayerGrid, rhs: &[f64]) -> Integrated {
    integrate_from_far(grid, rhs)
}

/// Value, first and second derivative of a function of `x₃`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct T2 {
    v: f64,
    d: f64,
    dd: f64,
}

impl T2 {
    fn new(v: f64, d: f64, dd: f64) -> Self {
        T2 { v, d, dd }
    }

    fn cst(v: f64) -> Self {
        T2::new(v, 0.0, 0.0)
    }

    fn add(self, o: T2) -> T2 {
        T2::new(self.v + o.v, self.d + o.d, self.dd + o.dd)
    }

    fn sub(self, o: T2) -> T2 {
        T2::new(self.v - o.v, self.d - o.d, self.dd - o.dd)
    }

    fn scale(self, a: f64) -> T2 {
        T2::new(a * self.v, a * self.d, a * self.dd)
    }

    fn mul(self, o: T2) -> T2 {
        T2::new(
            self.v * o.v,
            self.d * o.v + self.v * o.d,
            self.dd * o.v + 2.0 * self.d * o.d + self.v * o.dd,
        )
    }

    fn powf(self, a: f64) -> T2 {
        let p1 = self.v.powf(a - 1.0);
        let p2 = self.v.powf(a - 2.0);
        T2::new(
            self.v * p1,
            a * p1 * self.d,
            a * p1 * self.dd + a * (a - 1.0) * p2 * self.d * self.d,
        )
    }

    fn exp(self) -> T2 {
        let e = self.v.exp();
        T2::new(e, e * self.d, e * (self.dd + self.d * self.d))
    }
}

/// Wall Taylor data of one time level: the background and its first two
/// normal derivatives, order-1 coefficients with their first derivative,
/// and order-2 coefficients at the wall.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WallTaylor {
    /// `(ρ, u₁, u₂, u₃, T)` as `[value, ∂₃, ∂₃²]`.
    pub background: [[f64; 3]; 5],
    /// `(ρ₁, u₁, θ₁)` as `[value, ∂₃]`.
    pub order1: [[f64; 2]; 5],
    pub order2: [f64; 5],
}

impl WallTaylor {
    pub fn state(&self) -> Result<FluidPoint> {
        let b = &self.background;
        FluidPoint::new(b[0][0], [b[1][0], b[2][0], b[3][0]], b[4][0])
    }

    pub fn order1_coeffs(&self) -> MacroCoeffs {
        let o = &self.order1;
        MacroCoeffs {
            rho: o[0][0],
            u: [o[1][0], o[2][0], o[3][0]],
            theta: o[4][0],
        }
    }

    pub fn order2_coeffs(&self) -> MacroCoeffs {
        let o = &self.order2;
        MacroCoeffs {
            rho: o[0],
            u: [o[1], o[2], o[3]],
            theta: o[4],
        }
    }
}

/// Velocity slices at the wall used by the layer kinetic terms.
#[derive(Debug, Clone)]
pub struct WallKinetics {
    pub state: FluidPoint,
    pub sm: Vec<f64>,
    pub basis: MacroBasis,
    pub m: Vec<f64>,
    pub d_mu: Vec<f64>,
    pub d2_mu: Vec<f64>,
    /// `F₁⁰` and `∂₃F₁⁰`.
    pub f1: Vec<f64>,
    pub d_f1: Vec<f64>,
    /// `F₂⁰`, macroscopic plus microscopic part.
    pub f2: Vec<f64>,
}

impl WallKinetics {
    /// `micro_f2` is `(I-P) f₂` at the wall; `None` when it vanishes.
    pub fn new(tay: &WallTaylor, micro_f2: Option<&[f64]>, grid: &VelocityGrid) -> Result<Self> {
        let state = tay.state()?;
        let b = &tay.background;
        let rho = T2::new(b[0][0], b[0][1], b[0][2]);
        let u: [T2; 3] = std::array::from_fn(|i| T2::new(b[1 + i][0], b[1 + i][1], b[1 + i][2]));
        let t = T2::new(b[4][0], b[4][1], b[4][2]);
        let o = &tay.order1;
        let r1 = T2::new(o[0][0], o[0][1], 0.0);
        let u1: [T2; 3] = std::array::from_fn(|i| T2::new(o[1 + i][0], o[1 + i][1], 0.0));
        let th1 = T2::new(o[4][0], o[4][1], 0.0);
        let norm = rho.mul(t.scale(2.0 * std::f64::consts::PI).powf(-1.5));
        let inv_t = t.powf(-1.0);
        let inv_rho = rho.powf(-1.0);
        let n = grid.len();
        let (mut m, mut d_mu, mut d2_mu, mut f1, mut d_f1) = (
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
        );
        for (i, v) in grid.nodes().iter().enumerate() {
            let c: [T2; 3] = std::array::from_fn(|a| T2::cst(v[a]).sub(u[a]));
            let q = c[0].mul(c[0]).add(c[1].mul(c[1])).add(c[2].mul(c[2]));
            let mu = norm.mul(q.mul(inv_t).scale(-0.5).exp());
            let cu = c[0].mul(u1[0]).add(c[1].mul(u1[1])).add(c[2].mul(u1[2]));
            let a = r1.mul(inv_rho).add(cu.mul(inv_t)).add(
                th1.mul(inv_t)
                    .scale(1.0 / 6.0)
                    .mul(q.mul(inv_t).sub(T2::cst(3.0))),
            );
            let big = a.mul(mu);
            m[i] = mu.v;
            d_mu[i] = mu.d;
            d2_mu[i] = mu.dd;
            f1[i] = big.v;
            d_f1[i] = big.d;
        }
        let sm = sqrt_maxwellian(&state, grid).values;
        let basis = MacroBasis::new(&state, grid);
        let mut f2 =
            macro_slice(&state, &tay.order2_coeffs(), &grid.slice(sm.clone()), grid).values;
        if let Some(mf) = micro_f2 {
            for (x, a) in f2.iter_mut().zip(mf) {
                *x += a;
            }
        }
        for (x, s) in f2.iter_mut().zip(&sm) {
            *x *= s;
        }
        Ok(WallKinetics {
            state,
            sm,
            basis,
            m,
            d_mu,
            d2_mu,
            f1,
            d_f1,
            f2,
        })
    }

    /// `√μ₀ · (macroscopic slice with coefficients c)`, i.e. `F̄` for layer coefficients `c`.
    pub fn big_macro(&self, c: &MacroCoeffs, grid: &VelocityGrid) -> Vec<f64> {
        let sm = grid.slice(self.sm.clone());
        macro_slice(&self.state, c, &sm, grid)
            .values
            .iter()
            .zip(&self.sm)
            .map(|(a, s)| a * s)
            .collect()
    }

    /// Normalized macroscopic slice `P₀ f` for coefficients `c`.
    pub fn small_macro(&self, c: &MacroCoeffs, grid: &VelocityGrid) -> Vec<f64> {
        macro_slice(&self.state, c, &grid.slice(self.sm.clone()), grid).values
    }
}

/// Layer coefficients at one node: `P₀ f̄₁` coefficients and their `y`-derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerPoint {
    pub y: f64,
    pub c: MacroCoeffs,
    pub dc: MacroCoeffs,
}

/// Velocity grid and collision backend used by the layer kinetic terms.
#[derive(Debug, Clone, Copy)]
pub struct LayerContext<'a> {
    pub grid: &'a VelocityGrid,
    pub backend: &'a CollisionBackend,
}

const NEGLIGIBLE: f64 = 1e-15;

/// `(I-P₀) f̄₂` at one point of the order-1 layer.
///
/// The quadratic self-interaction of `F̄₁` enters once, as in the `ε⁰`
/// balance of the layer hierarchy.
pub fn micro_part(wk: &WallKinetics, p: &LayerPoint, ctx: &LayerContext) -> Result<Vec<f64>> {
    let grid = ctx.grid;
    let n = grid.len();
    if p.c.max_abs().max(p.dc.max_abs()) < NEGLIGIBLE {
        return Ok(vec![0.0; n]);
    }
    let dy = wk.small_macro(&p.dc, grid);
    let fb1 = wk.big_macro(&p.c, grid);
    let g: Vec<f64> = (0..n)
        .map(|i| p.y * wk.d_mu[i] + wk.f1[i] + 0.5 * fb1[i])
        .collect();
    let q = ctx.backend.q_sym(&g, &fb1, &wk.state, grid)?;
    let bracket: Vec<f64> = grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, v)| -v[2] * dy[i] + q[i] / wk.sm[i])
        .collect();
    let b = wk.basis.micro(&bracket, grid);
    ctx.backend.invert_l_raw(&b, &wk.state, grid, &wk.basis)
}

/// Inputs of `J̄₁` at one node: three time levels for `∂_t F̄₁` and the
/// neighbouring `(I-P₀) f̄₂` slices for `∂_y`.
#[derive(Debug, Clone, Copy)]
pub struct JbarNode<'a> {
    /// Wall data and layer point at the three levels used for `∂_t`.
    pub walls: [&'a WallKinetics; 3],
    pub points: [LayerPoint; 3],
    pub time_weights: [f64; 3],
    /// Index of the current level within the three.
    pub current: usize,
    /// `(I-P₀) f̄₂` on the `y`-stencil and the derivative weights.
    pub micro_stencil: [&'a [f64]; 3],
    pub y_weights: [f64; 3],
    /// `(I-P₀) f̄₂` at the node itself.
    pub micro: &'a [f64],
    pub taylor_order: usize,
}

/// `J̄₁` at one node of the layer.
pub fn jbar1(node: &JbarNode, ctx: &LayerContext) -> Result<Vec<f64>> {
    let grid = ctx.grid;
    let n = grid.len();
    let wk = node.walls[node.current];
    let p = node.points[node.current];
    let active = node.points.iter().any(|q| q.c.max_abs() >= NEGLIGIBLE)
        || node
            .micro_stencil
            .iter()
            .any(|m| m.iter().any(|x| x.abs() >= NEGLIGIBLE));
    if !active {
        return Ok(vec![0.0; n]);
    }
    let mut dtf = vec![0.0; n];
    for s in 0..3 {
        if node.time_weights[s] == 0.0 {
            continue;
        }
        let f = node.walls[s].big_macro(&node.points[s].c, grid);
        for (x, v) in dtf.iter_mut().zip(&f) {
            *x += node.time_weights[s] * v;
        }
    }
    let fb1 = wk.big_macro(&p.c, grid);
    let fb2: Vec<f64> = node.micro.iter().zip(&wk.sm).map(|(a, s)| a * s).collect();
    let y = p.y;
    let l2 = if node.taylor_order >= 2 {
        0.5 * y * y
    } else {
        0.0
    };
    let g1: Vec<f64> = (0..n)
        .map(|i| l2 * wk.d2_mu[i] + wk.f2[i] + y * wk.d_f1[i])
        .collect();
    let g2: Vec<f64> = (0..n).map(|i| y * wk.d_mu[i] + wk.f1[i] + fb1[i]).collect();
    let q1 = ctx.backend.q_sym(&g1, &fb1, &wk.state, grid)?;
    let q2 = ctx.backend.q_sym(&g2, &fb2, &wk.state, grid)?;
    let bracket: Vec<f64> = grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let dy: f64 = (0..3)
                .map(|s| node.y_weights[s] * node.micro_stencil[s][i])
                .sum();
            (-dtf[i] + q1[i] + q2[i]) / wk.sm[i] - v[2] * dy
        })
        .collect();
    let b = wk.basis.micro(&bracket, grid);
    ctx.backend.invert_l_raw(&b, &wk.state, grid, &wk.basis)
}
