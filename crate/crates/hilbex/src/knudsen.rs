//! Steady half-space Knudsen layer: `v3 ∂η f + L0 f = S` with perturbed
//! specular data at `η = 0`, the macroscopic correction that moves a
//! macroscopic source into the solvable class, and the wall mismatch datum.
//!
//! Transport along `η` is integrated exactly against a piecewise degree-7
//! interpolant of the right-hand side. The collision gain is lagged; for the
//! constant-frequency BGK model the lagged problem closes on the five
//! moments per node and is solved directly, otherwise restarted GMRES is
//! used on the full vector.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::collision::{BackendSpec, CollisionBackend, NuModel};
use crate::error::{HilbexError, Result};
use crate::quad::solve_dense;
use crate::velocity::{maxwellian, sqrt_maxwellian, FluidPoint, MacroBasis, VelocityGrid};

/// Interpolation stencil width along `η`.
const STENCIL: usize = 8;

/// Solutions whose weighted sup stays below this are reported as zero.
pub const ZERO_FLOOR: f64 = 1e-13;

/// Graded mesh on `[0, length]`, finest at the wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EtaGridSpec {
    pub length: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub ratio: f64,
}

impl Default for EtaGridSpec {
    fn default() -> Self {
        EtaGridSpec {
            length: 30.0,
            h_min: 0.01,
            h_max: 0.25,
            ratio: 1.05,
        }
    }
}

impl EtaGridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.length) {
            return Err(HilbexError::config(
                "knudsen.eta.length",
                "must be positive",
            ));
        }
        if !(ok(self.h_min) && self.h_min <= self.h_max) {
            return Err(HilbexError::config(
                "knudsen.eta.h_min",
                "must be positive and at most h_max",
            ));
        }
        if !(self.ratio.is_finite() && self.ratio >= 1.0) {
            return Err(HilbexError::config(
                "knudsen.eta.ratio",
                "must be at least 1",
            ));
        }
        if self.length < (STENCIL as f64 + 2.0) * self.h_min {
            return Err(HilbexError::config(
                "knudsen.eta.length",
                "too short for the interpolation stencil",
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let mut eta = vec![0.0];
        let mut h = self.h_min;
        while *eta.last().unwrap() + h < self.length {
            eta.push(eta.last().unwrap() + h);
            h = (h * self.ratio).min(self.h_max);
        }
        let last = *eta.last().unwrap();
        if self.length - last < 0.5 * h && eta.len() > 2 {
            eta.pop();
        }
        eta.push(self.length);
        if eta.len() < STENCIL + 2 {
            return Err(HilbexError::config("knudsen.eta", "fewer than ten nodes"));
        }
        Ok(eta)
    }
}

/// Solver settings for the half-space problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnudsenSettings {
    pub weight_kappa: f64,
    pub weight_a: f64,
    pub tol_solve: f64,
    pub tol_solvability: f64,
    pub max_iter: usize,
    pub restart: usize,
    /// Keep the collision gain `K = ν − L0`; off gives pure absorption.
    #[serde(default = "default_true")]
    pub gain: bool,
}

fn default_true() -> bool {
    true
}

impl Default for KnudsenSettings {
    fn default() -> Self {
        KnudsenSettings {
            weight_kappa: 3.0,
            weight_a: 0.3,
            tol_solve: 1e-8,
            tol_solvability: 1e-6,
            max_iter: 600,
            restart: 40,
            gain: true,
        }
    }
}

impl KnudsenSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_kappa >= 0.0 && (0.0..0.5).contains(&self.weight_a)) {
            return Err(HilbexError::config(
                "knudsen.weight",
                "need kappa >= 0 and 0 <= a < 1/2",
            ));
        }
        if !(self.tol_solve > 0.0 && self.tol_solvability > 0.0) {
            return Err(HilbexError::config(
                "knudsen.tol",
                "tolerances must be positive",
            ));
        }
        if self.restart == 0 || self.max_iter == 0 {
            return Err(HilbexError::config("knudsen.max_iter", "must be positive"));
        }
        Ok(())
    }
}

/// `v3 ∂η f + L0 f = S`, `f(0,v)|_{v3>0} = f(0,Rv) + f_b(Rv)`, `f → 0`.
#[derive(Debug, Clone)]
pub struct HalfSpaceProblem {
    pub wall_state: FluidPoint,
    pub eta: Vec<f64>,
    /// `source[i]` is the slice at `eta[i]`.
    pub source: Vec<Vec<f64>>,
    /// Supported on `v3 < 0`.
    pub f_b: Vec<f64>,
    pub zeta0: f64,
}

impl HalfSpaceProblem {
    pub fn zero(wall_state: FluidPoint, eta: Vec<f64>, grid: &VelocityGrid) -> Self {
        let n = eta.len();
        HalfSpaceProblem {
            wall_state,
            eta,
            source: vec![vec![0.0; grid.len()]; n],
            f_b: vec![0.0; grid.len()],
            zeta0: 1.0,
        }
    }

    pub fn validate(&self, grid: &VelocityGrid) -> Result<()> {
        if self.eta.len() < STENCIL + 2
            || self.eta.windows(2).any(|w| !(w[1] > w[0]))
            || self.eta[0] != 0.0
        {
            return Err(HilbexError::Precondition(
                "eta nodes must start at 0 and increase".into(),
            ));
        }
        if self.source.len() != self.eta.len() || self.source.iter().any(|s| s.len() != grid.len())
        {
            return Err(HilbexError::Precondition(
                "source shape does not match eta nodes x velocity grid".into(),
            ));
        }
        if self.f_b.len() != grid.len() {
            return Err(HilbexError::Precondition(
                "f_b length does not match the velocity grid".into(),
            ));
        }
        if self
            .source
            .iter()
            .flatten()
            .chain(&self.f_b)
            .any(|x| !x.is_finite())
        {
            return Err(HilbexError::Precondition(
                "non-finite source or boundary data".into(),
            ));
        }
        if let Some(i) = (0..grid.len()).find(|&i| grid.nodes()[i][2] > 0.0 && self.f_b[i] != 0.0) {
            return Err(HilbexError::Precondition(format!(
                "f_b is nonzero at v3 > 0 (node {i})"
            )));
        }
        if !(self.zeta0 > 0.0) {
            return Err(HilbexError::Precondition(
                "declared source decay rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Microscopy of the source and the four wall moments of `f_b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolvabilityReport {
    pub micro_defect: f64,
    pub four_moments: [f64; 4],
    pub tol: f64,
    pub pass: bool,
}

/// Mass-flux, two shear and heat-flux moments of `g` with weight `√μ0`.
pub fn wall_flux_moments(state: &FluidPoint, g: &[f64], grid: &VelocityGrid) -> [f64; 4] {
    let sm = sqrt_maxwellian(state, grid).values;
    let mut out = [0.0; 4];
    for (i, v) in grid.nodes().iter().enumerate() {
        let d = state.peculiar(v);
        let base = grid.weights()[i] * v[2] * g[i] * sm[i];
        out[0] += base;
        out[1] += d[0] * base;
        out[2] += d[1] * base;
        out[3] += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) * base;
    }
    out
}

pub fn check_solvability(
    problem: &HalfSpaceProblem,
    grid: &VelocityGrid,
    tol: f64,
) -> SolvabilityReport {
    let basis = MacroBasis::new(&problem.wall_state, grid);
    let micro_defect = problem
        .source
        .iter()
        .map(|s| basis.macro_norm(s, grid))
        .fold(0.0f64, f64::max);
    let four_moments = wall_flux_moments(&problem.wall_state, &problem.f_b, grid);
    let pass = micro_defect <= tol && four_moments.iter().all(|m| m.abs() <= tol);
    SolvabilityReport {
        micro_defect,
        four_moments,
        tol,
        pass,
    }
}

/// `∫₀¹ e^{−τx} x^p dx` for `p < STENCIL`.
fn exp_moments(tau: f64) -> [f64; STENCIL] {
    let mut e = [0.0; STENCIL];
    if tau < 2.0 {
        for (p, ep) in e.iter_mut().enumerate() {
            let mut term = 1.0;
            let mut sum = 0.0;
            for k in 0..60 {
                let t = term / (k + p + 1) as f64;
                sum += t;
                if t.abs() < 1e-18 * sum.abs() {
                    break;
                }
                term *= -tau / (k + 1) as f64;
            }
            *ep = sum;
        }
    } else {
        let d = (-tau).exp();
        e[0] = (1.0 - d) / tau;
        for p in 1..STENCIL {
            e[p] = (p as f64 * e[p - 1] - d) / tau;
        }
    }
    e
}

/// Monomial coefficients of the Lagrange basis through `xs`.
fn lagrange_monomials(xs: &[f64; STENCIL]) -> [[f64; STENCIL]; STENCIL] {
    let mut out = [[0.0; STENCIL]; STENCIL];
    for m in 0..STENCIL {
        let mut poly = vec![1.0];
        let mut denom = 1.0;
        for n in 0..STENCIL {
            if n == m {
                continue;
            }
            let mut next = vec![0.0; poly.len() + 1];
            for (p, c) in poly.iter().enumerate() {
                next[p + 1] += c;
                next[p] -= c * xs[n];
            }
            poly = next;
            denom *= xs[m] - xs[n];
        }
        for p in 0..STENCIL {
            out[m][p] = poly[p] / denom;
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Cell {
    h: f64,
    /// Basis coefficients in `x`, the distance from the downstream end over `h`.
    outward: [[f64; STENCIL]; STENCIL],
    inward: [[f64; STENCIL]; STENCIL],
}

#[derive(Debug, Clone)]
struct KeyWeights {
    decay: Vec<f64>,
    w_out: Vec<[f64; STENCIL]>,
    w_in: Vec<[f64; STENCIL]>,
}

/// Characteristic sweeps for a fixed `η` mesh, wall state and `ν(v)`.
#[derive(Debug, Clone)]
struct Transport {
    n: usize,
    keys: Vec<KeyWeights>,
    key_of: Vec<usize>,
    pos: Vec<usize>,
    neg: Vec<usize>,
    mirror: Vec<usize>,
}

impl Transport {
    fn new(eta: &[f64], nu: &[f64], grid: &VelocityGrid) -> Self {
        let n = eta.len();
        let cells: Vec<Cell> = (0..n - 1)
            .map(|c| {
                let h = eta[c + 1] - eta[c];
                let start = stencil_start(c, n);
                let mut xo = [0.0; STENCIL];
                let mut xi = [0.0; STENCIL];
                for m in 0..STENCIL {
                    xo[m] = (eta[c + 1] - eta[start + m]) / h;
                    xi[m] = (eta[start + m] - eta[c]) / h;
                }
                Cell {
                    h,
                    outward: lagrange_monomials(&xo),
                    inward: lagrange_monomials(&xi),
                }
            })
            .collect();
        let mut index: HashMap<(u64, u64), usize> = HashMap::new();
        let mut keys = Vec::new();
        let mut key_of = Vec::with_capacity(grid.len());
        for (i, v) in grid.nodes().iter().enumerate() {
            let a = v[2].abs();
            let k = *index
                .entry((nu[i].to_bits(), a.to_bits()))
                .or_insert_with(|| {
                    keys.push(key_weights(&cells, nu[i], a));
                    keys.len() - 1
                });
            key_of.push(k);
        }
        let pos = (0..grid.len())
            .filter(|&i| grid.nodes()[i][2] > 0.0)
            .collect();
        let neg = (0..grid.len())
            .filter(|&i| grid.nodes()[i][2] < 0.0)
            .collect();
        Transport {
            n,
            keys,
            key_of,
            pos,
            neg,
            mirror: (0..grid.len()).map(|i| grid.mirror(i)).collect(),
        }
    }

    /// Inward sweep of one line from zero data at the far end.
    fn line_in(kw: &KeyWeights, q: &[f64], starts: &[usize], f: &mut [f64]) {
        let n = f.len();
        f[n - 1] = 0.0;
        for c in (0..n - 1).rev() {
            let s = starts[c];
            let src: f64 = kw.w_in[c]
                .iter()
                .zip(&q[s..s + STENCIL])
                .map(|(w, x)| w * x)
                .sum();
            f[c] = kw.decay[c] * f[c + 1] + src;
        }
    }

    fn line_out(kw: &KeyWeights, q: &[f64], starts: &[usize], f0: f64, f: &mut [f64]) {
        f[0] = f0;
        for c in 0..f.len() - 1 {
            let s = starts[c];
            let src: f64 = kw.w_out[c]
                .iter()
                .zip(&q[s..s + STENCIL])
                .map(|(w, x)| w * x)
                .sum();
            f[c + 1] = kw.decay[c] * f[c] + src;
        }
    }

    /// Solves `v3 ∂η f + ν f = q` with the wall and far-field closures.
    /// Layout of `q` and the result is `[v * n + i]`.
    fn sweep(&self, q: &[f64], f_b: Option<&[f64]>, starts: &[usize]) -> Vec<f64> {
        let n = self.n;
        let mut f = vec![0.0; q.len()];
        for &v in &self.neg {
            let kw = &self.keys[self.key_of[v]];
            Self::line_in(
                kw,
                &q[v * n..(v + 1) * n],
                starts,
                &mut f[v * n..(v + 1) * n],
            );
        }
        for &v in &self.pos {
            let r = self.mirror[v];
            let f0 = f[r * n] + f_b.map_or(0.0, |b| b[r]);
            let kw = &self.keys[self.key_of[v]];
            let (lo, hi) = (v * n, (v + 1) * n);
            Self::line_out(kw, &q[lo..hi], starts, f0, &mut f[lo..hi]);
        }
        f
    }
}

fn key_weights(cells: &[Cell], nu: f64, a: f64) -> KeyWeights {
    let mut decay = Vec::with_capacity(cells.len());
    let mut w_out = Vec::with_capacity(cells.len());
    let mut w_in = Vec::with_capacity(cells.len());
    for c in cells {
        let tau = nu * c.h / a;
        let e = exp_moments(tau);
        decay.push((-tau).exp());
        let mut wo = [0.0; STENCIL];
        let mut wi = [0.0; STENCIL];
        for m in 0..STENCIL {
            for p in 0..STENCIL {
                wo[m] += c.outward[m][p] * e[p];
                wi[m] += c.inward[m][p] * e[p];
            }
            wo[m] *= c.h / a;
            wi[m] *= c.h / a;
        }
        w_out.push(wo);
        w_in.push(wi);
    }
    KeyWeights { decay, w_out, w_in }
}

/// First node of the centred stencil of cell `c`.
fn stencil_start(c: usize, n: usize) -> usize {
    c.saturating_sub(STENCIL / 2 - 1).min(n - STENCIL)
}

fn stencil_starts(n: usize) -> Vec<usize> {
    (0..n - 1).map(|c| stencil_start(c, n)).collect()
}

/// `(1 + |v|)^κ μ0^{−a}` at each node.
pub fn knudsen_weight(state: &FluidPoint, grid: &VelocityGrid, kappa: f64, a: f64) -> Vec<f64> {
    let m = maxwellian(state, grid).values;
    grid.nodes()
        .iter()
        .zip(&m)
        .map(|(v, m)| {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            (1.0 + r).powf(kappa) * m.max(1e-300).powf(-a)
        })
        .collect()
}

/// Per-node weighted sup over velocities of a flat `[v * n + i]` field.
fn weighted_profile(f: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0f64; n];
    for (v, wv) in w.iter().enumerate() {
        for i in 0..n {
            p[i] = p[i].max(wv * f[v * n + i].abs());
        }
    }
    p
}

/// Exponential rate fitted to the last two decades of `profile` on `η ≤ cut`.
pub fn fit_decay(eta: &[f64], profile: &[f64], cut: f64) -> Option<f64> {
    let pmax = profile.iter().cloned().fold(0.0f64, f64::max);
    if !(pmax > ZERO_FLOOR) {
        return None;
    }
    let idx: Vec<usize> = (0..eta.len()).filter(|&i| eta[i] <= cut).collect();
    let end = *idx.last()?;
    let floor = profile[end].max(1e-12 * pmax);
    let mut sel: Vec<usize> = idx
        .iter()
        .copied()
        .filter(|&i| profile[i] >= floor && profile[i] <= 100.0 * floor)
        .collect();
    if sel.len() < 3 {
        sel = idx
            .into_iter()
            .filter(|&i| profile[i] >= 1e-12 * pmax)
            .collect();
    }
    if sel.len() < 3 {
        return None;
    }
    let xs: Vec<f64> = sel.iter().map(|&i| eta[i]).collect();
    let ys: Vec<f64> = sel.iter().map(|&i| profile[i].ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    Some(-sxy / sxx)
}

/// Per-problem diagnostics, also emitted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnudsenReport {
    pub converged: bool,
    pub method: String,
    pub iterations: usize,
    pub residual: f64,
    pub zeta: Option<f64>,
    pub zeta0: f64,
    pub micro_defect: f64,
    pub moment_defects: [f64; 4],
    pub wall_relation: f64,
    /// Weighted sup at `η = H/2` over the global weighted sup.
    pub far_field: f64,
}

#[derive(Debug, Clone)]
pub struct KnudsenSolution {
    pub eta: Vec<f64>,
    /// `values[i]` is the slice at `eta[i]`.
    pub values: Vec<Vec<f64>>,
    pub profile: Vec<f64>,
    pub report: KnudsenReport,
}

impl KnudsenSolution {
    pub fn zeta(&self) -> Option<f64> {
        self.report.zeta
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn wall(&self) -> &[f64] {
        &self.values[0]
    }

    /// `η, weighted sup` rows.
    pub fn profile_csv(&self) -> String {
        let mut s = String::from("eta,weighted_sup\n");
        for (e, p) in self.eta.iter().zip(&self.profile) {
            s.push_str(&format!("{e:.17e},{p:.17e}\n"));
        }
        s
    }
}

fn to_flat(rows: &[Vec<f64>], nv: usize) -> Vec<f64> {
    let n = rows.len();
    let mut out = vec![0.0; n * nv];
    for (i, r) in rows.iter().enumerate() {
        for v in 0..nv {
            out[v * n + i] = r[v];
        }
    }
    out
}

fn from_flat(f: &[f64], n: usize, nv: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..nv).map(|v| f[v * n + i]).collect())
        .collect()
}

/// Collision-gain evaluator `K = ν − L0`.
struct Gain<'a> {
    backend: &'a CollisionBackend,
    state: FluidPoint,
    basis: MacroBasis,
    nu: Vec<f64>,
    constant_nu: Option<f64>,
}

impl Gain<'_> {
    fn moments(&self, f: &[f64], n: usize, grid: &VelocityGrid) -> Vec<f64> {
        let mut m = vec![0.0; 5 * n];
        for (v, w) in grid.weights().iter().enumerate() {
            let row = &f[v * n..(v + 1) * n];
            for a in 0..5 {
                let c = w * self.basis.chi[a][v];
                for i in 0..n {
                    m[i * 5 + a] += c * row[i];
                }
            }
        }
        m
    }

    fn expand_moments(&self, m: &[f64], n: usize, nv: usize, scale: f64) -> Vec<f64> {
        let mut out = vec![0.0; n * nv];
        for v in 0..nv {
            for i in 0..n {
                out[v * n + i] = scale
                    * (0..5)
                        .map(|a| m[i * 5 + a] * self.basis.chi[a][v])
                        .sum::<f64>();
            }
        }
        out
    }

    fn apply(&self, f: &[f64], n: usize, grid: &VelocityGrid) -> Result<Vec<f64>> {
        let nv = grid.len();
        if let Some(nu) = self.constant_nu {
            return Ok(self.expand_moments(&self.moments(f, n, grid), n, nv, nu));
        }
        let mut out = vec![0.0; n * nv];
        let mut slice = vec![0.0; nv];
        for i in 0..n {
            for v in 0..nv {
                slice[v] = f[v * n + i];
            }
            let l = self
                .backend
                .apply_l_raw(&slice, &self.state, grid, &self.basis)?;
            for v in 0..nv {
                out[v * n + i] = self.nu[v] * slice[v] - l[v];
            }
        }
        Ok(out)
    }
}

/// Dense moment system `(I − A) m = b` of the lagged constant-`ν` problem.
fn moment_matrix(
    tr: &Transport,
    basis: &MacroBasis,
    nu: f64,
    starts: &[usize],
    grid: &VelocityGrid,
) -> Vec<f64> {
    let n = tr.n;
    let dim = 5 * n;
    let mut a_mat = vec![0.0; dim * dim];
    let mut by_key: HashMap<usize, Vec<usize>> = HashMap::new();
    for &v in &tr.pos {
        by_key.entry(tr.key_of[v]).or_default().push(v);
    }
    let mut key_list: Vec<_> = by_key.into_iter().collect();
    key_list.sort_by_key(|(k, _)| *k);
    let mut unit = vec![0.0; n];
    let mut col = vec![0.0; n];
    for (k, nodes) in key_list {
        let kw = &tr.keys[k];
        let mut g_in = vec![0.0; n * n];
        let mut g_out = vec![0.0; n * n];
        for j in 0..n {
            unit[j] = 1.0;
            Transport::line_in(kw, &unit, starts, &mut col);
            for i in 0..n {
                g_in[i * n + j] = col[i];
            }
            Transport::line_out(kw, &unit, starts, 0.0, &mut col);
            for i in 0..n {
                g_out[i * n + j] = col[i];
            }
            unit[j] = 0.0;
        }
        Transport::line_out(kw, &unit, starts, 1.0, &mut col);
        let atten = col.clone();
        let mut cpp = [[0.0; 5]; 5];
        let mut cpm = [[0.0; 5]; 5];
        let mut cmm = [[0.0; 5]; 5];
        for &v in &nodes {
            let r = tr.mirror[v];
            let w = grid.weights()[v];
            for a in 0..5 {
                for b in 0..5 {
                    cpp[a][b] += w * basis.chi[a][v] * basis.chi[b][v];
                    cpm[a][b] += w * basis.chi[b][v] * basis.chi[a][r];
                    cmm[a][b] += w * basis.chi[a][r] * basis.chi[b][r];
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                let go = nu * g_out[i * n + j];
                let gi = nu * g_in[i * n + j];
                let rm = nu * atten[i] * g_in[j];
                if go == 0.0 && gi == 0.0 && rm == 0.0 {
                    continue;
                }
                for b in 0..5 {
                    let row = (i * 5 + b) * dim;
                    for a in 0..5 {
                        a_mat[row + j * 5 + a] += go * cpp[a][b] + rm * cpm[a][b] + gi * cmm[a][b];
                    }
                }
            }
        }
    }
    for (d, x) in a_mat.iter_mut().enumerate() {
        *x = if d / dim == d % dim { 1.0 - *x } else { -*x };
    }
    a_mat
}

/// Restarted GMRES for `A x = b`.
fn gmres(
    apply: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    mut x: Vec<f64>,
    restart: usize,
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<f64>, usize, f64)> {
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let mut iters = 0;
    let mut res;
    loop {
        let ax = apply(&x)?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = dot(&r, &r).sqrt();
        res = beta;
        if beta <= tol || iters >= max_iter {
            return Ok((x, iters, res));
        }
        let mut basis = vec![r.iter().map(|v| v / beta).collect::<Vec<f64>>()];
        let mut hess: Vec<Vec<f64>> = Vec::new();
        let mut cs: Vec<(f64, f64)> = Vec::new();
        let mut g = vec![beta];
        for j in 0..restart {
            iters += 1;
            let mut w = apply(&basis[j])?;
            let mut h = vec![0.0; j + 2];
            for (k, q) in basis.iter().enumerate() {
                h[k] = dot(&w, q);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= h[k] * qi;
                }
            }
            h[j + 1] = dot(&w, &w).sqrt();
            for (k, &(c, s)) in cs.iter().enumerate() {
                let t = c * h[k] + s * h[k + 1];
                h[k + 1] = -s * h[k] + c * h[k + 1];
                h[k] = t;
            }
            let den = h[j].hypot(h[j + 1]);
            let (c, s) = if den == 0.0 {
                (1.0, 0.0)
            } else {
                (h[j] / den, h[j + 1] / den)
            };
            let hn = h[j + 1];
            h[j] = den;
            h[j + 1] = 0.0;
            cs.push((c, s));
            g.push(-s * g[j]);
            g[j] *= c;
            hess.push(h);
            res = g[j + 1].abs();
            if hn > 0.0 {
                basis.push(w.iter().map(|v| v / hn).collect());
            }
            if res <= tol || hn == 0.0 || iters >= max_iter {
                break;
            }
        }
        let m = hess.len();
        let mut y = vec![0.0; m];
        for i in (0..m).rev() {
            let mut s = g[i];
            for k in i + 1..m {
                s -= hess[k][i] * y[k];
            }
            y[i] = s / hess[i][i];
        }
        for (k, yk) in y.iter().enumerate() {
            for (xi, qi) in x.iter_mut().zip(&basis[k]) {
                *xi += yk * qi;
            }
        }
    }
}

/// Solves the half-space problem; fails on violated solvability, on
/// non-convergence and on a non-positive fitted decay rate.
pub fn solve_halfspace(
    problem: &HalfSpaceProblem,
    backend: &CollisionBackend,
    grid: &VelocityGrid,
    settings: &KnudsenSettings,
) -> Result<KnudsenSolution> {
    settings.validate()?;
    problem.validate(grid)?;
    let solv = check_solvability(problem, grid, settings.tol_solvability);
    if settings.gain && !solv.pass {
        return Err(HilbexError::Solvability {
            micro_defect: solv.micro_defect,
            moments: solv.four_moments,
        });
    }
    let n = problem.eta.len();
    let nv = grid.len();
    let state = problem.wall_state;
    let nu = backend.nu_slice(&state, grid);
    let tr = Transport::new(&problem.eta, &nu, grid);
    let starts = stencil_starts(n);
    let constant_nu = match backend.spec() {
        BackendSpec::BgkModel {
            nu_params: NuModel::Constant { nu },
        } => Some(nu),
        _ => None,
    };
    let gain = Gain {
        backend,
        state,
        basis: MacroBasis::new(&state, grid),
        nu,
        constant_nu,
    };
    let s = to_flat(&problem.source, nv);
    let fb = Some(problem.f_b.as_slice());
    let weight = knudsen_weight(&state, grid, settings.weight_kappa, settings.weight_a);

    let (f, method, iterations) = if !settings.gain {
        (tr.sweep(&s, fb, &starts), "absorption".to_string(), 0)
    } else if let Some(nu0) = constant_nu {
        let f0 = tr.sweep(&s, fb, &starts);
        let rhs = gain.moments(&f0, n, grid);
        let mat = moment_matrix(&tr, &gain.basis, nu0, &starts, grid);
        let m = solve_dense(&mat, &rhs, 5 * n)
            .ok_or_else(|| HilbexError::Numerical("singular Knudsen moment system".into()))?;
        let mut q = gain.expand_moments(&m, n, nv, nu0);
        for (a, b) in q.iter_mut().zip(&s) {
            *a += b;
        }
        (tr.sweep(&q, fb, &starts), "moment-direct".to_string(), 1)
    } else {
        let rhs = tr.sweep(&s, fb, &starts);
        let bnorm = rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut op = |x: &[f64]| -> Result<Vec<f64>> {
            let k = gain.apply(x, n, grid)?;
            let t = tr.sweep(&k, None, &starts);
            Ok(x.iter().zip(&t).map(|(a, b)| a - b).collect())
        };
        let tol = 1e-4 * settings.tol_solve * bnorm.max(1e-300);
        let (x, it, _) = gmres(
            &mut op,
            &rhs,
            rhs.clone(),
            settings.restart,
            settings.max_iter,
            tol,
        )?;
        (x, "gmres".to_string(), it)
    };

    // Honest fixed-point residual of the discrete scheme.
    let mut q = if settings.gain {
        gain.apply(&f, n, grid)?
    } else {
        vec![0.0; f.len()]
    };
    for (a, b) in q.iter_mut().zip(&s) {
        *a += b;
    }
    let g = tr.sweep(&q, fb, &starts);
    let diff: Vec<f64> = f.iter().zip(&g).map(|(a, b)| a - b).collect();
    let profile = weighted_profile(&f, &weight, n);
    let fnorm = profile.iter().cloned().fold(0.0f64, f64::max);
    let residual = weighted_profile(&diff, &weight, n)
        .into_iter()
        .fold(0.0f64, f64::max)
        / fnorm.max(1.0);
    if !(residual <= settings.tol_solve) {
        return Err(HilbexError::NoConvergence {
            solver: "knudsen half-space",
            iterations,
            residual,
        });
    }
    let length = *problem.eta.last().unwrap();
    let zeta = fit_decay(&problem.eta, &profile, 0.5 * length);
    if let Some(z) = zeta {
        if !(z > 0.0) {
            return Err(HilbexError::Numerical(format!(
                "fitted Knudsen decay rate {z:e} is not positive; the domain may be too short"
            )));
        }
    }
    let mid = problem
        .eta
        .iter()
        .position(|&e| e >= 0.5 * length)
        .unwrap_or(n - 1);
    let values = from_flat(&f, n, nv);
    let wall_relation = (0..nv)
        .filter(|&v| grid.nodes()[v][2] > 0.0)
        .map(|v| {
            let r = grid.mirror(v);
            (values[0][v] - values[0][r] - problem.f_b[r]).abs()
        })
        .fold(0.0f64, f64::max);
    Ok(KnudsenSolution {
        eta: problem.eta.clone(),
        values,
        report: KnudsenReport {
            converged: true,
            method,
            iterations,
            residual,
            zeta,
            zeta0: problem.zeta0,
            micro_defect: solv.micro_defect,
            moment_defects: solv.four_moments,
            wall_relation,
            far_field: if fnorm > 0.0 {
                profile[mid] / fnorm
            } else {
                0.0
            },
        },
        profile,
    })
}

/// Coefficients `(â, b̂, ĉ)` of a macroscopic source
/// `{â + b̂·(v−u) + ĉ|v−u|²}√μ0` on the `η` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroSource {
    pub a: Vec<f64>,
    pub b: Vec<[f64; 3]>,
    pub c: Vec<f64>,
}

impl MacroSource {
    pub fn zero(n: usize) -> Self {
        MacroSource {
            a: vec![0.0; n],
            b: vec![[0.0; 3]; n],
            c: vec![0.0; n],
        }
    }

    fn magnitude(&self, i: usize) -> f64 {
        self.b[i]
            .iter()
            .fold(self.a[i].abs().max(self.c[i].abs()), |m, x| m.max(x.abs()))
    }

    /// The slice at node `i`.
    pub fn slice(&self, i: usize, state: &FluidPoint, grid: &VelocityGrid) -> Vec<f64> {
        let sm = sqrt_maxwellian(state, grid).values;
        grid.nodes()
            .iter()
            .zip(&sm)
            .map(|(v, s)| {
                let d = state.peculiar(v);
                let q = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                (self.a[i]
                    + self.b[i][0] * d[0]
                    + self.b[i][1] * d[1]
                    + self.b[i][2] * d[2]
                    + self.c[i] * q)
                    * s
            })
            .collect()
    }
}

/// Reads `(â, b̂, ĉ)` back from a macroscopic slice by a Gram solve.
pub fn macro_source_coeffs(
    g: &[f64],
    state: &FluidPoint,
    grid: &VelocityGrid,
) -> Result<(f64, [f64; 3], f64)> {
    let sm = sqrt_maxwellian(state, grid).values;
    let funcs: Vec<[f64; 5]> = grid
        .nodes()
        .iter()
        .zip(&sm)
        .map(|(v, s)| {
            let d = state.peculiar(v);
            [
                *s,
                d[0] * s,
                d[1] * s,
                d[2] * s,
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) * s,
            ]
        })
        .collect();
    let mut gram = [0.0; 25];
    let mut rhs = [0.0; 5];
    for (k, f) in funcs.iter().enumerate() {
        let w = grid.weights()[k];
        for a in 0..5 {
            rhs[a] += w * f[a] * g[k];
            for b in 0..5 {
                gram[a * 5 + b] += w * f[a] * f[b];
            }
        }
    }
    let x = solve_dense(&gram, &rhs, 5)
        .ok_or_else(|| HilbexError::Numerical("singular Gram matrix".into()))?;
    Ok((x[0], [x[1], x[2], x[3]], x[4]))
}

/// Tail integrals `∫_{η_i}^{H} g` of the piecewise degree-7 interpolant.
pub fn tail_integrals_interp(eta: &[f64], g: &[f64]) -> Vec<f64> {
    let n = eta.len();
    let starts = stencil_starts(n);
    let mut out = vec![0.0; n];
    for c in (0..n - 1).rev() {
        let h = eta[c + 1] - eta[c];
        let s = starts[c];
        let mut xs = [0.0; STENCIL];
        for m in 0..STENCIL {
            xs[m] = (eta[s + m] - eta[c]) / h;
        }
        let coef = lagrange_monomials(&xs);
        let mut cell = 0.0;
        for m in 0..STENCIL {
            let wm: f64 = (0..STENCIL).map(|p| coef[m][p] / (p + 1) as f64).sum();
            cell += wm * g[s + m];
        }
        out[c] = out[c + 1] + h * cell;
    }
    out
}

/// Fields `Â, B̂, Ĉ` and the odd-in-`v3` correction slices.
#[derive(Debug, Clone)]
pub struct CorrectionFields {
    pub eta: Vec<f64>,
    pub a_hat: Vec<f64>,
    pub b_hat: Vec<[f64; 3]>,
    pub c_hat: Vec<f64>,
    /// `f̂_{k,1}` at each node.
    pub slices: Vec<Vec<f64>>,
    /// `v3 ∂η f̂_{k,1} − Ŝ_{k,1}` at each node.
    pub defect: Vec<Vec<f64>>,
}

impl CorrectionFields {
    pub fn max_abs(&self) -> f64 {
        self.slices
            .iter()
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// `max_η ‖P0(defect)‖`.
    pub fn defect_macro(&self, state: &FluidPoint, grid: &VelocityGrid) -> f64 {
        let basis = MacroBasis::new(state, grid);
        self.defect
            .iter()
            .map(|d| basis.macro_norm(d, grid))
            .fold(0.0f64, f64::max)
    }

    /// Largest field value at the far end relative to the global maximum.
    pub fn far_value(&self) -> f64 {
        let n = self.eta.len() - 1;
        let far = self.b_hat[n]
            .iter()
            .fold(self.a_hat[n].abs().max(self.c_hat[n].abs()), |m, x| {
                m.max(x.abs())
            });
        far
    }
}

fn correction_slice(
    state: &FluidPoint,
    sm: &[f64],
    grid: &VelocityGrid,
    a: f64,
    b: [f64; 3],
    c: f64,
) -> Vec<f64> {
    grid.nodes()
        .iter()
        .zip(sm)
        .map(|(v, s)| {
            let d = state.peculiar(v);
            let q = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            (a * v[2] + b[0] * v[2] * d[0] + b[1] * v[2] * d[1] + b[2] + c * v[2] * q) * s
        })
        .collect()
}

/// Builds the macroscopic correction from tail integrals of `(â, b̂, ĉ)`.
/// Rejects coefficients that have not decayed by the end of the mesh.
pub fn build_correction(
    src: &MacroSource,
    state: &FluidPoint,
    eta: &[f64],
    grid: &VelocityGrid,
) -> Result<CorrectionFields> {
    let n = eta.len();
    if src.a.len() != n || src.b.len() != n || src.c.len() != n || n < STENCIL + 2 {
        return Err(HilbexError::Precondition(
            "macroscopic source does not match the eta nodes".into(),
        ));
    }
    let peak = (0..n).map(|i| src.magnitude(i)).fold(0.0f64, f64::max);
    let tail = (n - n / 10..n)
        .map(|i| src.magnitude(i))
        .fold(0.0f64, f64::max);
    if !peak.is_finite() || tail > 1e-6 * peak {
        return Err(HilbexError::Precondition(format!(
            "macroscopic source does not decay: tail {tail:e} against peak {peak:e}"
        )));
    }
    let t = state.t;
    let ga: Vec<f64> = (0..n)
        .map(|i| 2.0 * src.a[i] / t + 3.0 * src.c[i])
        .collect();
    let big_a: Vec<f64> = tail_integrals_interp(eta, &ga).iter().map(|x| -x).collect();
    let mut big_b = vec![[0.0; 3]; n];
    for k in 0..3 {
        let scale = if k < 2 { 1.0 / t } else { 1.0 };
        let gb: Vec<f64> = src.b.iter().map(|b| scale * b[k]).collect();
        for (i, x) in tail_integrals_interp(eta, &gb).iter().enumerate() {
            big_b[i][k] = -x;
        }
    }
    let big_c: Vec<f64> = tail_integrals_interp(eta, &src.a)
        .iter()
        .map(|x| x / (5.0 * t * t))
        .collect();
    let sm = sqrt_maxwellian(state, grid).values;
    let mut slices = Vec::with_capacity(n);
    let mut defect = Vec::with_capacity(n);
    for i in 0..n {
        slices.push(correction_slice(
            state, &sm, grid, big_a[i], big_b[i], big_c[i],
        ));
        // The tail integral of the interpolant differentiates back to the nodal data.
        let da = ga[i];
        let db = [src.b[i][0] / t, src.b[i][1] / t, src.b[i][2]];
        let dc = -src.a[i] / (5.0 * t * t);
        let transport = correction_slice(state, &sm, grid, da, db, dc);
        let s = src.slice(i, state, grid);
        defect.push(
            grid.nodes()
                .iter()
                .zip(transport.iter().zip(&s))
                .map(|(v, (tr, s))| v[2] * tr - s)
                .collect(),
        );
    }
    Ok(CorrectionFields {
        eta: eta.to_vec(),
        a_hat: big_a,
        b_hat: big_b,
        c_hat: big_c,
        slices,
        defect,
    })
}

/// Source for the second stage, `Ŝ_{k,2} − L0 f̂_{k,1} − (v3∂η f̂_{k,1} − Ŝ_{k,1})`.
pub fn second_stage_source(
    s_k2: &[Vec<f64>],
    corr: &CorrectionFields,
    state: &FluidPoint,
    backend: &CollisionBackend,
    grid: &VelocityGrid,
) -> Result<Vec<Vec<f64>>> {
    let basis = MacroBasis::new(state, grid);
    s_k2.iter()
        .zip(corr.slices.iter().zip(&corr.defect))
        .map(|(s, (f, d))| {
            let l = backend.apply_l_raw(f, state, grid, &basis)?;
            Ok(s.iter()
                .zip(l.iter().zip(d))
                .map(|(s, (l, d))| s - l - d)
                .collect())
        })
        .collect()
}

/// Inputs of the order-`k` Knudsen source.
#[derive(Debug, Clone, Copy)]
pub struct KnudsenSourceInputs<'a> {
    pub k: usize,
    pub wall_state: FluidPoint,
    pub eta: &'a [f64],
    /// `F_1⁰ + F̄_1⁰` at the wall (unnormalized).
    pub f1_wall: Option<&'a [f64]>,
    pub fhat1: Option<&'a KnudsenSolution>,
}

/// `Ŝ_k = Ŝ_{k,1} + Ŝ_{k,2}` with `Ŝ_{k,1} ∈ N0`, `Ŝ_{k,2} ∈ N0⊥`.
#[derive(Debug, Clone)]
pub struct SplitSource {
    pub macro_part: Vec<Vec<f64>>,
    pub micro_part: Vec<Vec<f64>>,
    /// `max_η ‖P0‖` of the collision sum before projection.
    pub collision_leak: f64,
}

impl SplitSource {
    pub fn is_zero(&self) -> bool {
        self.macro_part
            .iter()
            .chain(&self.micro_part)
            .flatten()
            .all(|x| *x == 0.0)
    }
}

/// Assembles the Knudsen source for orders 1 and 2. Time and tangential
/// derivatives of `F̂_{k−2}` vanish there, so `Ŝ_{k,1} = 0` and `Ŝ_2` is
/// the collision of `f̂_1` with the order-1 wall data.
pub fn assemble_knudsen_source(
    inp: &KnudsenSourceInputs,
    backend: &CollisionBackend,
    grid: &VelocityGrid,
) -> Result<SplitSource> {
    let n = inp.eta.len();
    let zero = SplitSource {
        macro_part: vec![vec![0.0; grid.len()]; n],
        micro_part: vec![vec![0.0; grid.len()]; n],
        collision_leak: 0.0,
    };
    match inp.k {
        1 => Ok(zero),
        2 => {
            let Some(fhat) = inp.fhat1 else {
                return Ok(zero);
            };
            if fhat.values.len() != n {
                return Err(HilbexError::Precondition(
                    "order-1 Knudsen solution is on a different mesh".into(),
                ));
            }
            let state = inp.wall_state;
            let sm = sqrt_maxwellian(&state, grid).values;
            let basis = MacroBasis::new(&state, grid);
            let f1 = inp
                .f1_wall
                .map(|f| f.to_vec())
                .unwrap_or_else(|| vec![0.0; grid.len()]);
            let mut out = zero;
            for (i, fh) in fhat.values.iter().enumerate() {
                if fh.iter().all(|x| *x == 0.0) {
                    continue;
                }
                let g: Vec<f64> = fh.iter().zip(&sm).map(|(a, s)| a * s).collect();
                let cross = backend.q_sym(&f1, &g, &state, grid)?;
                let own = backend.q_sym(&g, &g, &state, grid)?;
                let total: Vec<f64> = (0..g.len())
                    .map(|v| (cross[v] + 0.5 * own[v]) / sm[v].max(1e-300))
                    .collect();
                out.collision_leak = out.collision_leak.max(basis.macro_norm(&total, grid));
                out.micro_part[i] = basis.micro(&total, grid);
            }
            Ok(out)
        }
        k => Err(HilbexError::Precondition(format!(
            "Knudsen sources are assembled for orders 1 and 2 only, got {k}"
        ))),
    }
}

/// `ĝ(v) = b(v) − b(Rv)` on `v3 < 0` and zero on `v3 > 0`, with `b` the
/// wall bracket `f_k + f̄_k + f̂_{k,1}`.
pub fn boundary_mismatch(
    f_k: &[f64],
    fbar_k: &[f64],
    fhat_k1: Option<&[f64]>,
    grid: &VelocityGrid,
) -> Vec<f64> {
    let bracket: Vec<f64> = (0..grid.len())
        .map(|v| f_k[v] + fbar_k[v] + fhat_k1.map_or(0.0, |f| f[v]))
        .collect();
    (0..grid.len())
        .map(|v| {
            if grid.nodes()[v][2] < 0.0 {
                bracket[v] - bracket[grid.mirror(v)]
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::{build_grid, GridScheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid() -> VelocityGrid {
        build_grid(6.0, 12, GridScheme::UniformTensor).unwrap()
    }

    fn eta() -> Vec<f64> {
        EtaGridSpec::default().build().unwrap()
    }

    #[test]
    fn eta_mesh_is_graded() {
        let e = eta();
        assert_eq!(e[0], 0.0);
        assert_eq!(*e.last().unwrap(), 30.0);
        assert!((e[1] - 0.01).abs() < 1e-15);
        assert!(e.windows(2).all(|w| w[1] - w[0] <= 0.25 + 1e-12));
        assert!((120..200).contains(&e.len()), "{}", e.len());
        assert!(EtaGridSpec {
            h_min: 1.0,
            h_max: 0.5,
            ..Default::default()
        }
        .build()
        .is_err());
    }

    #[test]
    fn exp_moments_match_quadrature() {
        let (x, w) = crate::quad::gauss_legendre(40);
        for &tau in &[1e-6, 0.3, 1.999, 2.0, 3.5, 40.0] {
            let e = exp_moments(tau);
            for p in 0..STENCIL {
                let q: f64 = x
                    .iter()
                    .zip(&w)
                    .map(|(x, w)| {
                        let s = 0.5 * (x + 1.0);
                        0.5 * w * (-tau * s).exp() * s.powi(p as i32)
                    })
                    .sum();
                assert!((e[p] - q).abs() < 1e-14, "tau {tau} p {p}: {} vs {q}", e[p]);
            }
        }
    }

    #[test]
    fn interpolant_tail_integrals_of_exponential() {
        let e = eta();
        let g: Vec<f64> = e.iter().map(|x| (-x).exp()).collect();
        let t = tail_integrals_interp(&e, &g);
        let h = *e.last().unwrap();
        for (x, ti) in e.iter().zip(&t) {
            assert!(
                (ti - ((-x).exp() - (-h).exp())).abs() < 1e-9,
                "{:e}",
                ti - ((-x).exp() - (-h).exp())
            );
        }
    }

    #[test]
    fn zero_problem_gives_zero() {
        let grid = small_grid();
        let p = HalfSpaceProblem::zero(FluidPoint::reference(), eta(), &grid);
        let sol = solve_halfspace(
            &p,
            &CollisionBackend::bgk(1.0),
            &grid,
            &KnudsenSettings::default(),
        )
        .unwrap();
        assert_eq!(sol.max_abs(), 0.0);
        assert_eq!(sol.zeta(), None);
        assert!(sol.report.converged);
    }

    fn micro_shape(state: &FluidPoint, grid: &VelocityGrid) -> Vec<f64> {
        let basis = MacroBasis::new(state, grid);
        let sm = sqrt_maxwellian(state, grid).values;
        let raw: Vec<f64> = grid
            .nodes()
            .iter()
            .zip(&sm)
            .map(|(v, s)| {
                let d = state.peculiar(v);
                (d[0] * d[2] + 0.5 * d[2] * d[2] * d[2] - 0.3 * d[1] * d[1]) * s
            })
            .collect();
        basis.micro(&raw, grid)
    }

    fn absorption_exact(eta: f64, v3: f64, nu: f64, m_v: f64, m_rv: f64, h: f64) -> f64 {
        let inward = |e: f64, m: f64, a: f64| {
            m * (-e).exp() * -(-(nu / a + 1.0) * (h - e)).exp_m1() / (nu + a)
        };
        if v3 < 0.0 {
            return inward(eta, m_v, -v3);
        }
        let a = v3;
        let f0 = inward(0.0, m_rv, a);
        let growth = if (nu - a).abs() < 1e-12 {
            m_v * eta * (-eta).exp() / a
        } else {
            m_v * (-eta).exp() * -(-(nu - a) * eta / a).exp_m1() / (nu - a)
        };
        (-nu * eta / a).exp() * f0 + growth
    }

    fn absorption_case(backend: &CollisionBackend) -> f64 {
        let grid = small_grid();
        let state = FluidPoint::new(1.1, [0.2, -0.1, 0.0], 0.9).unwrap();
        let e = eta();
        let m = micro_shape(&state, &grid);
        let mut p = HalfSpaceProblem::zero(state, e.clone(), &grid);
        p.source = e
            .iter()
            .map(|x| m.iter().map(|mv| (-x).exp() * mv).collect())
            .collect();
        let settings = KnudsenSettings {
            gain: false,
            ..Default::default()
        };
        let sol = solve_halfspace(&p, backend, &grid, &settings).unwrap();
        let nu = backend.nu_slice(&state, &grid);
        let h = *e.last().unwrap();
        let mut err = 0.0f64;
        for (i, x) in e.iter().enumerate() {
            for (v, node) in grid.nodes().iter().enumerate() {
                let ex = absorption_exact(*x, node[2], nu[v], m[v], m[grid.mirror(v)], h);
                err = err.max((sol.values[i][v] - ex).abs());
            }
        }
        let z = sol.zeta().unwrap();
        assert!(z > 0.0 && z <= 1.05, "zeta {z}");
        err
    }

    #[test]
    fn pure_absorption_matches_closed_form() {
        let err = absorption_case(&CollisionBackend::bgk(1.0));
        assert!(err < 1e-8, "constant nu error {err:e}");
        let affine = CollisionBackend::new(
            BackendSpec::BgkModel {
                nu_params: NuModel::Affine { c0: 0.5 },
            },
            Default::default(),
        );
        let err = absorption_case(&affine);
        assert!(err < 1e-8, "affine nu error {err:e}");
    }

    fn shear_fb(state: &FluidPoint, grid: &VelocityGrid) -> Vec<f64> {
        let sm = sqrt_maxwellian(state, grid).values;
        grid.nodes()
            .iter()
            .zip(&sm)
            .map(|(v, s)| {
                let d = state.peculiar(v);
                if v[2] < 0.0 {
                    0.1 * d[0] * d[1] * s
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn bgk_solve_converges_with_decay() {
        let grid = small_grid();
        let state = FluidPoint::new(1.0, [0.0; 3], 1.2).unwrap();
        let e = eta();
        let m = micro_shape(&state, &grid);
        let mut p = HalfSpaceProblem::zero(state, e.clone(), &grid);
        p.source = e
            .iter()
            .map(|x| m.iter().map(|mv| (-x).exp() * mv).collect())
            .collect();
        p.f_b = shear_fb(&state, &grid);
        let backend = CollisionBackend::bgk(1.0);
        let sol = solve_halfspace(&p, &backend, &grid, &KnudsenSettings::default()).unwrap();
        let r = &sol.report;
        assert_eq!(r.method, "moment-direct");
        assert!(r.residual <= 1e-8, "residual {:e}", r.residual);
        assert!(r.wall_relation < 1e-13);
        let z = r.zeta.unwrap();
        assert!(z > 0.0 && z < 1.05, "zeta {z}");
        assert!(r.far_field < 0.05, "far field {:e}", r.far_field);
        assert!(sol.profile_csv().lines().count() == e.len() + 1);
        let json = serde_json::to_string(r).unwrap();
        assert!(json.contains("\"converged\":true"));
    }

    #[test]
    fn gmres_path_agrees_with_direct_path() {
        let grid = build_grid(5.0, 8, GridScheme::UniformTensor).unwrap();
        let state = FluidPoint::reference();
        let e = EtaGridSpec {
            length: 15.0,
            h_min: 0.05,
            h_max: 0.5,
            ratio: 1.1,
        }
        .build()
        .unwrap();
        let m = micro_shape(&state, &grid);
        let mut p = HalfSpaceProblem::zero(state, e.clone(), &grid);
        p.source = e
            .iter()
            .map(|x| m.iter().map(|mv| (-2.0 * x).exp() * mv).collect())
            .collect();
        p.zeta0 = 2.0;
        p.f_b = shear_fb(&state, &grid);
        let direct = solve_halfspace(
            &p,
            &CollisionBackend::bgk(1.0),
            &grid,
            &KnudsenSettings::default(),
        )
        .unwrap();
        // Same constant law through the generic full-vector path.
        let tr = Transport::new(&e, &vec![1.0; grid.len()], &grid);
        let backend = CollisionBackend::bgk(1.0);
        let gain = Gain {
            backend: &backend,
            state,
            basis: MacroBasis::new(&state, &grid),
            nu: vec![1.0; grid.len()],
            constant_nu: None,
        };
        let starts = stencil_starts(e.len());
        let s = to_flat(&p.source, grid.len());
        let rhs = tr.sweep(&s, Some(&p.f_b), &starts);
        let n = e.len();
        let mut op = |x: &[f64]| -> Result<Vec<f64>> {
            let k = gain.apply(x, n, &grid)?;
            let t = tr.sweep(&k, None, &starts);
            Ok(x.iter().zip(&t).map(|(a, b)| a - b).collect())
        };
        let (x, it, res) = gmres(&mut op, &rhs, rhs.clone(), 40, 2000, 1e-13).unwrap();
        assert!(res <= 1e-13, "gmres residual {res:e} after {it}");
        let d = to_flat(&direct.values, grid.len());
        let diff = x
            .iter()
            .zip(&d)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-9, "direct vs gmres {diff:e}");
    }

    #[test]
    fn affine_backend_uses_gmres() {
        let grid = build_grid(5.0, 8, GridScheme::UniformTensor).unwrap();
        let state = FluidPoint::reference();
        let e = EtaGridSpec {
            length: 15.0,
            h_min: 0.05,
            h_max: 0.5,
            ratio: 1.1,
        }
        .build()
        .unwrap();
        let m = micro_shape(&state, &grid);
        let mut p = HalfSpaceProblem::zero(state, e.clone(), &grid);
        p.source = e
            .iter()
            .map(|x| m.iter().map(|mv| (-x).exp() * mv).collect())
            .collect();
        let backend = CollisionBackend::new(
            BackendSpec::BgkModel {
                nu_params: NuModel::Affine { c0: 0.5 },
            },
            Default::default(),
        );
        let sol = solve_halfspace(&p, &backend, &grid, &KnudsenSettings::default()).unwrap();
        assert_eq!(sol.report.method, "gmres");
        assert!(sol.report.residual <= 1e-8, "{:e}", sol.report.residual);
        assert!(sol.zeta().unwrap() > 0.0);
    }

    #[test]
    fn solvability_reports() {
        let grid = small_grid();
        let state = FluidPoint::reference();
        let p = HalfSpaceProblem::zero(state, eta(), &grid);
        let r = check_solvability(&p, &grid, 1e-6);
        assert!(r.pass && r.micro_defect == 0.0 && r.four_moments == [0.0; 4]);

        let basis = MacroBasis::new(&state, &grid);
        let mut q = p.clone();
        q.source = vec![basis.chi[0].clone(); q.eta.len()];
        let r = check_solvability(&q, &grid, 1e-6);
        assert!((r.micro_defect - 1.0).abs() < 1e-12 && !r.pass);

        let mut q = p.clone();
        q.f_b = shear_fb(&state, &grid);
        assert!(check_solvability(&q, &grid, 1e-6).pass);

        // A normal velocity at the wall is odd in v3 and carries mass flux.
        let sm = sqrt_maxwellian(&state, &grid).values;
        let f1: Vec<f64> = grid
            .nodes()
            .iter()
            .zip(&sm)
            .map(|(v, s)| 0.2 * v[2] * s)
            .collect();
        let zero = vec![0.0; grid.len()];
        let mut q = p.clone();
        q.f_b = boundary_mismatch(&f1, &zero, None, &grid);
        let r = check_solvability(&q, &grid, 1e-6);
        assert!(!r.pass && r.four_moments[0].abs() > 1e-3);
        let err = solve_halfspace(
            &q,
            &CollisionBackend::bgk(1.0),
            &grid,
            &KnudsenSettings::default(),
        )
        .unwrap_err();
        assert!(matches!(err, HilbexError::Solvability { .. }));
    }

    #[test]
    fn mismatch_of_even_or_tangential_data_vanishes() {
        let grid = small_grid();
        let state = FluidPoint::new(1.0, [0.3, -0.2, 0.0], 1.1).unwrap();
        let sm = sqrt_maxwellian(&state, &grid).values;
        let c = crate::velocity::MacroCoeffs {
            rho: 0.2,
            u: [0.1, -0.4, 0.0],
            theta: 0.3,
        };
        let f1 = crate::velocity::macro_slice(&state, &c, &grid.slice(sm.clone()), &grid).values;
        let fbar =
            crate::velocity::macro_slice(&state, &c.scaled(-0.7), &grid.slice(sm), &grid).values;
        let g = boundary_mismatch(&f1, &fbar, None, &grid);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        let m = wall_flux_moments(&state, &g, &grid);
        assert!(m.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn mismatch_is_the_odd_part_on_incoming_nodes() {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zero = vec![0.0; grid.len()];
        let g = boundary_mismatch(&f, &zero, Some(&zero), &grid);
        for v in 0..grid.len() {
            let r = grid.mirror(v);
            let odd = f[v] - f[r];
            let ext = if grid.nodes()[v][2] < 0.0 {
                g[v]
            } else {
                -g[r]
            };
            assert!((ext - odd).abs() < 1e-15);
        }
    }

    #[test]
    fn correction_of_zero_is_zero() {
        let grid = small_grid();
        let e = eta();
        let c = build_correction(
            &MacroSource::zero(e.len()),
            &FluidPoint::reference(),
            &e,
            &grid,
        )
        .unwrap();
        assert_eq!(c.max_abs(), 0.0);
        assert_eq!(c.far_value(), 0.0);
    }

    #[test]
    fn correction_closed_form_for_exponential() {
        let grid = small_grid();
        let e = eta();
        let t = 1.3;
        let state = FluidPoint::new(0.8, [0.1, 0.0, 0.0], t).unwrap();
        let mut src = MacroSource::zero(e.len());
        src.a = e.iter().map(|x| (-x).exp()).collect();
        let c = build_correction(&src, &state, &e, &grid).unwrap();
        let h = *e.last().unwrap();
        for (i, x) in e.iter().enumerate() {
            let tail = (-x).exp() - (-h).exp();
            assert!((c.a_hat[i] + 2.0 / t * tail).abs() < 1e-8);
            assert!((c.c_hat[i] - tail / (5.0 * t * t)).abs() < 1e-8);
            assert!(c.b_hat[i].iter().all(|b| *b == 0.0));
        }
    }

    #[test]
    fn correction_defect_is_microscopic() {
        let grid = build_grid(8.0, 24, GridScheme::UniformTensor).unwrap();
        let e = eta();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let state = FluidPoint::new(
                rng.gen_range(0.7..1.3),
                [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0],
                rng.gen_range(0.8..1.2),
            )
            .unwrap();
            let rate = rng.gen_range(0.8..2.0);
            let amp: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let src = MacroSource {
                a: e.iter().map(|x| amp[0] * (-rate * x).exp()).collect(),
                b: e.iter()
                    .map(|x| {
                        [
                            amp[1] * (-rate * x).exp(),
                            amp[2] * x * (-rate * x).exp(),
                            amp[3] * (-rate * x).exp(),
                        ]
                    })
                    .collect(),
                c: e.iter().map(|x| amp[4] * (-rate * x).exp()).collect(),
            };
            let c = build_correction(&src, &state, &e, &grid).unwrap();
            let d = c.defect_macro(&state, &grid);
            assert!(d <= 1e-8, "defect {d:e}");
            assert!(c.far_value() < 1e-8);
        }
    }

    #[test]
    fn non_decaying_correction_source_is_rejected() {
        let grid = small_grid();
        let e = eta();
        let mut src = MacroSource::zero(e.len());
        src.c = vec![1.0; e.len()];
        assert!(build_correction(&src, &FluidPoint::reference(), &e, &grid).is_err());
    }

    #[test]
    fn macro_coefficients_round_trip() {
        let grid = small_grid();
        let state = FluidPoint::new(1.2, [0.1, 0.2, 0.0], 0.9).unwrap();
        let src = MacroSource {
            a: vec![0.3],
            b: vec![[0.1, -0.2, 0.4]],
            c: vec![-0.05],
        };
        let (a, b, c) = macro_source_coeffs(&src.slice(0, &state, &grid), &state, &grid).unwrap();
        assert!((a - 0.3).abs() < 1e-10 && (c + 0.05).abs() < 1e-10);
        assert!(
            (b[0] - 0.1).abs() < 1e-10 && (b[1] + 0.2).abs() < 1e-10 && (b[2] - 0.4).abs() < 1e-10
        );
    }

    #[test]
    fn low_order_sources() {
        let grid = small_grid();
        let state = FluidPoint::reference();
        let e = eta();
        let backend = CollisionBackend::bgk(1.0);
        let mut inp = KnudsenSourceInputs {
            k: 1,
            wall_state: state,
            eta: &e,
            f1_wall: None,
            fhat1: None,
        };
        assert!(assemble_knudsen_source(&inp, &backend, &grid)
            .unwrap()
            .is_zero());
        inp.k = 2;
        assert!(assemble_knudsen_source(&inp, &backend, &grid)
            .unwrap()
            .is_zero());

        let m = micro_shape(&state, &grid);
        let mut p = HalfSpaceProblem::zero(state, e.clone(), &grid);
        p.source = e
            .iter()
            .map(|x| m.iter().map(|mv| (-x).exp() * mv).collect())
            .collect();
        let fhat = solve_halfspace(&p, &backend, &grid, &KnudsenSettings::default()).unwrap();
        let mx = maxwellian(&state, &grid).values;
        let f1: Vec<f64> = grid
            .nodes()
            .iter()
            .zip(&mx)
            .map(|(v, m)| 0.3 * v[0] * m)
            .collect();
        inp.f1_wall = Some(&f1);
        inp.fhat1 = Some(&fhat);
        let s = assemble_knudsen_source(&inp, &backend, &grid).unwrap();
        let basis = MacroBasis::new(&state, &grid);
        assert!(s.macro_part.iter().flatten().all(|x| *x == 0.0));
        assert!(s.micro_part.iter().any(|r| grid.norm(r) > 1e-6));
        assert!(s
            .micro_part
            .iter()
            .all(|r| basis.macro_norm(r, &grid) < 1e-12));
        assert!(s.collision_leak < 1e-8, "leak {:e}", s.collision_leak);
        inp.k = 3;
        assert!(assemble_knudsen_source(&inp, &backend, &grid).is_err());
    }

    #[test]
    fn decay_fit_recovers_rate() {
        let e = eta();
        let p: Vec<f64> = e.iter().map(|x| 2.0 * (-0.7 * x).exp()).collect();
        let z = fit_decay(&e, &p, 15.0).unwrap();
        assert!((z - 0.7).abs() < 1e-10);
        assert_eq!(fit_decay(&e, &vec![0.0; e.len()], 15.0), None);
    }
}
