//! Collision operators: the linearized operator `L`, its pseudo-inverse on
//! the microscopic subspace, the bilinear form `Q`, Burnett functions and
//! transport coefficients.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use crate::error::{HilbexError, Result};
use crate::quad::{gauss_legendre, solve_dense};
use crate::velocity::{
    maxwellian, sqrt_maxwellian, FluidPoint, KineticSlice, MacroBasis, VelocityGrid,
};

/// Collision frequency law of the BGK model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "law")]
pub enum NuModel {
    /// `ν(v) = ν̄`.
    Constant { nu: f64 },
    /// `ν(v) = c₀ (1 + |v|)`.
    Affine { c0: f64 },
}

/// Angular quadrature of the hard-sphere gain term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardSphereParams {
    pub n_polar: usize,
    pub n_azimuth: usize,
}

impl Default for HardSphereParams {
    fn default() -> Self {
        HardSphereParams {
            n_polar: 8,
            n_azimuth: 16,
        }
    }
}

/// Serializable backend choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BackendSpec {
    BgkModel {
        nu_params: NuModel,
    },
    HardSphereQuad {
        #[serde(default)]
        quad_params: HardSphereParams,
    },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::BgkModel {
            nu_params: NuModel::Constant { nu: 1.0 },
        }
    }
}

/// Solver tolerances shared by the collision kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub tol_quad: f64,
    pub tol_solve: f64,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tol_quad: 1e-6,
            tol_solve: 1e-10,
            max_iter: 500,
        }
    }
}

impl Tolerances {
    pub fn tol_micro(&self) -> f64 {
        10.0 * self.tol_quad
    }

    pub fn tol_q(&self) -> f64 {
        10.0 * self.tol_quad
    }
}

/// Largest grid on which the dense hard-sphere operator is assembled.
pub const HS_MAX_NODES: usize = 6000;

/// `∫_{[-1/2,1/2]³} |x|⁻¹ dx`, used for the singular diagonal of the gain kernel.
const CUBE_INV_R: f64 = 2.380_077_363_718_62;

type CacheKey = (u64, [u64; 5]);

/// Immutable collision backend; the hard-sphere variant caches one dense
/// operator per state behind a mutex.
#[derive(Debug)]
pub struct CollisionBackend {
    spec: BackendSpec,
    tol: Tolerances,
    cache: Mutex<HashMap<CacheKey, Arc<HsOperator>>>,
}

impl Clone for CollisionBackend {
    fn clone(&self) -> Self {
        CollisionBackend::new(self.spec, self.tol)
    }
}

#[derive(Debug)]
struct HsOperator {
    nu: Vec<f64>,
    /// Row-major `a[i*n + j] = (k1 - k2)(v_i, v_j) w_j`.
    a: Vec<f64>,
    basis: MacroBasis,
    raw_defect: f64,
}

/// Burnett functions `A_ij` and `B_i` at one state.
#[derive(Debug, Clone)]
pub struct BurnettTensors {
    pub a: [[KineticSlice; 3]; 3],
    pub b: [KineticSlice; 3],
}

/// Viscosity and heat conductivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportCoeffs {
    pub mu: f64,
    pub kappa: f64,
}

/// `E|ξ - Z|` for a standard normal `Z ∈ ℝ³`.
fn mean_distance(r: f64) -> f64 {
    if r < 1e-8 {
        return 2.0 * (2.0 / PI).sqrt() * (1.0 + r * r / 6.0);
    }
    (r + 1.0 / r) * libm::erf(r / 2f64.sqrt()) + (2.0 / PI).sqrt() * (-r * r / 2.0).exp()
}

/// Hard-sphere collision frequency at the standard state.
fn hs_nu_std(r: f64) -> f64 {
    2.0 * PI * mean_distance(r)
}

fn norm3(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn state_key(grid: &VelocityGrid, s: &FluidPoint) -> CacheKey {
    (
        grid.id(),
        [
            s.rho.to_bits(),
            s.u[0].to_bits(),
            s.u[1].to_bits(),
            s.u[2].to_bits(),
            s.t.to_bits(),
        ],
    )
}

impl CollisionBackend {
    pub fn new(spec: BackendSpec, tol: Tolerances) -> Self {
        CollisionBackend {
            spec,
            tol,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Constant-frequency BGK backend.
    pub fn bgk(nu: f64) -> Self {
        Self::new(
            BackendSpec::BgkModel {
                nu_params: NuModel::Constant { nu },
            },
            Tolerances::default(),
        )
    }

    pub fn hard_sphere() -> Self {
        Self::new(
            BackendSpec::HardSphereQuad {
                quad_params: HardSphereParams::default(),
            },
            Tolerances::default(),
        )
    }

    pub fn spec(&self) -> BackendSpec {
        self.spec
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tol
    }

    pub fn is_hard_sphere(&self) -> bool {
        matches!(self.spec, BackendSpec::HardSphereQuad { .. })
    }

    /// Collision frequency `ν(v)` at `state`.
    pub fn collision_freq(&self, v: &[f64; 3], state: &FluidPoint) -> f64 {
        match self.spec {
            BackendSpec::BgkModel { nu_params } => match nu_params {
                NuModel::Constant { nu } => nu,
                NuModel::Affine { c0 } => c0 * (1.0 + norm3(v)),
            },
            BackendSpec::HardSphereQuad { .. } => {
                let d = state.peculiar(v);
                state.rho * state.t.sqrt() * hs_nu_std(norm3(&d) / state.t.sqrt())
            }
        }
    }

    /// `ν(v)` at every grid node.
    pub fn nu_slice(&self, state: &FluidPoint, grid: &VelocityGrid) -> Vec<f64> {
        grid.nodes()
            .iter()
            .map(|v| self.collision_freq(v, state))
            .collect()
    }

    fn hs_operator(&self, state: &FluidPoint, grid: &VelocityGrid) -> Result<Arc<HsOperator>> {
        let key = state_key(grid, state);
        {
            let cache = self.cache.lock().expect("collision cache poisoned");
            if let Some(op) = cache.get(&key) {
                return Ok(op.clone());
            }
        }
        let op = Arc::new(build_hs_operator(state, grid)?);
        let mut cache = self.cache.lock().expect("collision cache poisoned");
        if cache.len() >= 4 {
            cache.clear();
        }
        cache.insert(key, op.clone());
        Ok(op)
    }

    /// Null-space defect of the discrete operator before the conservative
    /// correction (zero for the BGK model).
    pub fn raw_null_defect(&self, state: &FluidPoint, grid: &VelocityGrid) -> Result<f64> {
        match self.spec {
            BackendSpec::HardSphereQuad { .. } => Ok(self.hs_operator(state, grid)?.raw_defect),
            BackendSpec::BgkModel { .. } => Ok(0.0),
        }
    }

    /// Applies `L` to raw values at `state`.
    pub fn apply_l_raw(
        &self,
        g: &[f64],
        state: &FluidPoint,
        grid: &VelocityGrid,
        basis: &MacroBasis,
    ) -> Result<Vec<f64>> {
        match self.spec {
            BackendSpec::BgkModel { nu_params } => {
                let m = basis.micro(g, grid);
                Ok(match nu_params {
                    NuModel::Constant { nu } => m.iter().map(|x| nu * x).collect(),
                    NuModel::Affine { .. } => {
                        let nu = self.nu_slice(state, grid);
                        let r: Vec<f64> = m.iter().zip(&nu).map(|(x, n)| x * n).collect();
                        basis.micro(&r, grid)
                    }
                })
            }
            BackendSpec::HardSphereQuad { .. } => {
                let op = self.hs_operator(state, grid)?;
                let m = op.basis.micro(g, grid);
                let n = m.len();
                let mut r = vec![0.0; n];
                for i in 0..n {
                    let row = &op.a[i * n..(i + 1) * n];
                    let s: f64 = row.iter().zip(&m).map(|(a, x)| a * x).sum();
                    r[i] = op.nu[i] * m[i] + s;
                }
                Ok(op.basis.micro(&r, grid))
            }
        }
    }

    /// Linearized collision operator `L g` at `state`.
    pub fn apply_l(
        &self,
        g: &KineticSlice,
        state: &FluidPoint,
        grid: &VelocityGrid,
    ) -> Result<KineticSlice> {
        grid.check(g)?;
        let basis = MacroBasis::new(state, grid);
        Ok(grid.slice(self.apply_l_raw(&g.values, state, grid, &basis)?))
    }

    /// Pseudo-inverse of `L` on the microscopic subspace.
    pub fn invert_l(
        &self,
        g: &KineticSlice,
        state: &FluidPoint,
        grid: &VelocityGrid,
    ) -> Result<KineticSlice> {
        grid.check(g)?;
        let basis = MacroBasis::new(state, grid);
        Ok(grid.slice(self.invert_l_raw(&g.values, state, grid, &basis)?))
    }

    /// `L⁻¹` on raw values with a precomputed basis.
    pub fn invert_l_raw(
        &self,
        g: &[f64],
        state: &FluidPoint,
        grid: &VelocityGrid,
        basis: &MacroBasis,
    ) -> Result<Vec<f64>> {
        let pnorm = basis.macro_norm(g, grid);
        let gnorm = grid.norm(g);
        if pnorm > self.tol.tol_micro() * gnorm.max(1.0) {
            return Err(HilbexError::Precondition(format!(
                "invert_L needs a microscopic input; measured |P g| = {pnorm:e}"
            )));
        }
        let rhs = basis.micro(g, grid);
        if let BackendSpec::BgkModel {
            nu_params: NuModel::Constant { nu },
        } = self.spec
        {
            return Ok(rhs.iter().map(|x| x / nu).collect());
        }
        self.pcg(&rhs, state, grid, basis)
    }

    /// Preconditioned conjugate gradients on the microscopic subspace.
    fn pcg(
        &self,
        rhs: &[f64],
        state: &FluidPoint,
        grid: &VelocityGrid,
        basis: &MacroBasis,
    ) -> Result<Vec<f64>> {
        let nu = self.nu_slice(state, grid);
        let precond = |r: &[f64]| -> Vec<f64> {
            let z: Vec<f64> = r.iter().zip(&nu).map(|(a, n)| a / n).collect();
            basis.micro(&z, grid)
        };
        let bnorm = grid.norm(rhs);
        let n = rhs.len();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut r = rhs.to_vec();
        let mut z = precond(&r);
        let mut p = z.clone();
        let mut rz = grid.dot(&r, &z);
        for it in 0..self.tol.max_iter {
            let ap = self.apply_l_raw(&p, state, grid, basis)?;
            let alpha = rz / grid.dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            // Re-project to stay on the microscopic subspace.
            r = basis.micro(&r, grid);
            let rn = grid.norm(&r);
            if rn <= 0.1 * self.tol.tol_solve * bnorm {
                return Ok(basis.micro(&x, grid));
            }
            z = precond(&r);
            let rz_new = grid.dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            if it + 1 == self.tol.max_iter {
                return Err(HilbexError::NoConvergence {
                    solver: "invert_L",
                    iterations: self.tol.max_iter,
                    residual: rn / bnorm,
                });
            }
        }
        Ok(basis.micro(&x, grid))
    }

    /// Nonlinear collision operator `Q(F, F)` (the model operator for BGK).
    pub fn collide(&self, f: &KineticSlice, grid: &VelocityGrid) -> Result<KineticSlice> {
        grid.check(f)?;
        match self.spec {
            BackendSpec::BgkModel { nu_params } => {
                let fit = fit_maxwellian(&f.values, grid)?;
                Ok(grid.slice(match nu_params {
                    NuModel::Constant { nu } => fit
                        .values
                        .iter()
                        .zip(&f.values)
                        .map(|(m, x)| nu * (m - x))
                        .collect(),
                    NuModel::Affine { .. } => {
                        let basis = MacroBasis::new(&fit.state, grid);
                        let sm: Vec<f64> =
                            fit.values.iter().map(|m| m.max(1e-300).sqrt()).collect();
                        let r: Vec<f64> = grid
                            .nodes()
                            .iter()
                            .zip(fit.values.iter().zip(&f.values))
                            .zip(&sm)
                            .map(|((v, (m, x)), s)| {
                                self.collision_freq(v, &fit.state) * (x - m) / s
                            })
                            .collect();
                        let mr = basis.micro(&r, grid);
                        mr.iter().zip(&sm).map(|(a, s)| -a * s).collect()
                    }
                }))
            }
            BackendSpec::HardSphereQuad { quad_params } => {
                hs_q(&f.values, &f.values, grid, quad_params).map(|v| grid.slice(v))
            }
        }
    }

    /// Discrete bilinear form `Q(F₁, F₂)`.
    ///
    /// For the BGK model this is the model operator evaluated at the mean
    /// `(F₁+F₂)/2`: symmetric and equal to `collide` on the diagonal.
    pub fn q_bilinear(
        &self,
        f1: &KineticSlice,
        f2: &KineticSlice,
        grid: &VelocityGrid,
    ) -> Result<KineticSlice> {
        grid.check(f1)?;
        grid.check(f2)?;
        match self.spec {
            BackendSpec::BgkModel { .. } => self.collide(&f1.add(f2).scaled(0.5), grid),
            BackendSpec::HardSphereQuad { quad_params } => {
                hs_q(&f1.values, &f2.values, grid, quad_params).map(|v| grid.slice(v))
            }
        }
    }

    /// The symmetric pair `Q(G,H) + Q(H,G)` entering the expansion hierarchy,
    /// i.e. the second derivative of the collision operator at the Maxwellian
    /// of `base` for the BGK model.
    pub fn q_sym(
        &self,
        g: &[f64],
        h: &[f64],
        base: &FluidPoint,
        grid: &VelocityGrid,
    ) -> Result<Vec<f64>> {
        match self.spec {
            BackendSpec::BgkModel { nu_params } => match nu_params {
                NuModel::Constant { nu } => {
                    let m = maxwellian(base, grid);
                    let d2 = maxwellian_second_derivative(&m.values, base, g, h, grid)?;
                    Ok(d2.iter().map(|x| nu * x).collect())
                }
                NuModel::Affine { .. } => {
                    // Polarized central difference of the model operator.
                    let m = maxwellian(base, grid);
                    let scale = grid.norm(g).max(grid.norm(h)).max(1e-300);
                    let s = 1e-3 * grid.norm(&m.values) / scale;
                    let eval = |a: f64, b: f64| -> Result<Vec<f64>> {
                        let f: Vec<f64> = (0..m.len())
                            .map(|i| m.values[i] + a * g[i] + b * h[i])
                            .collect();
                        Ok(self.collide(&grid.slice(f), grid)?.values)
                    };
                    let pp = eval(s, s)?;
                    let pm = eval(s, -s)?;
                    let mp = eval(-s, s)?;
                    let mm = eval(-s, -s)?;
                    Ok((0..m.len())
                        .map(|i| (pp[i] - pm[i] - mp[i] + mm[i]) / (4.0 * s * s))
                        .collect())
                }
            },
            BackendSpec::HardSphereQuad { quad_params } => {
                let a = hs_q(g, h, grid, quad_params)?;
                let b = hs_q(h, g, grid, quad_params)?;
                Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect())
            }
        }
    }

    /// `Γ(g, h) = (Q(√μ g, √μ h) + Q(√μ h, √μ g)) / √μ` at `base`.
    pub fn gamma_sym(
        &self,
        g: &[f64],
        h: &[f64],
        base: &FluidPoint,
        grid: &VelocityGrid,
    ) -> Result<Vec<f64>> {
        let sm = sqrt_maxwellian(base, grid).values;
        let gg: Vec<f64> = g.iter().zip(&sm).map(|(a, s)| a * s).collect();
        let hh: Vec<f64> = h.iter().zip(&sm).map(|(a, s)| a * s).collect();
        let q = self.q_sym(&gg, &hh, base, grid)?;
        Ok(q.iter().zip(&sm).map(|(a, s)| a / s).collect())
    }

    /// Viscosity and heat conductivity through `L⁻¹`.
    pub fn transport_coeffs(
        &self,
        state: &FluidPoint,
        grid: &VelocityGrid,
    ) -> Result<TransportCoeffs> {
        let bt = burnett(state, grid);
        let basis = MacroBasis::new(state, grid);
        let a31 = basis.micro(&bt.a[2][0].values, grid);
        let b3 = basis.micro(&bt.b[2].values, grid);
        let la = self.invert_l_raw(&a31, state, grid, &basis)?;
        let lb = self.invert_l_raw(&b3, state, grid, &basis)?;
        Ok(TransportCoeffs {
            mu: state.t * grid.dot(&a31, &la),
            kappa: 2.0 / 3.0 * state.t * grid.dot(&b3, &lb),
        })
    }

    /// `T ⟨A_ij, L⁻¹ A_ij⟩` for an arbitrary index pair.
    pub fn burnett_pairing(
        &self,
        state: &FluidPoint,
        grid: &VelocityGrid,
        i: usize,
        j: usize,
    ) -> Result<f64> {
        let bt = burnett(state, grid);
        let basis = MacroBasis::new(state, grid);
        let a = basis.micro(&bt.a[i][j].values, grid);
        let la = self.invert_l_raw(&a, state, grid, &basis)?;
        Ok(state.t * grid.dot(&a, &la))
    }
}

fn build_hs_operator(state: &FluidPoint, grid: &VelocityGrid) -> Result<HsOperator> {
    let n = grid.len();
    if n > HS_MAX_NODES {
        return Err(HilbexError::config(
            "velocity_grid",
            format!(
                "the dense hard-sphere operator supports at most {HS_MAX_NODES} nodes, got {n}"
            ),
        ));
    }
    let st = state.t.sqrt();
    let scale = state.rho * st;
    let xi: Vec<[f64; 3]> = grid
        .nodes()
        .iter()
        .map(|v| {
            let d = state.peculiar(v);
            [d[0] / st, d[1] / st, d[2] / st]
        })
        .collect();
    let q: Vec<f64> = xi
        .iter()
        .map(|x| x[0] * x[0] + x[1] * x[1] + x[2] * x[2])
        .collect();
    let nu: Vec<f64> = q.iter().map(|q| scale * hs_nu_std(q.sqrt())).collect();
    let jac = state.t.powf(-1.5);
    let c1 = (2.0 * PI).powf(-0.5);
    let c2 = 4.0 / (2.0 * PI).sqrt();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut a[i * n..(i + 1) * n];
        for j in 0..n {
            if i == j {
                let h = grid.weights()[i].cbrt() / st;
                let r = q[i].sqrt();
                let avg = if r < 1e-8 {
                    1.0
                } else {
                    (PI / 2.0).sqrt() * libm::erf(r / 2f64.sqrt()) / r
                };
                row[j] = -scale * c2 * CUBE_INV_R * h * h * avg;
                continue;
            }
            let d = [
                xi[i][0] - xi[j][0],
                xi[i][1] - xi[j][1],
                xi[i][2] - xi[j][2],
            ];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let r = r2.sqrt();
            let k1 = c1 * r * (-(q[i] + q[j]) / 4.0).exp();
            let e = q[i] - q[j];
            let k2 = c2 / r * (-r2 / 8.0 - e * e / (8.0 * r2)).exp();
            row[j] = scale * jac * (k1 - k2) * grid.weights()[j];
        }
    }
    let basis = MacroBasis::new(state, grid);
    let mut raw_defect: f64 = 0.0;
    for chi in &basis.chi {
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let s: f64 = a[i * n..(i + 1) * n]
                .iter()
                .zip(chi)
                .map(|(x, y)| x * y)
                .sum();
            worst += grid.weights()[i] * (nu[i] * chi[i] + s).powi(2);
        }
        raw_defect = raw_defect.max(worst.sqrt());
    }
    Ok(HsOperator {
        nu,
        a,
        basis,
        raw_defect,
    })
}

/// Maxwellian whose discrete moments equal those of a slice.
#[derive(Debug, Clone)]
pub struct MaxwellianFit {
    pub values: Vec<f64>,
    pub state: FluidPoint,
    pub iterations: usize,
}

/// Fits `exp(α·φ)`, `φ = (1, ξ, |ξ|²)`, to the five discrete moments of `f`
/// by Newton iteration.
pub fn fit_maxwellian(f: &[f64], grid: &VelocityGrid) -> Result<MaxwellianFit> {
    let mut m = [0.0; 5];
    for ((v, w), x) in grid.nodes().iter().zip(grid.weights()).zip(f) {
        let a = w * x;
        m[0] += a;
        m[1] += a * v[0];
        m[2] += a * v[1];
        m[3] += a * v[2];
        m[4] += a * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    }
    if !(m[0] > 0.0) {
        return Err(HilbexError::Numerical(format!(
            "Maxwellian fit needs positive mass, got {}",
            m[0]
        )));
    }
    let rho = m[0];
    let u = [m[1] / rho, m[2] / rho, m[3] / rho];
    let t = (m[4] / rho - (u[0] * u[0] + u[1] * u[1] + u[2] * u[2])) / 3.0;
    if !(t > 0.0) {
        return Err(HilbexError::Numerical(format!(
            "Maxwellian fit needs positive temperature, got {t}"
        )));
    }
    let st = t.sqrt();
    let phi = |v: &[f64; 3]| -> [f64; 5] {
        let x = [(v[0] - u[0]) / st, (v[1] - u[1]) / st, (v[2] - u[2]) / st];
        [
            1.0,
            x[0],
            x[1],
            x[2],
            x[0] * x[0] + x[1] * x[1] + x[2] * x[2],
        ]
    };
    // Target moments in the shifted basis.
    let mut target = [0.0; 5];
    for ((v, w), x) in grid.nodes().iter().zip(grid.weights()).zip(f) {
        let p = phi(v);
        for a in 0..5 {
            target[a] += w * x * p[a];
        }
    }
    let mut alpha = [(rho * (2.0 * PI * t).powf(-1.5)).ln(), 0.0, 0.0, 0.0, -0.5];
    let phis: Vec<[f64; 5]> = grid.nodes().iter().map(phi).collect();
    let mut vals = vec![0.0; f.len()];
    let scale = target.iter().fold(0.0_f64, |s, x| s.max(x.abs()));
    let mut last = f64::INFINITY;
    for it in 0..60 {
        let mut mom = [0.0; 5];
        let mut jac = [0.0; 25];
        for ((p, w), out) in phis.iter().zip(grid.weights()).zip(vals.iter_mut()) {
            let e =
                (alpha[0] + alpha[1] * p[1] + alpha[2] * p[2] + alpha[3] * p[3] + alpha[4] * p[4])
                    .exp();
            *out = e;
            let we = w * e;
            for a in 0..5 {
                mom[a] += we * p[a];
                for b in a..5 {
                    jac[a * 5 + b] += we * p[a] * p[b];
                }
            }
        }
        for a in 0..5 {
            for b in 0..a {
                jac[a * 5 + b] = jac[b * 5 + a];
            }
        }
        let res: Vec<f64> = (0..5).map(|a| mom[a] - target[a]).collect();
        let rn = res.iter().fold(0.0_f64, |s, x| s.max(x.abs())) / scale;
        if rn < 1e-15 || (it > 3 && rn >= last) {
            let state = FluidPoint {
                rho: mom[0],
                u: [
                    u[0] - st * alpha[1] / (2.0 * alpha[4]),
                    u[1] - st * alpha[2] / (2.0 * alpha[4]),
                    u[2] - st * alpha[3] / (2.0 * alpha[4]),
                ],
                t: -t / (2.0 * alpha[4]),
            };
            if rn > 1e-10 {
                return Err(HilbexError::NoConvergence {
                    solver: "fit_maxwellian",
                    iterations: it,
                    residual: rn,
                });
            }
            return Ok(MaxwellianFit {
                values: vals,
                state,
                iterations: it,
            });
        }
        last = rn;
        let step = solve_dense(&jac, &res, 5)
            .ok_or_else(|| HilbexError::Numerical("singular Maxwellian fit Jacobian".into()))?;
        for a in 0..5 {
            alpha[a] -= step[a];
        }
    }
    Err(HilbexError::NoConvergence {
        solver: "fit_maxwellian",
        iterations: 60,
        residual: last,
    })
}

/// Second directional derivative `M''[G, H]` of the moment-matching
/// Maxwellian map at `m = M[m]`.
pub fn maxwellian_second_derivative(
    m: &[f64],
    base: &FluidPoint,
    g: &[f64],
    h: &[f64],
    grid: &VelocityGrid,
) -> Result<Vec<f64>> {
    let st = base.t.sqrt();
    let phis: Vec<[f64; 5]> = grid
        .nodes()
        .iter()
        .map(|v| {
            let x = [
                (v[0] - base.u[0]) / st,
                (v[1] - base.u[1]) / st,
                (v[2] - base.u[2]) / st,
            ];
            [
                1.0,
                x[0],
                x[1],
                x[2],
                x[0] * x[0] + x[1] * x[1] + x[2] * x[2],
            ]
        })
        .collect();
    let mut jac = [0.0; 25];
    let mut mg = [0.0; 5];
    let mut mh = [0.0; 5];
    for (i, p) in phis.iter().enumerate() {
        let w = grid.weights()[i];
        for a in 0..5 {
            mg[a] += w * g[i] * p[a];
            mh[a] += w * h[i] * p[a];
            for b in 0..5 {
                jac[a * 5 + b] += w * m[i] * p[a] * p[b];
            }
        }
    }
    let singular = || HilbexError::Numerical("singular moment Jacobian".into());
    let ag = solve_dense(&jac, &mg, 5).ok_or_else(singular)?;
    let ah = solve_dense(&jac, &mh, 5).ok_or_else(singular)?;
    let dot = |p: &[f64; 5], a: &[f64]| p.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
    let s: Vec<f64> = phis.iter().map(|p| dot(p, &ag) * dot(p, &ah)).collect();
    let mut ms = [0.0; 5];
    for (i, p) in phis.iter().enumerate() {
        let a = grid.weights()[i] * m[i] * s[i];
        for k in 0..5 {
            ms[k] += a * p[k];
        }
    }
    let a2 = solve_dense(&jac, &ms, 5).ok_or_else(singular)?;
    Ok(phis
        .iter()
        .enumerate()
        .map(|(i, p)| m[i] * (s[i] - dot(p, &a2)))
        .collect())
}

/// Hard-sphere bilinear form by angular quadrature over the hemisphere and
/// trilinear interpolation of `F / μ_ref`, followed by a conservative
/// moment correction.
fn hs_q(f1: &[f64], f2: &[f64], grid: &VelocityGrid, params: HardSphereParams) -> Result<Vec<f64>> {
    let (raw, _) = hs_q_raw(f1, f2, grid, params)?;
    conservative_correction(&raw, grid)
}

/// Uncorrected hard-sphere `Q` and the moment defect it carries.
pub fn hs_q_with_defect(
    f1: &[f64],
    f2: &[f64],
    grid: &VelocityGrid,
    params: HardSphereParams,
) -> Result<(Vec<f64>, f64)> {
    let (raw, defect) = hs_q_raw(f1, f2, grid, params)?;
    Ok((conservative_correction(&raw, grid)?, defect))
}

fn hs_q_raw(
    f1: &[f64],
    f2: &[f64],
    grid: &VelocityGrid,
    params: HardSphereParams,
) -> Result<(Vec<f64>, f64)> {
    if grid.spec().scheme != crate::velocity::GridScheme::UniformTensor {
        return Err(HilbexError::config(
            "velocity_grid.scheme",
            "hard-sphere Q needs a uniform tensor grid",
        ));
    }
    let n1 = grid.spec().n_per_axis;
    let r = grid.radius();
    let h = 2.0 * r / n1 as f64;
    let mu_ref = |v: &[f64; 3]| (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / 2.0).exp();
    let mref: Vec<f64> = grid.nodes().iter().map(mu_ref).collect();
    let g1: Vec<f64> = f1.iter().zip(&mref).map(|(f, m)| f / m).collect();
    let g2: Vec<f64> = f2.iter().zip(&mref).map(|(f, m)| f / m).collect();
    // Hemisphere nodes (cos θ ∈ (0,1)); weights doubled for the full sphere.
    let (ct, wt) = gauss_legendre(params.n_polar);
    let mut omegas = Vec::new();
    for (c, w) in ct.iter().zip(&wt) {
        let cz = 0.5 * (c + 1.0);
        let sz = (1.0 - cz * cz).sqrt();
        for k in 0..params.n_azimuth {
            let ph = 2.0 * PI * (k as f64 + 0.5) / params.n_azimuth as f64;
            omegas.push((
                [sz * ph.cos(), sz * ph.sin(), cz],
                2.0 * 0.5 * w * 2.0 * PI / params.n_azimuth as f64,
            ));
        }
    }
    // Trilinear interpolation of both factors at once.
    let interp = |v: &[f64; 3]| -> (f64, f64) {
        let mut idx = [0usize; 3];
        let mut fr = [0.0; 3];
        for a in 0..3 {
            let s = ((v[a] + r) / h - 0.5).clamp(0.0, (n1 - 1) as f64);
            let i = (s.floor() as usize).min(n1 - 2);
            idx[a] = i;
            fr[a] = s - i as f64;
        }
        let (mut a1, mut a2) = (0.0, 0.0);
        for da in 0..2 {
            let wa = if da == 0 { 1.0 - fr[0] } else { fr[0] };
            for db in 0..2 {
                let wb = wa * if db == 0 { 1.0 - fr[1] } else { fr[1] };
                let base = ((idx[0] + da) * n1 + idx[1] + db) * n1 + idx[2];
                let w0 = wb * (1.0 - fr[2]);
                let w1 = wb * fr[2];
                a1 += w0 * g1[base] + w1 * g1[base + 1];
                a2 += w0 * g2[base] + w1 * g2[base + 1];
            }
        }
        (a1, a2)
    };
    let n = grid.len();
    let nodes = grid.nodes();
    let w = grid.weights();
    let gmax = g1
        .iter()
        .chain(&g2)
        .fold(0.0_f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let cutoff = 1e-18 / (gmax * gmax);
    let mut out = vec![0.0; n];
    // Each unordered pair is visited once: swapping v and u swaps v' and u'.
    for i in 0..n {
        let v = nodes[i];
        for j in i..n {
            let pair = mref[i] * mref[j];
            if pair < cutoff {
                continue;
            }
            let u = nodes[j];
            let d = [v[0] - u[0], v[1] - u[1], v[2] - u[2]];
            let (mut gain_ij, mut gain_ji, mut bsum) = (0.0, 0.0, 0.0);
            for (om, wo) in &omegas {
                let c = d[0] * om[0] + d[1] * om[1] + d[2] * om[2];
                let b = c.abs() * wo;
                let up = [u[0] + c * om[0], u[1] + c * om[1], u[2] + c * om[2]];
                let vp = [v[0] - c * om[0], v[1] - c * om[1], v[2] - c * om[2]];
                let (g1u, g2u) = interp(&up);
                let (g1v, g2v) = interp(&vp);
                gain_ij += b * g1u * g2v;
                gain_ji += b * g1v * g2u;
                bsum += b;
            }
            out[i] += w[j] * pair * (gain_ij - bsum * g1[j] * g2[i]);
            if j != i {
                out[j] += w[i] * pair * (gain_ji - bsum * g1[i] * g2[j]);
            }
        }
    }
    let mut mom = [0.0; 5];
    for (k, v) in nodes.iter().enumerate() {
        let p = [
            1.0,
            v[0],
            v[1],
            v[2],
            v[0] * v[0] + v[1] * v[1] + v[2] * v[2],
        ];
        for a in 0..5 {
            mom[a] += w[k] * out[k] * p[a];
        }
    }
    let defect = mom.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    Ok((out, defect))
}

/// Removes the five moments of `q` along `μ_ref · span{1, v, |v|²}`.
fn conservative_correction(q: &[f64], grid: &VelocityGrid) -> Result<Vec<f64>> {
    let phis: Vec<[f64; 5]> = grid
        .nodes()
        .iter()
        .map(|v| {
            [
                1.0,
                v[0],
                v[1],
                v[2],
                v[0] * v[0] + v[1] * v[1] + v[2] * v[2],
            ]
        })
        .collect();
    let mref: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|v| (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / 2.0).exp())
        .collect();
    let mut jac = [0.0; 25];
    let mut mom = [0.0; 5];
    for (k, p) in phis.iter().enumerate() {
        let w = grid.weights()[k];
        for a in 0..5 {
            mom[a] += w * q[k] * p[a];
            for b in 0..5 {
                jac[a * 5 + b] += w * mref[k] * p[a] * p[b];
            }
        }
    }
    let c = solve_dense(&jac, &mom, 5)
        .ok_or_else(|| HilbexError::Numerical("singular correction Jacobian".into()))?;
    Ok(phis
        .iter()
        .enumerate()
        .map(|(k, p)| q[k] - mref[k] * p.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>())
        .collect())
}

/// Burnett functions `A_ij = {c_i c_j/T - δ_ij |c|²/(3T)}√μ`,
/// `B_i = c_i/(2√T) (|c|²/T - 5)√μ` with `c = v - u`.
pub fn burnett(state: &FluidPoint, grid: &VelocityGrid) -> BurnettTensors {
    let sm = sqrt_maxwellian(state, grid).values;
    let t = state.t;
    let st = t.sqrt();
    let mk = |f: &dyn Fn(&[f64; 3]) -> f64| -> KineticSlice {
        grid.slice(
            grid.nodes()
                .iter()
                .zip(&sm)
                .map(|(v, s)| f(&state.peculiar(v)) * s)
                .collect(),
        )
    };
    let a: [[KineticSlice; 3]; 3] = std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            mk(&|c: &[f64; 3]| {
                let q = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
                c[i] * c[j] / t - if i == j { q / (3.0 * t) } else { 0.0 }
            })
        })
    });
    let b: [KineticSlice; 3] = std::array::from_fn(|i| {
        mk(&|c: &[f64; 3]| {
            let q = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
            c[i] / (2.0 * st) * (q / t - 5.0)
        })
    });
    BurnettTensors { a, b }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::{build_grid, moments, GridScheme};

    fn grid() -> VelocityGrid {
        build_grid(8.0, 24, GridScheme::UniformTensor).unwrap()
    }

    #[test]
    fn bgk_frequency_is_constant() {
        let b = CollisionBackend::bgk(1.0);
        assert_eq!(
            b.collision_freq(&[3.0, 1.0, 0.0], &FluidPoint::reference()),
            1.0
        );
    }

    #[test]
    fn hard_sphere_frequency_at_rest() {
        let b = CollisionBackend::hard_sphere();
        let nu0 = b.collision_freq(&[0.0; 3], &FluidPoint::reference());
        assert!((nu0 - 4.0 * (2.0 * PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bgk_null_space_and_inverse() {
        let g = grid();
        let s = FluidPoint::new(1.1, [0.2, 0.0, -0.1], 0.9).unwrap();
        let b = CollisionBackend::bgk(2.0);
        let basis = MacroBasis::new(&s, &g);
        for chi in &basis.chi {
            let l = b.apply_l_raw(chi, &s, &g, &basis).unwrap();
            assert!(g.norm(&l) < 1e-12);
        }
        let bt = burnett(&s, &g);
        let a = basis.micro(&bt.a[0][1].values, &g);
        let inv = b.invert_l_raw(&a, &s, &g, &basis).unwrap();
        for (x, y) in inv.iter().zip(&a) {
            assert!((x - y / 2.0).abs() < 1e-15);
        }
        assert!(b.invert_l_raw(&basis.chi[0], &s, &g, &basis).is_err());
    }

    #[test]
    fn fitted_maxwellian_reproduces_moments() {
        let g = grid();
        let s = FluidPoint::new(1.3, [0.1, -0.2, 0.05], 1.2).unwrap();
        let mut f = maxwellian(&s, &g);
        let bt = burnett(&s, &g);
        f.axpy(0.05, &bt.a[0][2]);
        let fit = fit_maxwellian(&f.values, &g).unwrap();
        let m1 = moments(&f, &g).unwrap();
        let m2 = moments(&g.slice(fit.values.clone()), &g).unwrap();
        assert!(
            m1.max_diff(&m2) < 1e-13 * m1.max_abs(),
            "{}",
            m1.max_diff(&m2)
        );
        let exact = fit_maxwellian(&maxwellian(&s, &g).values, &g).unwrap();
        let m = maxwellian(&s, &g);
        for (a, b) in exact.values.iter().zip(&m.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn second_derivative_matches_finite_difference() {
        let g = grid();
        let s = FluidPoint::reference();
        let m = maxwellian(&s, &g);
        let gg = g.slice_from_fn(|v| {
            v[0] * (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / 2.0).exp() * 0.06
        });
        let d2 = maxwellian_second_derivative(&m.values, &s, &gg.values, &gg.values, &g).unwrap();
        let e = 1e-3;
        let fit = |a: f64| {
            let mut f = m.clone();
            f.axpy(a, &gg);
            fit_maxwellian(&f.values, &g).unwrap().values
        };
        let (p, z, mn) = (fit(e), fit(0.0), fit(-e));
        let mut err: f64 = 0.0;
        for i in 0..g.len() {
            let fd = (p[i] - 2.0 * z[i] + mn[i]) / (e * e);
            err = err.max((fd - d2[i]).abs());
        }
        let scale = d2.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        assert!(err < 1e-4 * scale.max(1e-12), "err {err} scale {scale}");
    }

    #[test]
    fn bgk_transport_closed_form() {
        let g = grid();
        let b = CollisionBackend::bgk(1.0);
        let tc = b.transport_coeffs(&FluidPoint::reference(), &g).unwrap();
        assert!((tc.mu - 1.0).abs() < 1e-10);
        assert!((tc.kappa - 5.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn affine_model_inverse_round_trip() {
        let g = build_grid(6.0, 12, GridScheme::UniformTensor).unwrap();
        let s = FluidPoint::reference();
        let b = CollisionBackend::new(
            BackendSpec::BgkModel {
                nu_params: NuModel::Affine { c0: 0.5 },
            },
            Tolerances::default(),
        );
        let basis = MacroBasis::new(&s, &g);
        let bt = burnett(&s, &g);
        let h = basis.micro(&bt.b[1].values, &g);
        let lh = b.apply_l_raw(&h, &s, &g, &basis).unwrap();
        let back = b.invert_l_raw(&lh, &s, &g, &basis).unwrap();
        let err: f64 = back
            .iter()
            .zip(&h)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }
}
