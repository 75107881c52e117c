//! Velocity-space discretization: grids, Maxwellians, moments and the
//! macroscopic projection `P`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{HilbexError, Result};
use crate::quad::gauss_legendre;

/// Node placement along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridScheme {
    /// Midpoint nodes on `[-R, R]` with equal weights.
    UniformTensor,
    /// Gauss–Legendre nodes scaled to `[-R, R]`.
    GaussTensor,
}

/// Serializable description of a velocity grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub radius: f64,
    pub n_per_axis: usize,
    pub scheme: GridScheme,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            radius: 8.0,
            n_per_axis: 24,
            scheme: GridScheme::UniformTensor,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<VelocityGrid> {
        build_grid(self.radius, self.n_per_axis, self.scheme)
    }
}

/// Truncated tensor-product velocity mesh with positive quadrature weights.
#[derive(Debug, Clone)]
pub struct VelocityGrid {
    id: u64,
    spec: GridSpec,
    nodes: Vec<[f64; 3]>,
    weights: Vec<f64>,
    mirror: Vec<usize>,
}

impl VelocityGrid {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn radius(&self) -> f64 {
        self.spec.radius
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of the node `(v1, v2, -v3)`.
    pub fn mirror(&self, i: usize) -> usize {
        self.mirror[i]
    }

    /// Quadrature inner product `Σ w f g`.
    pub fn dot(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    /// Quadrature `L²` norm.
    pub fn norm(&self, f: &[f64]) -> f64 {
        self.dot(f, f).max(0.0).sqrt()
    }

    /// Quadrature integral `Σ w f`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, a)| w * a).sum()
    }

    /// Slice of zeros on this grid.
    pub fn zeros(&self) -> KineticSlice {
        KineticSlice {
            values: vec![0.0; self.len()],
            grid_id: self.id,
        }
    }

    /// Slice whose value at node `v` is `f(v)`.
    pub fn slice_from_fn(&self, f: impl Fn(&[f64; 3]) -> f64) -> KineticSlice {
        KineticSlice {
            values: self.nodes.iter().map(f).collect(),
            grid_id: self.id,
        }
    }

    /// Wraps raw values after checking the length.
    pub fn slice(&self, values: Vec<f64>) -> KineticSlice {
        assert_eq!(values.len(), self.len(), "slice length does not match grid");
        KineticSlice {
            values,
            grid_id: self.id,
        }
    }

    pub fn check(&self, f: &KineticSlice) -> Result<()> {
        if f.grid_id != self.id || f.values.len() != self.len() {
            return Err(HilbexError::GridMismatch {
                expected: self.id,
                found: f.grid_id,
            });
        }
        Ok(())
    }
}

/// Builds a tensor grid symmetric under `v3 -> -v3`.
///
/// An even node count keeps `v3 = 0` off the grid, so the transport sweep
/// never divides by zero.
pub fn build_grid(radius: f64, n_per_axis: usize, scheme: GridScheme) -> Result<VelocityGrid> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(HilbexError::config(
            "radius",
            format!("must be positive, got {radius}"),
        ));
    }
    if n_per_axis < 4 || n_per_axis % 2 == 1 {
        return Err(HilbexError::config(
            "n_per_axis",
            format!(
                "must be even and at least 4, got {n_per_axis}; an odd count puts a node on the grazing set v3 = 0"
            ),
        ));
    }
    let n = n_per_axis;
    let (x, w): (Vec<f64>, Vec<f64>) = match scheme {
        GridScheme::UniformTensor => {
            let h = 2.0 * radius / n as f64;
            (
                (0..n).map(|k| -radius + (k as f64 + 0.5) * h).collect(),
                vec![h; n],
            )
        }
        GridScheme::GaussTensor => {
            let (x, w) = gauss_legendre(n);
            (
                x.iter().map(|x| x * radius).collect(),
                w.iter().map(|w| w * radius).collect(),
            )
        }
    };
    let mut nodes = Vec::with_capacity(n * n * n);
    let mut weights = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                // Force exact mirror symmetry of the third coordinate.
                let z = if k < n / 2 { x[k] } else { -x[n - 1 - k] };
                nodes.push([x[i], x[j], z]);
                weights.push(w[i] * w[j] * w[k]);
            }
        }
    }
    let mirror = (0..n * n * n)
        .map(|idx| {
            let k = idx % n;
            idx - k + (n - 1 - k)
        })
        .collect();
    let spec = GridSpec {
        radius,
        n_per_axis,
        scheme,
    };
    let tag = match scheme {
        GridScheme::UniformTensor => 1u64,
        GridScheme::GaussTensor => 2u64,
    };
    let id = radius
        .to_bits()
        .rotate_left(17)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((n as u64) << 8)
        ^ tag;
    Ok(VelocityGrid {
        id,
        spec,
        nodes,
        weights,
        mirror,
    })
}

/// Macroscopic state `(ρ, u, T)` at one space-time point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidPoint {
    pub rho: f64,
    pub u: [f64; 3],
    pub t: f64,
}

impl FluidPoint {
    pub fn new(rho: f64, u: [f64; 3], t: f64) -> Result<Self> {
        if !(rho > 0.0 && t > 0.0 && rho.is_finite() && t.is_finite()) {
            return Err(HilbexError::Precondition(format!(
                "fluid state needs rho > 0 and T > 0, got rho={rho}, T={t}"
            )));
        }
        Ok(FluidPoint { rho, u, t })
    }

    /// Global equilibrium `(1, 0, 1)`.
    pub fn reference() -> Self {
        FluidPoint {
            rho: 1.0,
            u: [0.0; 3],
            t: 1.0,
        }
    }

    pub fn pressure(&self) -> f64 {
        self.rho * self.t
    }

    /// Peculiar velocity `v - u`.
    pub fn peculiar(&self, v: &[f64; 3]) -> [f64; 3] {
        [v[0] - self.u[0], v[1] - self.u[1], v[2] - self.u[2]]
    }
}

/// Distribution values over the nodes of one velocity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticSlice {
    pub values: Vec<f64>,
    pub grid_id: u64,
}

impl KineticSlice {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, a: f64) -> KineticSlice {
        KineticSlice {
            values: self.values.iter().map(|x| a * x).collect(),
            grid_id: self.grid_id,
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &KineticSlice) {
        debug_assert_eq!(self.grid_id, other.grid_id);
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn add(&self, other: &KineticSlice) -> KineticSlice {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &KineticSlice) -> KineticSlice {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Pointwise product.
    pub fn mul(&self, other: &KineticSlice) -> KineticSlice {
        KineticSlice {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
            grid_id: self.grid_id,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

/// Mass, momentum and energy moments.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentVector {
    pub mass: f64,
    pub momentum: [f64; 3],
    pub energy: f64,
}

impl MomentVector {
    pub fn max_abs(&self) -> f64 {
        self.momentum
            .iter()
            .fold(self.mass.abs().max(self.energy.abs()), |m, x| {
                m.max(x.abs())
            })
    }

    pub fn max_diff(&self, other: &MomentVector) -> f64 {
        let mut d = (self.mass - other.mass)
            .abs()
            .max((self.energy - other.energy).abs());
        for i in 0..3 {
            d = d.max((self.momentum[i] - other.momentum[i]).abs());
        }
        d
    }
}

/// Local Maxwellian `ρ (2πT)^{-3/2} exp(-|v-u|²/(2T))` on the grid.
pub fn maxwellian(state: &FluidPoint, grid: &VelocityGrid) -> KineticSlice {
    let c = state.rho * (2.0 * PI * state.t).powf(-1.5);
    grid.slice_from_fn(|v| {
        let d = state.peculiar(v);
        c * (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (2.0 * state.t)).exp()
    })
}

/// Square root of the local Maxwellian.
pub fn sqrt_maxwellian(state: &FluidPoint, grid: &VelocityGrid) -> KineticSlice {
    let c = state.rho.sqrt() * (2.0 * PI * state.t).powf(-0.75);
    grid.slice_from_fn(|v| {
        let d = state.peculiar(v);
        c * (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (4.0 * state.t)).exp()
    })
}

/// Quadrature of `f · (1, v, |v|²/2)`.
pub fn moments(f: &KineticSlice, grid: &VelocityGrid) -> Result<MomentVector> {
    grid.check(f)?;
    let mut m = MomentVector::default();
    for ((v, w), x) in grid.nodes().iter().zip(grid.weights()).zip(&f.values) {
        let a = w * x;
        m.mass += a;
        for i in 0..3 {
            m.momentum[i] += a * v[i];
        }
        m.energy += 0.5 * a * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    }
    Ok(m)
}

/// Reflection `f(v1, v2, v3) -> f(v1, v2, -v3)`.
pub fn reflect(f: &KineticSlice, grid: &VelocityGrid) -> KineticSlice {
    KineticSlice {
        values: (0..f.len()).map(|i| f.values[grid.mirror(i)]).collect(),
        grid_id: f.grid_id,
    }
}

/// Odd part in `v3`: `(f - Rf)/2`.
pub fn odd_part(f: &KineticSlice, grid: &VelocityGrid) -> KineticSlice {
    KineticSlice {
        values: (0..f.len())
            .map(|i| 0.5 * (f.values[i] - f.values[grid.mirror(i)]))
            .collect(),
        grid_id: f.grid_id,
    }
}

/// Orthonormal basis `χ₀..χ₄` of the null space `N` at a given state.
///
/// The analytic basis is re-orthonormalized under the grid inner product, so
/// `P` is an exact orthogonal projection on the grid.
#[derive(Debug, Clone)]
pub struct MacroBasis {
    pub state: FluidPoint,
    pub chi: [Vec<f64>; 5],
}

impl MacroBasis {
    pub fn new(state: &FluidPoint, grid: &VelocityGrid) -> Self {
        let sm = sqrt_maxwellian(state, grid).values;
        let inv = 1.0 / state.rho.sqrt();
        let st = state.t.sqrt();
        let mut chi: [Vec<f64>; 5] = Default::default();
        for (a, c) in chi.iter_mut().enumerate() {
            *c = grid
                .nodes()
                .iter()
                .zip(&sm)
                .map(|(v, s)| {
                    let d = state.peculiar(v);
                    let q = match a {
                        0 => 1.0,
                        1..=3 => d[a - 1] / st,
                        _ => {
                            ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / state.t - 3.0)
                                / 6f64.sqrt()
                        }
                    };
                    q * s * inv
                })
                .collect();
        }
        // Modified Gram–Schmidt, applied twice for stability.
        for _ in 0..2 {
            for a in 0..5 {
                for b in 0..a {
                    let p = grid.dot(&chi[a], &chi[b]);
                    let (lo, hi) = chi.split_at_mut(a);
                    for (x, y) in hi[0].iter_mut().zip(&lo[b]) {
                        *x -= p * y;
                    }
                }
                let n = grid.norm(&chi[a]);
                for x in chi[a].iter_mut() {
                    *x /= n;
                }
            }
        }
        MacroBasis { state: *state, chi }
    }

    /// Coefficients `⟨g, χᵢ⟩`.
    pub fn coefficients(&self, g: &[f64], grid: &VelocityGrid) -> [f64; 5] {
        let mut c = [0.0; 5];
        for (a, chi) in self.chi.iter().enumerate() {
            c[a] = grid.dot(g, chi);
        }
        c
    }

    pub fn project(&self, g: &[f64], grid: &VelocityGrid) -> Vec<f64> {
        let c = self.coefficients(g, grid);
        let mut out = vec![0.0; g.len()];
        for (ca, chi) in c.iter().zip(&self.chi) {
            for (o, x) in out.iter_mut().zip(chi) {
                *o += ca * x;
            }
        }
        out
    }

    /// `(I - P) g`.
    pub fn micro(&self, g: &[f64], grid: &VelocityGrid) -> Vec<f64> {
        let p = self.project(g, grid);
        g.iter().zip(&p).map(|(a, b)| a - b).collect()
    }

    /// Quadrature norm of `P g`.
    pub fn macro_norm(&self, g: &[f64], grid: &VelocityGrid) -> f64 {
        self.coefficients(g, grid)
            .iter()
            .map(|c| c * c)
            .sum::<f64>()
            .sqrt()
    }
}

/// Macroscopic projection `P g` at `state`.
pub fn project_p(
    g: &KineticSlice,
    state: &FluidPoint,
    grid: &VelocityGrid,
) -> Result<KineticSlice> {
    grid.check(g)?;
    let basis = MacroBasis::new(state, grid);
    Ok(grid.slice(basis.project(&g.values, grid)))
}

/// Fluid-variable perturbation `(ρ_k, u_k, θ_k)` at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MacroCoeffs {
    pub rho: f64,
    pub u: [f64; 3],
    pub theta: f64,
}

impl MacroCoeffs {
    pub fn scaled(&self, a: f64) -> Self {
        MacroCoeffs {
            rho: a * self.rho,
            u: [a * self.u[0], a * self.u[1], a * self.u[2]],
            theta: a * self.theta,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        MacroCoeffs {
            rho: self.rho + o.rho,
            u: [self.u[0] + o.u[0], self.u[1] + o.u[1], self.u[2] + o.u[2]],
            theta: self.theta + o.theta,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.u
            .iter()
            .fold(self.rho.abs().max(self.theta.abs()), |m, x| m.max(x.abs()))
    }
}

/// The macroscopic slice
/// `{ρ_k/ρ + u_k·(v-u)/T + θ_k/(6T)(|v-u|²/T - 3)} · weight`,
/// where `weight` is `√μ` for the normalized part `f_k` and `μ` for `F_k`.
pub fn macro_slice(
    state: &FluidPoint,
    c: &MacroCoeffs,
    weight: &KineticSlice,
    grid: &VelocityGrid,
) -> KineticSlice {
    let t = state.t;
    KineticSlice {
        values: grid
            .nodes()
            .iter()
            .zip(&weight.values)
            .map(|(v, w)| {
                let d = state.peculiar(v);
                let q = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                (c.rho / state.rho
                    + (c.u[0] * d[0] + c.u[1] * d[1] + c.u[2] * d[2]) / t
                    + c.theta / (6.0 * t) * (q / t - 3.0))
                    * w
            })
            .collect(),
        grid_id: grid.id(),
    }
}

/// Reads back `(ρ_k, u_k, θ_k)` from a macroscopic `f_k` by quadrature.
pub fn macro_coeffs_of(f: &[f64], basis: &MacroBasis, grid: &VelocityGrid) -> MacroCoeffs {
    let s = basis.state;
    let c = basis.coefficients(f, grid);
    // Exact inverse only when the basis is close to analytic; good to quadrature accuracy.
    MacroCoeffs {
        rho: c[0] * s.rho.sqrt(),
        u: [
            c[1] * (s.t / s.rho).sqrt(),
            c[2] * (s.t / s.rho).sqrt(),
            c[3] * (s.t / s.rho).sqrt(),
        ],
        theta: c[4] * s.t * (6.0 / s.rho).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid16() -> VelocityGrid {
        build_grid(6.0, 16, GridScheme::UniformTensor).unwrap()
    }

    #[test]
    fn odd_counts_and_bad_radius_rejected() {
        assert!(build_grid(6.0, 15, GridScheme::UniformTensor).is_err());
        assert!(build_grid(-1.0, 16, GridScheme::UniformTensor).is_err());
        assert!(build_grid(6.0, 2, GridScheme::GaussTensor).is_err());
    }

    #[test]
    fn grid_is_mirror_symmetric() {
        for scheme in [GridScheme::UniformTensor, GridScheme::GaussTensor] {
            let g = build_grid(6.0, 16, scheme).unwrap();
            assert_eq!(g.len(), 4096);
            for i in 0..g.len() {
                let (a, b) = (g.nodes()[i], g.nodes()[g.mirror(i)]);
                assert_eq!(a[0], b[0]);
                assert_eq!(a[1], b[1]);
                assert_eq!(a[2], -b[2]);
                assert_eq!(g.weights()[i], g.weights()[g.mirror(i)]);
                assert!(a[2] != 0.0);
            }
        }
    }

    #[test]
    fn maxwellian_at_origin() {
        let g = grid16();
        let m = maxwellian(&FluidPoint::reference(), &g);
        // Node closest to the origin is not the origin; check the formula instead.
        let v = g.nodes()[0];
        let q = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        assert!((m.values[0] - (2.0 * PI).powf(-1.5) * (-q / 2.0).exp()).abs() < 1e-18);
    }

    #[test]
    fn reference_maxwellian_mass_is_one() {
        let g = grid16();
        let m = moments(&maxwellian(&FluidPoint::reference(), &g), &g).unwrap();
        assert!((m.mass - 1.0).abs() < 1e-6);
        assert!((m.energy - 1.5).abs() < 1e-6);
    }

    #[test]
    fn shifted_maxwellian_moments() {
        let g = build_grid(8.0, 24, GridScheme::UniformTensor).unwrap();
        let s = FluidPoint::new(2.0, [1.0, 0.0, 0.0], 1.0).unwrap();
        let m = moments(&maxwellian(&s, &g), &g).unwrap();
        assert!((m.mass - 2.0).abs() < 1e-6);
        assert!((m.momentum[0] - 2.0).abs() < 1e-6, "{:?}", m);
        assert!((m.energy - 4.0).abs() < 1e-6);
    }

    #[test]
    fn zero_slice_has_zero_moments() {
        let g = grid16();
        assert_eq!(moments(&g.zeros(), &g).unwrap(), MomentVector::default());
    }

    #[test]
    fn maxwellian_symmetry_depends_on_normal_drift() {
        let g = grid16();
        let tang = maxwellian(&FluidPoint::new(1.0, [0.5, 0.0, 0.0], 1.0).unwrap(), &g);
        let norm = maxwellian(&FluidPoint::new(1.0, [0.0, 0.0, 0.5], 1.0).unwrap(), &g);
        assert_eq!(reflect(&tang, &g), tang);
        assert!(reflect(&norm, &g).sub(&norm).max_abs() > 1e-3);
    }

    #[test]
    fn projection_is_idempotent_and_keeps_basis() {
        let g = grid16();
        let s = FluidPoint::new(1.2, [0.3, -0.1, 0.2], 0.9).unwrap();
        let b = MacroBasis::new(&s, &g);
        for a in 0..5 {
            for c in 0..5 {
                let d = g.dot(&b.chi[a], &b.chi[c]);
                assert!((d - if a == c { 1.0 } else { 0.0 }).abs() < 1e-13);
            }
        }
        let p2 = b.project(&b.chi[2], &g);
        for (x, y) in p2.iter().zip(&b.chi[2]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let g = grid16();
        let h = build_grid(6.0, 8, GridScheme::UniformTensor).unwrap();
        assert!(moments(&h.zeros(), &g).is_err());
    }
}
