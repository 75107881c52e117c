//! Interior expansion orders: the microscopic part of `f₂` from the
//! background flow and `F₁`, the Burnett-moment sources, and the linear
//! hyperbolic solve for `(ρ_k, u_k, θ_k)`.

use crate::collision::{burnett, CollisionBackend};
use crate::error::{HilbexError, Result};
use crate::euler::{
    solve_linear_hyperbolic_with, FluidField, HyperbolicCoefficients, PerturbationField,
    ENERGY_GROWTH_WARN,
};
use crate::velocity::{
    macro_slice, maxwellian, sqrt_maxwellian, FluidPoint, MacroBasis, MacroCoeffs, VelocityGrid,
};

/// Highest interior order with a full solver.
pub const MAX_ORDER: usize = 2;

/// Background state and its normal derivatives `∂₃(ρ, u₁, u₂, u₃, T)` at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub state: FluidPoint,
    pub d: [f64; 5],
}

/// Shared numerical context for the interior build.
#[derive(Debug, Clone, Copy)]
pub struct InteriorContext<'a> {
    pub grid: &'a VelocityGrid,
    pub backend: &'a CollisionBackend,
    /// Source moments are evaluated every `stride` levels and interpolated linearly in time.
    pub stride: usize,
    /// Warn when `max ‖(I-P) f₂‖` exceeds this.
    pub micro_bound: f64,
    pub growth_warn: f64,
}

impl<'a> InteriorContext<'a> {
    pub fn new(grid: &'a VelocityGrid, backend: &'a CollisionBackend) -> Self {
        InteriorContext {
            grid,
            backend,
            stride: 1,
            micro_bound: 1e3,
            growth_warn: ENERGY_GROWTH_WARN,
        }
    }
}

/// `v₃ ∂₃μ / √μ` on the grid.
pub fn transport_of_maxwellian(jet: &Jet, sm: &[f64], grid: &VelocityGrid) -> Vec<f64> {
    let s = &jet.state;
    let t = s.t;
    grid.nodes()
        .iter()
        .zip(sm)
        .map(|(v, m)| {
            let c = s.peculiar(v);
            let q = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
            let lin = jet.d[0] / s.rho
                + (c[0] * jet.d[1] + c[1] * jet.d[2] + c[2] * jet.d[3]) / t
                + (q / (2.0 * t) - 1.5) * jet.d[4] / t;
            v[2] * lin * m
        })
        .collect()
}

/// `(I-P) f₂` at a point with background jet `jet` and first-order macro field `f1`.
pub fn micro_f2(jet: &Jet, f1: &MacroCoeffs, ctx: &InteriorContext) -> Result<Vec<f64>> {
    let grid = ctx.grid;
    let s = &jet.state;
    let sm = sqrt_maxwellian(s, grid).values;
    let basis = MacroBasis::new(s, grid);
    let mut g: Vec<f64> = transport_of_maxwellian(jet, &sm, grid)
        .iter()
        .map(|x| -x)
        .collect();
    if f1.max_abs() > 0.0 {
        let big = macro_slice(s, f1, &maxwellian(s, grid), grid).values;
        let q = ctx.backend.q_sym(&big, &big, s, grid)?;
        for ((gi, qi), m) in g.iter_mut().zip(&q).zip(&sm) {
            *gi += 0.5 * qi / m;
        }
    }
    let g = basis.micro(&g, grid);
    ctx.backend.invert_l_raw(&g, s, grid, &basis)
}

/// The same quantity from the explicit Burnett-function formula.
pub fn micro_f2_explicit(jet: &Jet, f1: &MacroCoeffs, ctx: &InteriorContext) -> Result<Vec<f64>> {
    let grid = ctx.grid;
    let s = &jet.state;
    let t = s.t;
    let st = t.sqrt();
    let bt = burnett(s, grid);
    let basis = MacroBasis::new(s, grid);
    let n = grid.len();
    let mut src = vec![0.0; n];
    for l in 0..3 {
        for (x, a) in src.iter_mut().zip(&bt.a[2][l].values) {
            *x += jet.d[1 + l] * a;
        }
    }
    for (x, b) in src.iter_mut().zip(&bt.b[2].values) {
        *x += jet.d[4] / st * b;
    }
    let src = basis.micro(&src, grid);
    let mut out: Vec<f64> = ctx
        .backend
        .invert_l_raw(&src, s, grid, &basis)?
        .iter()
        .map(|x| -x)
        .collect();
    let u1 = f1.u;
    let th = f1.theta;
    for l in 0..3 {
        for j in 0..3 {
            let c = u1[l] * u1[j] / (2.0 * t);
            for (x, a) in out.iter_mut().zip(&bt.a[l][j].values) {
                *x += c * a;
            }
        }
        let c = th / (3.0 * t * st) * u1[l];
        for (x, b) in out.iter_mut().zip(&bt.b[l].values) {
            *x += c * b;
        }
    }
    let sm = sqrt_maxwellian(s, grid).values;
    let quad: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(&sm)
        .map(|(v, m)| {
            let c = s.peculiar(v);
            let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) / t - 5.0;
            r * r * m
        })
        .collect();
    let c = th * th / (72.0 * t * t);
    for (x, q) in out.iter_mut().zip(basis.micro(&quad, grid)) {
        *x += c * q;
    }
    Ok(out)
}

/// Normal fluxes `(T⟨A₁₃,f⟩, T⟨A₂₃,f⟩, T⟨A₃₃,f⟩, 2T^{3/2}⟨B₃,f⟩ + Σ 2u_j T⟨A₃ⱼ,f⟩)`.
pub fn source_moments(state: &FluidPoint, f: &[f64], grid: &VelocityGrid) -> [f64; 4] {
    let t = state.t;
    let sm = sqrt_maxwellian(state, grid).values;
    let mut acc = [0.0; 4];
    for ((v, w), (x, m)) in grid
        .nodes()
        .iter()
        .zip(grid.weights())
        .zip(f.iter().zip(&sm))
    {
        let a = w * x * m;
        if a == 0.0 {
            continue;
        }
        let c = state.peculiar(v);
        let q = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) / t;
        acc[0] += a * c[0] * c[2];
        acc[1] += a * c[1] * c[2];
        acc[2] += a * (c[2] * c[2] - q * t / 3.0);
        acc[3] += a * c[2] * (q - 5.0);
    }
    let m = [acc[0], acc[1], acc[2]];
    let q = t * acc[3] + 2.0 * (state.u[0] * m[0] + state.u[1] * m[1] + state.u[2] * m[2]);
    [m[0], m[1], m[2], q]
}

/// Source moments of a microscopic field at sampled levels.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroMoments {
    /// Levels at which the moments were evaluated; always includes the last level.
    pub levels: Vec<usize>,
    pub values: Vec<Vec<[f64; 4]>>,
    /// Largest quadrature norm of the microscopic field.
    pub max_norm: f64,
}

impl MicroMoments {
    /// Moments at `level`, linear in time between sampled levels.
    pub fn at(&self, level: usize) -> Vec<[f64; 4]> {
        let k = match self.levels.binary_search(&level) {
            Ok(k) => return self.values[k].clone(),
            Err(k) => k,
        };
        let (a, b) = (self.levels[k - 1], self.levels[k]);
        let w = (level - a) as f64 / (b - a) as f64;
        self.values[k - 1]
            .iter()
            .zip(&self.values[k])
            .map(|(x, y)| std::array::from_fn(|c| (1.0 - w) * x[c] + w * y[c]))
            .collect()
    }
}

/// Background jet at node `j` of level `level`.
pub fn jet_at(euler: &FluidField, level: usize, j: usize, derivs: &[Vec<f64>; 5]) -> Jet {
    Jet {
        state: euler.levels[level][j],
        d: std::array::from_fn(|c| derivs[c][j]),
    }
}

/// `∂₃(ρ, u, T)` at every node of one level.
pub fn level_derivatives(euler: &FluidField, level: usize) -> [Vec<f64>; 5] {
    std::array::from_fn(|c| euler.grid.derivative(&euler.component(level, c)))
}

/// One interior order: its macroscopic coefficients and, for `k = 1`, the
/// source moments of the microscopic part of `f₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteriorOrder {
    pub k: usize,
    pub field: PerturbationField,
    pub d: Vec<f64>,
    /// Per level and node `(𝔣₁, 𝔣₂, 𝔣₃, 𝔤)` that drove this order.
    pub sources: Vec<Vec<[f64; 4]>>,
    pub micro_next: Option<MicroMoments>,
    pub warnings: Vec<String>,
}

/// Solves interior order `k = prev.len() + 1` with wall datum `d_k` and initial data `init_k`.
pub fn build_interior_order(
    euler: &FluidField,
    prev: &[InteriorOrder],
    d_k: &[f64],
    init_k: &[MacroCoeffs],
    ctx: &InteriorContext,
) -> Result<InteriorOrder> {
    let k = prev.len() + 1;
    if k > MAX_ORDER {
        return Err(HilbexError::config(
            "order",
            format!("interior orders above {MAX_ORDER} are not supported"),
        ));
    }
    if ctx.stride == 0 {
        return Err(HilbexError::config("source_stride", "must be at least 1"));
    }
    let nl = euler.n_levels();
    let nx = euler.grid.len();
    let mut warnings = Vec::new();
    let sources: Vec<Vec<[f64; 4]>> = match prev.last().and_then(|p| p.micro_next.as_ref()) {
        None => vec![vec![[0.0; 4]; nx]; nl],
        Some(mm) => (0..nl)
            .map(|n| sources_from_moments(euler, n, &mm.at(n)))
            .collect(),
    };
    let coeffs = HyperbolicCoefficients {
        sources: sources.clone(),
        d: d_k.to_vec(),
        init: init_k.to_vec(),
        lift_scale: 1.0,
    };
    let field =
        solve_linear_hyperbolic_with(euler, &coeffs, euler.grid.horizon(), ctx.growth_warn)?;
    warnings.extend(field.warnings.iter().cloned());
    let micro_next = if k == 1 {
        let mm = f2_moments(euler, &field, ctx)?;
        if mm.max_norm > ctx.micro_bound {
            warnings.push(format!(
                "microscopic part of f2 has norm {:.3e} above the bound {:.3e}",
                mm.max_norm, ctx.micro_bound
            ));
        }
        Some(mm)
    } else {
        None
    };
    Ok(InteriorOrder {
        k,
        field,
        d: d_k.to_vec(),
        sources,
        micro_next,
        warnings,
    })
}

/// `𝔣_i = -∂₃ m_i`, `𝔤 = -∂₃ q - 2u·𝔣` at one level.
fn sources_from_moments(euler: &FluidField, level: usize, m: &[[f64; 4]]) -> Vec<[f64; 4]> {
    let g = &euler.grid;
    let d: [Vec<f64>; 4] =
        std::array::from_fn(|c| g.derivative(&m.iter().map(|x| x[c]).collect::<Vec<_>>()));
    euler.levels[level]
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let f = [-d[0][j], -d[1][j], -d[2][j]];
            [
                f[0],
                f[1],
                f[2],
                -d[3][j] - 2.0 * (p.u[0] * f[0] + p.u[1] * f[1] + p.u[2] * f[2]),
            ]
        })
        .collect()
}

/// Relative size below which a node's inputs are treated as exactly zero.
const NEGLIGIBLE: f64 = 1e-15;

fn f2_moments(
    euler: &FluidField,
    f1: &PerturbationField,
    ctx: &InteriorContext,
) -> Result<MicroMoments> {
    let nl = euler.n_levels();
    let mut levels: Vec<usize> = (0..nl).step_by(ctx.stride).collect();
    if *levels.last().unwrap() != nl - 1 {
        levels.push(nl - 1);
    }
    let mut values = Vec::with_capacity(levels.len());
    let mut max_norm: f64 = 0.0;
    for &n in &levels {
        let derivs = level_derivatives(euler, n);
        let mut row = Vec::with_capacity(euler.grid.len());
        for j in 0..euler.grid.len() {
            let jet = jet_at(euler, n, j, &derivs);
            let c = &f1.levels[n][j];
            let size = jet.d.iter().fold(c.max_abs(), |m, x| m.max(x.abs()));
            if size < NEGLIGIBLE {
                row.push([0.0; 4]);
                continue;
            }
            let f = micro_f2(&jet, c, ctx)?;
            max_norm = max_norm.max(ctx.grid.norm(&f));
            row.push(source_moments(&jet.state, &f, ctx.grid));
        }
        values.push(row);
    }
    Ok(MicroMoments {
        levels,
        values,
        max_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::euler::{solve_euler, PerturbationSpec, SpatialGrid, SpatialGridSpec};
    use crate::velocity::{build_grid, GridScheme};

    fn vgrid() -> VelocityGrid {
        build_grid(8.0, 24, GridScheme::UniformTensor).unwrap()
    }

    fn jet() -> Jet {
        Jet {
            state: FluidPoint::new(1.1, [0.2, -0.1, 0.05], 0.9).unwrap(),
            d: [0.3, -0.4, 0.2, 0.5, 0.7],
        }
    }

    #[test]
    fn generic_f2_matches_explicit_formula() {
        let g = vgrid();
        let b = CollisionBackend::bgk(1.0);
        let ctx = InteriorContext::new(&g, &b);
        let f1 = MacroCoeffs {
            rho: 0.2,
            u: [0.3, -0.2, 0.1],
            theta: 0.4,
        };
        let a = micro_f2(&jet(), &f1, &ctx).unwrap();
        let e = micro_f2_explicit(&jet(), &f1, &ctx).unwrap();
        let diff = a
            .iter()
            .zip(&e)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff:e}");
        let basis = MacroBasis::new(&jet().state, &g);
        assert!(basis.macro_norm(&a, &g) < 1e-10);
    }

    #[test]
    fn f2_vanishes_for_constant_flow() {
        let g = vgrid();
        let b = CollisionBackend::bgk(1.0);
        let ctx = InteriorContext::new(&g, &b);
        let j = Jet {
            state: FluidPoint::reference(),
            d: [0.0; 5],
        };
        let f = micro_f2(&j, &MacroCoeffs::default(), &ctx).unwrap();
        assert!(f.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn navier_stokes_fluxes_from_f2() {
        // Without F₁ the shear moment is -μ ∂₃u₁ and the heat moment -3κ ∂₃T.
        let g = vgrid();
        let b = CollisionBackend::bgk(2.0);
        let ctx = InteriorContext::new(&g, &b);
        let mut j = jet();
        j.state.u = [0.0; 3];
        let f = micro_f2(&j, &MacroCoeffs::default(), &ctx).unwrap();
        let m = source_moments(&j.state, &f, &g);
        let tc = b.transport_coeffs(&j.state, &g).unwrap();
        assert!(
            (m[0] + tc.mu * j.d[1]).abs() < 1e-9,
            "{} {}",
            m[0],
            -tc.mu * j.d[1]
        );
        assert!(
            (m[3] + 3.0 * tc.kappa * j.d[4]).abs() < 1e-8 * tc.kappa,
            "{} {}",
            m[3],
            -3.0 * tc.kappa * j.d[4]
        );
    }

    #[test]
    fn constant_background_zero_init_gives_zero_order() {
        let g = vgrid();
        let b = CollisionBackend::bgk(1.0);
        let ctx = InteriorContext::new(&g, &b);
        let spec = SpatialGridSpec {
            h_min: 0.05,
            h_max: 0.1,
            ..Default::default()
        };
        let sg = SpatialGrid::build(&spec, 1.3, 0.1).unwrap();
        let e = solve_euler(&PerturbationSpec::default(), 0.0, 0.1, &sg).unwrap();
        let nl = e.n_levels();
        let o = build_interior_order(
            &e,
            &[],
            &vec![0.0; nl],
            &vec![MacroCoeffs::default(); sg.len()],
            &ctx,
        )
        .unwrap();
        assert_eq!(o.field.max_abs(), 0.0);
        let mm = o.micro_next.unwrap();
        assert!(mm.values.iter().all(|r| r.iter().all(|x| *x == [0.0; 4])));
    }

    #[test]
    fn order_three_is_rejected() {
        let g = vgrid();
        let b = CollisionBackend::bgk(1.0);
        let ctx = InteriorContext::new(&g, &b);
        let sg = SpatialGrid::build(
            &SpatialGridSpec {
                h_min: 0.05,
                h_max: 0.1,
                ..Default::default()
            },
            1.3,
            0.05,
        )
        .unwrap();
        let e = crate::euler::FluidField::constant(&sg);
        let nl = e.n_levels();
        let z = vec![MacroCoeffs::default(); sg.len()];
        let o1 = build_interior_order(&e, &[], &vec![0.0; nl], &z, &ctx).unwrap();
        let o2 =
            build_interior_order(&e, std::slice::from_ref(&o1), &vec![0.0; nl], &z, &ctx).unwrap();
        assert!(o2.micro_next.is_none());
        let err = build_interior_order(&e, &[o1, o2], &vec![0.0; nl], &z, &ctx).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn moment_interpolation_is_linear() {
        let mm = MicroMoments {
            levels: vec![0, 4],
            values: vec![vec![[0.0; 4]], vec![[4.0, 8.0, 0.0, 1.0]]],
            max_norm: 0.0,
        };
        assert_eq!(mm.at(1)[0], [1.0, 2.0, 0.0, 0.25]);
        assert_eq!(mm.at(4)[0], [4.0, 8.0, 0.0, 1.0]);
    }
}
