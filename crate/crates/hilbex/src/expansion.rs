//! Order-by-order construction of the truncated expansion.
//!
//! Each order is built as interior coefficients, then the viscous layer
//! with Neumann data from the wall matching, then the Knudsen layer driven
//! by whatever specular mismatch is left. The composite field and its
//! defect in the scaled equation are evaluated from the stored bundles.

use serde::{Deserialize, Serialize};

use crate::cli_io::{fit_slope, SlopeFit};
use crate::collision::{BackendSpec, CollisionBackend, Tolerances};
use crate::error::{HilbexError, Result};
use crate::euler::{
    cutoff, euler_grid, solve_acoustic, solve_euler, taylor_wall_coeffs, time_derivative,
    FluidField, PerturbationSpec, SpatialGridSpec, SpatialMode, Spline,
};
use crate::interior::{build_interior_order, micro_f2, InteriorContext, InteriorOrder, Jet};
use crate::knudsen::{
    assemble_knudsen_source, boundary_mismatch, solve_halfspace, EtaGridSpec, HalfSpaceProblem,
    KnudsenSettings, KnudsenSolution, KnudsenSourceInputs,
};
use crate::layer::{
    compatible_init, derive_normal_velocity, derive_pressure, interpolate_neumann, jbar1,
    micro_part, neumann_from_matching, pressure_rhs, solve_layer_parabolic, wall_moments, JbarNode,
    LayerContext, LayerField, LayerGrid, LayerGridSpec, LayerPoint, LayerProblem, LayerWall,
    MatchingInputs, WallKinetics, WallTaylor,
};
use crate::quad::trapezoid;
use crate::velocity::{macro_slice, maxwellian, FluidPoint, GridSpec, MacroCoeffs, VelocityGrid};

/// Highest order the pipeline builds.
pub const MAX_ORDER: usize = 2;

/// Where and how the defect is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorSpec {
    /// Cells left out next to the wall.
    pub wall_collar: usize,
    /// Cells left out at the far end.
    pub outer_cells: usize,
    /// Number of sampled time levels, spread evenly inside the horizon.
    pub n_times: usize,
    /// Step of the centred difference in `x₃`.
    pub fd_step: f64,
    /// Keep every `node_stride`-th node of the monitored region.
    pub node_stride: usize,
}

impl Default for MonitorSpec {
    fn default() -> Self {
        MonitorSpec {
            wall_collar: 2,
            outer_cells: 2,
            n_times: 3,
            fd_step: 1e-6,
            node_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionConfig {
    /// Highest expansion order `N`.
    pub order: usize,
    /// Taylor order `𝔟` of the wall expansions in the layer.
    pub taylor_order: usize,
    pub epsilons: Vec<f64>,
    /// Amplitude of the Euler initial perturbation.
    pub delta: f64,
    pub horizon: f64,
    pub init: PerturbationSpec,
    /// Initial `(ρ₁, u₁, θ₁)` of the first interior order, sampled at `δ = 0`.
    pub order1_init: PerturbationSpec,
    pub spatial_grid: SpatialGridSpec,
    pub velocity_grid: GridSpec,
    pub backend: BackendSpec,
    pub tolerances: Tolerances,
    pub layer_grid: LayerGridSpec,
    pub eta_grid: EtaGridSpec,
    pub knudsen: KnudsenSettings,
    /// Kinetic layer terms and interior micro moments are sampled every
    /// `source_stride` levels and interpolated linearly in time.
    pub source_stride: usize,
    /// Levels, evenly spread, at which the Knudsen problems are reported.
    pub knudsen_levels: usize,
    pub tol_match: f64,
    pub monitor: MonitorSpec,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            order: 2,
            taylor_order: 2,
            epsilons: vec![0.1, 0.05, 0.025],
            delta: 0.1,
            horizon: 0.25,
            init: PerturbationSpec::default(),
            order1_init: PerturbationSpec::zero(),
            spatial_grid: SpatialGridSpec::default(),
            velocity_grid: GridSpec::default(),
            backend: BackendSpec::default(),
            tolerances: Tolerances::default(),
            layer_grid: LayerGridSpec::default(),
            eta_grid: EtaGridSpec::default(),
            knudsen: KnudsenSettings::default(),
            source_stride: 8,
            knudsen_levels: 3,
            tol_match: 1e-6,
            monitor: MonitorSpec::default(),
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(HilbexError::config(f, r));
        if !(1..=MAX_ORDER).contains(&self.order) {
            return bad("order", "supported orders are 1 and 2");
        }
        if !(1..=2).contains(&self.taylor_order) {
            return bad("taylor_order", "supported Taylor orders are 1 and 2");
        }
        if self.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return bad("epsilons", "values must be positive");
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return bad("epsilons", "values must be strictly decreasing");
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return bad("delta", "must be finite and nonnegative");
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad("horizon", "must be positive");
        }
        self.init.validate().map_err(|e| e.within("init"))?;
        self.order1_init
            .validate()
            .map_err(|e| e.within("order1_init"))?;
        if self.spatial_grid.mode != SpatialMode::Slab1d {
            return bad(
                "spatial_grid.mode",
                "the expansion pipeline runs in slab-1d mode",
            );
        }
        self.velocity_grid
            .build()
            .map_err(|e| e.within("velocity_grid"))?;
        self.layer_grid.validate()?;
        self.eta_grid.validate()?;
        self.knudsen.validate()?;
        if self.source_stride == 0 {
            return bad("source_stride", "must be at least 1");
        }
        if self.knudsen_levels == 0 {
            return bad("knudsen_levels", "must be at least 1");
        }
        if !(self.tol_match > 0.0) {
            return bad("tol_match", "must be positive");
        }
        let m = &self.monitor;
        if !(m.fd_step > 0.0 && m.fd_step < 1e-3) {
            return bad("monitor.fd_step", "must lie in (0, 1e-3)");
        }
        if m.n_times == 0 || m.node_stride == 0 {
            return bad("monitor", "n_times and node_stride must be positive");
        }
        Ok(())
    }
}

/// `ū_{k,3}`, `ρ̄_k` and `p̄_k` on the layer grid at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDerived {
    pub u3: Vec<Vec<f64>>,
    /// `∂_y ū_{k,3}` at the wall.
    pub u3_slope: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    /// Largest far-field tail estimate of the normal-velocity integral.
    pub tail: f64,
}

impl LayerDerived {
    fn max_of(f: &[Vec<f64>]) -> f64 {
        f.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Scalar diagnostics of one order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub k: usize,
    pub interior_max: f64,
    pub interior_energy_growth: f64,
    /// Largest interior normal velocity at the wall.
    pub wall_datum_max: f64,
    pub layer_max: f64,
    pub layer_stability: f64,
    pub layer_contamination: f64,
    pub neumann_max: f64,
    pub neumann_residual: f64,
    pub normal_velocity_max: f64,
    pub normal_velocity_tail: f64,
    pub pressure_max: f64,
    /// Largest specular mismatch of `f_k + f̄_k + f̂_k` at the wall.
    pub wall_mismatch: f64,
    pub solvability_moments: [f64; 4],
    pub solvability_micro: f64,
    pub knudsen_max: f64,
    pub knudsen_residual: f64,
    pub knudsen_zeta: Vec<Option<f64>>,
    /// Order 1: largest `|∫v₃F̄₁|` and `|p̄₁|` read back from the kinetic slices.
    pub boussinesq_kinetic: Option<[f64; 2]>,
    /// Order 1: largest gap between the Neumann data and `(−∂₃u⁰∥, −3∂₃T⁰)`.
    pub neumann_formula_gap: Option<f64>,
    pub warnings: Vec<String>,
}

/// Interior, viscous-layer and Knudsen parts of one order.
#[derive(Debug, Clone)]
pub struct OrderBundle {
    pub k: usize,
    pub interior: InteriorOrder,
    pub layer: LayerField,
    pub derived: LayerDerived,
    /// `f̂_k` at `Expansion::knudsen_levels`.
    pub knudsen: Vec<KnudsenSolution>,
    pub report: OrderReport,
}

/// All orders built from one configuration.
#[derive(Debug)]
pub struct Expansion {
    pub config: ExpansionConfig,
    pub vgrid: VelocityGrid,
    pub backend: CollisionBackend,
    pub euler: FluidField,
    pub layer_grid: LayerGrid,
    pub eta: Vec<f64>,
    pub taylor: Vec<WallTaylor>,
    pub walls: Vec<LayerWall>,
    /// `(I-P) f₂` at the wall per level.
    pub wall_micro_f2: Vec<Vec<f64>>,
    pub knudsen_levels: Vec<usize>,
    pub bundles: Vec<OrderBundle>,
    pub warnings: Vec<String>,
}

/// Levels strictly inside the horizon at which the defect is sampled.
pub fn sample_levels(n_levels: usize, n_times: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=n_times)
        .map(|i| ((i as f64) * (n_levels - 1) as f64 / (n_times + 1) as f64).round() as usize)
        .map(|n| n.clamp(1, n_levels - 2))
        .collect();
    out.dedup();
    out
}

fn report_levels(n_levels: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![n_levels - 1];
    }
    let mut out: Vec<usize> = (0..count)
        .map(|i| ((i as f64) * (n_levels - 1) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Three levels, difference weights and the position of `n` among them.
fn time_stencil(n: usize, n_levels: usize, dt: f64) -> ([usize; 3], [f64; 3], usize) {
    let h = 0.5 / dt;
    if n == 0 {
        ([0, 1, 2], [-3.0 * h, 4.0 * h, -h], 0)
    } else if n == n_levels - 1 {
        ([n - 2, n - 1, n], [h, -4.0 * h, 3.0 * h], 2)
    } else {
        ([n - 1, n, n + 1], [-h, 0.0, h], 1)
    }
}

/// `sup_v |b(v) − b(Rv)|`.
pub fn specular_mismatch(b: &[f64], grid: &VelocityGrid) -> f64 {
    (0..grid.len())
        .map(|v| (b[v] - b[grid.mirror(v)]).abs())
        .fold(0.0, f64::max)
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn macro_of(c: &[f64; 5]) -> MacroCoeffs {
    MacroCoeffs {
        rho: c[0],
        u: [c[1], c[2], c[3]],
        theta: c[4],
    }
}

fn push_unique(warnings: &mut Vec<String>, w: String) {
    if !warnings.contains(&w) {
        warnings.push(w);
    }
}

impl Expansion {
    /// Solves the Euler background and builds orders `1..=N`.
    pub fn build(config: &ExpansionConfig) -> Result<Self> {
        config.validate()?;
        let sg = euler_grid(
            &config.spatial_grid,
            &config.init,
            config.delta,
            config.horizon,
        )?;
        let euler = solve_euler(&config.init, config.delta, config.horizon, &sg)?;
        Self::from_euler(config, euler)
    }

    /// Builds orders `1..=N` on a given background.
    pub fn from_euler(config: &ExpansionConfig, euler: FluidField) -> Result<Self> {
        config.validate()?;
        let nl = euler.n_levels();
        if nl < 3 {
            return Err(HilbexError::config(
                "horizon",
                "need at least two time steps",
            ));
        }
        let vgrid = config.velocity_grid.build()?;
        let backend = CollisionBackend::new(config.backend, config.tolerances);
        let layer_grid = LayerGrid::build(&config.layer_grid, euler.grid.dt, euler.grid.n_steps)?;
        let eta = config.eta_grid.build()?;
        let mut knudsen_levels = report_levels(nl, config.knudsen_levels);
        if config.order >= 2 && !config.epsilons.is_empty() {
            for n in sample_levels(nl, config.monitor.n_times) {
                knudsen_levels.extend([n - 1, n, n + 1]);
            }
        }
        knudsen_levels.sort_unstable();
        knudsen_levels.dedup();
        let mut exp = Expansion {
            config: config.clone(),
            vgrid,
            backend,
            euler,
            layer_grid,
            eta,
            taylor: Vec::new(),
            walls: Vec::new(),
            wall_micro_f2: Vec::new(),
            knudsen_levels,
            bundles: Vec::new(),
            warnings: Vec::new(),
        };
        exp.background_taylor()?;
        exp.build_order1()?;
        if config.order >= 2 {
            exp.build_order2()?;
        }
        Ok(exp)
    }

    pub fn n_levels(&self) -> usize {
        self.euler.n_levels()
    }

    fn interior_ctx(&self) -> InteriorContext<'_> {
        let mut ctx = InteriorContext::new(&self.vgrid, &self.backend);
        // Order 1 alone never uses the micro moments of f₂.
        ctx.stride = if self.config.order == 1 {
            self.n_levels() - 1
        } else {
            self.config.source_stride
        };
        ctx
    }

    fn layer_ctx(&self) -> LayerContext<'_> {
        LayerContext {
            grid: &self.vgrid,
            backend: &self.backend,
        }
    }

    /// Wall Taylor data of the background and the layer coefficients.
    fn background_taylor(&mut self) -> Result<()> {
        let x = &self.euler.grid.x;
        let mut warnings = Vec::new();
        let mut taylor = Vec::with_capacity(self.n_levels());
        let mut walls = Vec::with_capacity(self.n_levels());
        for n in 0..self.n_levels() {
            let mut tay = WallTaylor::default();
            for c in 0..5 {
                let (co, w) = taylor_wall_coeffs(x, &self.euler.component(n, c), 2)?;
                tay.background[c] = [co[0], co[1], 2.0 * co[2]];
                if let Some(w) = w {
                    push_unique(&mut warnings, format!("background component {c}: {w}"));
                }
            }
            let state = tay.state()?;
            let tc = self.backend.transport_coeffs(&state, &self.vgrid)?;
            let a = tay.background[3][1];
            walls.push(LayerWall {
                rho: state.rho,
                t: state.t,
                mu: tc.mu,
                kappa: tc.kappa,
                drift_slope: a,
                drift_offset: 0.0,
                reaction: [0.0, 0.0, 2.0 / 3.0 * state.rho * a],
                coupling: [0.0; 2],
            });
            taylor.push(tay);
        }
        self.taylor = taylor;
        self.walls = walls;
        self.warnings.extend(warnings);
        Ok(())
    }

    fn set_order_taylor(&mut self, k: usize, field: &InteriorOrder) -> Result<()> {
        let x = self.euler.grid.x.clone();
        for n in 0..self.n_levels() {
            for c in 0..5 {
                let f = field.field.component(n, c);
                if k == 1 {
                    let (co, w) = taylor_wall_coeffs(&x, &f, 1)?;
                    self.taylor[n].order1[c] = [co[0], co[1]];
                    if let Some(w) = w {
                        push_unique(&mut self.warnings, format!("order-1 component {c}: {w}"));
                    }
                } else {
                    self.taylor[n].order2[c] = f[0];
                }
            }
            if k == 1 {
                self.walls[n].drift_offset = self.taylor[n].order1[3][0];
            }
        }
        Ok(())
    }

    fn wall_kinetics(&self, n: usize) -> Result<WallKinetics> {
        let mf = self.wall_micro_f2.get(n).map(|v| v.as_slice());
        WallKinetics::new(&self.taylor[n], mf, &self.vgrid)
    }

    /// Order-1 layer coefficients `(ρ̄₁, ū₁, 0, θ̄₁)` and their `y`-derivatives at every node.
    fn layer1_points(&self, n: usize) -> Vec<LayerPoint> {
        let b = &self.bundles[0];
        let lg = &self.layer_grid;
        let comps: [Vec<f64>; 4] = [
            b.derived.rho[n].clone(),
            b.layer.component(n, 0),
            b.layer.component(n, 1),
            b.layer.component(n, 2),
        ];
        let d: [Vec<f64>; 4] = std::array::from_fn(|c| lg.derivative(&comps[c]));
        (0..lg.len())
            .map(|j| LayerPoint {
                y: lg.y[j],
                c: macro_of(&[comps[0][j], comps[1][j], comps[2][j], 0.0, comps[3][j]]),
                dc: macro_of(&[d[0][j], d[1][j], d[2][j], 0.0, d[3][j]]),
            })
            .collect()
    }

    /// Normalized wall slices of order `k` without the Knudsen part.
    fn wall_brackets(&self, k: usize, n: usize, wk: &WallKinetics) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = &self.vgrid;
        let b = &self.bundles[k - 1];
        let lv = &b.layer.levels[n][0];
        if k == 1 {
            let f = wk.small_macro(&self.taylor[n].order1_coeffs(), g);
            let fb = wk.small_macro(
                &macro_of(&[b.derived.rho[n][0], lv[0], lv[1], b.derived.u3[n][0], lv[2]]),
                g,
            );
            return Ok((f, fb));
        }
        let f = add(
            &wk.small_macro(&self.taylor[n].order2_coeffs(), g),
            &self.wall_micro_f2[n],
        );
        let p = self.layer1_points(n)[0];
        let micro = micro_part(wk, &p, &self.layer_ctx())?;
        let fb = add(
            &wk.small_macro(
                &macro_of(&[b.derived.rho[n][0], lv[0], lv[1], b.derived.u3[n][0], lv[2]]),
                g,
            ),
            &micro,
        );
        Ok((f, fb))
    }

    /// Solves the order-`k` Knudsen problem at every reported level.
    fn knudsen_order(&self, k: usize, report: &mut OrderReport) -> Result<Vec<KnudsenSolution>> {
        let g = &self.vgrid;
        let mut out = Vec::with_capacity(self.knudsen_levels.len());
        for (i, &n) in self.knudsen_levels.iter().enumerate() {
            let wk = self.wall_kinetics(n)?;
            let (f, fb) = self.wall_brackets(k, n, &wk)?;
            let mut problem = HalfSpaceProblem::zero(wk.state, self.eta.clone(), g);
            problem.f_b = boundary_mismatch(&f, &fb, None, g);
            if k == 2 {
                let b1 = &self.bundles[0];
                let lv = &b1.layer.levels[n][0];
                let fbar1 = wk.big_macro(
                    &macro_of(&[b1.derived.rho[n][0], lv[0], lv[1], 0.0, lv[2]]),
                    g,
                );
                let f1 = add(&wk.f1, &fbar1);
                let split = assemble_knudsen_source(
                    &KnudsenSourceInputs {
                        k,
                        wall_state: wk.state,
                        eta: &self.eta,
                        f1_wall: Some(&f1),
                        fhat1: Some(&b1.knudsen[i]),
                    },
                    &self.backend,
                    g,
                )?;
                problem.source = split.micro_part;
            }
            let sol = solve_halfspace(&problem, &self.backend, g, &self.config.knudsen)?;
            let total: Vec<f64> = (0..g.len()).map(|v| f[v] + fb[v] + sol.wall()[v]).collect();
            report.wall_mismatch = report.wall_mismatch.max(specular_mismatch(&total, g));
            let r = &sol.report;
            for c in 0..4 {
                report.solvability_moments[c] =
                    report.solvability_moments[c].max(r.moment_defects[c].abs());
            }
            report.solvability_micro = report.solvability_micro.max(r.micro_defect);
            report.knudsen_max = report.knudsen_max.max(sol.max_abs());
            report.knudsen_residual = report.knudsen_residual.max(r.residual);
            report.knudsen_zeta.push(r.zeta);
            out.push(sol);
        }
        if report.wall_mismatch > self.config.tol_match {
            report.warnings.push(format!(
                "order {k}: wall mismatch {:.3e} above tol_match",
                report.wall_mismatch
            ));
        }
        Ok(out)
    }

    fn empty_report(
        k: usize,
        interior: &InteriorOrder,
        layer: &LayerField,
        derived: &LayerDerived,
    ) -> OrderReport {
        OrderReport {
            k,
            interior_max: interior.field.max_abs(),
            interior_energy_growth: interior.field.energy_growth,
            wall_datum_max: interior.d.iter().fold(0.0, |m, x| m.max(x.abs())),
            layer_max: layer.max_abs(),
            layer_stability: layer.stability,
            layer_contamination: layer.contamination,
            neumann_max: layer.neumann.iter().fold(0.0, |m, x| m.max(x.max_abs())),
            neumann_residual: layer.neumann_residual(),
            normal_velocity_max: LayerDerived::max_of(&derived.u3),
            normal_velocity_tail: derived.tail,
            pressure_max: LayerDerived::max_of(&derived.p),
            wall_mismatch: 0.0,
            solvability_moments: [0.0; 4],
            solvability_micro: 0.0,
            knudsen_max: 0.0,
            knudsen_residual: 0.0,
            knudsen_zeta: Vec::new(),
            boussinesq_kinetic: None,
            neumann_formula_gap: None,
            warnings: interior
                .warnings
                .iter()
                .chain(&layer.warnings)
                .cloned()
                .collect(),
        }
    }

    fn build_order1(&mut self) -> Result<()> {
        let nl = self.n_levels();
        let g = self.vgrid.clone();
        let init: Vec<MacroCoeffs> = self
            .euler
            .grid
            .x
            .iter()
            .map(|&x| macro_of(&self.config.order1_init.sample(x, 0.0)))
            .collect();
        let interior = build_interior_order(
            &self.euler,
            &[],
            &vec![0.0; nl],
            &init,
            &self.interior_ctx(),
        )?;
        self.set_order_taylor(1, &interior)?;
        let ictx = self.interior_ctx();
        let mut wall_f2 = Vec::with_capacity(nl);
        for tay in &self.taylor {
            let b = &tay.background;
            let jet = Jet {
                state: tay.state()?,
                d: std::array::from_fn(|c| b[c][1]),
            };
            wall_f2.push(micro_f2(&jet, &tay.order1_coeffs(), &ictx)?);
        }
        self.wall_micro_f2 = wall_f2;

        let mut neumann = Vec::with_capacity(nl);
        let mut formula_gap: f64 = 0.0;
        for n in 0..nl {
            let tay = &self.taylor[n];
            let w = &self.walls[n];
            let nd = neumann_from_matching(
                &MatchingInputs {
                    state: tay.state()?,
                    transport: crate::collision::TransportCoeffs {
                        mu: w.mu,
                        kappa: w.kappa,
                    },
                    u1_total: [tay.order1[1][0], tay.order1[2][0]],
                    theta1_total: tay.order1[4][0],
                    ubar3: 0.0,
                    jbar: None,
                    micro_f: &self.wall_micro_f2[n],
                    b_hat: [0.0; 2],
                    c_hat: 0.0,
                },
                &g,
            )?;
            let b = &tay.background;
            let expect = [-b[1][1], -b[2][1], -3.0 * b[4][1]];
            for (a, e) in nd.as_array().iter().zip(expect) {
                formula_gap = formula_gap.max((a - e).abs());
            }
            neumann.push(nd);
        }
        let lg = &self.layer_grid;
        let ny = lg.len();
        let problem = LayerProblem {
            k: 1,
            wall: self.walls.clone(),
            neumann: neumann.clone(),
            sources: vec![vec![[0.0; 3]; ny]; nl],
            init: compatible_init(lg, &neumann[0]),
        };
        let layer = solve_layer_parabolic(&problem, lg)?;

        // ū_{1,3} and p̄₁ from the order-0 layer, which vanishes.
        let zero = vec![0.0; ny];
        let mut derived = LayerDerived {
            u3: Vec::with_capacity(nl),
            u3_slope: vec![0.0; nl],
            rho: Vec::with_capacity(nl),
            p: Vec::with_capacity(nl),
            tail: 0.0,
        };
        for n in 0..nl {
            let w = &self.walls[n];
            let u3 = derive_normal_velocity(lg, w.rho, &zero);
            let p = derive_pressure(lg, &pressure_rhs(lg, w, &zero, &zero, None));
            derived.tail = derived.tail.max(u3.tail.abs());
            derived.rho.push(
                (0..ny)
                    .map(|j| (3.0 * p.values[j] - w.rho * layer.levels[n][j][2]) / (3.0 * w.t))
                    .collect(),
            );
            derived.u3.push(u3.values);
            derived.p.push(p.values);
        }
        let mut report = Self::empty_report(1, &interior, &layer, &derived);
        report.neumann_formula_gap = Some(formula_gap);
        self.bundles.push(OrderBundle {
            k: 1,
            interior,
            layer,
            derived,
            knudsen: Vec::new(),
            report: report.clone(),
        });

        // Normal mass flux and pressure of F̄₁ read back by quadrature.
        let mut kin = [0.0f64; 2];
        for &n in &self.knudsen_levels {
            let state = self.taylor[n].state()?;
            let mu = maxwellian(&state, &g);
            let b = &self.bundles[0];
            for j in 0..ny {
                let lv = &b.layer.levels[n][j];
                let c = macro_of(&[b.derived.rho[n][j], lv[0], lv[1], b.derived.u3[n][j], lv[2]]);
                let f = macro_slice(&state, &c, &mu, &g).values;
                let (mut flux, mut p) = (0.0, 0.0);
                for ((v, w), x) in g.nodes().iter().zip(g.weights()).zip(&f) {
                    let cv = state.peculiar(v);
                    flux += w * v[2] * x;
                    p += w * (cv[0] * cv[0] + cv[1] * cv[1] + cv[2] * cv[2]) / 3.0 * x;
                }
                kin[0] = kin[0].max(flux.abs());
                kin[1] = kin[1].max(p.abs());
            }
        }
        report.boussinesq_kinetic = Some(kin);
        let knudsen = self.knudsen_order(1, &mut report)?;
        let b = &mut self.bundles[0];
        b.knudsen = knudsen;
        b.report = report;
        Ok(())
    }

    /// `(I-P) f₃` at the wall from three levels of wall data.
    fn wall_micro_f3(&self, wks: [&WallKinetics; 3], tw: [f64; 3], cur: usize) -> Result<Vec<f64>> {
        let g = &self.vgrid;
        let wk = wks[cur];
        let q = self.backend.q_sym(&wk.f1, &wk.f2, &wk.state, g)?;
        let src: Vec<f64> = g
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let dt: f64 = (0..3).map(|s| tw[s] * wks[s].f1[i]).sum();
                (-dt - v[2] * wk.d_f1[i] + q[i]) / wk.sm[i]
            })
            .collect();
        let src = wk.basis.micro(&src, g);
        self.backend.invert_l_raw(&src, &wk.state, g, &wk.basis)
    }

    fn build_order2(&mut self) -> Result<()> {
        let nl = self.n_levels();
        let dt = self.euler.grid.dt;
        let lg = self.layer_grid.clone();
        let ny = lg.len();
        let g = self.vgrid.clone();

        // ū_{2,3} from ∂_t ρ̄₁ and the wall datum d₂ = −ū_{2,3}(0).
        let rho1 = self.bundles[0].derived.rho.clone();
        let mut dt_rho = vec![vec![0.0; ny]; nl];
        for j in 0..ny {
            let series: Vec<f64> = rho1.iter().map(|l| l[j]).collect();
            for (n, v) in time_derivative(&series, dt).into_iter().enumerate() {
                dt_rho[n][j] = v;
            }
        }
        let mut u3 = Vec::with_capacity(nl);
        let mut u3_slope = Vec::with_capacity(nl);
        let mut tail: f64 = 0.0;
        for n in 0..nl {
            let r = derive_normal_velocity(&lg, self.walls[n].rho, &dt_rho[n]);
            tail = tail.max(r.tail.abs());
            u3_slope.push(-dt_rho[n][0] / self.walls[n].rho);
            u3.push(r.values);
        }
        let d2: Vec<f64> = u3.iter().map(|u| -u[0]).collect();

        let chi: Vec<f64> = self.euler.grid.x.iter().map(|&x| cutoff(x).0).collect();
        let init: Vec<MacroCoeffs> = chi
            .iter()
            .map(|c| MacroCoeffs {
                u: [0.0, 0.0, d2[0] * c],
                ..Default::default()
            })
            .collect();
        let prev = [self.bundles[0].interior.clone()];
        let interior = build_interior_order(&self.euler, &prev, &d2, &init, &self.interior_ctx())?;
        self.set_order_taylor(2, &interior)?;

        // J̄₁ moments and the Neumann data at sampled levels.
        let mut sampled: Vec<usize> = (0..nl).step_by(self.config.source_stride).collect();
        if *sampled.last().unwrap() != nl - 1 {
            sampled.push(nl - 1);
        }
        let lctx = self.layer_ctx();
        let mut jm_s: Vec<Vec<[f64; 4]>> = Vec::with_capacity(sampled.len());
        let mut nd_s = Vec::with_capacity(sampled.len());
        for &s in &sampled {
            let (lv, tw, cur) = time_stencil(s, nl, dt);
            let wks = [
                self.wall_kinetics(lv[0])?,
                self.wall_kinetics(lv[1])?,
                self.wall_kinetics(lv[2])?,
            ];
            let pts = [
                self.layer1_points(lv[0]),
                self.layer1_points(lv[1]),
                self.layer1_points(lv[2]),
            ];
            let wk = &wks[cur];
            let micro: Vec<Vec<f64>> = pts[cur]
                .iter()
                .map(|p| micro_part(wk, p, &lctx))
                .collect::<Result<_>>()?;
            let mut jm = Vec::with_capacity(ny);
            let mut jbar_wall = Vec::new();
            for j in 0..ny {
                let (lo, yw) = lg.stencil(j);
                let node = JbarNode {
                    walls: [&wks[0], &wks[1], &wks[2]],
                    points: [pts[0][j], pts[1][j], pts[2][j]],
                    time_weights: tw,
                    current: cur,
                    micro_stencil: [&micro[lo], &micro[lo + 1], &micro[lo + 2]],
                    y_weights: yw,
                    micro: &micro[j],
                    taylor_order: self.config.taylor_order,
                };
                let jb = jbar1(&node, &lctx)?;
                jm.push(wall_moments(&wk.state, &jb, &g));
                if j == 0 {
                    jbar_wall = jb;
                }
            }
            let mf3 = self.wall_micro_f3([&wks[0], &wks[1], &wks[2]], tw, cur)?;
            let tay = &self.taylor[s];
            let l1 = &self.bundles[0].layer.levels[s][0];
            let w = &self.walls[s];
            nd_s.push(neumann_from_matching(
                &MatchingInputs {
                    state: wk.state,
                    transport: crate::collision::TransportCoeffs {
                        mu: w.mu,
                        kappa: w.kappa,
                    },
                    u1_total: [tay.order1[1][0] + l1[0], tay.order1[2][0] + l1[1]],
                    theta1_total: tay.order1[4][0] + l1[2],
                    ubar3: u3[s][0],
                    jbar: Some(&jbar_wall),
                    micro_f: &mf3,
                    b_hat: [0.0; 2],
                    c_hat: 0.0,
                },
                &g,
            )?);
            jm_s.push(jm);
        }
        let neumann = interpolate_neumann(&sampled, &nd_s, nl);

        let mut sources = Vec::with_capacity(nl);
        let b1 = &self.bundles[0];
        for n in 0..nl {
            let k = sampled.partition_point(|&s| s < n);
            let jm: Vec<[f64; 4]> = if sampled[k] == n {
                jm_s[k].clone()
            } else {
                let (a, b) = (sampled[k - 1], sampled[k]);
                let w = (n - a) as f64 / (b - a) as f64;
                (0..ny)
                    .map(|j| {
                        std::array::from_fn(|c| (1.0 - w) * jm_s[k - 1][j][c] + w * jm_s[k][j][c])
                    })
                    .collect()
            };
            let tay = &self.taylor[n];
            let rho0 = self.walls[n].rho;
            let bg = &tay.background;
            let flux = |c: usize| -> Vec<f64> {
                (0..ny)
                    .map(|j| {
                        let y = lg.y[j];
                        let lvl = b1.layer.levels[n][j][c];
                        let drift = match c {
                            0 | 1 => bg[1 + c][1] * y + tay.order1[1 + c][0],
                            _ => 3.0 * bg[4][1] * y + tay.order1[4][0],
                        };
                        (drift + lvl) * u3[n][j]
                    })
                    .collect()
            };
            let dflux: [Vec<f64>; 3] = std::array::from_fn(|c| lg.derivative(&flux(c)));
            let djm: [Vec<f64>; 4] = std::array::from_fn(|c| {
                lg.derivative(&jm.iter().map(|m| m[c]).collect::<Vec<_>>())
            });
            sources.push(
                (0..ny)
                    .map(|j| {
                        [
                            -rho0 * dflux[0][j] - djm[0][j],
                            -rho0 * dflux[1][j] - djm[1][j],
                            -rho0 * dflux[2][j] - 0.6 * djm[3][j],
                        ]
                    })
                    .collect(),
            );
        }
        let problem = LayerProblem {
            k: 2,
            wall: self.walls.clone(),
            neumann: neumann.clone(),
            sources,
            init: compatible_init(&lg, &neumann[0]),
        };
        let layer = solve_layer_parabolic(&problem, &lg)?;

        // p̄₂ follows from ū_{1,3} ≡ 0 and J̄₀ = 0.
        let zero = vec![0.0; ny];
        let mut derived = LayerDerived {
            u3,
            u3_slope,
            rho: Vec::with_capacity(nl),
            p: Vec::with_capacity(nl),
            tail,
        };
        for n in 0..nl {
            let w = &self.walls[n];
            let p = derive_pressure(&lg, &pressure_rhs(&lg, w, &zero, &zero, None));
            derived.rho.push(
                (0..ny)
                    .map(|j| (3.0 * p.values[j] - w.rho * layer.levels[n][j][2]) / (3.0 * w.t))
                    .collect(),
            );
            derived.p.push(p.values);
        }
        let mut report = Self::empty_report(2, &interior, &layer, &derived);
        self.bundles.push(OrderBundle {
            k: 2,
            interior,
            layer,
            derived,
            knudsen: Vec::new(),
            report: report.clone(),
        });
        let knudsen = self.knudsen_order(2, &mut report)?;
        let b = &mut self.bundles[1];
        b.knudsen = knudsen;
        b.report = report;
        Ok(())
    }

    /// Interpolants of every stored field at one level.
    pub fn level_view(&self, n: usize) -> Result<LevelView> {
        let x = &self.euler.grid.x;
        let tay = &self.taylor[n];
        let bg: Vec<Spline> = (0..5)
            .map(|c| Spline::clamped_left(x, &self.euler.component(n, c), tay.background[c][1]))
            .collect();
        let int1 = &self.bundles[0].interior.field;
        let o1: Vec<Spline> = (0..5)
            .map(|c| Spline::clamped_left(x, &int1.component(n, c), tay.order1[c][1]))
            .collect();
        let lg = &self.layer_grid;
        let y = &lg.y;
        let b1 = &self.bundles[0];
        let nd1 = b1.layer.neumann[n];
        let w = &self.walls[n];
        let drho = |a: f64| -w.rho * a / (3.0 * w.t);
        let l1 = vec![
            Spline::clamped_left(y, &b1.layer.component(n, 0), nd1.b[0]),
            Spline::clamped_left(y, &b1.layer.component(n, 1), nd1.b[1]),
            Spline::clamped_left(y, &b1.layer.component(n, 2), nd1.a),
            Spline::clamped_left(y, &b1.derived.rho[n], drho(nd1.a)),
        ];
        let (mut o2, mut l2, mut fhat) = (Vec::new(), Vec::new(), None);
        if let Some(b2) = self.bundles.get(1) {
            let f = &b2.interior.field;
            for c in 0..5 {
                let (co, _) = taylor_wall_coeffs(x, &f.component(n, c), 1)?;
                o2.push(Spline::clamped_left(x, &f.component(n, c), co[1]));
            }
            let nd2 = b2.layer.neumann[n];
            l2 = vec![
                Spline::clamped_left(y, &b2.layer.component(n, 0), nd2.b[0]),
                Spline::clamped_left(y, &b2.layer.component(n, 1), nd2.b[1]),
                Spline::clamped_left(y, &b2.layer.component(n, 2), nd2.a),
                Spline::clamped_left(y, &b2.derived.rho[n], drho(nd2.a)),
                Spline::clamped_left(y, &b2.derived.u3[n], b2.derived.u3_slope[n]),
            ];
            fhat = self.fhat_at(&b2.knudsen, n);
        }
        Ok(LevelView {
            level: n,
            bg,
            o1,
            o2,
            wk: self.wall_kinetics(n)?,
            l1,
            l2,
            fhat,
        })
    }

    /// `f̂` at level `n`, linear in time between solved levels.
    fn fhat_at(&self, sols: &[KnudsenSolution], n: usize) -> Option<Vec<Vec<f64>>> {
        let lv = &self.knudsen_levels;
        if sols.is_empty() {
            return None;
        }
        let k = lv.partition_point(|&s| s < n);
        if k < lv.len() && lv[k] == n {
            return Some(sols[k].values.clone());
        }
        if k == 0 {
            return Some(sols[0].values.clone());
        }
        if k == lv.len() {
            return Some(sols[k - 1].values.clone());
        }
        let w = (n - lv[k - 1]) as f64 / (lv[k] - lv[k - 1]) as f64;
        Some(
            sols[k - 1]
                .values
                .iter()
                .zip(&sols[k].values)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (1.0 - w) * x + w * y)
                        .collect()
                })
                .collect(),
        )
    }

    /// `μ`, `F₁` and (for `N ≥ 2`) `F₂` at `x`.
    pub fn interior_at(&self, view: &LevelView, x: f64) -> Result<[Vec<f64>; 3]> {
        let g = &self.vgrid;
        let e = |s: &Spline| s.eval(x);
        let b: Vec<(f64, f64, f64)> = view.bg.iter().map(e).collect();
        let state = FluidPoint::new(b[0].0, [b[1].0, b[2].0, b[3].0], b[4].0)?;
        let mu = maxwellian(&state, g);
        let c1 = macro_of(&std::array::from_fn(|c| view.o1[c].eval(x).0));
        let f1 = macro_slice(&state, &c1, &mu, g).values;
        if view.o2.is_empty() {
            return Ok([mu.values, f1, Vec::new()]);
        }
        let jet = Jet {
            state,
            d: std::array::from_fn(|c| b[c].1),
        };
        let mf = micro_f2(&jet, &c1, &self.interior_ctx())?;
        let c2 = macro_of(&std::array::from_fn(|c| view.o2[c].eval(x).0));
        let mut f2 = macro_slice(&state, &c2, &mu, g).values;
        let sm: Vec<f64> = mu.values.iter().map(|m| m.sqrt()).collect();
        for ((a, m), s) in f2.iter_mut().zip(&mf).zip(&sm) {
            *a += m * s;
        }
        Ok([mu.values, f1, f2])
    }

    /// `F̄₁` and (for `N ≥ 2`) `F̄₂` at `y`; `None` beyond the layer mesh.
    pub fn layer_at(&self, view: &LevelView, y: f64) -> Result<Option<[Vec<f64>; 2]>> {
        if y >= self.layer_grid.y_max() {
            return Ok(None);
        }
        let g = &self.vgrid;
        let wk = &view.wk;
        let v1: Vec<(f64, f64, f64)> = view.l1.iter().map(|s| s.eval(y)).collect();
        let c1 = macro_of(&[v1[3].0, v1[0].0, v1[1].0, 0.0, v1[2].0]);
        let dc1 = macro_of(&[v1[3].1, v1[0].1, v1[1].1, 0.0, v1[2].1]);
        let f1 = wk.big_macro(&c1, g);
        if view.l2.is_empty() {
            return Ok(Some([f1, Vec::new()]));
        }
        let v2: Vec<f64> = view.l2.iter().map(|s| s.eval(y).0).collect();
        let c2 = macro_of(&[v2[3], v2[0], v2[1], v2[4], v2[2]]);
        let micro = micro_part(wk, &LayerPoint { y, c: c1, dc: dc1 }, &self.layer_ctx())?;
        let f2: Vec<f64> = add(&wk.small_macro(&c2, g), &micro)
            .iter()
            .zip(&wk.sm)
            .map(|(a, s)| a * s)
            .collect();
        Ok(Some([f1, f2]))
    }

    /// `F̂₂` at `η` by local cubic interpolation; `None` beyond the mesh.
    pub fn knudsen_at(&self, view: &LevelView, eta: f64) -> Option<Vec<f64>> {
        let f = view.fhat.as_ref()?;
        let e = &self.eta;
        let n = e.len();
        if eta >= e[n - 1] {
            return None;
        }
        let k = e.partition_point(|&s| s <= eta).saturating_sub(1);
        let lo = k.saturating_sub(1).min(n - 4);
        let idx = [lo, lo + 1, lo + 2, lo + 3];
        let w: [f64; 4] = std::array::from_fn(|a| {
            idx.iter()
                .enumerate()
                .filter(|&(b, _)| b != a)
                .map(|(_, &j)| (eta - e[j]) / (e[idx[a]] - e[j]))
                .product()
        });
        Some(
            (0..self.vgrid.len())
                .map(|v| (0..4).map(|a| w[a] * f[idx[a]][v]).sum::<f64>() * view.wk.sm[v])
                .collect(),
        )
    }

    /// `Φ = μ + Σ εᵏ (F_k + F̄_k(x₃/ε) + F̂_k(x₃/ε²))` at one point, from
    /// precomputed interior parts.
    fn compose(
        &self,
        view: &LevelView,
        inner: &[Vec<f64>; 3],
        x: f64,
        eps: f64,
    ) -> Result<Vec<f64>> {
        let mut phi = inner[0].clone();
        let mut o1 = inner[1].clone();
        let mut o2 = inner[2].clone();
        if let Some(l) = self.layer_at(view, x / eps)? {
            o1 = add(&o1, &l[0]);
            if !o2.is_empty() {
                o2 = add(&o2, &l[1]);
            }
        }
        if !o2.is_empty() {
            if let Some(h) = self.knudsen_at(view, x / (eps * eps)) {
                o2 = add(&o2, &h);
            }
        }
        for (i, p) in phi.iter_mut().enumerate() {
            *p += eps * o1[i]
                + if o2.is_empty() {
                    0.0
                } else {
                    eps * eps * o2[i]
                };
        }
        Ok(phi)
    }

    /// The composite at every node of level `n`.
    pub fn assemble_composite(&self, n: usize, eps: f64) -> Result<CompositeSlice> {
        let view = self.level_view(n)?;
        let x = self.euler.grid.x.clone();
        let values = x
            .iter()
            .map(|&xi| {
                let inner = self.interior_at(&view, xi)?;
                self.compose(&view, &inner, xi, eps)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CompositeSlice {
            eps,
            level: n,
            x,
            values,
        })
    }

    /// Monitored node indices.
    pub fn monitored_nodes(&self) -> Vec<usize> {
        let nx = self.euler.grid.len();
        let m = &self.config.monitor;
        let hi = nx.saturating_sub(1 + m.outer_cells);
        (m.wall_collar..=hi).step_by(m.node_stride).collect()
    }

    /// Defect `∂_tΦ + v₃∂₃Φ − ε⁻²Q(Φ,Φ)` of the composite for each `ε`, in
    /// `L²` and sup over the monitored region at the sampled levels.
    pub fn evaluate_defects(&self, eps: &[f64], threads: usize) -> Result<Vec<DefectReport>> {
        let nl = self.n_levels();
        let levels = sample_levels(nl, self.config.monitor.n_times);
        let nodes = self.monitored_nodes();
        let x = &self.euler.grid.x;
        let dt = self.euler.grid.dt;
        let h = self.config.monitor.fd_step;
        let g = &self.vgrid;
        let ne = eps.len();
        let mut sq = vec![vec![vec![0.0; nodes.len()]; levels.len()]; ne];
        let mut sup = vec![0.0f64; ne];
        let mut pos = vec![f64::INFINITY; ne];
        for (li, &n) in levels.iter().enumerate() {
            let views = [
                self.level_view(n - 1)?,
                self.level_view(n)?,
                self.level_view(n + 1)?,
            ];
            let per_node = par_map(nodes.len(), threads, |k| -> Result<Vec<(f64, f64, f64)>> {
                let xj = x[nodes[k]];
                let pts = [(0, xj), (2, xj), (1, xj - h), (1, xj + h), (1, xj)];
                let inner: Vec<[Vec<f64>; 3]> = pts
                    .iter()
                    .map(|&(v, xp)| self.interior_at(&views[v], xp))
                    .collect::<Result<_>>()?;
                let mut out = Vec::with_capacity(ne);
                for &e in eps {
                    let phi: Vec<Vec<f64>> = pts
                        .iter()
                        .zip(&inner)
                        .map(|(&(v, xp), i)| self.compose(&views[v], i, xp, e))
                        .collect::<Result<_>>()?;
                    let q = self.backend.collide(&g.slice(phi[4].clone()), g)?.values;
                    let mut s2 = 0.0;
                    let mut smax: f64 = 0.0;
                    for (v, (node, w)) in g.nodes().iter().zip(g.weights()).enumerate() {
                        let d = (phi[1][v] - phi[0][v]) / (2.0 * dt)
                            + node[2] * (phi[3][v] - phi[2][v]) / (2.0 * h)
                            - q[v] / (e * e);
                        s2 += w * d * d;
                        smax = smax.max(d.abs());
                    }
                    let pmin = phi[4].iter().cloned().fold(f64::INFINITY, f64::min);
                    out.push((s2, smax, pmin));
                }
                Ok(out)
            });
            for (k, r) in per_node.into_iter().enumerate() {
                for (ei, (s2, smax, pmin)) in r?.into_iter().enumerate() {
                    sq[ei][li][k] = s2;
                    sup[ei] = sup[ei].max(smax);
                    pos[ei] = pos[ei].min(pmin);
                }
            }
        }
        let xs: Vec<f64> = nodes.iter().map(|&j| x[j]).collect();
        Ok((0..ne)
            .map(|ei| {
                let mean =
                    sq[ei].iter().map(|f| trapezoid(&xs, f)).sum::<f64>() / levels.len() as f64;
                DefectReport {
                    eps: eps[ei],
                    l2: mean.sqrt(),
                    sup: sup[ei],
                    positivity_min: pos[ei],
                    levels: levels.clone(),
                    n_nodes: nodes.len(),
                }
            })
            .collect())
    }

    /// Per-order reports, defects over the configured `ε` list and the fitted slope.
    pub fn residual_report(&self, threads: usize) -> Result<ResidualReport> {
        let defects = self.evaluate_defects(&self.config.epsilons, threads)?;
        let slope = if defects.len() >= 3 {
            let pts: Vec<(f64, f64)> = defects.iter().map(|d| (d.eps, d.l2)).collect();
            fit_slope(&pts).ok()
        } else {
            None
        };
        Ok(ResidualReport {
            orders: self.bundles.iter().map(|b| b.report.clone()).collect(),
            defects,
            slope,
        })
    }
}

/// Interpolants of one level.
pub struct LevelView {
    pub level: usize,
    bg: Vec<Spline>,
    o1: Vec<Spline>,
    o2: Vec<Spline>,
    wk: WallKinetics,
    /// `ū₁₁, ū₁₂, θ̄₁, ρ̄₁`.
    l1: Vec<Spline>,
    /// `ū₂₁, ū₂₂, θ̄₂, ρ̄₂, ū₂₃`.
    l2: Vec<Spline>,
    fhat: Option<Vec<Vec<f64>>>,
}

/// Composite slices at the nodes of one level.
#[derive(Debug, Clone)]
pub struct CompositeSlice {
    pub eps: f64,
    pub level: usize,
    pub x: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl CompositeSlice {
    /// `x₃, ρ, u₃, T, min F` rows.
    pub fn profile_csv(&self, grid: &VelocityGrid) -> Result<String> {
        let mut s = String::from("x3,rho,u3,T,min_f\n");
        for (x, f) in self.x.iter().zip(&self.values) {
            let m = crate::velocity::moments(&grid.slice(f.clone()), grid)?;
            let rho = m.mass;
            let u: Vec<f64> = m.momentum.iter().map(|p| p / rho).collect();
            let t = (2.0 * m.energy / rho - (u[0] * u[0] + u[1] * u[1] + u[2] * u[2])) / 3.0;
            let fmin = f.iter().cloned().fold(f64::INFINITY, f64::min);
            s.push_str(&format!(
                "{x:.10e},{rho:.12e},{:.12e},{t:.12e},{fmin:.6e}\n",
                u[2]
            ));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefectReport {
    pub eps: f64,
    pub l2: f64,
    pub sup: f64,
    pub positivity_min: f64,
    pub levels: Vec<usize>,
    pub n_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub orders: Vec<OrderReport>,
    pub defects: Vec<DefectReport>,
    pub slope: Option<SlopeFit>,
}

/// Maps `f` over `0..n` on up to `threads` scoped workers, keeping order.
pub fn par_map<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let t = threads.max(1).min(n.max(1));
    if t == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(t);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..t)
            .map(|i| {
                s.spawn(move || {
                    (i * chunk..((i + 1) * chunk).min(n))
                        .map(f)
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Gaps between the Euler solution with amplitude `δ` and its acoustic limit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub delta: f64,
    /// `max_t ‖(ρ−1−δφ, u−δΦ, T−1−δϑ)‖_{L²}`.
    pub fluid: f64,
    /// `‖(F^ε − μ_M)/δ − G‖_{L²}` at the final level with `ε = δ²`, when requested.
    pub kinetic: Option<f64>,
    pub eps: Option<f64>,
}

/// Fluid-level gap, and with `kinetic` the fluctuation gap of the order-1
/// composite at `ε = δ²`.
pub fn acoustic_gap(base: &ExpansionConfig, delta: f64, kinetic: bool) -> Result<GapReport> {
    if !(delta > 0.0) {
        return Err(HilbexError::config(
            "delta",
            "gap needs a positive amplitude",
        ));
    }
    let mut cfg = base.clone();
    cfg.delta = delta;
    cfg.order = 1;
    cfg.epsilons = Vec::new();
    cfg.validate()?;
    let sg = euler_grid(&cfg.spatial_grid, &cfg.init, delta, cfg.horizon)?;
    let euler = solve_euler(&cfg.init, delta, cfg.horizon, &sg)?;
    let ac = solve_acoustic(std::slice::from_ref(&cfg.init), cfg.horizon, &sg)?;
    let x = &sg.x;
    let mut fluid: f64 = 0.0;
    for n in 0..euler.n_levels() {
        let f: Vec<f64> = (0..x.len())
            .map(|j| {
                let p = euler.levels[n][j];
                let a = ac.physical(n, j, 0.0);
                let r = [
                    p.rho - 1.0 - delta * a[0],
                    p.u[0] - delta * a[1],
                    p.u[1] - delta * a[2],
                    p.u[2] - delta * a[3],
                    p.t - 1.0 - delta * a[4],
                ];
                r.iter().map(|v| v * v).sum()
            })
            .collect();
        fluid = fluid.max(trapezoid(x, &f).sqrt());
    }
    if !kinetic {
        return Ok(GapReport {
            delta,
            fluid,
            kinetic: None,
            eps: None,
        });
    }
    let eps = delta * delta;
    let exp = Expansion::from_euler(&cfg, euler)?;
    let n = exp.n_levels() - 1;
    let view = exp.level_view(n)?;
    let g = &exp.vgrid;
    let mu_m = maxwellian(&FluidPoint::reference(), g).values;
    let nodes = exp.monitored_nodes();
    let f: Vec<f64> = nodes
        .iter()
        .map(|&j| -> Result<f64> {
            let inner = exp.interior_at(&view, x[j])?;
            let phi = exp.compose(&view, &inner, x[j], eps)?;
            let a = ac.physical(n, j, 0.0);
            Ok(g.nodes()
                .iter()
                .zip(g.weights())
                .enumerate()
                .map(|(v, (c, w))| {
                    let q = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
                    let lim =
                        (a[0] + a[1] * c[0] + a[2] * c[1] + a[3] * c[2] + a[4] * 0.5 * (q - 3.0))
                            * mu_m[v];
                    let d = (phi[v] - mu_m[v]) / delta - lim;
                    w * d * d
                })
                .sum())
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = nodes.iter().map(|&j| x[j]).collect();
    Ok(GapReport {
        delta,
        fluid,
        kinetic: Some(trapezoid(&xs, &f).sqrt()),
        eps: Some(eps),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExpansionConfig {
        ExpansionConfig {
            horizon: 0.02,
            spatial_grid: SpatialGridSpec {
                x_max: 2.5,
                h_min: 0.02,
                h_max: 0.05,
                ..Default::default()
            },
            velocity_grid: GridSpec {
                radius: 7.0,
                n_per_axis: 16,
                ..Default::default()
            },
            eta_grid: EtaGridSpec {
                length: 12.0,
                h_max: 0.5,
                ..Default::default()
            },
            layer_grid: LayerGridSpec {
                y_max: 12.0,
                h_max: 0.5,
                ratio: 1.15,
                ..Default::default()
            },
            source_stride: 4,
            knudsen_levels: 2,
            epsilons: vec![0.2, 0.1, 0.05],
            monitor: MonitorSpec {
                n_times: 1,
                node_stride: 6,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn sampling_levels_stay_inside() {
        assert_eq!(sample_levels(11, 1), vec![5]);
        assert_eq!(sample_levels(3, 3), vec![1]);
        assert_eq!(report_levels(11, 3), vec![0, 5, 10]);
        assert_eq!(report_levels(11, 1), vec![10]);
        let (l, w, c) = time_stencil(0, 5, 0.5);
        assert_eq!((l, c), ([0, 1, 2], 0));
        assert!((w.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn config_validation_names_fields() {
        let c = ExpansionConfig {
            order: 3,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("order"));
        let c = ExpansionConfig {
            epsilons: vec![0.05, 0.1],
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("epsilons"));
        let mut c = ExpansionConfig::default();
        c.velocity_grid.radius = -1.0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("velocity_grid"));
        assert!(ExpansionConfig::default().validate().is_ok());
    }

    #[test]
    fn constant_background_gives_zero_bundles() {
        let mut c = small();
        c.delta = 0.0;
        let e = Expansion::build(&c).unwrap();
        for b in &e.bundles {
            assert_eq!(b.interior.field.max_abs(), 0.0);
            assert_eq!(b.layer.max_abs(), 0.0);
            assert_eq!(b.report.knudsen_max, 0.0);
        }
        let d = e.evaluate_defects(&[0.1], 1).unwrap();
        assert!(d[0].l2 < 1e-9, "{}", d[0].l2);
    }

    #[test]
    fn generic_order_one_matches_wall_formulas() {
        let mut c = small();
        c.order = 1;
        let e = Expansion::build(&c).unwrap();
        let r = &e.bundles[0].report;
        assert!(r.layer_max > 1e-3);
        assert!(r.neumann_formula_gap.unwrap() < 1e-10);
        assert_eq!(r.normal_velocity_max, 0.0);
        assert_eq!(r.pressure_max, 0.0);
        // Quadrature of the 16³ grid limits the pressure readback.
        assert!(r
            .boussinesq_kinetic
            .unwrap()
            .iter()
            .all(|x| *x < 1e-8 * r.layer_max));
        assert!(r.knudsen_max < 1e-10);
        assert!(r.wall_mismatch < 1e-12);
    }

    #[test]
    fn composite_is_linear_in_the_bundles() {
        let mut c = small();
        c.order = 1;
        let e = Expansion::build(&c).unwrap();
        let view = e.level_view(1).unwrap();
        let x = 0.1;
        let inner = e.interior_at(&view, x).unwrap();
        let a = e.compose(&view, &inner, x, 0.1).unwrap();
        let b = e.compose(&view, &inner, x, 0.2).unwrap();
        for v in 0..a.len() {
            let layer = e.layer_at(&view, x / 0.1).unwrap().map_or(0.0, |l| l[0][v]);
            let layer2 = e.layer_at(&view, x / 0.2).unwrap().map_or(0.0, |l| l[0][v]);
            assert!((a[v] - inner[0][v] - 0.1 * (inner[1][v] + layer)).abs() < 1e-15);
            assert!((b[v] - inner[0][v] - 0.2 * (inner[1][v] + layer2)).abs() < 1e-15);
        }
    }

    #[test]
    fn par_map_keeps_order() {
        let v = par_map(10, 3, |i| i * i);
        assert_eq!(v, (0..10).map(|i| i * i).collect::<Vec<_>>());
    }
}
