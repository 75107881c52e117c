//! Fluid solvers on a graded normal grid: the compressible Euler background,
//! the linear hyperbolic system for interior coefficients, and acoustics.
//!
//! All three share one vertex-centered finite volume engine with a local
//! Lax–Friedrichs flux, unlimited linear reconstruction and SSP-RK2.

use serde::{Deserialize, Serialize};

use crate::error::{HilbexError, Result};
use crate::quad::{lagrange_derivative_weights, solve_dense};
use crate::velocity::{FluidPoint, MacroCoeffs};

/// Five field components at one node.
pub type Node5 = [f64; 5];

/// Spatial reduction of the half-space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SpatialMode {
    /// Fields depend on `(t, x₃)` only.
    #[default]
    Slab1d,
    /// `modes` cosine/sine modes of period `period` in `x₁` times the normal grid.
    TangentialFourier { modes: usize, period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialGridSpec {
    pub x_max: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub ratio: f64,
    pub cfl: f64,
    pub mode: SpatialMode,
}

impl Default for SpatialGridSpec {
    fn default() -> Self {
        SpatialGridSpec {
            x_max: 4.0,
            h_min: 0.004,
            h_max: 0.01,
            ratio: 1.1,
            cfl: 0.4,
            mode: SpatialMode::Slab1d,
        }
    }
}

/// Graded normal grid with a fixed time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub mode: SpatialMode,
    pub x: Vec<f64>,
    pub dt: f64,
    pub n_steps: usize,
    pub cfl: f64,
    /// Wave speed the time step was sized for.
    pub max_speed: f64,
}

impl SpatialGrid {
    /// Builds the mesh on `[0, x_max]`, spacing growing geometrically from
    /// `h_min` at the wall up to `h_max`, and a uniform step covering `horizon`.
    pub fn build(spec: &SpatialGridSpec, max_speed: f64, horizon: f64) -> Result<Self> {
        let bad = |f: &str, r: &str| Err(HilbexError::config(format!("spatial_grid.{f}"), r));
        if !(spec.x_max > 0.0 && spec.x_max.is_finite()) {
            return bad("x_max", "must be positive");
        }
        if !(spec.h_min > 0.0 && spec.h_min <= spec.h_max) {
            return bad("h_min", "need 0 < h_min <= h_max");
        }
        if !(spec.h_max < spec.x_max / 4.0) {
            return bad("h_max", "need at least four cells");
        }
        if !(spec.ratio >= 1.0 && spec.ratio < 2.0) {
            return bad("ratio", "need 1 <= ratio < 2");
        }
        if !(spec.cfl > 0.0 && spec.cfl <= 1.0) {
            return bad("cfl", "need 0 < cfl <= 1");
        }
        if !(max_speed > 0.0 && max_speed.is_finite()) {
            return Err(HilbexError::Precondition(format!(
                "max wave speed must be positive, got {max_speed}"
            )));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return bad("horizon", "must be nonnegative");
        }
        if let SpatialMode::TangentialFourier { modes, period } = spec.mode {
            if !(2..=8).contains(&modes) {
                return bad("mode.modes", "tangential-fourier supports 2 to 8 modes");
            }
            if !(period > 0.0) {
                return bad("mode.period", "must be positive");
            }
        }
        let mut h = Vec::new();
        let mut total = 0.0;
        let mut s = spec.h_min;
        while total < spec.x_max {
            h.push(s);
            total += s;
            s = (s * spec.ratio).min(spec.h_max);
        }
        let scale = spec.x_max / total;
        let mut x = Vec::with_capacity(h.len() + 1);
        x.push(0.0);
        let mut acc = 0.0;
        for (k, hk) in h.iter().enumerate() {
            acc += hk * scale;
            x.push(if k + 1 == h.len() { spec.x_max } else { acc });
        }
        let hmin = x
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        let dt_cfl = spec.cfl * hmin / max_speed;
        let n_steps = ((horizon / dt_cfl).ceil() as usize).max(1);
        Ok(SpatialGrid {
            mode: spec.mode,
            x,
            dt: horizon / n_steps as f64,
            n_steps,
            cfl: spec.cfl,
            max_speed,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_max(&self) -> f64 {
        self.x[self.x.len() - 1]
    }

    pub fn min_spacing(&self) -> f64 {
        self.x
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.n_steps)
    }

    /// Tangential wavenumbers, `[0]` in slab mode.
    pub fn wavenumbers(&self) -> Vec<f64> {
        match self.mode {
            SpatialMode::Slab1d => vec![0.0],
            SpatialMode::TangentialFourier { modes, period } => (0..modes)
                .map(|m| 2.0 * std::f64::consts::PI * m as f64 / period)
                .collect(),
        }
    }

    /// Derivative of nodal data by 3-point nonuniform differences, one-sided at both ends.
    pub fn derivative(&self, f: &[f64]) -> Vec<f64> {
        let n = self.x.len();
        (0..n)
            .map(|j| {
                let lo = j.saturating_sub(1).min(n - 3);
                let w = lagrange_derivative_weights(&self.x[lo..lo + 3], self.x[j]);
                let c = f[j];
                w[0] * (f[lo] - c) + w[1] * (f[lo + 1] - c) + w[2] * (f[lo + 2] - c)
            })
            .collect()
    }
}

/// One term of an initial profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ProfileTerm {
    Gauss {
        amp: f64,
        center: f64,
        width: f64,
    },
    /// `amp·exp(-(x/w)²)`.
    Even {
        amp: f64,
        width: f64,
    },
    /// `amp·(x/w)·exp(-(x/w)²)`, zero at the wall.
    Odd {
        amp: f64,
        width: f64,
    },
}

impl ProfileTerm {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ProfileTerm::Gauss { amp, center, width } => {
                amp * (-((x - center) / width).powi(2)).exp()
            }
            ProfileTerm::Even { amp, width } => amp * (-(x / width).powi(2)).exp(),
            ProfileTerm::Odd { amp, width } => amp * (x / width) * (-(x / width).powi(2)).exp(),
        }
    }

    fn check(&self, field: &str) -> Result<()> {
        let w = match *self {
            ProfileTerm::Gauss { width, .. }
            | ProfileTerm::Even { width, .. }
            | ProfileTerm::Odd { width, .. } => width,
        };
        if !(w > 0.0) {
            return Err(HilbexError::config(field, "profile width must be positive"));
        }
        Ok(())
    }
}

/// Sum of profile terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Profile(pub Vec<ProfileTerm>);

impl Profile {
    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().map(|t| t.eval(x)).sum()
    }

    pub fn is_zero_at_wall(&self) -> bool {
        self.eval(0.0) == 0.0
    }
}

/// How the temperature perturbation is specified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaFrom {
    /// `theta` is `ϑ₀` directly.
    Temperature,
    /// `theta` is the pressure perturbation `ψ`, and `ϑ₀` follows from
    /// `(1+δφ₀)(1+δϑ₀) = 1+δψ`.
    #[default]
    Pressure,
}

/// Initial perturbation `(φ₀, Φ₀, ϑ₀)` of the state `(1, 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub phi: Profile,
    pub u: [Profile; 3],
    pub theta: Profile,
    #[serde(default)]
    pub theta_from: ThetaFrom,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            phi: Profile(vec![ProfileTerm::Gauss {
                amp: 0.6,
                center: 0.9,
                width: 0.45,
            }]),
            u: [
                Profile(vec![ProfileTerm::Gauss {
                    amp: 0.5,
                    center: 0.6,
                    width: 0.5,
                }]),
                Profile::default(),
                Profile(vec![ProfileTerm::Odd {
                    amp: 0.4,
                    width: 0.6,
                }]),
            ],
            theta: Profile(vec![ProfileTerm::Even {
                amp: 0.5,
                width: 0.8,
            }]),
            theta_from: ThetaFrom::Pressure,
        }
    }
}

impl PerturbationSpec {
    pub fn zero() -> Self {
        PerturbationSpec {
            phi: Profile::default(),
            u: Default::default(),
            theta: Profile::default(),
            theta_from: ThetaFrom::Temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("phi", &self.phi),
            ("u1", &self.u[0]),
            ("u2", &self.u[1]),
            ("u3", &self.u[2]),
            ("theta", &self.theta),
        ];
        for (name, p) in all {
            for t in &p.0 {
                t.check(name)?;
            }
        }
        if !self.u[2].is_zero_at_wall() {
            return Err(HilbexError::config(
                "u3",
                "normal velocity must vanish at the wall",
            ));
        }
        Ok(())
    }

    /// `(φ₀, Φ₀, ϑ₀)` at `x`. In pressure mode `δ` fixes the temperature split.
    pub fn sample(&self, x: f64, delta: f64) -> Node5 {
        let phi = self.phi.eval(x);
        let psi = self.theta.eval(x);
        let theta = match self.theta_from {
            ThetaFrom::Temperature => psi,
            ThetaFrom::Pressure if delta == 0.0 => psi - phi,
            ThetaFrom::Pressure => ((1.0 + delta * psi) / (1.0 + delta * phi) - 1.0) / delta,
        };
        [
            phi,
            self.u[0].eval(x),
            self.u[1].eval(x),
            self.u[2].eval(x),
            theta,
        ]
    }
}

/// Wall values and normal derivatives of the background flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct WallTrace {
    pub rho: f64,
    pub u: [f64; 3],
    pub t: f64,
    pub d_rho: f64,
    pub du: [f64; 3],
    pub d_t: f64,
    pub dp: f64,
    pub div_u: f64,
    pub grad_par_p: [f64; 2],
}

/// Background Euler solution at every time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidField {
    pub grid: SpatialGrid,
    pub delta: f64,
    pub levels: Vec<Vec<FluidPoint>>,
    pub wall_trace: Vec<WallTrace>,
}

impl FluidField {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Component `c` of `(ρ, u₁, u₂, u₃, T)` at one level.
    pub fn component(&self, level: usize, c: usize) -> Vec<f64> {
        self.levels[level].iter().map(|p| prim_of(p)[c]).collect()
    }

    /// Largest `|u₃|` at the wall over all levels.
    pub fn wall_slip(&self) -> f64 {
        self.levels
            .iter()
            .map(|l| l[0].u[2].abs())
            .fold(0.0, f64::max)
    }

    /// Constant state `(1, 0, 1)` on `grid`, the `δ = 0` background.
    pub fn constant(grid: &SpatialGrid) -> Self {
        let lvl = vec![FluidPoint::reference(); grid.len()];
        let levels = vec![lvl; grid.n_steps + 1];
        let wall_trace = levels.iter().map(|l| wall_trace_of(grid, l)).collect();
        FluidField {
            grid: grid.clone(),
            delta: 0.0,
            levels,
            wall_trace,
        }
    }
}

fn prim_of(p: &FluidPoint) -> Node5 {
    [p.rho, p.u[0], p.u[1], p.u[2], p.t]
}

/// One-sided second-order wall derivative weights on the first three nodes.
fn wall_weights(x: &[f64]) -> [f64; 3] {
    let w = lagrange_derivative_weights(&x[..3], x[0]);
    [w[0], w[1], w[2]]
}

fn wall_trace_of(grid: &SpatialGrid, level: &[FluidPoint]) -> WallTrace {
    let w = wall_weights(&grid.x);
    let d = |f: &dyn Fn(&FluidPoint) -> f64| {
        let c = f(&level[0]);
        w[1] * (f(&level[1]) - c) + w[2] * (f(&level[2]) - c)
    };
    let du = [d(&|p| p.u[0]), d(&|p| p.u[1]), d(&|p| p.u[2])];
    let p0 = &level[0];
    WallTrace {
        rho: p0.rho,
        u: p0.u,
        t: p0.t,
        d_rho: d(&|p| p.rho),
        du,
        d_t: d(&|p| p.t),
        dp: d(&|p| p.rho * p.t),
        div_u: du[2],
        grad_par_p: [0.0; 2],
    }
}

#[derive(Debug, Clone, Copy)]
enum At {
    Node(usize),
    /// Face between nodes `f` and `f + 1`.
    Face(usize),
}

trait FvSystem {
    /// Components held fixed at both walls.
    fn frozen(&self) -> [bool; 5];
    fn primitive(&self, q: &Node5) -> Node5 {
        *q
    }
    fn conserved(&self, r: &Node5) -> Node5 {
        *r
    }
    fn flux(&self, lvl: usize, at: At, r: &Node5) -> Node5;
    fn speed(&self, lvl: usize, at: At, r: &Node5) -> f64;
    /// Adds `(A_{j+½} - A_{j-½}) q_j / Δ_j` so that the scheme discretizes `A ∂q`.
    fn nonconservative(&self) -> bool {
        false
    }
    fn source(&self, _lvl: usize, _j: usize, _q: &Node5) -> Option<Node5> {
        None
    }
}

struct Engine {
    x: Vec<f64>,
    xf: Vec<f64>,
    vol: Vec<f64>,
    /// Slope weights on `(left, right)` differences for interior nodes.
    wint: Vec<(f64, f64)>,
    /// Weights on `r₁ - r₀`, `r₂ - r₀` at the wall.
    w0: (f64, f64),
    /// Weights on `r_{M-1} - r_M`, `r_{M-2} - r_M` at the far end.
    wm: (f64, f64),
}

impl Engine {
    fn new(x: &[f64]) -> Self {
        let m = x.len() - 1;
        let xf: Vec<f64> = x.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let vol: Vec<f64> = (0..=m)
            .map(|j| {
                let r = if j == m { x[m] } else { xf[j] };
                let l = if j == 0 { x[0] } else { xf[j - 1] };
                r - l
            })
            .collect();
        let wint = (0..=m)
            .map(|j| {
                if j == 0 || j == m {
                    return (0.0, 0.0);
                }
                let w = lagrange_derivative_weights(&x[j - 1..j + 2], x[j]);
                (w[0], w[2])
            })
            .collect();
        let a = lagrange_derivative_weights(&x[..3], x[0]);
        let b = lagrange_derivative_weights(&[x[m], x[m - 1], x[m - 2]], x[m]);
        Engine {
            x: x.to_vec(),
            xf,
            vol,
            wint,
            w0: (a[1], a[2]),
            wm: (b[1], b[2]),
        }
    }

    fn slopes(&self, r: &[Node5]) -> Vec<Node5> {
        let m = r.len() - 1;
        (0..=m)
            .map(|j| {
                let mut s = [0.0; 5];
                for c in 0..5 {
                    s[c] = if j == 0 {
                        self.w0.0 * (r[1][c] - r[0][c]) + self.w0.1 * (r[2][c] - r[0][c])
                    } else if j == m {
                        self.wm.0 * (r[m - 1][c] - r[m][c]) + self.wm.1 * (r[m - 2][c] - r[m][c])
                    } else {
                        let (wl, wr) = self.wint[j];
                        wl * (r[j - 1][c] - r[j][c]) + wr * (r[j + 1][c] - r[j][c])
                    };
                }
                s
            })
            .collect()
    }

    fn rhs<S: FvSystem>(&self, sys: &S, lvl: usize, q: &[Node5]) -> Vec<Node5> {
        let m = q.len() - 1;
        let r: Vec<Node5> = q.iter().map(|x| sys.primitive(x)).collect();
        let s = self.slopes(&r);
        let mut flux = Vec::with_capacity(m + 2);
        flux.push(sys.flux(lvl, At::Node(0), &r[0]));
        for f in 0..m {
            let at = At::Face(f);
            let mut rl = r[f];
            let mut rr = r[f + 1];
            for c in 0..5 {
                rl[c] += s[f][c] * (self.xf[f] - self.x[f]);
                rr[c] += s[f + 1][c] * (self.xf[f] - self.x[f + 1]);
            }
            let fl = sys.flux(lvl, at, &rl);
            let fr = sys.flux(lvl, at, &rr);
            let a = sys.speed(lvl, at, &rl).max(sys.speed(lvl, at, &rr));
            let ql = sys.conserved(&rl);
            let qr = sys.conserved(&rr);
            let mut out = [0.0; 5];
            for c in 0..5 {
                out[c] = 0.5 * (fl[c] + fr[c]) - 0.5 * a * (qr[c] - ql[c]);
            }
            flux.push(out);
        }
        flux.push(sys.flux(lvl, At::Node(m), &r[m]));
        let frozen = sys.frozen();
        let nc = sys.nonconservative();
        (0..=m)
            .map(|j| {
                let mut out = [0.0; 5];
                for c in 0..5 {
                    out[c] = -(flux[j + 1][c] - flux[j][c]) / self.vol[j];
                }
                if nc {
                    let left = if j == 0 { At::Node(0) } else { At::Face(j - 1) };
                    let right = if j == m { At::Node(m) } else { At::Face(j) };
                    let fr = sys.flux(lvl, right, &r[j]);
                    let fl = sys.flux(lvl, left, &r[j]);
                    for c in 0..5 {
                        out[c] += (fr[c] - fl[c]) / self.vol[j];
                    }
                }
                if let Some(src) = sys.source(lvl, j, &q[j]) {
                    for c in 0..5 {
                        out[c] += src[c];
                    }
                }
                if j == 0 || j == m {
                    for c in 0..5 {
                        if frozen[c] {
                            out[c] = 0.0;
                        }
                    }
                }
                out
            })
            .collect()
    }

    /// One SSP-RK2 step from level `lvl` to `lvl + 1`.
    fn step<S: FvSystem>(&self, sys: &S, lvl: usize, dt: f64, q: &[Node5]) -> Vec<Node5> {
        let k1 = self.rhs(sys, lvl, q);
        let q1: Vec<Node5> = q
            .iter()
            .zip(&k1)
            .map(|(a, k)| std::array::from_fn(|c| a[c] + dt * k[c]))
            .collect();
        let k2 = self.rhs(sys, lvl + 1, &q1);
        q.iter()
            .zip(q1.iter().zip(&k2))
            .map(|(a, (b, k))| std::array::from_fn(|c| 0.5 * a[c] + 0.5 * (b[c] + dt * k[c])))
            .collect()
    }

    /// `½ Σ Δ_j e(q_j)`.
    fn integral(&self, q: &[Node5], e: impl Fn(usize, &Node5) -> f64) -> f64 {
        q.iter()
            .enumerate()
            .map(|(j, x)| self.vol[j] * e(j, x))
            .sum::<f64>()
    }
}

const FROZEN_U3: [bool; 5] = [false, false, false, true, false];

struct EulerSys;

impl FvSystem for EulerSys {
    fn frozen(&self) -> [bool; 5] {
        FROZEN_U3
    }

    /// `(ρ, m, E) → (ρ, u, p)`.
    fn primitive(&self, q: &Node5) -> Node5 {
        let rho = q[0];
        let u = [q[1] / rho, q[2] / rho, q[3] / rho];
        let ke = 0.5 * rho * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
        [rho, u[0], u[1], u[2], (q[4] - ke) / 1.5]
    }

    fn conserved(&self, r: &Node5) -> Node5 {
        let rho = r[0];
        let ke = 0.5 * rho * (r[1] * r[1] + r[2] * r[2] + r[3] * r[3]);
        [rho, rho * r[1], rho * r[2], rho * r[3], 1.5 * r[4] + ke]
    }

    fn flux(&self, _lvl: usize, _at: At, r: &Node5) -> Node5 {
        let (rho, u3, p) = (r[0], r[3], r[4]);
        let e = 1.5 * p + 0.5 * rho * (r[1] * r[1] + r[2] * r[2] + u3 * u3);
        [
            rho * u3,
            rho * r[1] * u3,
            rho * r[2] * u3,
            rho * u3 * u3 + p,
            (e + p) * u3,
        ]
    }

    fn speed(&self, _lvl: usize, _at: At, r: &Node5) -> f64 {
        r[3].abs() + (5.0 * r[4] / (3.0 * r[0])).max(0.0).sqrt()
    }
}

/// Default ceiling on `max |∂₃(ρ, u, T)|`.
pub const BLOWUP_CEILING: f64 = 1e3;

/// Time-step size for the Euler run: the initial wave speed with a margin.
pub fn euler_grid(
    spec: &SpatialGridSpec,
    init: &PerturbationSpec,
    delta: f64,
    horizon: f64,
) -> Result<SpatialGrid> {
    let probe = SpatialGrid::build(spec, 1.0, 0.0)?;
    let mut speed: f64 = 0.0;
    for &x in &probe.x {
        let s = init.sample(x, delta);
        let rho = 1.0 + delta * s[0];
        let t = 1.0 + delta * s[4];
        if rho > 0.0 && t > 0.0 {
            speed = speed.max((delta * s[3]).abs() + (5.0 * t / 3.0).sqrt());
        }
    }
    SpatialGrid::build(spec, 1.25 * speed.max((5.0f64 / 3.0).sqrt()), horizon)
}

/// Compressible Euler with initial data `(1+δφ₀, δΦ₀, 1+δϑ₀)` and `u₃ = 0` at the wall.
pub fn solve_euler(
    init: &PerturbationSpec,
    delta: f64,
    horizon: f64,
    grid: &SpatialGrid,
) -> Result<FluidField> {
    solve_euler_with(init, delta, horizon, grid, BLOWUP_CEILING)
}

pub fn solve_euler_with(
    init: &PerturbationSpec,
    delta: f64,
    horizon: f64,
    grid: &SpatialGrid,
    ceiling: f64,
) -> Result<FluidField> {
    init.validate()?;
    if grid.mode != SpatialMode::Slab1d {
        return Err(HilbexError::config(
            "spatial_grid.mode",
            "the nonlinear Euler solver runs in slab-1d mode only",
        ));
    }
    if !delta.is_finite() || delta < 0.0 {
        return Err(HilbexError::config(
            "delta",
            "must be finite and nonnegative",
        ));
    }
    check_horizon(grid, horizon)?;
    let mut q: Vec<Node5> = Vec::with_capacity(grid.len());
    for &x in &grid.x {
        let s = init.sample(x, delta);
        let r = [
            1.0 + delta * s[0],
            delta * s[1],
            delta * s[2],
            delta * s[3],
            1.0 + delta * s[4],
        ];
        if !(r[0] > 0.0 && r[4] > 0.0) {
            return Err(HilbexError::Precondition(format!(
                "initial density or temperature not positive at x3={x}"
            )));
        }
        q.push(EulerSys.conserved(&[r[0], r[1], r[2], r[3], r[0] * r[4]]));
    }
    let engine = Engine::new(&grid.x);
    let to_points = |q: &[Node5]| -> Result<Vec<FluidPoint>> {
        q.iter()
            .map(|c| {
                let r = EulerSys.primitive(c);
                FluidPoint::new(r[0], [r[1], r[2], r[3]], r[4] / r[0])
                    .map_err(|e| HilbexError::Numerical(e.to_string()))
            })
            .collect()
    };
    let mut levels = vec![to_points(&q)?];
    let hmin = grid.min_spacing();
    for n in 0..grid.n_steps {
        let a = q
            .iter()
            .map(|c| EulerSys.speed(n, At::Node(0), &EulerSys.primitive(c)))
            .fold(0.0, f64::max);
        if a * grid.dt > hmin {
            return Err(HilbexError::Numerical(format!(
                "CFL number {:.3} exceeds 1 at t={}",
                a * grid.dt / hmin,
                grid.time(n)
            )));
        }
        q = engine.step(&EulerSys, n, grid.dt, &q);
        let pts = to_points(&q).map_err(|_| HilbexError::BlowUp {
            time: grid.time(n + 1),
            gradient: f64::INFINITY,
        })?;
        let g = max_gradient(&grid.x, &pts);
        if !(g <= ceiling) {
            return Err(HilbexError::BlowUp {
                time: grid.time(n + 1),
                gradient: g,
            });
        }
        levels.push(pts);
    }
    let wall_trace = levels.iter().map(|l| wall_trace_of(grid, l)).collect();
    Ok(FluidField {
        grid: grid.clone(),
        delta,
        levels,
        wall_trace,
    })
}

fn check_horizon(grid: &SpatialGrid, horizon: f64) -> Result<()> {
    if (grid.horizon() - horizon).abs() > 1e-12 * horizon.max(1.0) {
        return Err(HilbexError::config(
            "horizon",
            format!(
                "grid was built for horizon {}, got {horizon}",
                grid.horizon()
            ),
        ));
    }
    Ok(())
}

fn max_gradient(x: &[f64], pts: &[FluidPoint]) -> f64 {
    let mut g: f64 = 0.0;
    for j in 0..pts.len() - 1 {
        let h = x[j + 1] - x[j];
        let (a, b) = (prim_of(&pts[j]), prim_of(&pts[j + 1]));
        for c in 0..5 {
            g = g.max(((b[c] - a[c]) / h).abs());
        }
    }
    g
}

/// Smooth cut-off equal to 1 on `[0, 1]` and 0 beyond 2, with its derivative.
pub fn cutoff(s: f64) -> (f64, f64) {
    if s <= 1.0 {
        return (1.0, 0.0);
    }
    if s >= 2.0 {
        return (0.0, 0.0);
    }
    let a = (-1.0 / (2.0 - s)).exp();
    let b = (-1.0 / (s - 1.0)).exp();
    let da = -a / (2.0 - s).powi(2);
    let db = b / (s - 1.0).powi(2);
    let den = a + b;
    (a / den, (da * b - a * db) / (den * den))
}

/// Inputs of the linear hyperbolic problem for one interior order.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperbolicCoefficients {
    /// Per level and node: `(𝔣₁, 𝔣₂, 𝔣₃, 𝔤)`.
    pub sources: Vec<Vec<[f64; 4]>>,
    /// Normal velocity at the wall per level.
    pub d: Vec<f64>,
    /// `(ρ̃₀, ũ₀, θ̃₀)` per node.
    pub init: Vec<MacroCoeffs>,
    /// Width of the lift: the cut-off is applied to `x₃ / lift_scale`.
    pub lift_scale: f64,
}

impl HyperbolicCoefficients {
    pub fn zero(n_levels: usize, n_nodes: usize) -> Self {
        HyperbolicCoefficients {
            sources: vec![vec![[0.0; 4]; n_nodes]; n_levels],
            d: vec![0.0; n_levels],
            init: vec![MacroCoeffs::default(); n_nodes],
            lift_scale: 1.0,
        }
    }
}

/// Solution `(ρ_k, u_k, θ_k)` of the linear system at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationField {
    pub levels: Vec<Vec<MacroCoeffs>>,
    /// Quadratic energy of the symmetrized variables per level.
    pub energy: Vec<f64>,
    pub energy_growth: f64,
    pub warnings: Vec<String>,
}

impl PerturbationField {
    pub fn component(&self, level: usize, c: usize) -> Vec<f64> {
        self.levels[level]
            .iter()
            .map(|m| coeffs_array(m)[c])
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.iter().map(|m| m.max_abs()))
            .fold(0.0, f64::max)
    }
}

pub fn coeffs_array(m: &MacroCoeffs) -> Node5 {
    [m.rho, m.u[0], m.u[1], m.u[2], m.theta]
}

pub fn coeffs_from(a: &Node5) -> MacroCoeffs {
    MacroCoeffs {
        rho: a[0],
        u: [a[1], a[2], a[3]],
        theta: a[4],
    }
}

#[derive(Debug, Clone, Copy)]
struct Bg {
    rho: f64,
    u3: f64,
    t: f64,
    p: f64,
}

#[derive(Debug, Clone, Copy)]
struct BgNode {
    b: Bg,
    du: [f64; 3],
    dt_: f64,
    dp: f64,
}

struct LinearSys {
    nodes: Vec<Vec<BgNode>>,
    faces: Vec<Vec<Bg>>,
    /// `(G₀, G₁, G₂, G₃, G₄)` per level and node.
    g: Vec<Vec<Node5>>,
}

impl LinearSys {
    fn bg(&self, lvl: usize, at: At) -> Bg {
        match at {
            At::Node(j) => self.nodes[lvl][j].b,
            At::Face(f) => self.faces[lvl][f],
        }
    }
}

impl FvSystem for LinearSys {
    fn frozen(&self) -> [bool; 5] {
        FROZEN_U3
    }

    fn flux(&self, lvl: usize, at: At, q: &Node5) -> Node5 {
        let b = self.bg(lvl, at);
        [
            b.u3 * q[0] + 5.0 / 3.0 * b.p * q[3],
            b.u3 * q[1],
            b.u3 * q[2],
            b.u3 * q[3] + q[0] / b.rho,
            b.u3 * q[4] + 2.0 * b.p / b.rho * q[3],
        ]
    }

    fn speed(&self, lvl: usize, at: At, _q: &Node5) -> f64 {
        let b = self.bg(lvl, at);
        b.u3.abs() + (5.0 * b.p / (3.0 * b.rho)).sqrt()
    }

    fn nonconservative(&self) -> bool {
        true
    }

    fn source(&self, lvl: usize, j: usize, q: &Node5) -> Option<Node5> {
        let n = &self.nodes[lvl][j];
        let g = &self.g[lvl][j];
        let (rho, t, p) = (n.b.rho, n.b.t, n.b.p);
        let du3 = n.du[2];
        Some([
            -5.0 / 3.0 * du3 * q[0] - n.dp * q[3] + g[0],
            -q[3] * n.du[0] + g[1] / rho,
            -q[3] * n.du[1] + g[2] / rho,
            -q[3] * du3 + n.dp / (rho * p) * q[0] - n.dp / (3.0 * rho * t) * q[4] + g[3] / rho,
            -3.0 * q[3] * n.dt_ - 2.0 / 3.0 * du3 * q[4] + g[4] / rho,
        ])
    }
}

/// Default energy-growth factor that triggers a warning.
pub const ENERGY_GROWTH_WARN: f64 = 1e3;

/// Solves the linearized Euler system around `euler` for `(ρ̃, ũ, θ̃)` with
/// `ũ₃ = d` at the wall, in the symmetrizable `(p̃, w̃, θ̃)` variables.
pub fn solve_linear_hyperbolic(
    euler: &FluidField,
    coeffs: &HyperbolicCoefficients,
    horizon: f64,
) -> Result<PerturbationField> {
    solve_linear_hyperbolic_with(euler, coeffs, horizon, ENERGY_GROWTH_WARN)
}

pub fn solve_linear_hyperbolic_with(
    euler: &FluidField,
    coeffs: &HyperbolicCoefficients,
    horizon: f64,
    growth_warn: f64,
) -> Result<PerturbationField> {
    let grid = &euler.grid;
    check_horizon(grid, horizon)?;
    let nl = euler.n_levels();
    let nx = grid.len();
    if coeffs.sources.len() != nl
        || coeffs.d.len() != nl
        || coeffs.init.len() != nx
        || coeffs.sources.iter().any(|s| s.len() != nx)
    {
        return Err(HilbexError::Precondition(
            "hyperbolic coefficients do not match the fluid grid".into(),
        ));
    }
    if !(coeffs.lift_scale > 0.0 && 2.0 * coeffs.lift_scale < grid.x_max()) {
        return Err(HilbexError::config(
            "lift_scale",
            "the lift must vanish before the far wall",
        ));
    }
    let gap = (coeffs.init[0].u[2] - coeffs.d[0]).abs();
    if gap > 1e-10 {
        return Err(HilbexError::Precondition(format!(
            "initial normal velocity {} at the wall is incompatible with the datum {} (gap {gap:e})",
            coeffs.init[0].u[2], coeffs.d[0]
        )));
    }
    let chi: Vec<(f64, f64)> = grid
        .x
        .iter()
        .map(|&x| {
            let (c, dc) = cutoff(x / coeffs.lift_scale);
            (c, dc / coeffs.lift_scale)
        })
        .collect();
    let dd = time_derivative(&coeffs.d, grid.dt);
    let mut nodes = Vec::with_capacity(nl);
    let mut faces = Vec::with_capacity(nl);
    let mut g = Vec::with_capacity(nl);
    for (lvl, pts) in euler.levels.iter().enumerate() {
        let comp = |f: &dyn Fn(&FluidPoint) -> f64| -> Vec<f64> { pts.iter().map(f).collect() };
        let du: [Vec<f64>; 3] = std::array::from_fn(|i| grid.derivative(&comp(&|p| p.u[i])));
        let dtt = grid.derivative(&comp(&|p| p.t));
        let dp = grid.derivative(&comp(&|p| p.pressure()));
        let row: Vec<BgNode> = (0..nx)
            .map(|j| BgNode {
                b: Bg {
                    rho: pts[j].rho,
                    u3: pts[j].u[2],
                    t: pts[j].t,
                    p: pts[j].pressure(),
                },
                du: [du[0][j], du[1][j], du[2][j]],
                dt_: dtt[j],
                dp: dp[j],
            })
            .collect();
        faces.push(
            row.windows(2)
                .map(|w| Bg {
                    rho: 0.5 * (w[0].b.rho + w[1].b.rho),
                    u3: 0.5 * (w[0].b.u3 + w[1].b.u3),
                    t: 0.5 * (w[0].b.t + w[1].b.t),
                    p: 0.5 * (w[0].b.p + w[1].b.p),
                })
                .collect(),
        );
        let d = coeffs.d[lvl];
        g.push(
            (0..nx)
                .map(|j| {
                    let n = &row[j];
                    let s = &coeffs.sources[lvl][j];
                    let (c, dc) = chi[j];
                    let (rho, p) = (n.b.rho, n.b.p);
                    let ud = d * c;
                    let dud = d * dc;
                    [
                        s[3] / 3.0 - 5.0 / 3.0 * p * dud - n.dp * ud,
                        s[0] - rho * ud * n.du[0],
                        s[1] - rho * ud * n.du[1],
                        s[2] - rho * (dd[lvl] * c + n.b.u3 * dud) - rho * ud * n.du[2],
                        s[3] - 2.0 * p * dud - 3.0 * rho * ud * n.dt_,
                    ]
                })
                .collect(),
        );
        nodes.push(row);
    }
    let sys = LinearSys { nodes, faces, g };
    let engine = Engine::new(&grid.x);
    let to_sym = |lvl: usize, j: usize, m: &MacroCoeffs| -> Node5 {
        let b = sys.nodes[lvl][j].b;
        let w3 = if j == 0 {
            0.0
        } else {
            m.u[2] - coeffs.d[lvl] * chi[j].0
        };
        [
            (b.rho * m.theta + 3.0 * b.t * m.rho) / 3.0,
            m.u[0],
            m.u[1],
            w3,
            m.theta,
        ]
    };
    let from_sym = |lvl: usize, j: usize, q: &Node5| -> MacroCoeffs {
        let b = sys.nodes[lvl][j].b;
        MacroCoeffs {
            rho: (3.0 * q[0] - b.rho * q[4]) / (3.0 * b.t),
            u: [q[1], q[2], q[3] + coeffs.d[lvl] * chi[j].0],
            theta: q[4],
        }
    };
    let energy_of = |lvl: usize, q: &[Node5]| -> f64 {
        0.5 * engine.integral(q, |j, x| {
            let b = sys.nodes[lvl][j].b;
            let rt = (3.0 * x[0] - b.rho * x[4]) / (3.0 * b.t);
            b.t * rt * rt / b.rho
                + b.rho * (x[1] * x[1] + x[2] * x[2] + x[3] * x[3])
                + b.rho * x[4] * x[4] / (6.0 * b.t)
        })
    };
    let mut q: Vec<Node5> = coeffs
        .init
        .iter()
        .enumerate()
        .map(|(j, m)| to_sym(0, j, m))
        .collect();
    let mut levels = Vec::with_capacity(nl);
    let mut energy = Vec::with_capacity(nl);
    levels.push(
        q.iter()
            .enumerate()
            .map(|(j, x)| from_sym(0, j, x))
            .collect::<Vec<_>>(),
    );
    energy.push(energy_of(0, &q));
    for n in 0..grid.n_steps {
        q = engine.step(&sys, n, grid.dt, &q);
        if q.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(HilbexError::Numerical(format!(
                "linear hyperbolic solution not finite at t={}",
                grid.time(n + 1)
            )));
        }
        levels.push(
            q.iter()
                .enumerate()
                .map(|(j, x)| from_sym(n + 1, j, x))
                .collect(),
        );
        energy.push(energy_of(n + 1, &q));
    }
    let e0 = energy[0];
    let emax = energy.iter().cloned().fold(0.0, f64::max);
    let energy_growth = if e0 > 0.0 { emax / e0 } else { f64::NAN };
    let mut warnings = Vec::new();
    if energy_growth > growth_warn {
        warnings.push(format!(
            "linear hyperbolic energy grew by a factor {energy_growth:.3e}"
        ));
    }
    Ok(PerturbationField {
        levels,
        energy,
        energy_growth,
        warnings,
    })
}

/// Second-order time derivative of a per-level series.
pub fn time_derivative(f: &[f64], dt: f64) -> Vec<f64> {
    let n = f.len();
    if n < 3 {
        return vec![if n == 2 { (f[1] - f[0]) / dt } else { 0.0 }; n];
    }
    (0..n)
        .map(|k| {
            if k == 0 {
                (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dt)
            } else if k == n - 1 {
                (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * dt)
            } else {
                (f[k + 1] - f[k - 1]) / (2.0 * dt)
            }
        })
        .collect()
}

/// `(φ, Φ, ϑ)` per tangential mode and node.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticState {
    pub modes: Vec<Vec<Node5>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticTrajectory {
    pub grid: SpatialGrid,
    pub wavenumbers: Vec<f64>,
    pub states: Vec<AcousticState>,
    pub energy: Vec<f64>,
}

impl AcousticTrajectory {
    /// Physical field at `x₁`: `φ, Φ₂, Φ₃, ϑ` vary as `cos(k x₁)`, `Φ₁` as `sin(k x₁)`.
    /// A `k = 0` mode is uniform in `x₁`, `Φ₁` included.
    pub fn physical(&self, level: usize, node: usize, x1: f64) -> Node5 {
        let mut out = [0.0; 5];
        for (m, k) in self.wavenumbers.iter().enumerate() {
            let a = self.states[level].modes[m][node];
            let (c, s) = if *k == 0.0 {
                (1.0, 1.0)
            } else {
                ((k * x1).cos(), (k * x1).sin())
            };
            for i in 0..5 {
                out[i] += a[i] * if i == 1 { s } else { c };
            }
        }
        out
    }
}

struct AcousticSys {
    k: f64,
}

const SOUND: f64 = 1.290_994_448_735_805_6;

impl FvSystem for AcousticSys {
    fn frozen(&self) -> [bool; 5] {
        FROZEN_U3
    }

    fn flux(&self, _lvl: usize, _at: At, q: &Node5) -> Node5 {
        [q[3], 0.0, 0.0, q[0] + q[4], 2.0 / 3.0 * q[3]]
    }

    fn speed(&self, _lvl: usize, _at: At, _q: &Node5) -> f64 {
        SOUND
    }

    fn source(&self, _lvl: usize, _j: usize, q: &Node5) -> Option<Node5> {
        if self.k == 0.0 {
            return None;
        }
        let k = self.k;
        Some([
            -k * q[1],
            k * (q[0] + q[4]),
            0.0,
            0.0,
            -2.0 / 3.0 * k * q[1],
        ])
    }
}

/// Linear acoustics around `(1, 0, 1)` with `Φ₃ = 0` at the wall. One initial
/// profile per tangential mode (one in slab mode).
pub fn solve_acoustic(
    init: &[PerturbationSpec],
    horizon: f64,
    grid: &SpatialGrid,
) -> Result<AcousticTrajectory> {
    check_horizon(grid, horizon)?;
    let ks = grid.wavenumbers();
    if init.len() != ks.len() {
        return Err(HilbexError::config(
            "init",
            format!("expected {} mode profiles, got {}", ks.len(), init.len()),
        ));
    }
    for p in init {
        p.validate()?;
    }
    if grid.max_speed < SOUND * (1.0 - 1e-12) {
        return Err(HilbexError::Precondition(
            "grid time step was sized for a speed below the sound speed".into(),
        ));
    }
    let engine = Engine::new(&grid.x);
    let systems: Vec<AcousticSys> = ks.iter().map(|&k| AcousticSys { k }).collect();
    let mut modes: Vec<Vec<Node5>> = init
        .iter()
        .map(|p| grid.x.iter().map(|&x| p.sample(x, 0.0)).collect())
        .collect();
    let energy_of = |modes: &[Vec<Node5>]| -> f64 {
        modes
            .iter()
            .map(|q| {
                0.5 * engine.integral(q, |_, a| {
                    a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3] + 1.5 * a[4] * a[4]
                })
            })
            .sum()
    };
    let mut states = vec![AcousticState {
        modes: modes.clone(),
    }];
    let mut energy = vec![energy_of(&modes)];
    for n in 0..grid.n_steps {
        for (q, sys) in modes.iter_mut().zip(&systems) {
            *q = engine.step(sys, n, grid.dt, q);
        }
        energy.push(energy_of(&modes));
        states.push(AcousticState {
            modes: modes.clone(),
        });
    }
    Ok(AcousticTrajectory {
        grid: grid.clone(),
        wavenumbers: ks,
        states,
        energy,
    })
}

/// Cubic spline with a prescribed slope at the left end and a natural right end.
#[derive(Debug, Clone, PartialEq)]
pub struct Spline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline {
    pub fn clamped_left(x: &[f64], y: &[f64], slope0: f64) -> Self {
        let n = x.len();
        assert!(
            n >= 3 && y.len() == n,
            "spline needs at least three matching points"
        );
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        // Tridiagonal system for the second derivatives, m[n-1] = 0.
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut r = vec![0.0; n];
        b[0] = 2.0 * h[0];
        c[0] = h[0];
        r[0] = 6.0 * ((y[1] - y[0]) / h[0] - slope0);
        for i in 1..n - 1 {
            a[i] = h[i - 1];
            b[i] = 2.0 * (h[i - 1] + h[i]);
            c[i] = h[i];
            r[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        b[n - 1] = 1.0;
        for i in 1..n {
            let w = a[i] / b[i - 1];
            b[i] -= w * c[i - 1];
            r[i] -= w * r[i - 1];
        }
        let mut m = vec![0.0; n];
        m[n - 1] = r[n - 1] / b[n - 1];
        for i in (0..n - 1).rev() {
            m[i] = (r[i] - c[i] * m[i + 1]) / b[i];
        }
        Spline {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        }
    }

    /// Value, first and second derivative; clamped to the end nodes outside the range.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let n = self.x.len();
        let t = t.clamp(self.x[0], self.x[n - 1]);
        let i = match self.x.binary_search_by(|p| p.total_cmp(&t)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let val = a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let der = (self.y[i + 1] - self.y[i]) / h - (3.0 * a * a - 1.0) * h * m0 / 6.0
            + (3.0 * b * b - 1.0) * h * m1 / 6.0;
        (val, der, a * m0 + b * m1)
    }
}

/// Taylor coefficients `f⁽ˡ⁾(0)/l!`, `l = 0..=order`, from the first
/// `order + 2` nodes, plus a warning when the estimate from every other node
/// disagrees by more than 20%.
pub fn taylor_wall_coeffs(
    x: &[f64],
    f: &[f64],
    order: usize,
) -> Result<(Vec<f64>, Option<String>)> {
    let np = order + 2;
    if x.len() < 2 * np - 1 || f.len() != x.len() {
        return Err(HilbexError::Precondition(format!(
            "taylor_wall_coeffs needs {} nodes",
            2 * np - 1
        )));
    }
    let fit = |idx: &[usize]| -> Result<Vec<f64>> {
        let s = x[idx[idx.len() - 1]];
        let mut a = vec![0.0; np * np];
        let mut r = vec![0.0; np];
        for (row, &k) in idx.iter().enumerate() {
            for col in 0..np {
                a[row * np + col] = ((x[k] - x[0]) / s).powi(col as i32);
            }
            r[row] = f[k];
        }
        let c = solve_dense(&a, &r, np)
            .ok_or_else(|| HilbexError::Numerical("singular wall Taylor fit".into()))?;
        Ok(c.iter()
            .enumerate()
            .map(|(l, v)| v / s.powi(l as i32))
            .collect())
    };
    let fine = fit(&(0..np).collect::<Vec<_>>())?;
    let coarse = fit(&(0..np).map(|k| 2 * k).collect::<Vec<_>>())?;
    let mut warning = None;
    for l in 0..=order {
        let scale = fine[l].abs().max(coarse[l].abs());
        if scale > 1e-12 && (fine[l] - coarse[l]).abs() > 0.2 * scale {
            warning = Some(format!(
                "wall Taylor coefficient {l} is unresolved: {:.3e} vs {:.3e} on the coarse stencil",
                fine[l], coarse[l]
            ));
            break;
        }
    }
    Ok((fine[..=order].to_vec(), warning))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(horizon: f64) -> SpatialGrid {
        let spec = SpatialGridSpec {
            h_min: 0.01,
            h_max: 0.02,
            ..Default::default()
        };
        SpatialGrid::build(&spec, SOUND, horizon).unwrap()
    }

    #[test]
    fn graded_grid_shape() {
        let g = SpatialGrid::build(&SpatialGridSpec::default(), 1.0, 1.0).unwrap();
        assert_eq!(g.x[0], 0.0);
        assert_eq!(*g.x.last().unwrap(), 4.0);
        assert!(g.x.windows(2).all(|w| w[1] > w[0]));
        let h: Vec<f64> = g.x.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(h[1] / h[0] > 1.05 && h[1] / h[0] < 1.15);
        assert!(g.dt <= g.cfl * g.min_spacing() + 1e-15);
        assert!((g.horizon() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bad_specs_are_config_errors() {
        let s = SpatialGridSpec {
            h_min: -1.0,
            ..Default::default()
        };
        assert!(SpatialGrid::build(&s, 1.0, 1.0).unwrap_err().is_config());
        let s = SpatialGridSpec {
            mode: SpatialMode::TangentialFourier {
                modes: 9,
                period: 1.0,
            },
            ..Default::default()
        };
        assert!(SpatialGrid::build(&s, 1.0, 1.0).unwrap_err().is_config());
    }

    #[test]
    fn euler_preserves_constant_state_exactly() {
        let g = grid(0.3);
        let f = solve_euler(&PerturbationSpec::default(), 0.0, 0.3, &g).unwrap();
        for lvl in &f.levels {
            for p in lvl {
                assert_eq!(*p, FluidPoint::reference());
            }
        }
        assert_eq!(f.wall_trace.last().unwrap().dp, 0.0);
    }

    #[test]
    fn euler_keeps_slip_and_conserves_mass() {
        let g = grid(0.5);
        let f = solve_euler(&PerturbationSpec::default(), 0.1, 0.5, &g).unwrap();
        assert!(f.wall_slip() <= 1e-10);
        let e = Engine::new(&g.x);
        let mass =
            |l: &[FluidPoint]| e.integral(&l.iter().map(prim_of).collect::<Vec<_>>(), |_, a| a[0]);
        let m0 = mass(&f.levels[0]);
        let m1 = mass(f.levels.last().unwrap());
        assert!((m0 - m1).abs() < 1e-12 * m0, "{m0} {m1}");
    }

    #[test]
    fn euler_blowup_is_reported() {
        let g = grid(0.2);
        let err = solve_euler_with(&PerturbationSpec::default(), 0.1, 0.2, &g, 1e-3).unwrap_err();
        assert!(matches!(err, HilbexError::BlowUp { .. }));
    }

    #[test]
    fn euler_rejects_nonpositive_density() {
        let g = grid(0.1);
        let err = solve_euler(&PerturbationSpec::default(), 10.0, 0.1, &g);
        assert!(err.is_err());
    }

    #[test]
    fn acoustic_zero_data_stays_zero() {
        let g = grid(0.5);
        let a = solve_acoustic(&[PerturbationSpec::zero()], 0.5, &g).unwrap();
        assert!(a
            .states
            .iter()
            .all(|s| s.modes[0].iter().all(|x| x.iter().all(|v| *v == 0.0))));
    }

    #[test]
    fn hyperbolic_zero_problem_is_zero() {
        let g = grid(0.3);
        let e = FluidField::constant(&g);
        let c = HyperbolicCoefficients::zero(e.n_levels(), g.len());
        let s = solve_linear_hyperbolic(&e, &c, 0.3).unwrap();
        assert_eq!(s.max_abs(), 0.0);
    }

    #[test]
    fn hyperbolic_matches_acoustic_at_rest() {
        let g = grid(0.6);
        let e = FluidField::constant(&g);
        let init = PerturbationSpec::default();
        let ac = solve_acoustic(std::slice::from_ref(&init), 0.6, &g).unwrap();
        let mut c = HyperbolicCoefficients::zero(e.n_levels(), g.len());
        c.init =
            g.x.iter()
                .map(|&x| {
                    let s = init.sample(x, 0.0);
                    MacroCoeffs {
                        rho: s[0],
                        u: [s[1], s[2], s[3]],
                        theta: 3.0 * s[4],
                    }
                })
                .collect();
        let h = solve_linear_hyperbolic(&e, &c, 0.6).unwrap();
        let mut gap: f64 = 0.0;
        for (lvl, st) in ac.states.iter().enumerate() {
            for (j, a) in st.modes[0].iter().enumerate() {
                let m = coeffs_array(&h.levels[lvl][j]);
                let b = [m[0], m[1], m[2], m[3], m[4] / 3.0];
                for i in 0..5 {
                    gap = gap.max((a[i] - b[i]).abs());
                }
            }
        }
        assert!(gap < 1e-10, "gap {gap:e}");
    }

    #[test]
    fn hyperbolic_enforces_wall_datum() {
        let g = grid(0.4);
        let e = solve_euler(&PerturbationSpec::default(), 0.1, 0.4, &g).unwrap();
        let mut c = HyperbolicCoefficients::zero(e.n_levels(), g.len());
        c.d = (0..e.n_levels())
            .map(|n| 0.3 * (2.0 * g.time(n)).sin())
            .collect();
        let h = solve_linear_hyperbolic(&e, &c, 0.4).unwrap();
        for (lvl, l) in h.levels.iter().enumerate() {
            assert!((l[0].u[2] - c.d[lvl]).abs() <= 1e-10);
        }
        assert!(h.max_abs() > 1e-3);
    }

    #[test]
    fn hyperbolic_rejects_incompatible_datum() {
        let g = grid(0.1);
        let e = FluidField::constant(&g);
        let mut c = HyperbolicCoefficients::zero(e.n_levels(), g.len());
        c.d[0] = 0.1;
        let err = solve_linear_hyperbolic(&e, &c, 0.1).unwrap_err();
        assert!(matches!(err, HilbexError::Precondition(_)));
    }

    #[test]
    fn acoustic_fourier_modes_conserve_energy() {
        let spec = SpatialGridSpec {
            h_min: 0.01,
            h_max: 0.02,
            mode: SpatialMode::TangentialFourier {
                modes: 2,
                period: 4.0,
            },
            ..Default::default()
        };
        let g = SpatialGrid::build(&spec, SOUND, 1.0).unwrap();
        let a = solve_acoustic(
            &[PerturbationSpec::default(), PerturbationSpec::default()],
            1.0,
            &g,
        )
        .unwrap();
        let e0 = a.energy[0];
        let drift = a.energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max) / e0;
        assert!(drift < 1e-3, "{drift:e}");
        assert_eq!(a.physical(0, 0, 0.3)[3], 0.0);
    }

    #[test]
    fn slab_acoustic_keeps_tangential_velocity() {
        let g = grid(0.1);
        let init = PerturbationSpec::default();
        let a = solve_acoustic(std::slice::from_ref(&init), 0.1, &g).unwrap();
        let j = 20;
        assert_eq!(a.physical(0, j, 0.7)[1], init.sample(g.x[j], 0.0)[1]);
    }

    #[test]
    fn cutoff_is_smooth_step() {
        assert_eq!(cutoff(0.5), (1.0, 0.0));
        assert_eq!(cutoff(2.5), (0.0, 0.0));
        let (c, dc) = cutoff(1.5);
        assert!((c - 0.5).abs() < 1e-14);
        let h = 1e-6;
        let fd = (cutoff(1.3 + h).0 - cutoff(1.3 - h).0) / (2.0 * h);
        assert!((fd - cutoff(1.3).1).abs() < 1e-6);
        assert!(dc < 0.0);
    }

    #[test]
    fn spline_reproduces_cubics_with_exact_end_data() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.05).powf(1.2)).collect();
        let f = |t: f64| 1.0 + 2.0 * t - t * t;
        let y: Vec<f64> = x.iter().map(|&t| f(t)).collect();
        let s = Spline::clamped_left(&x, &y, 2.0);
        let (v, d, _) = s.eval(0.37);
        assert!((v - f(0.37)).abs() < 1e-3);
        assert!((d - (2.0 - 0.74)).abs() < 1e-2);
        assert!((s.eval(0.0).1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn taylor_coeffs_exact_on_polynomials() {
        let x: Vec<f64> = (0..10)
            .map(|i| 0.01 * i as f64 * (1.0 + 0.1 * i as f64))
            .collect();
        let f: Vec<f64> = x
            .iter()
            .map(|t| 3.0 - 2.0 * t + 0.5 * t * t - t * t * t)
            .collect();
        let (c, w) = taylor_wall_coeffs(&x, &f, 2).unwrap();
        assert!((c[0] - 3.0).abs() < 1e-12);
        assert!((c[1] + 2.0).abs() < 1e-9);
        assert!((c[2] - 0.5).abs() < 1e-6 || w.is_none());
        let (c3, w3) = taylor_wall_coeffs(&x, &f, 3).unwrap();
        assert!((c3[3] + 1.0).abs() < 1e-6);
        assert!(w3.is_none());
    }

    #[test]
    fn pressure_mode_makes_pressure_follow_psi() {
        let p = PerturbationSpec::default();
        let d = 0.1;
        for x in [0.0, 0.4, 1.7] {
            let s = p.sample(x, d);
            let lhs = (1.0 + d * s[0]) * (1.0 + d * s[4]);
            assert!((lhs - (1.0 + d * p.theta.eval(x))).abs() < 1e-14);
        }
    }
}
