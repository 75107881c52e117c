//! Scenario files, run artifacts and small report helpers.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HilbexError, Result};
use crate::euler::{euler_grid, solve_euler};
use crate::expansion::{acoustic_gap, DefectReport, Expansion, ExpansionConfig, GapReport};

/// Least-squares slope of `log y` against `log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(HilbexError::Precondition(
            "slope fit needs at least three points".into(),
        ));
    }
    if points
        .iter()
        .any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(HilbexError::Precondition(
            "slope fit needs positive finite values".into(),
        ));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(HilbexError::Precondition(
            "slope fit needs distinct abscissae".into(),
        ));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Version of the scenario document layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Known departures from the full construction, echoed in every manifest.
pub const DEVIATIONS: &[&str] = &[
    "expansion orders N <= 2 and wall Taylor order <= 2",
    "slab-1d geometry for the expansion pipeline; tangential Fourier modes for acoustics only",
    "viscous layer initial data constructed to match the first Neumann datum",
    "natural cubic splines with clamped wall slope for stretched-variable interpolation",
    "kinetic layer terms sampled every source_stride levels and interpolated in time",
    "defect measured in L2 over the monitored region with a fixed absolute x3 step",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Epsilon,
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub expansion: ExpansionConfig,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| {
            HilbexError::config(
                format!("line {}, column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HilbexError::config("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HilbexError::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        if self.name.trim().is_empty() {
            return Err(HilbexError::config("name", "must not be empty"));
        }
        self.expansion.validate()?;
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() || sw.values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(HilbexError::config(
                    "sweep.values",
                    "values must be positive",
                ));
            }
            if sw.values.windows(2).any(|w| w[1] >= w[0]) {
                return Err(HilbexError::config(
                    "sweep.values",
                    "values must be sorted in strictly descending order",
                ));
            }
        }
        Ok(())
    }

    /// Expansion settings with the sweep applied.
    pub fn effective_config(&self) -> ExpansionConfig {
        let mut c = self.expansion.clone();
        if let Some(SweepSpec {
            parameter: SweepParameter::Epsilon,
            values,
        }) = &self.sweep
        {
            c.epsilons = values.clone();
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "detail")]
pub enum StageStatus {
    Ok,
    Failed(String),
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageRecord {
    pub stage: String,
    #[serde(flatten)]
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub name: String,
    pub schema_version: u32,
    pub tool_version: String,
    pub config_sha256: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub threads: usize,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub deviations: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub manifest: Manifest,
    pub stages: Vec<StageRecord>,
    pub files: Vec<FileRecord>,
}

impl RunRecord {
    /// The first fatal error, if any stage failed.
    pub fn failed(&self) -> Option<&StageRecord> {
        self.stages
            .iter()
            .find(|s| matches!(s.status, StageStatus::Failed(_)))
    }
}

/// Gap series over a `δ` sweep with fitted slopes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapSweep {
    pub gaps: Vec<GapReport>,
    pub fluid_slope: Option<SlopeFit>,
    pub kinetic_slope: Option<SlopeFit>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    pub out: Option<&'a Path>,
    pub threads: Option<usize>,
    pub verbose: bool,
}

/// Worker cap: explicit value, then `HILBEX_THREADS`, then the machine.
pub fn resolve_threads(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| {
            std::env::var("HILBEX_THREADS")
                .ok()
                .and_then(|s| s.trim().parse().ok())
        })
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
        .max(1)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn io_err(path: &Path, e: std::io::Error) -> HilbexError {
    HilbexError::Io(format!("{}: {e}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| HilbexError::Io(e.to_string()))
}

struct Writer {
    dir: PathBuf,
    files: Vec<FileRecord>,
}

impl Writer {
    fn put(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, content).map_err(|e| io_err(&path, e))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileRecord {
            path: name.to_string(),
            bytes: content.len() as u64,
            sha256: sha256_hex(content.as_bytes()),
        });
        Ok(())
    }
}

fn defects_csv(d: &[DefectReport]) -> String {
    let mut s = String::from("eps,l2,sup,positivity_min\n");
    for r in d {
        s.push_str(&format!(
            "{:e},{:.12e},{:.12e},{:.12e}\n",
            r.eps, r.l2, r.sup, r.positivity_min
        ));
    }
    s
}

fn gaps_csv(g: &[GapReport]) -> String {
    let mut s = String::from("delta,eps,fluid_gap,kinetic_gap\n");
    for r in g {
        let eps = r.eps.map_or(String::new(), |e| format!("{e:e}"));
        let kin = r.kinetic.map_or(String::new(), |k| format!("{k:.12e}"));
        s.push_str(&format!("{:e},{eps},{:.12e},{kin}\n", r.delta, r.fluid));
    }
    s
}

/// Output directory: explicit override, then the scenario field, then `./out/<name>`.
pub fn output_dir(scenario: &Scenario, over: Option<&Path>) -> PathBuf {
    over.map(Path::to_path_buf)
        .or_else(|| scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&scenario.name))
}

/// Runs Euler, the orders, the composite and the reports, writing every
/// artifact and the manifest. Config errors are returned; numerical failures
/// are recorded in the stages and skip everything downstream.
pub fn run_scenario(scenario: &Scenario, opts: RunOptions<'_>) -> Result<RunRecord> {
    scenario.validate()?;
    let started = now_unix();
    let threads = resolve_threads(opts.threads);
    let dir = output_dir(scenario, opts.out);
    fs::create_dir_all(&dir)
        .map_err(|e| HilbexError::config("output_dir", format!("{}: {e}", dir.display())))?;
    let probe = dir.join(".write-check");
    fs::write(&probe, b"")
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| {
            HilbexError::config(
                "output_dir",
                format!("{} is not writable: {e}", dir.display()),
            )
        })?;

    let config = scenario.effective_config();
    let config_json = serde_json::to_string(&config).map_err(|e| HilbexError::Io(e.to_string()))?;
    let mut w = Writer {
        dir: dir.clone(),
        files: Vec::new(),
    };
    let mut stages = Vec::new();
    let mut warnings = Vec::new();
    let log = |m: &str| {
        if opts.verbose {
            eprintln!("[{}] {m}", scenario.name);
        }
    };
    let stage = |name: &str,
                 r: std::result::Result<(), HilbexError>,
                 stages: &mut Vec<StageRecord>|
     -> bool {
        let ok = r.is_ok();
        stages.push(StageRecord {
            stage: name.into(),
            status: match r {
                Ok(()) => StageStatus::Ok,
                Err(e) => StageStatus::Failed(e.to_string()),
            },
        });
        ok
    };

    let mut planned = vec!["euler".to_string()];
    planned.extend((1..=config.order).map(|k| format!("order{k}")));
    planned.extend(["composite".into(), "defects".into()]);
    if matches!(
        scenario.sweep,
        Some(SweepSpec {
            parameter: SweepParameter::Delta,
            ..
        })
    ) {
        planned.push("gaps".into());
    }
    let mut alive = true;

    log("euler");
    let euler = euler_grid(
        &config.spatial_grid,
        &config.init,
        config.delta,
        config.horizon,
    )
    .and_then(|g| solve_euler(&config.init, config.delta, config.horizon, &g));
    let euler = match euler {
        Ok(e) => Some(e),
        Err(e) => {
            alive = stage("euler", Err(e), &mut stages);
            None
        }
    };
    let mut exp = None;
    if let Some(euler) = euler {
        stage("euler", Ok(()), &mut stages);
        log("orders");
        match Expansion::from_euler(&config, euler) {
            Ok(e) => {
                for b in &e.bundles {
                    w.put(&format!("order_{}.json", b.k), &to_json(&b.report)?)?;
                    warnings.extend(
                        b.report
                            .warnings
                            .iter()
                            .map(|m| format!("order {}: {m}", b.k)),
                    );
                    stage(&format!("order{}", b.k), Ok(()), &mut stages);
                }
                warnings.extend(e.warnings.iter().cloned());
                exp = Some(e);
            }
            Err(e) => {
                alive = stage("order1", Err(e), &mut stages);
            }
        }
    }

    if let Some(e) = exp.as_ref().filter(|_| alive) {
        log("composite");
        let last = e.n_levels() - 1;
        let r: Result<()> = (|| {
            for &eps in &config.epsilons {
                let c = e.assemble_composite(last, eps)?;
                w.put(
                    &format!("composite_eps{eps:e}.csv"),
                    &c.profile_csv(&e.vgrid)?,
                )?;
            }
            Ok(())
        })();
        alive = stage("composite", r, &mut stages);
        if alive {
            log("defects");
            match e.residual_report(threads) {
                Ok(rep) => {
                    if rep.slope.is_none() && config.epsilons.len() >= 3 {
                        warnings.push("defect slope not fitted: norms are not all positive".into());
                    }
                    w.put("residual_report.json", &to_json(&rep)?)?;
                    w.put("defects.csv", &defects_csv(&rep.defects))?;
                    if let Some(s) = rep.slope {
                        let pts: Vec<[f64; 2]> =
                            rep.defects.iter().map(|d| [d.eps, d.l2]).collect();
                        w.put(
                            "defect_slope.json",
                            &to_json(&serde_json::json!({ "points": pts, "fit": s }))?,
                        )?;
                    }
                    stage("defects", Ok(()), &mut stages);
                }
                Err(err) => alive = stage("defects", Err(err), &mut stages),
            }
        }
    }

    if let Some(SweepSpec {
        parameter: SweepParameter::Delta,
        values,
    }) = &scenario.sweep
    {
        if alive {
            log("gaps");
            let r: Result<GapSweep> = (|| {
                let gaps = values
                    .iter()
                    .map(|&d| acoustic_gap(&config, d, true))
                    .collect::<Result<Vec<_>>>()?;
                let fit = |f: &dyn Fn(&GapReport) -> Option<f64>| -> Option<SlopeFit> {
                    let pts: Option<Vec<(f64, f64)>> =
                        gaps.iter().map(|g| f(g).map(|v| (g.delta, v))).collect();
                    pts.and_then(|p| fit_slope(&p).ok())
                };
                let fluid_slope = fit(&|g| Some(g.fluid));
                let kinetic_slope = fit(&|g| g.kinetic);
                Ok(GapSweep {
                    gaps,
                    fluid_slope,
                    kinetic_slope,
                })
            })();
            match r {
                Ok(g) => {
                    w.put("gaps.csv", &gaps_csv(&g.gaps))?;
                    w.put("gap_report.json", &to_json(&g)?)?;
                    stage("gaps", Ok(()), &mut stages);
                }
                Err(err) => {
                    stage("gaps", Err(err), &mut stages);
                }
            }
        }
    }

    for name in planned {
        if !stages.iter().any(|s| s.stage == name) {
            stages.push(StageRecord {
                stage: name,
                status: StageStatus::Skipped,
            });
        }
    }
    let manifest = Manifest {
        name: scenario.name.clone(),
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config_json.as_bytes()),
        scenario: scenario.clone(),
        seed: scenario.seed,
        threads,
        started_unix: started,
        finished_unix: now_unix(),
        deviations: DEVIATIONS.iter().map(|s| s.to_string()).collect(),
        warnings,
    };
    let mut files = w.files.clone();
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let record = RunRecord {
        manifest,
        stages,
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, to_json(&record)?).map_err(|e| io_err(&path, e))?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        let s = fit_slope(&[(1.0, 1.0), (0.5, 0.5), (0.25, 0.25)]).unwrap();
        assert!((s.slope - 1.0).abs() < 1e-14 && (s.r2 - 1.0).abs() < 1e-14);
        let s = fit_slope(&[(1.0, 1.0), (0.5, 0.25), (0.25, 0.0625)]).unwrap();
        assert!((s.slope - 2.0).abs() < 1e-14);
    }

    #[test]
    fn slope_rejects_short_or_nonpositive_series() {
        assert!(fit_slope(&[(1.0, 1.0)]).is_err());
        assert!(fit_slope(&[(1.0, 1.0), (0.5, 0.0), (0.25, 0.1)]).is_err());
        assert!(fit_slope(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]).is_err());
    }

    #[test]
    fn scenario_errors_name_the_field() {
        let e = Scenario::parse(
            r#"{"schema_version":1,"name":"x","expansion":{"velocity_grid":{"radius":-1.0}}}"#,
        )
        .unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("velocity_grid.radius"), "{e}");
        let e = Scenario::parse("{\"schema_version\":1,\n\"name\":\"x\",\"bogus\":1}").unwrap_err();
        assert!(
            e.to_string().contains("line 2") && e.to_string().contains("bogus"),
            "{e}"
        );
        let e = Scenario::parse(r#"{"schema_version":9,"name":"x"}"#).unwrap_err();
        assert!(e.to_string().contains("schema_version"));
        let e = Scenario::parse(
            r#"{"schema_version":1,"name":"x","sweep":{"parameter":"delta","values":[0.01,0.02]}}"#,
        )
        .unwrap_err();
        assert!(e.to_string().contains("sweep.values"));
    }

    #[test]
    fn epsilon_sweep_replaces_the_list() {
        let s = Scenario::parse(r#"{"schema_version":1,"name":"x","sweep":{"parameter":"epsilon","values":[0.4,0.2,0.1]}}"#).unwrap();
        assert_eq!(s.effective_config().epsilons, vec![0.4, 0.2, 0.1]);
        assert_eq!(output_dir(&s, None), PathBuf::from("out/x"));
    }

    #[test]
    fn explicit_threads_win() {
        assert_eq!(resolve_threads(Some(3)), 3);
        assert_eq!(resolve_threads(Some(0)), 1);
    }

    #[test]
    fn checksum_is_hex_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
