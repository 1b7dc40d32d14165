//! Experiments and their output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use ultradeco::jump::{
    back_react_level, empirical_survival, ChainSampler, first_step_distribution_with, sample_ensemble, survival,
    write_trajectories_csv, FirstClickSampler, FirstStepOptions,
};
use ultradeco::reduction::compute_reduced;
use ultradeco::sweep::{check_gammas, compare, gamma_sweep};
use ultradeco::{export, Error as CoreError, Execution, ReducedModel};

use crate::config::{Prepared, RunConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Validate,
    Survival,
    FirstStep,
    Trajectories,
    Compare,
    GammaSweep,
    Arrival,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Validate => "validate",
            Experiment::Survival => "survival",
            Experiment::FirstStep => "firststep",
            Experiment::Trajectories => "trajectories",
            Experiment::Compare => "compare",
            Experiment::GammaSweep => "gamma-sweep",
            Experiment::Arrival => "arrival",
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Flags {
    pub emit_plot_data: bool,
    pub multi_click: bool,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub experiment: &'static str,
    pub config: RunConfig,
    pub multi_click: bool,
    pub emit_plot_data: bool,
    pub timestamp_unix: u64,
    pub duration_seconds: f64,
    pub outputs: Vec<String>,
    pub summary: Value,
    pub warnings: Vec<String>,
}

/// Collects output files of a run below one directory.
struct Outputs {
    dir: PathBuf,
    plot: bool,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path, plot: bool) -> Self {
        Self {
            dir: dir.to_path_buf(),
            plot,
            files: Vec::new(),
        }
    }

    /// Created on first write, so failed runs leave nothing behind.
    fn ensure_dir(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir)
            .map_err(|e| CliError::Config(format!("run.output_dir: cannot create {}: {e}", self.dir.display())))
    }

    /// Writes `name.csv` from a writer callback, plus `name.dat` for
    /// gnuplot when plot data was requested.
    fn table<F>(&mut self, name: &str, write: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        self.ensure_dir()?;
        let mut buf = Vec::new();
        let csv_path = self.dir.join(format!("{name}.csv"));
        write(&mut buf).map_err(|e| CliError::io(&csv_path, e))?;
        fs::write(&csv_path, &buf).map_err(|e| CliError::io(&csv_path, e))?;
        self.files.push(format!("{name}.csv"));
        if self.plot {
            let dat_path = self.dir.join(format!("{name}.dat"));
            fs::write(&dat_path, to_gnuplot(&String::from_utf8_lossy(&buf))).map_err(|e| CliError::io(&dat_path, e))?;
            self.files.push(format!("{name}.dat"));
        }
        Ok(())
    }
}

/// Whitespace-separated columns, header as a comment, empty fields as NaN.
fn to_gnuplot(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').map(|f| if f.is_empty() { "NaN" } else { f }).collect();
        if i == 0 {
            out.push_str("# ");
        }
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let path = dir.join("manifest.json");
    let tmp = dir.join("manifest.json.tmp");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&tmp, text + "\n").map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
    Ok(())
}

fn reduced(cfg: &RunConfig, model: &Prepared) -> Result<ReducedModel, CliError> {
    compute_reduced(&model.spec, cfg.solver.k_mode).map_err(|e| match e {
        CoreError::NoDephasing { mu, nu } => CliError::Config(format!(
            "model: levels {mu} and {nu} are coupled but have no dephasing (gamma must be > 0)"
        )),
        other => other.into(),
    })
}

fn check_level(cfg: &RunConfig, model: &Prepared) -> Result<usize, CliError> {
    let level = cfg.run.initial_level;
    if level >= model.spec.num_levels() {
        return Err(CliError::Config(format!(
            "run.initial_level: {level} is not a device level (0..{})",
            model.spec.num_levels()
        )));
    }
    Ok(level)
}

/// Runs one experiment and writes its outputs and manifest. Returns the
/// manifest and human-readable summary lines for stdout.
pub fn run(experiment: Experiment, cfg: &RunConfig, flags: Flags) -> Result<(Option<Manifest>, Vec<String>), CliError> {
    let started = Instant::now();
    cfg.check()?;
    let model = cfg.model.prepare()?;
    let mut warnings = model.warnings.clone();
    let mut lines = Vec::new();

    if experiment == Experiment::Validate {
        let red = reduced(cfg, &model)?;
        warnings.extend(red.warnings().iter().cloned());
        lines.push(format!(
            "valid: {} model, {} device levels, system dimension {}",
            cfg.model.name(),
            model.spec.num_levels(),
            model.spec.dim()
        ));
        lines.extend(warnings.iter().map(|w| format!("warning: {w}")));
        return Ok((None, lines));
    }

    let mut out = Outputs::new(&cfg.run.output_dir, flags.emit_plot_data);
    let integrator = cfg.solver.integrator();
    let grid = cfg.time_grid();
    let level = check_level(cfg, &model)?;
    // closed forms describe the start from the ready level
    let analytic = model.analytic.as_deref().filter(|_| level == 0);
    let analytic_dyn = analytic.map(|f| f as &dyn Fn(f64) -> f64);

    let summary = match experiment {
        Experiment::Validate => unreachable!(),
        Experiment::Survival => {
            let red = reduced(cfg, &model)?;
            warnings.extend(red.warnings().iter().cloned());
            let tl = back_react_level(&red, &model.state, level, &grid, &integrator)?;
            let curve = survival(&tl);
            out.table("survival", |w| curve.write_csv(w, analytic_dyn))?;
            let max_diff = analytic.map(|f| {
                curve
                    .times
                    .iter()
                    .zip(&curve.values)
                    .map(|(t, p)| (p - f(*t)).abs())
                    .fold(0.0, f64::max)
            });
            if let Some(d) = max_diff {
                lines.push(format!("max |p_numeric - p_analytic| = {}", export::number(d)));
            }
            json!({
                "final_survival": curve.values.last(),
                "max_abs_diff_analytic": max_diff,
            })
        }
        Experiment::FirstStep => {
            let red = reduced(cfg, &model)?;
            warnings.extend(red.warnings().iter().cloned());
            let opts = FirstStepOptions {
                cutoff: cfg.run.cutoff,
                points: cfg.run.t_points,
            };
            let dist = first_step_distribution_with(&red, &model.state, level, cfg.run.t_max, &integrator, &opts)?;
            warnings.extend(dist.warnings.iter().cloned());
            out.table("firststep", |w| {
                let header = ["to_level", "probability"].map(String::from);
                let rows = (0..red.levels())
                    .filter(|&nu| nu != level)
                    .map(|nu| vec![nu.to_string(), export::number(dist.probabilities[nu])]);
                export::write_csv(w, &header, rows)
            })?;
            lines.push(format!(
                "escape_total = {}, remainder = {}",
                export::number(dist.escape_total),
                export::number(dist.remainder)
            ));
            json!({
                "source": level,
                "probabilities": dist.probabilities,
                "escape_total": dist.escape_total,
                "remainder": dist.remainder,
            })
        }
        Experiment::Trajectories => {
            let seed = cfg.run.seed.ok_or_else(|| {
                CliError::Config("run.seed: required for trajectories (set it in [run] or pass --seed)".into())
            })?;
            if cfg.run.n_traj == 0 {
                return Err(CliError::Config("run.n_traj: must be at least 1".into()));
            }
            let red = reduced(cfg, &model)?;
            warnings.extend(red.warnings().iter().cloned());
            let trajectories = if flags.multi_click {
                if cfg.run.max_clicks == 0 {
                    return Err(CliError::Config("run.max_clicks: must be at least 1".into()));
                }
                warnings.push(
                    "multi-click chains re-enter the jump process after each click; clicks after the first are an extrapolation"
                        .into(),
                );
                let chains = ChainSampler::new(&red, &model.state, level, cfg.run.t_max, cfg.run.max_clicks, &integrator)?;
                let trajectories = chains.ensemble(seed, cfg.run.n_traj, Execution::Parallel)?;
                warnings.extend(chains.warnings());
                trajectories
            } else {
                let sampler = FirstClickSampler::new(&red, &model.state, level, cfg.run.t_max, &integrator)?;
                warnings.extend(sampler.warnings().iter().cloned());
                sample_ensemble(&sampler, seed, cfg.run.n_traj, Execution::Parallel)?
            };
            let censored = trajectories.iter().filter(|t| t.events.is_empty()).count();
            if censored > 0 {
                warnings.push(format!("{censored} of {} trajectories had no click before t_max", trajectories.len()));
            }
            let mut per_level = vec![0usize; red.levels()];
            for ev in trajectories.iter().filter_map(|t| t.first_click()) {
                per_level[ev.to_level] += 1;
            }
            out.table("trajectories", |w| write_trajectories_csv(w, &trajectories))?;
            let est = empirical_survival(&trajectories, &grid);
            out.table("survival_mc", |w| est.write_csv(w, analytic_dyn))?;
            lines.push(format!(
                "{} trajectories, {censored} censored, first clicks per level {per_level:?}",
                trajectories.len()
            ));
            json!({
                "seed": seed,
                "n_traj": trajectories.len(),
                "censored": censored,
                "first_clicks_per_level": per_level,
                "total_clicks": trajectories.iter().map(|t| t.events.len()).sum::<usize>(),
            })
        }
        Experiment::Compare => {
            let cmp = compare(&model.spec, &model.state, level, &grid, &integrator, cfg.solver.k_mode)?;
            warnings.extend(cmp.warnings.iter().cloned());
            out.table("compare", |w| cmp.write_csv(w))?;
            out.table("compare_summary", |w| {
                export::write_csv(w, &["max_abs_error".to_string()], [vec![export::number(cmp.max_abs_error)]])
            })?;
            lines.push(format!("max_abs_error = {}", export::number(cmp.max_abs_error)));
            json!({ "max_abs_error": cmp.max_abs_error })
        }
        Experiment::GammaSweep => {
            check_gammas(&cfg.run.gammas).map_err(|e| match e {
                CoreError::InvalidInput(msg) => CliError::Config(format!("run.{msg}")),
                other => other.into(),
            })?;
            let sweep = gamma_sweep(
                &cfg.run.gammas,
                |gamma| {
                    cfg.model
                        .with_gamma(gamma)
                        .and_then(|m| m.prepare())
                        .map(|p| p.spec)
                        .map_err(|e| CoreError::InvalidInput(e.to_string()))
                },
                &model.state,
                level,
                &grid,
                &integrator,
                cfg.solver.k_mode,
                Execution::Sequential,
            )?;
            warnings.extend(sweep.warnings.iter().cloned());
            out.table("gamma_sweep", |w| sweep.write_csv(w))?;
            lines.push(format!("monotone decrease: {}", sweep.monotone));
            json!({
                "monotone": sweep.monotone,
                "errors": sweep.points.iter().map(|p| json!({"gamma": p.gamma, "max_abs_error": p.error})).collect::<Vec<_>>(),
            })
        }
        Experiment::Arrival => {
            let red = reduced(cfg, &model)?;
            warnings.extend(red.warnings().iter().cloned());
            let tl = back_react_level(&red, &model.state, level, &grid, &integrator)?;
            let gamma = red.gamma(level);
            out.table("arrival", |w| {
                let header = ["t", "survival", "arrival_density", "survival_analytic"].map(String::from);
                let rows = tl.times.iter().zip(&tl.states).map(|(&t, s)| {
                    // −d/dt tr ρ̂ = tr(Γρ̂ + ρ̂Γ†)
                    let density = (gamma.trace_product(s) + s.trace_product(&gamma.adjoint())).re;
                    vec![
                        export::number(t),
                        export::number(s.trace().re),
                        export::number(density),
                        analytic.map(|f| export::number(f(t))).unwrap_or_default(),
                    ]
                });
                export::write_csv(w, &header, rows)
            })?;
            let final_survival = tl.states.last().unwrap().trace().re;
            lines.push(format!("arrival probability by t_max = {}", export::number(1.0 - final_survival)));
            json!({ "arrival_probability": 1.0 - final_survival })
        }
    };

    lines.extend(warnings.iter().map(|w| format!("warning: {w}")));
    let manifest = Manifest {
        tool: "ultradeco",
        version: env!("CARGO_PKG_VERSION"),
        experiment: experiment.name(),
        config: cfg.clone(),
        multi_click: flags.multi_click,
        emit_plot_data: flags.emit_plot_data,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        duration_seconds: started.elapsed().as_secs_f64(),
        outputs: out.files.clone(),
        summary,
        warnings,
    };
    out.ensure_dir()?;
    write_manifest(&out.dir, &manifest)?;
    Ok((Some(manifest), lines))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gnuplot_conversion() {
        assert_eq!(to_gnuplot("t,p,q\n1,2,\n"), "# t p q\n1 2 NaN\n");
    }
}
