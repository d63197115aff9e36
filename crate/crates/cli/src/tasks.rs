//! Task runners: each loads the configuration, executes the experiment, and
//! writes a CSV payload plus a JSON summary record.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dporo::cell::{
    aggregate_m, default_boundary_width, f_hom_estimate_stats, phi_m, phi_tilde_m,
    quadratic_form_from_cells, tensor_samples, CellError, CellOpts, PhiVariant,
};
use dporo::config::{parse_config, ExperimentConfig, TaskKind};
use dporo::dynamics::{
    macro_flow, micro_macro_compare, minimizing_movement_micro, sample_macro, MacroSystem,
};
use dporo::gamma::{
    assemble_limit_functional, minima_convergence_experiment, FHomEvaluator, MacroGrid,
};
use dporo::lattice::build_phases;
use dporo::solver::{SolveOptions, SolverError};
use dporo::util::IBox;
use serde_json::{json, Value};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Solver(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
            CliError::Io(m) => write!(f, "io: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CellError> for CliError {
    fn from(e: CellError) -> Self {
        match e {
            CellError::Solver(s) => CliError::Solver(s.to_string()),
            CellError::NotConverged => CliError::Solver(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Unbounded => CliError::Solver(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<dporo::gamma::GammaError> for CliError {
    fn from(e: dporo::gamma::GammaError) -> Self {
        match e {
            dporo::gamma::GammaError::NotConverged => CliError::Solver(e.to_string()),
            dporo::gamma::GammaError::Solver(s) => s.into(),
            dporo::gamma::GammaError::Cell(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<dporo::dynamics::DynamicsError> for CliError {
    fn from(e: dporo::dynamics::DynamicsError) -> Self {
        match e {
            dporo::dynamics::DynamicsError::NotConverged => CliError::Solver(e.to_string()),
            dporo::dynamics::DynamicsError::Solver(s) => s.into(),
            dporo::dynamics::DynamicsError::Gamma(g) => g.into(),
            dporo::dynamics::DynamicsError::Cell(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub tol: Option<f64>,
}

/// Splits `items` into contiguous chunks per worker and merges results in
/// index order, so the output is independent of the worker count.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let workers = workers.min(items.len());
    let chunk = items.len().div_ceil(workers);
    let mut indexed: Vec<(usize, Vec<R>)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, slice) in items.chunks(chunk).enumerate() {
            let f = &f;
            handles.push(scope.spawn(move || (w, slice.iter().map(f).collect::<Vec<R>>())));
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    indexed.sort_by_key(|(w, _)| *w);
    indexed.into_iter().flat_map(|(_, rs)| rs).collect()
}

fn fmt_row(fields: &[String]) -> String {
    fields.join(",")
}

fn num(v: f64) -> String {
    format!("{v}")
}

struct Outputs {
    dir: Option<PathBuf>,
    task: &'static str,
    hash: u64,
}

impl Outputs {
    fn new(kind: TaskKind, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Self, CliError> {
        let dir = opts
            .out
            .clone()
            .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(Outputs {
            dir,
            task: kind.name(),
            hash: cfg.hash,
        })
    }

    fn write_csv(&self, header: &str, rows: &[String]) -> Result<Option<PathBuf>, CliError> {
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = dir.join(format!("{}.csv", self.task));
        let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
        text.push_str(header);
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        std::fs::write(&path, text)?;
        Ok(Some(path))
    }

    fn write_summary(&self, mut payload: Value) -> Result<(), CliError> {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let record = payload.as_object_mut().expect("summary is an object");
        record.insert("task".into(), json!(self.task));
        record.insert("config_hash".into(), json!(format!("{:016x}", self.hash)));
        record.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        record.insert("created_unix".into(), json!(created));
        let text = serde_json::to_string_pretty(&payload).expect("serializable summary");
        println!("{text}");
        if let Some(dir) = &self.dir {
            std::fs::write(dir.join(format!("{}.summary.json", self.task)), text)?;
        }
        Ok(())
    }
}

pub fn run(kind: TaskKind, opts: &RunOptions) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&opts.config)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", opts.config.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| CliError::Validation(e.to_string()))?;
    if cfg.task.kind != kind {
        return Err(CliError::Validation(format!(
            "config task.kind is `{}` but the subcommand expects `{}`",
            cfg.task.kind.name(),
            kind.name()
        )));
    }
    if let Some(tol) = opts.tol {
        cfg.task.tol = Some(tol);
    }
    let outputs = Outputs::new(kind, &cfg, opts)?;
    match kind {
        TaskKind::Analyze => run_analyze(&cfg, &outputs),
        TaskKind::Phi => run_phi(&cfg, &outputs, opts.workers),
        TaskKind::FHom => run_fhom(&cfg, &outputs, opts.workers),
        TaskKind::Islands => run_islands(&cfg, &outputs),
        TaskKind::GammaCheck => run_gamma_check(&cfg, &outputs),
        TaskKind::FlowMicro => run_flow_micro(&cfg, &outputs),
        TaskKind::FlowMacro => run_flow_macro(&cfg, &outputs),
        TaskKind::FlowCompare => run_flow_compare(&cfg, &outputs, opts.workers),
    }
}

fn cell_opts(cfg: &ExperimentConfig) -> CellOpts {
    CellOpts {
        tol: cfg.task.tol,
        max_iter: None,
    }
}

fn solve_opts(cfg: &ExperimentConfig) -> SolveOptions {
    SolveOptions {
        tol: cfg.task.tol,
        max_iter: None,
        init: None,
    }
}

fn run_analyze(cfg: &ExperimentConfig, outputs: &Outputs) -> Result<(), CliError> {
    let model = &cfg.model;
    let dec = build_phases(model).map_err(|e| CliError::Validation(e.to_string()))?;
    let cell = model.cell();
    let components: Vec<Value> = dec
        .components()
        .iter()
        .map(|c| {
            json!({
                "phase": c.phase,
                "residues": c.cells.iter().map(|&i| cell.site_at(i)).collect::<Vec<_>>(),
                "winding_generators": c.winding,
                "infinite": c.is_infinite(),
            })
        })
        .collect();
    let islands: Vec<Value> = dec
        .islands()
        .iter()
        .map(|isl| json!({ "phase": isl.phase, "sites": isl.sites }))
        .collect();
    let fractions: Vec<Value> = (0..=model.phases())
        .map(|j| json!({ "phase": j, "fraction": dec.volume_fraction(model, j) }))
        .collect();
    outputs.write_summary(json!({
        "period": model.period(),
        "dimension": model.dim(),
        "phases": model.phases(),
        "components": components,
        "islands": islands,
        "volume_fractions": fractions,
    }))
}

fn run_phi(cfg: &ExperimentConfig, outputs: &Outputs, workers: usize) -> Result<(), CliError> {
    let model = &cfg.model;
    let dec = build_phases(model).map_err(|e| CliError::Validation(e.to_string()))?;
    let energy = &cfg.energy;
    let opts = cell_opts(cfg);
    let n_args = model.codomain() * model.phases() as usize;
    let axes = vec![cfg.task.z_grid.clone(); n_args];
    let samples = tensor_samples(&axes);
    let variant = match cfg.task.variant {
        PhiVariant::BoundaryPinned { r_width } if r_width <= 0 => PhiVariant::BoundaryPinned {
            r_width: default_boundary_width(model, &dec),
        },
        v => v,
    };
    let x = cfg.task.x.clone();
    type Row = Result<Vec<(f64, f64, usize)>, CellError>;
    let results: Vec<Row> = parallel_map(&samples, workers, |z| {
        let mut row = Vec::with_capacity(cfg.task.m_list.len());
        for &mc in &cfg.task.m_list {
            let sol = match variant {
                PhiVariant::Free => phi_m(model, &dec, energy, z, mc, x.as_deref(), &opts)?,
                PhiVariant::BoundaryPinned { r_width } => {
                    phi_tilde_m(model, &dec, energy, z, mc, r_width, x.as_deref(), &opts)?
                }
            };
            row.push((sol.value, sol.soft_value, sol.iterations));
        }
        Ok(row)
    });
    let mut rows = Vec::new();
    let mut extrapolated = Vec::new();
    let mut monotone = true;
    for (z, row) in samples.iter().zip(results) {
        let row = row?;
        for (k, &(value, soft, iters)) in row.iter().enumerate() {
            let mut fields: Vec<String> = z.iter().map(|v| num(*v)).collect();
            fields.push(cfg.task.m_list[k].to_string());
            fields.push(num(value));
            fields.push(num(soft));
            fields.push(iters.to_string());
            fields.push("converged".into());
            rows.push(fmt_row(&fields));
        }
        for w in row.windows(2) {
            if w[1].0 < w[0].0 - 1e-8 * (1.0 + w[0].0.abs()) {
                monotone = false;
            }
        }
        extrapolated.push(json!({ "z": z, "value": row.last().unwrap().0, "soft_value": row.last().unwrap().1 }));
    }
    let z_cols = (0..n_args).map(|i| format!("z{i}")).collect::<Vec<_>>().join(",");
    let csv = outputs.write_csv(&format!("{z_cols},m,value,soft_value,iterations,status"), &rows)?;
    outputs.write_summary(json!({
        "samples": samples.len(),
        "m_list": cfg.task.m_list,
        "variant": match variant { PhiVariant::Free => "free".to_string(), PhiVariant::BoundaryPinned { r_width } => format!("pinned(r={r_width})") },
        "monotone_in_doubling": monotone,
        "extrapolated": extrapolated,
        "payload_csv": csv.map(|p| p.display().to_string()),
    }))
}

fn run_fhom(cfg: &ExperimentConfig, outputs: &Outputs, workers: usize) -> Result<(), CliError> {
    let model = &cfg.model;
    let dec = build_phases(model).map_err(|e| CliError::Validation(e.to_string()))?;
    let energy = &cfg.energy;
    let opts = cell_opts(cfg);
    let n_dir = model.codomain() * model.dim();
    let axes = vec![cfg.task.xi_grid.clone(); n_dir];
    let xi_samples = tensor_samples(&axes);
    let phases: Vec<u8> = match cfg.task.phase {
        Some(p) => vec![p],
        None => (1..=model.phases()).collect(),
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &phase in &phases {
        type Row = Result<Vec<(f64, usize)>, CellError>;
        let results: Vec<Row> = parallel_map(&xi_samples, workers, |xi| {
            let mut row = Vec::with_capacity(cfg.task.k_list.len());
            for &k in &cfg.task.k_list {
                row.push(f_hom_estimate_stats(model, &dec, energy, phase, xi, k, &opts)?);
            }
            Ok(row)
        });
        let mut extrapolated = Vec::new();
        for (xi, row) in xi_samples.iter().zip(results) {
            let row = row?;
            for (kidx, &(value, iters)) in row.iter().enumerate() {
                let mut fields = vec![phase.to_string()];
                fields.extend(xi.iter().map(|v| num(*v)));
                fields.push(cfg.task.k_list[kidx].to_string());
                fields.push(num(value));
                fields.push(iters.to_string());
                fields.push("converged".into());
                rows.push(fmt_row(&fields));
            }
            extrapolated.push(json!({ "xi": xi, "value": row.last().unwrap().0 }));
        }
        let a_hom = if energy.is_quadratic() {
            quadratic_form_from_cells(
                model,
                &dec,
                energy,
                phase,
                n_dir,
                *cfg.task.k_list.last().unwrap(),
                &opts,
            )
            .ok()
        } else {
            None
        };
        summary.push(json!({ "phase": phase, "extrapolated": extrapolated, "a_hom": a_hom }));
    }
    let xi_cols = (0..n_dir).map(|i| format!("xi{i}")).collect::<Vec<_>>().join(",");
    let csv = outputs.write_csv(&format!("phase,{xi_cols},k,value,iterations,status"), &rows)?;
    outputs.write_summary(json!({
        "k_list": cfg.task.k_list,
        "phases": summary,
        "payload_csv": csv.map(|p| p.display().to_string()),
    }))
}

fn run_islands(cfg: &ExperimentConfig, outputs: &Outputs) -> Result<(), CliError> {
    let model = &cfg.model;
    let dec = build_phases(model).map_err(|e| CliError::Validation(e.to_string()))?;
    let agg = aggregate_m(model, &dec, &cfg.energy, &cell_opts(cfg))?;
    let rows: Vec<String> = agg
        .per_island
        .iter()
        .map(|i| fmt_row(&[i.phase.to_string(), i.island.to_string(), num(i.value)]))
        .collect();
    let csv = outputs.write_csv("phase,island,value", &rows)?;
    outputs.write_summary(json!({
        "islands": agg.per_island.len(),
        "m": agg.m_value,
        "payload_csv": csv.map(|p| p.display().to_string()),
    }))
}

fn run_gamma_check(cfg: &ExperimentConfig, outputs: &Outputs) -> Result<(), CliError> {
    let model = &cfg.model;
    let dec = build_phases(model).map_err(|e| CliError::Validation(e.to_string()))?;
    let energy = &cfg.energy;
    let opts = cell_opts(cfg);
    let m_cell = *cfg.task.m_list.last().unwrap();
    let k_cell = *cfg.task.k_list.last().unwrap();
    let limit = assemble_limit_functional(model, &dec, energy, m_cell, k_cell, &opts)?;
    let report = minima_convergence_experiment(
        model,
        energy,
        &cfg.task.eps_denoms,
        &limit,
        cfg.task.macro_cells,
        &solve_opts(cfg),
    )?;
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            fmt_row(&[
                num(1.0 / r.eps_denom as f64),
                num(r.micro_min),
                num(r.macro_min),
                num(r.gap),
            ])
        })
        .collect();
    let decreasing = report.rows.windows(2).all(|w| w[1].gap <= w[0].gap + 1e-12);
    let final_rel = report
        .rows
        .last()
        .map(|r| r.gap / report.macro_min.abs().max(1e-300));
    let csv = outputs.write_csv("eps,micro_min,macro_min,gap", &rows)?;
    outputs.write_summary(json!({
        "macro_min": report.macro_min,
        "gaps": report.rows.iter().map(|r| r.gap).collect::<Vec<_>>(),
        "gaps_decreasing": decreasing,
        "final_relative_gap": final_rel,
        "payload_csv": csv.map(|p| p.display().to_string()),
    }))
}

fn flow_system(
    cfg: &ExperimentConfig,
    dec: &dporo::lattice::PhaseDecomposition,
) -> Result<MacroSystem, CliError> {
    let model = &cfg.model;
    let energy = &cfg.energy;
    if !energy.site_density().is_zero() {
        return Err(CliError::Validation(
            "gradient flows require `energy.site = none`".into(),
        ));
    }
    let opts = cell_opts(cfg);
    let k_cell = *cfg.task.k_list.last().unwrap();
    let n_dir = model.codomain() * model.dim();
    let mut f_hom = Vec::new();
    for phase in 1..=model.phases() {
        let form = quadratic_form_from_cells(model, dec, energy, phase, n_dir, k_cell, &opts)?;
        f_hom.push(FHomEvaluator::Quadratic(form));
    }
    Ok(MacroSystem::new(model, dec, energy, f_hom)?)
}

fn run_flow_micro(cfg: &ExperimentConfig, outputs: &Outputs) -> Result<(), CliError> {
    let model = &cfg.model;
    let dec = build_phases(model).map_err(|e| CliError::Validation(e.to_string()))?;
    let n = cfg.task.eps_denoms[0];
    let eps = 1.0 / n as f64;
    let bbox = IBox::cube(model.dim(), n);
    let u0 = sample_macro(&cfg.task.init, &bbox, model.codomain(), eps);
    let traj = minimizing_movement_micro(
        model,
        &dec,
        &cfg.energy,
        u0,
        cfg.task.tau,
        cfg.task.n_steps,
        &solve_opts(cfg),
    )?;
    let mut rows = Vec::with_capacity(traj.steps.len());
    for (step, field) in traj.steps.iter().enumerate() {
        let mut line = num(step as f64 * cfg.task.tau);
        for v in field.values() {
            let _ = write!(line, ",{v}");
        }
        rows.push(line);
    }
    let dissipative = traj.energies.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let mass0 = traj.mass(0);
    let mass_end = traj.mass(cfg.task.n_steps);
    let csv = outputs.write_csv("t,values...", &rows)?;
    outputs.write_summary(json!({
        "eps": eps,
        "tau": cfg.task.tau,
        "steps": cfg.task.n_steps,
        "energies": traj.energies,
        "dissipative": dissipative,
        "mass_initial": mass0,
        "mass_final": mass_end,
        "payload_csv": csv.map(|p| p.display().to_string()),
    }))
}

fn run_flow_macro(cfg: &ExperimentConfig, outputs: &Outputs) -> Result<(), CliError> {
    let model = &cfg.model;
    let dec = build_phases(model).map_err(|e| CliError::Validation(e.to_string()))?;
    let system = flow_system(cfg, &dec)?;
    let grid = MacroGrid::interval(0.0, 1.0, cfg.task.grid_cells);
    let init = vec![cfg.task.init.clone(); model.cell_len()];
    let traj = macro_flow(
        &system,
        &init,
        &grid,
        cfg.task.tau,
        cfg.task.n_steps,
        &solve_opts(cfg),
    )?;
    let mut rows = Vec::with_capacity(traj.slots.len());
    for (step, slots) in traj.slots.iter().enumerate() {
        let mut line = num(step as f64 * cfg.task.tau);
        for slot in slots {
            for v in slot {
                let _ = write!(line, ",{v}");
            }
        }
        rows.push(line);
    }
    let dissipative = traj.energies.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let csv = outputs.write_csv("t,slot_values...", &rows)?;
    outputs.write_summary(json!({
        "grid_cells": cfg.task.grid_cells,
        "tau": cfg.task.tau,
        "steps": cfg.task.n_steps,
        "slots": system.n_slots,
        "hard_slots": system.n_hard,
        "energies": traj.energies,
        "dissipative": dissipative,
        "payload_csv": csv.map(|p| p.display().to_string()),
    }))
}

fn run_flow_compare(
    cfg: &ExperimentConfig,
    outputs: &Outputs,
    _workers: usize,
) -> Result<(), CliError> {
    let model = &cfg.model;
    let dec = build_phases(model).map_err(|e| CliError::Validation(e.to_string()))?;
    let system = flow_system(cfg, &dec)?;
    let grid = MacroGrid::interval(0.0, 1.0, cfg.task.grid_cells);
    let report = micro_macro_compare(
        model,
        &dec,
        &cfg.energy,
        &system,
        &cfg.task.init,
        &cfg.task.eps_denoms,
        &grid,
        cfg.task.tau,
        cfg.task.n_steps,
        &solve_opts(cfg),
    )?;
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            fmt_row(&[
                r.eps_denom.to_string(),
                num(r.sup_l2),
                num(r.sup_l2_dynamic),
            ])
        })
        .collect();
    let decreasing = report
        .rows
        .windows(2)
        .all(|w| w[1].sup_l2 <= w[0].sup_l2 + 1e-12);
    let csv = outputs.write_csv("eps_denom,sup_l2,sup_l2_flow", &rows)?;
    outputs.write_summary(json!({
        "tau": cfg.task.tau,
        "steps": cfg.task.n_steps,
        "errors": report.rows.iter().map(|r| r.sup_l2).collect::<Vec<_>>(),
        "flow_errors": report.rows.iter().map(|r| r.sup_l2_dynamic).collect::<Vec<_>>(),
        "errors_decreasing": decreasing,
        "payload_csv": csv.map(|p| p.display().to_string()),
    }))
}

/// Reads a result record if the file looks like one of ours.
pub fn read_record(path: &Path) -> Option<Value> {
    let text = std::fs::read_to_string(path).ok()?;
    let value: Value = serde_json::from_str(&text).ok()?;
    value.get("task")?;
    value.get("config_hash")?;
    Some(value)
}
