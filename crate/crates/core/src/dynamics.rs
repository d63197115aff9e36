//! Implicit-Euler gradient flows: minimizing movements of the lattice energy
//! at fixed spacing, the coupled effective flow obtained as the minimizing
//! movement of the two-scale limit functional, an independent
//! integro-differential route for the one-phase case, and the comparison
//! harness between the two scales.
//!
//! The effective step minimizes, over fields constant on each infinite
//! component (and on each island class),
//!
//! ```text
//!   sum_j (1/#(C_j cap Y)) sum_{y in C_j} int f_hom_j(grad v^y)
//! + (1/T^d) sum_{weak bonds of the period torus} int f(v^y - v^{y'})
//! + (1/(2 tau)) (1/T^d) sum_y int |v^y - u^y_{n-1}|^2,
//! ```
//!
//! whose optimality system is the coupled parabolic/ODE exchange system with
//! volume-fraction coefficients and Neumann boundary conditions.

use thiserror::Error;

use crate::cell::CellError;
use crate::energy::{BondDensity, ComparisonG, EnergyModel, MacroFn};
use crate::field::DiscreteField;
use crate::gamma::{micro_objective, FHomEvaluator, GammaError, MacroGrid};
use crate::lattice::{
    bond_sets, extend_from_component, LatticeError, PeriodicLatticeModel, PhaseDecomposition,
    SiteClass, Wrap,
};
use crate::solver::{
    minimize, ConstraintSet, EnergyObjective, SiteTerm, SolveOptions, SolveStatus,
};
use crate::util::{IBox, Kahan};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("gradient flows require a zero site density")]
    ZeroOrderTermPresent,
    #[error("residue {cell} is not connected to any infinite component")]
    ConnectivityViolation { cell: usize },
    #[error("time step and horizon must be positive")]
    BadTimeStep,
    #[error("effective flows are implemented on one-dimensional grids")]
    OneDimensionalOnly,
    #[error("initial residue data must agree on tied residue classes")]
    InconsistentInit,
    #[error("this reference solution needs one hard phase and one soft class")]
    UnsupportedShape,
    #[error("solver did not converge")]
    NotConverged,
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Gamma(#[from] GammaError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Solver(#[from] crate::solver::SolverError),
}

/// Checks that every residue interacts, through some chain of bonds, with an
/// infinite component; gradient flows assume this so no site evolves in
/// isolation.
pub fn validate_connectivity(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
) -> Result<(), DynamicsError> {
    let cell = model.cell();
    let bonds = bond_sets(model, &cell, Wrap::Torus);
    let n = cell.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = x;
        while parent[c] != c {
            let nx = parent[c];
            parent[c] = r;
            c = nx;
        }
        r
    }
    let unite = |parent: &mut [usize], a: usize, b: usize| {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    };
    for list in bonds.strong.iter().chain(std::iter::once(&bonds.weak)) {
        for b in list {
            unite(&mut parent, b.a, b.b);
        }
    }
    let mut root_has_infinite = vec![false; n];
    for c in 0..n {
        if matches!(decomp.class_of_cell(c), SiteClass::Infinite { .. }) {
            let r = find(&mut parent, c);
            root_has_infinite[r] = true;
        }
    }
    for c in 0..n {
        let r = find(&mut parent, c);
        if !root_has_infinite[r] {
            return Err(DynamicsError::ConnectivityViolation { cell: c });
        }
    }
    Ok(())
}

/// A lattice minimizing-movement trajectory: step fields, their energies, and
/// the proximal increments.
#[derive(Debug, Clone)]
pub struct MicroTrajectory {
    pub eps: f64,
    pub tau: f64,
    pub steps: Vec<DiscreteField>,
    /// Lattice energy (without the proximal term) after each step.
    pub energies: Vec<f64>,
    /// `(1/2 tau) sum_k eps^d |u_n - u_{n-1}|^2` per step.
    pub increments: Vec<f64>,
}

impl MicroTrajectory {
    /// Discrete mass `sum_k u_k` per component at a step.
    pub fn mass(&self, step: usize) -> Vec<f64> {
        let f = &self.steps[step];
        let m = f.m();
        let mut out = vec![Kahan::new(); m];
        for i in 0..f.bbox().len() {
            let v = f.value(i);
            for k in 0..m {
                out[k].add(v[k]);
            }
        }
        out.iter().map(|a| a.value()).collect()
    }
}

/// Iterates `u_n = argmin F_eps(v) + (1/2 tau) sum eps^d |v - u_{n-1}|^2`
/// starting from `u0`. Requires a zero site density and the connectivity
/// assumption; the quadratic case reduces to one definite solve per step.
pub fn minimizing_movement_micro(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    u0: DiscreteField,
    tau: f64,
    n_steps: usize,
    opts: &SolveOptions,
) -> Result<MicroTrajectory, DynamicsError> {
    if !energy.site_density().is_zero() {
        return Err(DynamicsError::ZeroOrderTermPresent);
    }
    if tau <= 0.0 {
        return Err(DynamicsError::BadTimeStep);
    }
    validate_connectivity(model, decomp)?;
    let eps = u0.spacing();
    let bbox = u0.bbox().clone();
    let m = u0.m();
    let vol = eps.powi(model.dim() as i32);
    let base = micro_objective(model, energy, &bbox, eps, true);
    let prox = ComparisonG::Quadratic {
        weight: 1.0 / (2.0 * tau),
    };
    let mut grad_buf = vec![0.0; bbox.len() * m];
    let mut energies = vec![base.eval(u0.values(), &mut grad_buf)];
    let mut steps = vec![u0];
    let mut increments = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let prev = steps.last().expect("nonempty trajectory");
        let mut obj = base.clone();
        for i in 0..bbox.len() {
            obj.sites.push(SiteTerm::Comparison {
                site: i,
                weight: vol,
                target: prev.value(i).to_vec(),
                g: prox,
            });
        }
        let rep = minimize(
            &obj,
            &ConstraintSet::free(),
            &SolveOptions {
                tol: opts.tol,
                max_iter: opts.max_iter,
                init: Some(prev.values().to_vec()),
            },
        )?;
        if rep.status != SolveStatus::Converged {
            return Err(DynamicsError::NotConverged);
        }
        let next = DiscreteField::from_values(bbox.clone(), m, eps, rep.values);
        let mut inc = Kahan::new();
        for (a, b) in next.values().iter().zip(prev.values()) {
            inc.add((a - b) * (a - b));
        }
        increments.push(vol * inc.value() / (2.0 * tau));
        energies.push(base.eval(next.values(), &mut grad_buf));
        steps.push(next);
    }
    Ok(MicroTrajectory {
        eps,
        tau,
        steps,
        energies,
        increments,
    })
}

/// The effective flow's spatial unknowns: one slot per hard phase, one per
/// island class, one per soft residue; each slot carries a volume-fraction
/// metric weight and the weak bonds of the period torus become exchange
/// couplings between slots.
#[derive(Debug, Clone)]
pub struct MacroSystem {
    pub m: usize,
    pub p: f64,
    pub n_hard: usize,
    pub n_slots: usize,
    /// Residue cell -> slot.
    pub slot_of_cell: Vec<usize>,
    /// `#(slot residues) / T^d` per slot.
    pub metric_weight: Vec<f64>,
    /// One entry per canonical weak bond of the period torus, as slot pairs;
    /// couplings within a slot drop out (the weak density vanishes at 0).
    pub exchange: Vec<(usize, usize)>,
    pub f_hom: Vec<FHomEvaluator>,
    pub weak: BondDensity,
    /// `1 / T^d`.
    pub cell_volume_weight: f64,
}

impl MacroSystem {
    pub fn new(
        model: &PeriodicLatticeModel,
        decomp: &PhaseDecomposition,
        energy: &EnergyModel,
        f_hom: Vec<FHomEvaluator>,
    ) -> Result<Self, DynamicsError> {
        if f_hom.len() != model.phases() as usize {
            return Err(DynamicsError::UnsupportedShape);
        }
        validate_connectivity(model, decomp)?;
        let n_cells = model.cell_len();
        let n_hard = model.phases() as usize;
        let n_islands = decomp.islands().len();
        let mut slot_of_cell = vec![usize::MAX; n_cells];
        let mut soft_rank = 0usize;
        for c in 0..n_cells {
            slot_of_cell[c] = match decomp.class_of_cell(c) {
                SiteClass::Infinite { phase } => phase as usize - 1,
                SiteClass::Island { island, .. } => n_hard + island,
                SiteClass::Soft => {
                    let s = n_hard + n_islands + soft_rank;
                    soft_rank += 1;
                    s
                }
            };
        }
        let n_slots = n_hard + n_islands + soft_rank;
        let mut counts = vec![0usize; n_slots];
        for &s in &slot_of_cell {
            counts[s] += 1;
        }
        let metric_weight: Vec<f64> = counts
            .iter()
            .map(|&c| c as f64 / n_cells as f64)
            .collect();
        let cell = model.cell();
        let bonds = bond_sets(model, &cell, Wrap::Torus);
        let exchange: Vec<(usize, usize)> = bonds
            .weak
            .iter()
            .map(|b| {
                (
                    slot_of_cell[model.cell_index(&cell.site_at(b.a))],
                    slot_of_cell[model.cell_index(&cell.site_at(b.b))],
                )
            })
            .filter(|(a, b)| a != b)
            .collect();
        Ok(MacroSystem {
            m: model.codomain(),
            p: energy.p,
            n_hard,
            n_slots,
            slot_of_cell,
            metric_weight,
            exchange,
            f_hom,
            weak: energy.weak_density().clone(),
            cell_volume_weight: 1.0 / n_cells as f64,
        })
    }

    /// The flow's driving energy (gradient plus exchange parts) of a slot
    /// state; dissipated along trajectories.
    pub fn energy(&self, grid: &MacroGrid, slots: &[Vec<f64>]) -> f64 {
        let obj = MacroFlowObjective {
            system: self,
            grid,
            prox: None,
        };
        let mut grad = vec![0.0; self.n_slots * grid.len() * self.m];
        let flat = flatten_slots(slots);
        obj.eval(&flat, &mut grad)
    }

    /// Conserved weighted mass `sum_s w_s sum_cells h u_s` per component.
    pub fn mass(&self, grid: &MacroGrid, slots: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![Kahan::new(); self.m];
        for (s, field) in slots.iter().enumerate() {
            for i in 0..grid.len() {
                for k in 0..self.m {
                    out[k].add(self.metric_weight[s] * field[i * self.m + k]);
                }
            }
        }
        out.iter()
            .map(|a| a.value() * grid.cell_volume())
            .collect()
    }

    pub fn is_quadratic(&self) -> bool {
        self.weak.is_quadratic(self.p)
            && self
                .f_hom
                .iter()
                .all(|f| matches!(f, FHomEvaluator::Quadratic(_)))
    }
}

fn flatten_slots(slots: &[Vec<f64>]) -> Vec<f64> {
    let mut flat = Vec::with_capacity(slots.iter().map(|s| s.len()).sum());
    for s in slots {
        flat.extend_from_slice(s);
    }
    flat
}

/// One implicit step of the effective flow as a solver objective over
/// `[slot][cell][component]` unknowns.
struct MacroFlowObjective<'a> {
    system: &'a MacroSystem,
    grid: &'a MacroGrid,
    /// `(tau, previous flat state)` when stepping; absent for plain energy.
    prox: Option<(f64, &'a [f64])>,
}

impl EnergyObjective for MacroFlowObjective<'_> {
    fn n_sites(&self) -> usize {
        self.system.n_slots * self.grid.len()
    }

    fn m(&self) -> usize {
        self.system.m
    }

    fn eval(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let sys = self.system;
        let grid = self.grid;
        let m = sys.m;
        let n_cells = grid.len();
        let h = grid.spacing(0);
        let mut acc = Kahan::new();
        let mut xi = vec![0.0; m];
        // Gradient terms, face-based, per hard slot.
        for s in 0..sys.n_hard {
            let base = s * n_cells;
            for i in 0..n_cells.saturating_sub(1) {
                for k in 0..m {
                    xi[k] = (u[(base + i + 1) * m + k] - u[(base + i) * m + k]) / h;
                }
                acc.add(h * sys.f_hom[s].eval(&xi));
                let g = sys.f_hom[s].grad(&xi);
                for k in 0..m {
                    grad[(base + i + 1) * m + k] += g[k];
                    grad[(base + i) * m + k] -= g[k];
                }
            }
        }
        // Exchange terms per cell, weight 1/T^d per canonical weak bond.
        let w = sys.cell_volume_weight;
        let mut z = vec![0.0; m];
        let mut zg = vec![0.0; m];
        for &(sa, sb) in &sys.exchange {
            for i in 0..n_cells {
                let (ba, bb) = ((sa * n_cells + i) * m, (sb * n_cells + i) * m);
                for k in 0..m {
                    z[k] = u[bb + k] - u[ba + k];
                }
                acc.add(w * h * sys.weak.eval(sys.p, &z));
                zg.fill(0.0);
                sys.weak.accumulate_grad(sys.p, &z, w * h, &mut zg);
                for k in 0..m {
                    grad[bb + k] += zg[k];
                    grad[ba + k] -= zg[k];
                }
            }
        }
        // Proximal metric term.
        if let Some((tau, prev)) = self.prox {
            for s in 0..sys.n_slots {
                let ws = sys.metric_weight[s] * h / (2.0 * tau);
                for i in 0..n_cells {
                    let b = (s * n_cells + i) * m;
                    for k in 0..m {
                        let dv = u[b + k] - prev[b + k];
                        acc.add(ws * dv * dv);
                        grad[b + k] += 2.0 * ws * dv;
                    }
                }
            }
        }
        acc.value()
    }

    fn is_quadratic(&self) -> bool {
        self.system.is_quadratic()
    }
}

/// An effective-flow trajectory: per step, one grid function per slot.
#[derive(Debug, Clone)]
pub struct MacroTrajectory {
    pub grid: MacroGrid,
    pub tau: f64,
    pub n_hard: usize,
    pub slots: Vec<Vec<Vec<f64>>>,
    pub energies: Vec<f64>,
}

impl MacroTrajectory {
    pub fn n_steps(&self) -> usize {
        self.slots.len() - 1
    }
}

/// Advances the coupled effective system by implicit Euler, each step solved
/// as the minimization of the two-scale step functional (dissipative by
/// construction). Initial data is one macroscopic function per residue,
/// which must agree within each slot.
pub fn macro_flow(
    system: &MacroSystem,
    init_res: &[MacroFn],
    grid: &MacroGrid,
    tau: f64,
    n_steps: usize,
    opts: &SolveOptions,
) -> Result<MacroTrajectory, DynamicsError> {
    if grid.dim() != 1 {
        return Err(DynamicsError::OneDimensionalOnly);
    }
    if tau <= 0.0 {
        return Err(DynamicsError::BadTimeStep);
    }
    if init_res.len() != system.slot_of_cell.len() {
        return Err(DynamicsError::InconsistentInit);
    }
    let m = system.m;
    let n_cells = grid.len();
    // Collapse residue initial data onto slots, checking consistency.
    let mut slots0: Vec<Option<Vec<f64>>> = vec![None; system.n_slots];
    for (rc, f) in init_res.iter().enumerate() {
        let s = system.slot_of_cell[rc];
        let mut vals = Vec::with_capacity(n_cells * m);
        for i in 0..n_cells {
            vals.extend(f.eval(&grid.center(i), m));
        }
        match &slots0[s] {
            None => slots0[s] = Some(vals),
            Some(existing) => {
                if existing
                    .iter()
                    .zip(&vals)
                    .any(|(a, b)| (a - b).abs() > 1e-12)
                {
                    return Err(DynamicsError::InconsistentInit);
                }
            }
        }
    }
    let slots0: Vec<Vec<f64>> = slots0
        .into_iter()
        .map(|s| s.expect("every slot has residues"))
        .collect();
    let mut state = flatten_slots(&slots0);
    let mut trajectory = vec![slots0];
    let mut energies = vec![system.energy(grid, &trajectory[0])];
    for _ in 0..n_steps {
        let obj = MacroFlowObjective {
            system,
            grid,
            prox: Some((tau, &state)),
        };
        let rep = minimize(
            &obj,
            &ConstraintSet::free(),
            &SolveOptions {
                tol: opts.tol,
                max_iter: opts.max_iter,
                init: Some(state.clone()),
            },
        )?;
        if rep.status != SolveStatus::Converged {
            return Err(DynamicsError::NotConverged);
        }
        state = rep.values;
        let slots: Vec<Vec<f64>> = (0..system.n_slots)
            .map(|s| state[s * n_cells * m..(s + 1) * n_cells * m].to_vec())
            .collect();
        energies.push(system.energy(grid, &slots));
        trajectory.push(slots);
    }
    Ok(MacroTrajectory {
        grid: grid.clone(),
        tau,
        n_hard: system.n_hard,
        slots: trajectory,
        energies,
    })
}

/// Coefficients of the one-hard-phase reduction `u' = a u'' - rho_h (u - v)`,
/// `v' = rho_s (u - v)` read off the effective system.
pub fn reduced_coefficients(system: &MacroSystem) -> Result<(f64, f64, f64), DynamicsError> {
    if system.n_hard != 1 || system.n_slots != 2 || system.m != 1 {
        return Err(DynamicsError::UnsupportedShape);
    }
    let a = match &system.f_hom[0] {
        FHomEvaluator::Quadratic(form) => form[0],
        _ => return Err(DynamicsError::UnsupportedShape),
    };
    if !matches!(system.weak, BondDensity::Quadratic) {
        return Err(DynamicsError::UnsupportedShape);
    }
    let gamma = system.exchange.len() as f64 * system.cell_volume_weight;
    let diff = 2.0 * a / system.metric_weight[0];
    let rho_h = 2.0 * gamma / system.metric_weight[0];
    let rho_s = 2.0 * gamma / system.metric_weight[1];
    Ok((diff, rho_h, rho_s))
}

/// Independent reference for the one-hard-phase flow: eliminates the soft
/// variable into an exponential memory kernel, integrates the memory with a
/// trapezoidal rule (implicit endpoint), and advances the hard field by
/// implicit Euler with a direct tridiagonal solve. Both fields start from
/// `u0`. Returns the hard-field trajectory.
pub fn integro_differential_reference(
    system: &MacroSystem,
    u0: &MacroFn,
    grid: &MacroGrid,
    tau: f64,
    n_steps: usize,
) -> Result<Vec<Vec<f64>>, DynamicsError> {
    if grid.dim() != 1 {
        return Err(DynamicsError::OneDimensionalOnly);
    }
    if tau <= 0.0 {
        return Err(DynamicsError::BadTimeStep);
    }
    let (diff, rho_h, rho_s) = reduced_coefficients(system)?;
    let n = grid.len();
    let h = grid.spacing(0);
    let u0_grid: Vec<f64> = (0..n).map(|i| u0.eval(&grid.center(i), 1)[0]).collect();
    let mut u = u0_grid.clone();
    let mut memory = vec![0.0; n]; // int_0^{t_n} e^{rho_s (s - t_n)} u(s) ds
    let mut out = vec![u.clone()];
    let decay = (-rho_s * tau).exp();
    // (1/tau + rho_h - rho_h rho_s tau/2) u^n - diff D2 u^n = rhs.
    let diag_base = 1.0 / tau + rho_h - rho_h * rho_s * tau / 2.0;
    let k = diff / (h * h);
    for step in 1..=n_steps {
        let t_n = step as f64 * tau;
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            let mem_known = decay * memory[i] + (tau / 2.0) * decay * u[i];
            rhs[i] = u[i] / tau + rho_h * ((-rho_s * t_n).exp() * u0_grid[i] + rho_s * mem_known);
        }
        // Thomas solve of the Neumann tridiagonal system.
        let mut sub = vec![0.0; n];
        let mut dia = vec![0.0; n];
        let mut sup = vec![0.0; n];
        for i in 0..n {
            let neighbors = (i > 0) as u8 + (i + 1 < n) as u8;
            dia[i] = diag_base + k * neighbors as f64;
            if i > 0 {
                sub[i] = -k;
            }
            if i + 1 < n {
                sup[i] = -k;
            }
        }
        for i in 1..n {
            let w = sub[i] / dia[i - 1];
            dia[i] -= w * sup[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        let mut next = vec![0.0; n];
        next[n - 1] = rhs[n - 1] / dia[n - 1];
        for i in (0..n - 1).rev() {
            next[i] = (rhs[i] - sup[i] * next[i + 1]) / dia[i];
        }
        for i in 0..n {
            memory[i] = decay * memory[i] + (tau / 2.0) * (decay * u[i] + next[i]);
        }
        u = next;
        out.push(u.clone());
    }
    Ok(out)
}

/// Exact solution of the spatially constant reduction
/// `a' = -rho_h (a - b)`, `b' = rho_s (a - b)` via its eigen-decomposition.
pub fn constant_reduction_exact(rho_h: f64, rho_s: f64, a0: f64, b0: f64, t: f64) -> (f64, f64) {
    let lambda = rho_h + rho_s;
    let conserved = rho_s * a0 + rho_h * b0;
    let delta = (a0 - b0) * (-lambda * t).exp();
    (
        (conserved + rho_h * delta) / lambda,
        (conserved - rho_s * delta) / lambda,
    )
}

/// Per-spacing comparison of the lattice flow against the effective flow.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub eps_denom: i64,
    /// Sup over all steps, including the initial embedding error.
    pub sup_l2: f64,
    /// Sup over steps >= 1 (the flow itself, past the initial projection).
    pub sup_l2_dynamic: f64,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

/// Piecewise-constant interpolation `u(x) = u_{floor(x/eps)}` evaluated at a
/// point; identifies lattice fields with functions.
fn pc_value(field: &DiscreteField, x: f64) -> f64 {
    let eps = field.spacing();
    let bbox = field.bbox();
    let k = ((x / eps).floor() as i64).clamp(bbox.lo()[0], bbox.hi()[0] - 1);
    field.value_at(&[k])[0]
}

/// Value at `x` of the residue-class restriction of a lattice field: the mean
/// over the slot's residues of the values in the periodicity cell covering
/// `x` (the piecewise-constant interpolation at the coarse scale).
fn residue_pc_value(
    field: &DiscreteField,
    model: &PeriodicLatticeModel,
    slot_cells: &[usize],
    x: f64,
) -> f64 {
    let eps = field.spacing();
    let t = model.period();
    let bbox = field.bbox();
    let coarse = ((x / (eps * t as f64)).floor() as i64)
        .clamp(bbox.lo()[0].div_euclid(t), (bbox.hi()[0] - 1).div_euclid(t));
    let cell_box = model.cell();
    let mut acc = 0.0;
    for &rc in slot_cells {
        let y = cell_box.site_at(rc)[0];
        let site = (t * coarse + y).clamp(bbox.lo()[0], bbox.hi()[0] - 1);
        acc += field.value_at(&[site])[0];
    }
    acc / slot_cells.len() as f64
}

/// Runs the lattice minimizing movement for each spacing, projects every step
/// onto the macroscopic grid (extensions for hard phases, residue-class
/// averages for the rest), and reports the sup-over-steps L2 distance to the
/// effective trajectory. A margin of one period (in macroscopic units) is
/// excluded near the boundary.
#[allow(clippy::too_many_arguments)]
pub fn micro_macro_compare(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    system: &MacroSystem,
    u0: &MacroFn,
    eps_denoms: &[i64],
    grid: &MacroGrid,
    tau: f64,
    n_steps: usize,
    opts: &SolveOptions,
) -> Result<CompareReport, DynamicsError> {
    let init_res = vec![u0.clone(); model.cell_len()];
    let macro_traj = macro_flow(system, &init_res, grid, tau, n_steps, opts)?;
    let h = grid.spacing(0);
    let m = model.codomain();
    debug_assert_eq!(m, 1, "comparison diagnostics are scalar");
    let mut rows = Vec::with_capacity(eps_denoms.len());
    for &n in eps_denoms {
        let eps = 1.0 / n as f64;
        let bbox = IBox::cube(model.dim(), n);
        let u0_field = sample_macro(u0, &bbox, m, eps);
        let micro = minimizing_movement_micro(model, decomp, energy, u0_field, tau, n_steps, opts)?;
        let margin = model.period() as f64 * eps;
        let included: Vec<usize> = (0..grid.len())
            .filter(|&i| {
                let x = grid.center(i)[0];
                x >= margin && x <= 1.0 - margin
            })
            .collect();
        let slot_cells: Vec<Vec<usize>> = (0..system.n_slots)
            .map(|s| {
                (0..model.cell_len())
                    .filter(|&rc| system.slot_of_cell[rc] == s)
                    .collect()
            })
            .collect();
        let mut sup = 0.0f64;
        let mut sup_dynamic = 0.0f64;
        for step in 0..=n_steps {
            let field = &micro.steps[step];
            let mut step_err = 0.0f64;
            for slot in 0..system.n_slots {
                let macro_vals = &macro_traj.slots[step][slot];
                let projected: Vec<f64> = if slot < system.n_hard {
                    let phase = slot as u8 + 1;
                    let ext = extend_from_component(field, model, decomp, phase)?;
                    included
                        .iter()
                        .map(|&i| pc_value(&ext, grid.center(i)[0]))
                        .collect()
                } else {
                    included
                        .iter()
                        .map(|&i| {
                            residue_pc_value(field, model, &slot_cells[slot], grid.center(i)[0])
                        })
                        .collect()
                };
                let mut l2 = 0.0;
                for (pos, &i) in included.iter().enumerate() {
                    let d = projected[pos] - macro_vals[i];
                    l2 += h * d * d;
                }
                step_err = step_err.max(l2.sqrt());
            }
            sup = sup.max(step_err);
            if step >= 1 {
                sup_dynamic = sup_dynamic.max(step_err);
            }
        }
        rows.push(CompareRow {
            eps_denom: n,
            sup_l2: sup,
            sup_l2_dynamic: sup_dynamic,
        });
    }
    Ok(CompareReport { rows })
}

/// Samples a macroscopic function onto lattice sites at spacing `eps`.
pub fn sample_macro(u0: &MacroFn, bbox: &IBox, m: usize, eps: f64) -> DiscreteField {
    DiscreteField::from_fn(bbox.clone(), m, eps, |site, out| {
        let x: Vec<f64> = site.iter().map(|&s| eps * s as f64).collect();
        out.copy_from_slice(&u0.eval(&x, m));
    })
}
