//! Assembly and evaluation of the effective (homogenized) functionals, and
//! desk-scale convergence-of-minima experiments comparing lattice minima
//! against the effective minimum.

use thiserror::Error;

use crate::cell::{CellError, PhiTable};
use crate::energy::{ComparisonG, EnergyModel, MacroFn};
use crate::lattice::{bond_sets, PeriodicLatticeModel, PhaseDecomposition, Wrap};
use crate::solver::{
    minimize, BondTerm, ConstraintSet, EnergyObjective, GenericObjective, SolveOptions,
    SolveStatus,
};
use crate::util::{IBox, Kahan};

#[derive(Debug, Error)]
pub enum GammaError {
    #[error("macroscopic grids must be one- or two-dimensional with positive extents")]
    BadGrid,
    #[error("state and functional disagree on the number of phases or components")]
    ShapeMismatch,
    #[error("minimization requires quadratic effective densities")]
    NonQuadraticLimit,
    #[error("two-scale state varies on an infinite component")]
    ResidueConstraint,
    #[error("solver did not converge")]
    NotConverged,
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Solver(#[from] crate::solver::SolverError),
}

/// Cell-centered rectangular grid over an interval or rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroGrid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    dims: Vec<usize>,
}

impl MacroGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, dims: Vec<usize>) -> Result<Self, GammaError> {
        if lo.len() != hi.len()
            || lo.len() != dims.len()
            || lo.is_empty()
            || lo.len() > 2
            || dims.iter().any(|&n| n == 0)
            || lo.iter().zip(&hi).any(|(a, b)| a >= b)
        {
            return Err(GammaError::BadGrid);
        }
        Ok(MacroGrid { lo, hi, dims })
    }

    pub fn interval(a: f64, b: f64, n: usize) -> Self {
        MacroGrid::new(vec![a], vec![b], vec![n]).expect("static grid")
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.dims[axis] as f64
    }

    /// Cell volume (the midpoint quadrature weight).
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim())
            .map(|a| self.hi[a] - self.lo[a])
            .product()
    }

    pub fn index_of(&self, idx: &[usize]) -> usize {
        let mut f = 0usize;
        for (a, &i) in idx.iter().enumerate() {
            f = f * self.dims[a] + i;
        }
        f
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0usize; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = flat % self.dims[a];
            flat /= self.dims[a];
        }
        idx
    }

    /// Cell-center coordinates.
    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.lo[a] + (i as f64 + 0.5) * self.spacing(a))
            .collect()
    }

    /// Gradient of an `R^m`-valued grid function at a cell by central
    /// differences, one-sided at the boundary. Returns an m x d row-major
    /// matrix.
    pub fn gradient_central(&self, values: &[f64], m: usize, flat: usize) -> Vec<f64> {
        let d = self.dim();
        let idx = self.multi_index(flat);
        let mut out = vec![0.0; m * d];
        for a in 0..d {
            let h = self.spacing(a);
            let n = self.dims[a];
            let (lo_i, hi_i, denom) = if n == 1 {
                (idx[a], idx[a], 1.0)
            } else if idx[a] == 0 {
                (idx[a], idx[a] + 1, h)
            } else if idx[a] == n - 1 {
                (idx[a] - 1, idx[a], h)
            } else {
                (idx[a] - 1, idx[a] + 1, 2.0 * h)
            };
            let mut i_lo = idx.clone();
            i_lo[a] = lo_i;
            let mut i_hi = idx.clone();
            i_hi[a] = hi_i;
            let (flo, fhi) = (self.index_of(&i_lo), self.index_of(&i_hi));
            for k in 0..m {
                out[k * d + a] = (values[fhi * m + k] - values[flo * m + k]) / denom;
            }
        }
        out
    }
}

/// Effective density of one hard phase, as an exact quadratic form over
/// `R^{m d}` or a sampled 1D table interpolated piecewise-linearly.
#[derive(Debug, Clone)]
pub enum FHomEvaluator {
    Quadratic(Vec<f64>),
    Table1D { xi: Vec<f64>, values: Vec<f64> },
}

impl FHomEvaluator {
    pub fn eval(&self, xi: &[f64]) -> f64 {
        match self {
            FHomEvaluator::Quadratic(a) => {
                let n = xi.len();
                debug_assert_eq!(a.len(), n * n);
                let mut s = 0.0;
                for r in 0..n {
                    for c in 0..n {
                        s += a[r * n + c] * xi[r] * xi[c];
                    }
                }
                s
            }
            FHomEvaluator::Table1D { xi: xs, values } => {
                debug_assert_eq!(xi.len(), 1);
                let v = xi[0];
                let n = xs.len();
                if v <= xs[0] {
                    let s = (values[1] - values[0]) / (xs[1] - xs[0]);
                    return values[0] + s * (v - xs[0]);
                }
                if v >= xs[n - 1] {
                    let s = (values[n - 1] - values[n - 2]) / (xs[n - 1] - xs[n - 2]);
                    return values[n - 1] + s * (v - xs[n - 1]);
                }
                let mut i = 0;
                while v > xs[i + 1] {
                    i += 1;
                }
                let t = (v - xs[i]) / (xs[i + 1] - xs[i]);
                values[i] * (1.0 - t) + values[i + 1] * t
            }
        }
    }

    /// Gradient: exact for the quadratic form, central table differences at
    /// the table spacing otherwise.
    pub fn grad(&self, xi: &[f64]) -> Vec<f64> {
        match self {
            FHomEvaluator::Quadratic(a) => {
                let n = xi.len();
                (0..n)
                    .map(|r| 2.0 * (0..n).map(|c| a[r * n + c] * xi[c]).sum::<f64>())
                    .collect()
            }
            FHomEvaluator::Table1D { xi: xs, .. } => {
                let h = if xs.len() > 1 { xs[1] - xs[0] } else { 1.0 };
                let fp = self.eval(&[xi[0] + h]);
                let fm = self.eval(&[xi[0] - h]);
                vec![(fp - fm) / (2.0 * h)]
            }
        }
    }

    pub fn quadratic_form(&self) -> Option<&[f64]> {
        match self {
            FHomEvaluator::Quadratic(a) => Some(a),
            _ => None,
        }
    }
}

/// The interaction density entering the effective functional: an exact
/// quadratic form `<A (z - c(x) 1), (z - c(x) 1)>` or a sampled table with
/// multilinear interpolation.
#[derive(Debug, Clone)]
pub enum PhiEvaluator {
    Quadratic {
        form: Vec<f64>,
        center: Option<MacroFn>,
    },
    Table(PhiTable),
}

impl PhiEvaluator {
    pub fn eval(&self, x: &[f64], z: &[f64]) -> Result<f64, GammaError> {
        match self {
            PhiEvaluator::Quadratic { form, center } => {
                let n = z.len();
                debug_assert_eq!(form.len(), n * n);
                let shifted: Vec<f64> = match center {
                    None => z.to_vec(),
                    Some(c) => {
                        let cv = c.eval(x, 1);
                        z.iter().map(|v| v - cv[0]).collect()
                    }
                };
                let mut s = 0.0;
                for r in 0..n {
                    for c in 0..n {
                        s += form[r * n + c] * shifted[r] * shifted[c];
                    }
                }
                Ok(s)
            }
            PhiEvaluator::Table(t) => Ok(t.interpolate(z)?),
        }
    }

    fn quadratic_parts(&self) -> Option<(&[f64], Option<&MacroFn>)> {
        match self {
            PhiEvaluator::Quadratic { form, center } => Some((form, center.as_ref())),
            _ => None,
        }
    }
}

/// The effective functional: per-phase effective densities, the island
/// constant, and the interaction density, all computed from one model.
#[derive(Debug, Clone)]
pub struct LimitFunctional {
    pub f_hom: Vec<FHomEvaluator>,
    pub m_const: f64,
    pub phi: PhiEvaluator,
    pub model_hash: u64,
}

/// Macroscopic state: one grid function per hard phase.
#[derive(Debug, Clone)]
pub struct MacroState {
    pub grid: MacroGrid,
    pub m: usize,
    /// Per phase, length `grid.len() * m`.
    pub fields: Vec<Vec<f64>>,
}

impl MacroState {
    pub fn from_fns(grid: MacroGrid, m: usize, fns: &[MacroFn]) -> Self {
        let fields = fns
            .iter()
            .map(|f| {
                let mut v = Vec::with_capacity(grid.len() * m);
                for i in 0..grid.len() {
                    v.extend(f.eval(&grid.center(i), m));
                }
                v
            })
            .collect();
        MacroState { grid, m, fields }
    }
}

/// Midpoint-rule evaluation of the effective functional: per-phase gradient
/// terms by central differences, the island constant times the volume, and
/// the interaction density at the cell values.
pub fn limit_energy(state: &MacroState, limit: &LimitFunctional) -> Result<f64, GammaError> {
    let n_phases = limit.f_hom.len();
    if state.fields.len() != n_phases {
        return Err(GammaError::ShapeMismatch);
    }
    let grid = &state.grid;
    let m = state.m;
    let vol = grid.cell_volume();
    let mut acc = Kahan::new();
    let mut z = vec![0.0; n_phases * m];
    for i in 0..grid.len() {
        let x = grid.center(i);
        for (j, field) in state.fields.iter().enumerate() {
            let grad = grid.gradient_central(field, m, i);
            acc.add(limit.f_hom[j].eval(&grad));
            for k in 0..m {
                z[j * m + k] = field[i * m + k];
            }
        }
        acc.add(limit.phi.eval(&x, &z)?);
    }
    Ok(vol * acc.value() + limit.m_const * grid.volume())
}

/// Two-scale macroscopic state: one grid function per residue class.
#[derive(Debug, Clone)]
pub struct TwoScaleState {
    pub grid: MacroGrid,
    pub m: usize,
    /// Per residue cell index, length `grid.len() * m`.
    pub residues: Vec<Vec<f64>>,
}

impl TwoScaleState {
    pub fn from_fns(grid: MacroGrid, m: usize, fns: &[MacroFn]) -> Self {
        let residues = fns
            .iter()
            .map(|f| {
                let mut v = Vec::with_capacity(grid.len() * m);
                for i in 0..grid.len() {
                    v.extend(f.eval(&grid.center(i), m));
                }
                v
            })
            .collect();
        TwoScaleState { grid, m, residues }
    }
}

/// Midpoint-rule evaluation of the two-scale effective functional: per-phase
/// gradient terms (one per hard phase, shared across its residues), plus the
/// single-cell two-scale interaction density, which carries both the
/// soft-phase terms and the hard-residue comparison terms.
pub fn two_scale_energy(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    g: &ComparisonG,
    state: &TwoScaleState,
    w_res: &[MacroFn],
    f_hom: &[FHomEvaluator],
) -> Result<f64, GammaError> {
    let m = model.codomain();
    let t_len = model.cell_len();
    if state.residues.len() != t_len
        || w_res.len() != t_len
        || f_hom.len() != model.phases() as usize
    {
        return Err(GammaError::ShapeMismatch);
    }
    let grid = &state.grid;
    let vol = grid.cell_volume();
    let mut acc = Kahan::new();
    for i in 0..grid.len() {
        let x = grid.center(i);
        // Constraint: residues of one infinite component agree.
        for phase in 1..=model.phases() {
            let cells = decomp.infinite_cells(phase);
            for w in cells.windows(2) {
                let (a, b) = (&state.residues[w[0]], &state.residues[w[1]]);
                for k in 0..m {
                    if (a[i * m + k] - b[i * m + k]).abs() > 1e-12 {
                        return Err(GammaError::ResidueConstraint);
                    }
                }
            }
            let rep = cells[0];
            let grad = grid.gradient_central(&state.residues[rep], m, i);
            acc.add(f_hom[phase as usize - 1].eval(&grad));
        }
        let u_cell: Vec<Vec<f64>> = (0..t_len)
            .map(|rc| state.residues[rc][i * m..(i + 1) * m].to_vec())
            .collect();
        let w_cell: Vec<Vec<f64>> = (0..t_len).map(|rc| w_res[rc].eval(&x, m)).collect();
        let phig = crate::cell::phi_g_convex(model, decomp, energy, g, &u_cell, &w_cell)?;
        acc.add(phig.total());
    }
    Ok(vol * acc.value())
}

/// Quadratic objective for minimizing the discretized effective functional:
/// face-based gradient energies plus the interaction density per cell.
struct MacroMinObjective<'a> {
    grid: &'a MacroGrid,
    m: usize,
    forms: Vec<&'a [f64]>,
    phi_form: &'a [f64],
    phi_center: Option<&'a MacroFn>,
}

impl MacroMinObjective<'_> {
    fn n_phases(&self) -> usize {
        self.forms.len()
    }
}

impl EnergyObjective for MacroMinObjective<'_> {
    fn n_sites(&self) -> usize {
        self.n_phases() * self.grid.len()
    }

    fn m(&self) -> usize {
        self.m
    }

    fn eval(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let grid = self.grid;
        let m = self.m;
        let d = grid.dim();
        let n_cells = grid.len();
        let vol = grid.cell_volume();
        let mut acc = Kahan::new();
        // Face terms per phase and axis: vol * f_hom((u_next - u_cell)/h)
        // restricted to the face direction.
        for j in 0..self.n_phases() {
            let a = self.forms[j];
            let base = j * n_cells;
            for i in 0..n_cells {
                let idx = grid.multi_index(i);
                for axis in 0..d {
                    if idx[axis] + 1 >= grid.dims()[axis] {
                        continue;
                    }
                    let mut next = idx.clone();
                    next[axis] += 1;
                    let ni = grid.index_of(&next);
                    let h = grid.spacing(axis);
                    // xi has a single nonzero column (the face axis).
                    for r in 0..m {
                        for c in 0..m {
                            let arc = a[(r * d + axis) * (m * d) + (c * d + axis)];
                            if arc == 0.0 {
                                continue;
                            }
                            let dr = (u[(base + ni) * m + r] - u[(base + i) * m + r]) / h;
                            let dc = (u[(base + ni) * m + c] - u[(base + i) * m + c]) / h;
                            acc.add(vol * arc * dr * dc);
                            let gr = vol * arc * dc / h;
                            let gc = vol * arc * dr / h;
                            grad[(base + ni) * m + r] += gr;
                            grad[(base + i) * m + r] -= gr;
                            grad[(base + ni) * m + c] += gc;
                            grad[(base + i) * m + c] -= gc;
                        }
                    }
                }
            }
        }
        // Interaction term per cell over the stacked phase values.
        let nz = self.n_phases() * m;
        let mut z = vec![0.0; nz];
        for i in 0..n_cells {
            let x = grid.center(i);
            let center = self.phi_center.map(|c| c.eval(&x, 1)[0]).unwrap_or(0.0);
            for j in 0..self.n_phases() {
                for k in 0..m {
                    z[j * m + k] = u[(j * n_cells + i) * m + k] - center;
                }
            }
            for r in 0..nz {
                let mut gr = 0.0;
                for c in 0..nz {
                    let a = self.phi_form[r * nz + c];
                    acc.add(vol * a * z[r] * z[c]);
                    gr += 2.0 * a * z[c];
                }
                let (jr, kr) = (r / m, r % m);
                grad[(jr * n_cells + i) * m + kr] += vol * gr;
            }
        }
        acc.value()
    }

    fn is_quadratic(&self) -> bool {
        true
    }
}

/// Minimizes the discretized effective functional over grid states; requires
/// exact quadratic effective densities.
pub fn minimize_limit_functional(
    grid: &MacroGrid,
    m: usize,
    limit: &LimitFunctional,
    opts: &SolveOptions,
) -> Result<(MacroState, f64), GammaError> {
    let forms: Option<Vec<&[f64]>> = limit.f_hom.iter().map(|f| f.quadratic_form()).collect();
    let forms = forms.ok_or(GammaError::NonQuadraticLimit)?;
    let (phi_form, phi_center) = limit
        .phi
        .quadratic_parts()
        .ok_or(GammaError::NonQuadraticLimit)?;
    let obj = MacroMinObjective {
        grid,
        m,
        forms,
        phi_form,
        phi_center,
    };
    let rep = minimize(&obj, &ConstraintSet::free(), opts)?;
    if rep.status != SolveStatus::Converged {
        return Err(GammaError::NotConverged);
    }
    let n_cells = grid.len();
    let fields = (0..limit.f_hom.len())
        .map(|j| rep.values[j * n_cells * m..(j + 1) * n_cells * m].to_vec())
        .collect();
    Ok((
        MacroState {
            grid: grid.clone(),
            m,
            fields,
        },
        rep.objective + limit.m_const * grid.volume(),
    ))
}

/// Assembles the effective functional of a quadratic model from its cell
/// problems: per-phase quadratic forms recovered from corrector problems at
/// size `k_cell`, the island constant, and the interaction density recovered
/// as a quadratic form from cell problems at size `m_cell` (centered at the
/// pinning target when one is present).
pub fn assemble_limit_functional(
    model: &PeriodicLatticeModel,
    decomp: &PhaseDecomposition,
    energy: &EnergyModel,
    m_cell: i64,
    k_cell: i64,
    opts: &crate::cell::CellOpts,
) -> Result<LimitFunctional, GammaError> {
    if !energy.is_quadratic() {
        return Err(GammaError::NonQuadraticLimit);
    }
    let m = model.codomain();
    let n_phases = model.phases() as usize;
    let mut f_hom = Vec::with_capacity(n_phases);
    for phase in 1..=model.phases() {
        let form = crate::cell::quadratic_form_from_cells(
            model,
            decomp,
            energy,
            phase,
            m * model.dim(),
            k_cell,
            opts,
        )?;
        f_hom.push(FHomEvaluator::Quadratic(form));
    }
    let m_const = crate::cell::aggregate_m(model, decomp, energy, opts)?.m_value;
    // The interaction density is quadratic around the pinning target; recover
    // its form with the target re-centered at zero.
    let (centered_energy, center) = match energy.site_density() {
        crate::energy::SiteDensity::Zero => (energy.clone(), None),
        crate::energy::SiteDensity::Pinning(u0) => {
            let strong: Vec<_> = (1..=model.phases())
                .map(|j| energy.strong_density(j).clone())
                .collect();
            let recentered = EnergyModel::new(
                energy.p,
                strong,
                energy.weak_density().clone(),
                crate::energy::SiteDensity::Pinning(MacroFn::Constant(vec![0.0; m])),
                energy.growth_lower,
                energy.growth_upper,
            )
            .expect("recentering preserves validity");
            (recentered, Some(u0.clone()))
        }
    };
    let n = m * n_phases;
    let mut cell_err: Option<CellError> = None;
    let form = crate::solver::quadratic_form_recover(
        n,
        |z| match crate::cell::phi_m(model, decomp, &centered_energy, z, m_cell, None, opts) {
            Ok(sol) => sol.value,
            Err(e) => {
                cell_err = Some(e);
                f64::NAN
            }
        },
        1e-7,
    );
    if let Some(e) = cell_err {
        return Err(e.into());
    }
    Ok(LimitFunctional {
        f_hom,
        m_const,
        phi: PhiEvaluator::Quadratic {
            form: form.map_err(CellError::from)?,
            center,
        },
        model_hash: crate::cell::system_hash(model, energy),
    })
}

/// The scaled lattice energy as a solver objective over a box: strong bonds
/// at `eps^d f((u_b - u_a)/eps)`, weak bonds at `eps^{d+p}`, and the
/// zero-order density at `x = eps k`. `include_weak` exists so experiments
/// can probe the effect of dropping the weak term.
pub fn micro_objective(
    model: &PeriodicLatticeModel,
    energy: &EnergyModel,
    bbox: &IBox,
    eps: f64,
    include_weak: bool,
) -> GenericObjective {
    let m = model.codomain();
    let d = model.dim() as i32;
    let bonds = bond_sets(model, bbox, Wrap::None);
    let mut obj = GenericObjective::new(bbox.len(), m, energy.p);
    for (j, phase_bonds) in bonds.strong.iter().enumerate() {
        for b in phase_bonds {
            obj.bonds.push(BondTerm {
                a: b.a,
                b: b.b,
                density: energy.strong_density(j as u8 + 1).clone(),
                weight: eps.powi(d),
                scale: 1.0 / eps,
                shift: vec![0.0; m],
            });
        }
    }
    if include_weak {
        for b in &bonds.weak {
            obj.bonds.push(BondTerm {
                a: b.a,
                b: b.b,
                density: energy.weak_density().clone(),
                weight: eps.powi(d) * eps.powf(energy.p),
                scale: 1.0 / eps,
                shift: vec![0.0; m],
            });
        }
    }
    obj.sites = crate::solver::site_terms_for_box(energy, bbox, eps, eps.powi(d));
    obj
}

#[derive(Debug, Clone)]
pub struct MinimaRow {
    pub eps_denom: i64,
    pub micro_min: f64,
    pub macro_min: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct MinimaReport {
    pub rows: Vec<MinimaRow>,
    pub macro_min: f64,
}

/// Minimizes the lattice energy over `(1/eps)(0,1)^d` for each spacing and
/// compares against the minimum of the effective functional on a fine grid.
pub fn minima_convergence_experiment(
    model: &PeriodicLatticeModel,
    energy: &EnergyModel,
    eps_denoms: &[i64],
    limit: &LimitFunctional,
    macro_cells: usize,
    opts: &SolveOptions,
) -> Result<MinimaReport, GammaError> {
    let d = model.dim();
    let m = model.codomain();
    let grid = if d == 1 {
        MacroGrid::interval(0.0, 1.0, macro_cells)
    } else {
        MacroGrid::new(vec![0.0; d], vec![1.0; d], vec![macro_cells; d])?
    };
    let (_, macro_min) = minimize_limit_functional(&grid, m, limit, opts)?;
    let mut rows = Vec::with_capacity(eps_denoms.len());
    for &n in eps_denoms {
        let eps = 1.0 / n as f64;
        let bbox = IBox::cube(d, n);
        let obj = micro_objective(model, energy, &bbox, eps, true);
        let rep = minimize(&obj, &ConstraintSet::free(), opts)?;
        if rep.status != SolveStatus::Converged {
            return Err(GammaError::NotConverged);
        }
        // Island energies are already part of the lattice sum, so no m-term
        // is added on the micro side.
        let micro_min = rep.objective;
        rows.push(MinimaRow {
            eps_denom: n,
            micro_min,
            macro_min,
            gap: (micro_min - macro_min).abs(),
        });
    }
    Ok(MinimaReport { rows, macro_min })
}
