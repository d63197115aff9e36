//! Built-in lattice/energy model pairs used by the test suites and the
//! bundled configurations.

use crate::energy::{BondDensity, EnergyModel, MacroFn, SiteDensity};
use crate::lattice::PeriodicLatticeModel;

fn offs_1d(values: &[i64]) -> Vec<Vec<i64>> {
    values.iter().map(|&v| vec![v]).collect()
}

/// Two interleaved stiff chains on `Z` (even and odd sites) coupled by weak
/// nearest-neighbour bonds; no soft sites, no zero-order term.
pub fn exh1() -> (PeriodicLatticeModel, EnergyModel) {
    let model = PeriodicLatticeModel::new(
        1,
        1,
        2,
        vec![1, 2],
        vec![
            offs_1d(&[-1, 0, 1]),
            offs_1d(&[-2, 0, 2]),
            offs_1d(&[-2, 0, 2]),
        ],
    )
    .expect("static model");
    let energy = EnergyModel::new(
        2.0,
        vec![BondDensity::Quadratic, BondDensity::Quadratic],
        BondDensity::Quadratic,
        SiteDensity::Zero,
        0.25,
        8.0,
    )
    .expect("static energy");
    (model, energy)
}

/// One stiff chain on the even sites, soft odd sites, weak nearest-neighbour
/// coupling, and a quadratic pinning term `|z - u0(x)|^2` on every site.
pub fn exh2(u0: MacroFn) -> (PeriodicLatticeModel, EnergyModel) {
    let model = PeriodicLatticeModel::new(
        1,
        1,
        2,
        vec![1, 0],
        vec![offs_1d(&[-1, 0, 1]), offs_1d(&[-2, 0, 2])],
    )
    .expect("static model");
    let energy = EnergyModel::new(
        2.0,
        vec![BondDensity::Quadratic],
        BondDensity::Quadratic,
        SiteDensity::Pinning(u0),
        0.25,
        8.0,
    )
    .expect("static energy");
    (model, energy)
}

/// `exh2` pinned to a constant target.
pub fn exh2_pinned_const(c: f64) -> (PeriodicLatticeModel, EnergyModel) {
    exh2(MacroFn::Constant(vec![c]))
}

/// `exh2` geometry without the zero-order term (the gradient-flow case).
pub fn exh2_zero_g() -> (PeriodicLatticeModel, EnergyModel) {
    let (model, energy) = exh2_pinned_const(0.0);
    let energy = EnergyModel::new(
        energy.p,
        vec![BondDensity::Quadratic],
        BondDensity::Quadratic,
        SiteDensity::Zero,
        energy.growth_lower,
        energy.growth_upper,
    )
    .expect("static energy");
    (model, energy)
}

/// `exh1` geometry without the zero-order term.
pub fn exh1_zero_g() -> (PeriodicLatticeModel, EnergyModel) {
    exh1()
}

/// The full nearest-neighbour lattice `Z` as a single hard phase.
pub fn full_lattice_1d() -> (PeriodicLatticeModel, EnergyModel) {
    let model = PeriodicLatticeModel::new(
        1,
        1,
        1,
        vec![1],
        vec![offs_1d(&[0]), offs_1d(&[-1, 0, 1])],
    )
    .expect("static model");
    let energy = EnergyModel::new(
        2.0,
        vec![BondDensity::Quadratic],
        BondDensity::Quadratic,
        SiteDensity::Pinning(MacroFn::Constant(vec![0.0])),
        0.25,
        8.0,
    )
    .expect("static energy");
    (model, energy)
}

/// A stiff next-to-nearest chain on the even residues of period 8 plus a
/// single-site island at residue 3 of the same phase.
pub fn island_singleton_1d() -> (PeriodicLatticeModel, EnergyModel) {
    let model = PeriodicLatticeModel::new(
        1,
        1,
        8,
        vec![1, 0, 1, 1, 1, 0, 1, 0],
        vec![offs_1d(&[-1, 0, 1]), offs_1d(&[-2, 0, 2])],
    )
    .expect("static model");
    let energy = EnergyModel::new(
        2.0,
        vec![BondDensity::Quadratic],
        BondDensity::Quadratic,
        SiteDensity::Pinning(MacroFn::Constant(vec![0.0])),
        0.25,
        8.0,
    )
    .expect("static energy");
    (model, energy)
}

/// Diagonal stiff sublattice of `Z^2` (checkerboard) with soft off-diagonal
/// sites; next-to-nearest (diagonal) strong bonds, nearest-neighbour weak
/// bonds.
pub fn checkerboard_2d() -> (PeriodicLatticeModel, EnergyModel) {
    let model = PeriodicLatticeModel::new(
        2,
        1,
        2,
        vec![1, 0, 0, 1],
        vec![
            vec![vec![0, 0], vec![1, 0], vec![-1, 0], vec![0, 1], vec![0, -1]],
            vec![
                vec![0, 0],
                vec![1, 1],
                vec![-1, -1],
                vec![1, -1],
                vec![-1, 1],
            ],
        ],
    )
    .expect("static model");
    let energy = EnergyModel::new(
        2.0,
        vec![BondDensity::Quadratic],
        BondDensity::Quadratic,
        SiteDensity::Pinning(MacroFn::Constant(vec![0.0])),
        0.25,
        8.0,
    )
    .expect("static energy");
    (model, energy)
}

/// A 2D cross of stiff rows/columns (period 8) with a three-site island
/// `{(3,2),(4,2),(5,2)}` reached by horizontal first- and second-neighbour
/// bonds; shifted-quadratic strong bonds make the island minimum nonzero.
pub fn cross_island_2d() -> (PeriodicLatticeModel, EnergyModel) {
    let t = 8usize;
    let mut labels = vec![0u8; t * t];
    for i in 0..t {
        labels[i * t] = 1; // column 0
        labels[i] = 1; // row 0
    }
    for x in [3, 4, 5] {
        labels[x * t + 2] = 1;
    }
    let nn = vec![
        vec![0, 0],
        vec![1, 0],
        vec![-1, 0],
        vec![0, 1],
        vec![0, -1],
    ];
    let mut strong_range = nn.clone();
    strong_range.push(vec![2, 0]);
    strong_range.push(vec![-2, 0]);
    let model = PeriodicLatticeModel::new(2, 1, t as i64, labels, vec![nn, strong_range])
        .expect("static model");
    let energy = EnergyModel::new(
        2.0,
        vec![BondDensity::ShiftedQuadratic(vec![1.0])],
        BondDensity::Quadratic,
        SiteDensity::Pinning(MacroFn::Constant(vec![0.0])),
        0.25,
        8.0,
    )
    .expect("static energy");
    (model, energy)
}

/// Deterministic list of every built-in pair, used by the invariant suites.
pub fn all() -> Vec<(&'static str, PeriodicLatticeModel, EnergyModel)> {
    let mut out = Vec::new();
    let (m, e) = exh1();
    out.push(("exh1", m, e));
    let (m, e) = exh2_pinned_const(0.0);
    out.push(("exh2", m, e));
    let (m, e) = full_lattice_1d();
    out.push(("full-1d", m, e));
    let (m, e) = island_singleton_1d();
    out.push(("island-singleton-1d", m, e));
    let (m, e) = checkerboard_2d();
    out.push(("checkerboard-2d", m, e));
    let (m, e) = cross_island_2d();
    out.push(("cross-island-2d", m, e));
    out
}
