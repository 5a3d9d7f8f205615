//! Sag cell-transmission model with a triangular fundamental diagram.
//!
//! Densities are veh/km, flows veh/h, speeds m/s and positions m. Sag cells
//! use their own (lower) critical density, which makes them the bottleneck.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenario::RoadProfile;

/// m/s to km/h.
pub const MPS_TO_KMH: f64 = 3.6;

/// The estimated fundamental-diagram parameters: free-flow speed and the
/// critical densities of normal and sag-uphill cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdParams {
    /// m/s
    pub v_fr: f64,
    /// veh/km
    pub rho_cr_nor: f64,
    /// veh/km
    pub rho_cr_sag: f64,
}

impl FdParams {
    pub const fn new(v_fr: f64, rho_cr_nor: f64, rho_cr_sag: f64) -> Self {
        Self {
            v_fr,
            rho_cr_nor,
            rho_cr_sag,
        }
    }

    pub fn validate(&self, rho_jam: f64) -> Result<()> {
        if !(self.v_fr > 0.0 && self.v_fr.is_finite()) {
            return Err(Error::config("ctm.initial_theta.v_fr_mps", "must be positive"));
        }
        if !(self.rho_cr_sag > 0.0 && self.rho_cr_sag <= self.rho_cr_nor && self.rho_cr_nor < rho_jam)
        {
            return Err(Error::config(
                "ctm.initial_theta",
                "require 0 < rho_cr_sag <= rho_cr_nor < rho_jam",
            ));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.v_fr, self.rho_cr_nor, self.rho_cr_sag]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self::new(x[0], x[1], x[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CellType {
    Normal,
    Sag,
}

/// Triangular fundamental diagram with a type-dependent critical density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalDiagram {
    pub params: FdParams,
    /// veh/km
    pub rho_jam: f64,
}

impl FundamentalDiagram {
    pub fn new(params: FdParams, rho_jam: f64) -> Self {
        Self { params, rho_jam }
    }

    pub fn critical_density(&self, cell: CellType) -> f64 {
        match cell {
            CellType::Normal => self.params.rho_cr_nor,
            CellType::Sag => self.params.rho_cr_sag,
        }
    }

    /// Free-flow speed in km/h.
    fn v_kmh(&self) -> f64 {
        self.params.v_fr * MPS_TO_KMH
    }

    /// Maximum flow, veh/h.
    pub fn capacity(&self, cell: CellType) -> f64 {
        self.v_kmh() * self.critical_density(cell)
    }

    /// Congested-branch wave speed, km/h.
    pub fn wave_speed(&self, cell: CellType) -> f64 {
        self.capacity(cell) / (self.rho_jam - self.critical_density(cell))
    }

    pub fn sending(&self, rho: f64, cell: CellType) -> f64 {
        (self.v_kmh() * rho).min(self.capacity(cell))
    }

    pub fn receiving(&self, rho: f64, cell: CellType) -> f64 {
        self.capacity(cell)
            .min(self.wave_speed(cell) * (self.rho_jam - rho))
    }

    /// Equilibrium flow q(ρ), veh/h. No domain check.
    pub fn flow(&self, rho: f64, cell: CellType) -> f64 {
        if rho <= self.critical_density(cell) {
            self.v_kmh() * rho
        } else {
            self.wave_speed(cell) * (self.rho_jam - rho)
        }
    }

    /// Equilibrium speed, m/s.
    pub fn equilibrium_speed(&self, rho: f64, cell: CellType) -> Result<f64> {
        if !(0.0..=self.rho_jam).contains(&rho) {
            return Err(Error::Domain {
                what: "density",
                value: rho,
            });
        }
        Ok(self.speed_unchecked(rho, cell))
    }

    /// Equilibrium speed with the density clamped into `[0, rho_jam]`.
    pub fn speed_unchecked(&self, rho: f64, cell: CellType) -> f64 {
        let rho = rho.clamp(0.0, self.rho_jam);
        if rho <= self.critical_density(cell) {
            self.params.v_fr
        } else {
            self.flow(rho, cell) / rho / MPS_TO_KMH
        }
    }
}

/// Uniform partition of the section into CTM cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    pub p_entry: f64,
    pub cell_length: f64,
    pub cell_types: Vec<CellType>,
}

impl CellGrid {
    pub fn new(profile: &RoadProfile, cell_length: f64) -> Result<Self> {
        let n = profile.length() / cell_length;
        let count = n.round();
        if !(cell_length > 0.0) || (n - count).abs() > 1e-9 || count < 1.0 {
            return Err(Error::config(
                "timing.cell_length_m",
                "section length must be an integer multiple of the cell length",
            ));
        }
        let cell_types = classify_cells(profile, count as usize, cell_length);
        Ok(Self {
            p_entry: profile.p_entry,
            cell_length,
            cell_types,
        })
    }

    pub fn len(&self) -> usize {
        self.cell_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_types.is_empty()
    }

    pub fn upstream_boundary(&self, i: usize) -> f64 {
        self.p_entry + i as f64 * self.cell_length
    }

    pub fn downstream_boundary(&self, i: usize) -> f64 {
        self.p_entry + (i + 1) as f64 * self.cell_length
    }

    pub fn p_exit(&self) -> f64 {
        self.downstream_boundary(self.len() - 1)
    }

    /// Cell containing `p`. A position on a boundary belongs to the upstream
    /// cell; positions outside the section are clamped to the end cells.
    pub fn cell_of(&self, p: f64) -> usize {
        let x = ((p - self.p_entry) / self.cell_length).ceil() as i64 - 1;
        x.clamp(0, self.len() as i64 - 1) as usize
    }

    /// Cell length in km.
    pub fn cell_km(&self) -> f64 {
        self.cell_length / 1000.0
    }
}

/// Cells reaching past the sag begin are sag-type (a straddling cell is sag).
pub fn classify_cells(profile: &RoadProfile, cell_count: usize, cell_length: f64) -> Vec<CellType> {
    (0..cell_count)
        .map(|i| {
            let downstream = profile.p_entry + (i + 1) as f64 * cell_length;
            if downstream > profile.p_sag_begin {
                CellType::Sag
            } else {
                CellType::Normal
            }
        })
        .collect()
}

/// Result of one CTM update.
#[derive(Debug, Clone, PartialEq)]
pub struct CtmStep {
    pub densities: Vec<f64>,
    /// Flow admitted at the upstream boundary, veh/h.
    pub inflow: f64,
    /// Flow leaving the downstream boundary, veh/h.
    pub outflow: f64,
}

/// Advances cell densities by `dt` seconds. `upstream_demand` (veh/h) is
/// admitted up to the first cell's receiving flow; the downstream boundary is
/// free outflow.
///
/// The caller must guarantee `v_fr * dt <= cell_length` (see [`CtmModel`]).
pub fn ctm_step(
    densities: &[f64],
    fd: &FundamentalDiagram,
    grid: &CellGrid,
    upstream_demand: f64,
    dt: f64,
) -> CtmStep {
    let n = grid.len();
    debug_assert_eq!(densities.len(), n);
    // fluxes[k] is the flow across the upstream boundary of cell k; fluxes[n]
    // is the outflow.
    let mut fluxes = Vec::with_capacity(n + 1);
    fluxes.push(
        upstream_demand
            .max(0.0)
            .min(fd.receiving(densities[0], grid.cell_types[0])),
    );
    for k in 1..n {
        let s = fd.sending(densities[k - 1], grid.cell_types[k - 1]);
        let r = fd.receiving(densities[k], grid.cell_types[k]);
        fluxes.push(s.min(r));
    }
    fluxes.push(fd.sending(densities[n - 1], grid.cell_types[n - 1]));

    let scale = dt / 3600.0 / grid.cell_km();
    let next = densities
        .iter()
        .enumerate()
        .map(|(i, &rho)| rho + scale * (fluxes[i] - fluxes[i + 1]))
        .collect();
    CtmStep {
        densities: next,
        inflow: fluxes[0],
        outflow: fluxes[n],
    }
}

/// Vehicles on the grid.
pub fn total_vehicles(densities: &[f64], grid: &CellGrid) -> f64 {
    densities.iter().sum::<f64>() * grid.cell_km()
}

/// Grid plus time step with the CFL condition checked up front.
#[derive(Debug, Clone)]
pub struct CtmModel {
    pub grid: CellGrid,
    pub rho_jam: f64,
    pub dt: f64,
}

impl CtmModel {
    pub fn new(grid: CellGrid, rho_jam: f64, dt: f64, params: &FdParams) -> Result<Self> {
        let model = Self { grid, rho_jam, dt };
        model.check_cfl(params)?;
        Ok(model)
    }

    /// Largest free-flow speed the grid admits, m/s.
    pub fn max_free_speed(&self) -> f64 {
        self.grid.cell_length / self.dt
    }

    pub fn check_cfl(&self, params: &FdParams) -> Result<()> {
        if params.v_fr * self.dt > self.grid.cell_length + 1e-12 {
            return Err(Error::config(
                "ctm",
                format!(
                    "CFL violated: v_fr {} m/s * dt {} s exceeds cell length {} m",
                    params.v_fr, self.dt, self.grid.cell_length
                ),
            ));
        }
        let fd = self.fd(*params);
        for cell in [CellType::Normal, CellType::Sag] {
            if fd.wave_speed(cell) / MPS_TO_KMH * self.dt > self.grid.cell_length + 1e-12 {
                return Err(Error::config("ctm", "CFL violated by the congested wave speed"));
            }
        }
        Ok(())
    }

    pub fn fd(&self, params: FdParams) -> FundamentalDiagram {
        FundamentalDiagram::new(params, self.rho_jam)
    }

    pub fn step(&self, densities: &[f64], params: &FdParams, upstream_demand: f64) -> CtmStep {
        ctm_step(densities, &self.fd(*params), &self.grid, upstream_demand, self.dt)
    }

    /// Per-cell equilibrium speeds, m/s.
    pub fn speed_field(&self, densities: &[f64], params: &FdParams) -> Vec<f64> {
        let fd = self.fd(*params);
        densities
            .iter()
            .zip(&self.grid.cell_types)
            .map(|(&rho, &ct)| fd.speed_unchecked(rho, ct))
            .collect()
    }
}

/// Vehicles refused at the upstream boundary, carried over to later steps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpstreamQueue {
    /// vehicles
    pub queued: f64,
}

impl UpstreamQueue {
    /// Boundary demand (veh/h) for a step of `dt` seconds with `inflow` arriving.
    pub fn demand(&self, inflow: f64, dt: f64) -> f64 {
        inflow + self.queued * 3600.0 / dt
    }

    pub fn settle(&mut self, inflow: f64, accepted: f64, dt: f64) {
        self.queued = (self.queued + (inflow - accepted) * dt / 3600.0).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn baseline_fd() -> FundamentalDiagram {
        FundamentalDiagram::new(FdParams::new(27.0, 23.0, 18.0), 140.0)
    }

    fn baseline_grid() -> CellGrid {
        CellGrid::new(&RoadProfile::baseline(), 100.0).unwrap()
    }

    #[test]
    fn equilibrium_speed_branches() {
        let fd = baseline_fd();
        for ct in [CellType::Normal, CellType::Sag] {
            assert_eq!(fd.equilibrium_speed(0.0, ct).unwrap(), 27.0);
            assert_eq!(fd.equilibrium_speed(fd.critical_density(ct), ct).unwrap(), 27.0);
            assert_eq!(fd.equilibrium_speed(140.0, ct).unwrap(), 0.0);
        }
        assert!(fd.equilibrium_speed(-0.1, CellType::Normal).is_err());
        assert!(fd.equilibrium_speed(140.1, CellType::Normal).is_err());
    }

    /// Congested speed at the midpoint checked against a flux table built
    /// directly from the two linear branches.
    #[test]
    fn equilibrium_speed_midpoint_matches_flux_table() {
        let fd = baseline_fd();
        for ct in [CellType::Normal, CellType::Sag] {
            let rc = fd.critical_density(ct);
            let cap = 27.0 * 3.6 * rc;
            // Brute-force table: q(ρ) = min(v ρ, cap (ρj − ρ)/(ρj − ρc)).
            let table: Vec<(f64, f64)> = (0..=14_000)
                .map(|k| {
                    let rho = k as f64 * 0.01;
                    let q = (97.2 * rho).min(cap * (140.0 - rho) / (140.0 - rc));
                    (rho, q)
                })
                .collect();
            let mid = 0.5 * (rc + 140.0);
            let k = (mid / 0.01).round() as usize;
            let (rho, q) = table[k];
            assert!((rho - mid).abs() < 1e-9);
            let expected = q / rho / 3.6;
            let got = fd.equilibrium_speed(mid, ct).unwrap();
            assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
            let w = fd.wave_speed(ct);
            assert!((got - w * (140.0 - mid) / mid / 3.6).abs() < 1e-12);
        }
    }

    #[test]
    fn speed_continuous_at_critical_density() {
        let fd = baseline_fd();
        for ct in [CellType::Normal, CellType::Sag] {
            let rc = fd.critical_density(ct);
            let above = fd.equilibrium_speed(rc + 1e-9, ct).unwrap();
            assert!((above - 27.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cell_classification() {
        let grid = baseline_grid();
        assert_eq!(grid.len(), 100);
        // [8500, 8600) lies fully upstream of the sag.
        assert_eq!(grid.cell_types[85], CellType::Normal);
        assert_eq!(grid.cell_types[0], CellType::Normal);
        // [8900, 9000)
        assert_eq!(grid.cell_types[89], CellType::Sag);
        assert_eq!(grid.cell_types[86], CellType::Sag);

        let road = RoadProfile::new(-0.005, 0.03, 8650.0, 8900.0, 0.0, 10_000.0).unwrap();
        let types = classify_cells(&road, 100, 100.0);
        assert_eq!(types[86], CellType::Sag, "straddling cell is sag");
        assert_eq!(types[85], CellType::Normal);
    }

    #[test]
    fn cell_of_boundary_convention() {
        let grid = baseline_grid();
        assert_eq!(grid.cell_of(0.0), 0);
        assert_eq!(grid.cell_of(50.0), 0);
        assert_eq!(grid.cell_of(100.0), 0);
        assert_eq!(grid.cell_of(100.0001), 1);
        assert_eq!(grid.cell_of(10_000.0), 99);
        assert_eq!(grid.cell_of(12_000.0), 99);
    }

    #[test]
    fn empty_road_is_fixed_point() {
        let grid = baseline_grid();
        let out = ctm_step(&vec![0.0; 100], &baseline_fd(), &grid, 0.0, 3.0);
        assert!(out.densities.iter().all(|&r| r == 0.0));
        assert_eq!(out.inflow, 0.0);
        assert_eq!(out.outflow, 0.0);
    }

    #[test]
    fn uniform_free_flow_with_matched_inflow_is_steady() {
        let grid = baseline_grid();
        let fd = baseline_fd();
        let rho = 12.0;
        let inflow = 27.0 * 3.6 * rho;
        let out = ctm_step(&vec![rho; 100], &fd, &grid, inflow, 3.0);
        // Per-cell flux balance: every interface carries v ρ.
        for (i, r) in out.densities.iter().enumerate() {
            assert!((r - rho).abs() < 1e-12, "cell {i}: {r}");
        }
        assert!((out.outflow - inflow).abs() < 1e-9);
    }

    #[test]
    fn saturated_inflow_queues_upstream_of_sag() {
        let grid = baseline_grid();
        let fd = baseline_fd();
        let model = CtmModel::new(grid.clone(), 140.0, 3.0, &fd.params).unwrap();
        let mut rho = vec![0.0; 100];
        let inflow = 2000.0;
        let mut front_history = Vec::new();
        for step in 0..2400 {
            rho = model.step(&rho, &fd.params, inflow).densities;
            if step % 200 == 199 {
                // Most downstream congested cell.
                let front = (0..100)
                    .rev()
                    .find(|&i| rho[i] > fd.critical_density(grid.cell_types[i]) + 1e-6);
                front_history.push(front);
            }
        }
        let fronts: Vec<usize> = front_history.iter().flatten().copied().collect();
        assert!(fronts.len() >= 5);
        assert!(fronts.iter().all(|&f| f == 85), "{fronts:?}");
        // Queue grows upstream.
        let tail = (0..100).find(|&i| rho[i] > fd.critical_density(grid.cell_types[i]) + 1e-6);
        assert!(tail.unwrap() < 80);
        // Sag cells carry exactly the sag capacity.
        let sag_cap = fd.capacity(CellType::Sag);
        let last = model.step(&rho, &fd.params, inflow);
        assert!((last.outflow - sag_cap).abs() < 1e-6);
    }

    #[test]
    fn cfl_checked_at_construction() {
        let grid = baseline_grid();
        assert!(CtmModel::new(grid.clone(), 140.0, 3.0, &FdParams::new(34.0, 23.0, 18.0)).is_err());
        assert!(CtmModel::new(grid, 140.0, 3.0, &FdParams::new(33.0, 23.0, 18.0)).is_ok());
    }

    #[test]
    fn upstream_queue_preserves_demand() {
        let grid = baseline_grid();
        let fd = baseline_fd();
        let mut rho = vec![135.0; 100];
        rho[99] = 0.0;
        let mut queue = UpstreamQueue::default();
        let mut admitted = 0.0;
        for _ in 0..100 {
            let demand = queue.demand(1800.0, 3.0);
            let out = ctm_step(&rho, &fd, &grid, demand, 3.0);
            queue.settle(1800.0, out.inflow, 3.0);
            admitted += out.inflow * 3.0 / 3600.0;
            rho = out.densities;
        }
        assert!((admitted + queue.queued - 150.0).abs() < 1e-9);
    }

    fn densities_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0..140.0f64, 100)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bounds_conservation_and_flux_limits(
            rho in densities_strategy(),
            v in 15.0..33.0f64,
            nor in 15.0..40.0f64,
            frac in 0.5..1.0f64,
            demand in 0.0..4000.0f64,
        ) {
            let grid = baseline_grid();
            let fd = FundamentalDiagram::new(FdParams::new(v, nor, nor * frac), 140.0);
            let out = ctm_step(&rho, &fd, &grid, demand, 3.0);
            for &r in &out.densities {
                prop_assert!((-1e-9..=140.0 + 1e-9).contains(&r));
            }
            let before = total_vehicles(&rho, &grid);
            let after = total_vehicles(&out.densities, &grid);
            let boundary = (out.inflow - out.outflow) * 3.0 / 3600.0;
            prop_assert!((after - before - boundary).abs() < 1e-9);
            prop_assert!(out.inflow >= 0.0 && out.inflow <= fd.capacity(grid.cell_types[0]) + 1e-9);
        }

        #[test]
        fn zero_inflow_never_adds_vehicles(rho in densities_strategy()) {
            let grid = baseline_grid();
            let fd = baseline_fd();
            let out = ctm_step(&rho, &fd, &grid, 0.0, 3.0);
            prop_assert!(total_vehicles(&out.densities, &grid) <= total_vehicles(&rho, &grid) + 1e-12);
        }
    }
}
