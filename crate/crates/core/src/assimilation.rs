//! Extended Kalman filter over cell densities augmented with the
//! fundamental-diagram parameters.
//!
//! The state vector is `[ρ_1 .. ρ_I, v_fr, ρ_cr,nor, ρ_cr,sag]`. Parameters
//! follow a random walk; densities follow the sag CTM driven by the
//! parameters carried in the state itself. Measurements are flow and
//! occupancy at detector stations placed on cell boundaries.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ctm::{CtmModel, FdParams, UpstreamQueue, MPS_TO_KMH};
use crate::error::{Error, Result};

/// Number of augmented parameters.
pub const THETA_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseConfig {
    /// Density random-walk variance per forecast step, (veh/km)².
    pub q_density: f64,
    /// Parameter random-walk variances per forecast step.
    pub q_theta: [f64; 3],
    /// Flow measurement variance, (veh/h)².
    pub r_flow: f64,
    /// Occupancy measurement variance.
    pub r_occ: f64,
    /// Initial density variance, (veh/km)².
    pub p0_density: f64,
    pub p0_theta: [f64; 3],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            q_density: 1.0,
            q_theta: [0.01 * 0.01, 0.05 * 0.05, 0.05 * 0.05],
            r_flow: 120.0 * 120.0,
            r_occ: 0.02 * 0.02,
            p0_density: 25.0,
            p0_theta: [1.0, 4.0, 4.0],
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.q_density, self.r_flow, self.r_occ, self.p0_density]
            .into_iter()
            .chain(self.q_theta)
            .chain(self.p0_theta);
        for x in all {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::config("filter", "noise variances must be non-negative"));
            }
        }
        if !(self.r_flow > 0.0 && self.r_occ > 0.0) {
            return Err(Error::config("filter", "measurement variances must be positive"));
        }
        Ok(())
    }
}

/// Densities plus fundamental-diagram parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficStateVector {
    pub rho: Vec<f64>,
    pub theta: FdParams,
}

impl TrafficStateVector {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.rho.len() + THETA_DIM,
            self.rho.iter().copied().chain(self.theta.to_array()),
        )
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        let n = x.len() - THETA_DIM;
        Self {
            rho: x.rows(0, n).iter().copied().collect(),
            theta: FdParams::from_slice(x.rows(n, THETA_DIM).as_slice()),
        }
    }
}

/// Mean and covariance of the augmented state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(state: &TrafficStateVector, noise: &NoiseConfig) -> Self {
        let mean = state.to_vector();
        let n = state.rho.len();
        let diag = DVector::from_iterator(
            n + THETA_DIM,
            std::iter::repeat_n(noise.p0_density, n)
                .chain(noise.p0_theta),
        );
        Self {
            mean,
            cov: DMatrix::from_diagonal(&diag),
        }
    }

    pub fn cells(&self) -> usize {
        self.mean.len() - THETA_DIM
    }

    pub fn state(&self) -> TrafficStateVector {
        TrafficStateVector::from_vector(&self.mean)
    }

    pub fn theta(&self) -> FdParams {
        let n = self.cells();
        FdParams::new(self.mean[n], self.mean[n + 1], self.mean[n + 2])
    }

    pub fn densities(&self) -> &[f64] {
        &self.mean.as_slice()[..self.cells()]
    }

    fn check_finite(&self, stage: &str) -> Result<()> {
        match self.mean.iter().position(|x| !x.is_finite()) {
            Some(k) => Err(Error::FilterFault(format!("non-finite state component {k} after {stage}"))),
            None if self.cov.iter().any(|x| !x.is_finite()) => {
                Err(Error::FilterFault(format!("non-finite covariance after {stage}")))
            }
            None => Ok(()),
        }
    }
}

/// Box constraints applied to the parameters after every analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaBounds {
    pub v_fr: (f64, f64),
    pub rho_cr: (f64, f64),
}

impl ThetaBounds {
    /// Keeps the free-flow and congested waves inside the CFL limit of `model`.
    pub fn for_model(model: &CtmModel) -> Self {
        Self {
            v_fr: (5.0, 0.98 * model.max_free_speed()),
            rho_cr: (5.0, 0.45 * model.rho_jam),
        }
    }

    pub fn clamp(&self, theta: FdParams) -> FdParams {
        let v_fr = theta.v_fr.clamp(self.v_fr.0, self.v_fr.1);
        let rho_cr_nor = theta.rho_cr_nor.clamp(self.rho_cr.0, self.rho_cr.1);
        let rho_cr_sag = theta.rho_cr_sag.clamp(self.rho_cr.0, self.rho_cr.1).min(rho_cr_nor);
        FdParams::new(v_fr, rho_cr_nor, rho_cr_sag)
    }
}

/// A detector station and the CTM cell it observes (the cell whose
/// downstream boundary it sits on).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Station {
    pub p: f64,
    pub cell: usize,
}

/// Stations every `spacing` metres, strictly inside the section.
pub fn stations_for(model: &CtmModel, spacing: f64) -> Vec<Station> {
    let grid = &model.grid;
    let count = (grid.p_exit() - grid.p_entry) / spacing;
    (1..count.round() as usize)
        .map(|k| {
            let p = grid.p_entry + k as f64 * spacing;
            Station {
                p,
                cell: grid.cell_of(p),
            }
        })
        .collect()
}

/// Flow (veh/h) and occupancy per station for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub flow: Vec<f64>,
    pub occupancy: Vec<f64>,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow.is_empty()
    }

    /// Flows first, then occupancies.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.len(),
            self.flow.iter().chain(&self.occupancy).copied(),
        )
    }
}

/// Central-difference Jacobian of `map` at `at` with per-component steps.
pub fn numerical_jacobian<F>(map: F, at: &DVector<f64>, steps: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    debug_assert_eq!(at.len(), steps.len());
    let base = map(at);
    let mut jac = DMatrix::zeros(base.len(), at.len());
    let mut x = at.clone();
    for (j, &h) in steps.iter().enumerate() {
        x[j] = at[j] + h;
        let plus = map(&x);
        x[j] = at[j] - h;
        let minus = map(&x);
        x[j] = at[j];
        let column = (plus - minus) / (2.0 * h);
        if column.iter().any(|v| !v.is_finite()) {
            return Err(Error::FilterFault(format!(
                "non-finite Jacobian column {j}"
            )));
        }
        jac.set_column(j, &column);
    }
    Ok(jac)
}

/// Finite-difference steps: 1e-3 veh/km for densities, 1e-3 relative for
/// the parameters.
pub fn jacobian_steps(x: &DVector<f64>) -> Vec<f64> {
    let n = x.len() - THETA_DIM;
    (0..x.len())
        .map(|j| if j < n { 1e-3 } else { 1e-3 * x[j].abs().max(1.0) })
        .collect()
}

/// Deterministic inputs of the forecast map besides the state.
#[derive(Debug, Clone, Copy)]
pub struct ForecastInput {
    /// Upstream boundary demand for this step, veh/h.
    pub upstream_demand: f64,
}

/// The forecast map f: one CTM step with the parameters read from the state.
pub fn forecast_map(model: &CtmModel, x: &DVector<f64>, input: ForecastInput) -> DVector<f64> {
    let n = x.len() - THETA_DIM;
    let theta = FdParams::from_slice(&x.as_slice()[n..]);
    let step = model.step(&x.as_slice()[..n], &theta, input.upstream_demand);
    DVector::from_iterator(
        x.len(),
        step.densities.into_iter().chain(theta.to_array()),
    )
}

/// F·P·Fᵀ exploiting the few nonzeros per row of a CTM Jacobian.
fn sandwich(f: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let rows: Vec<Vec<(usize, f64)>> = f
        .row_iter()
        .map(|r| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, v)| (j, *v)).collect())
        .collect();
    let n = f.nrows();
    let fp = DMatrix::<f64>::from_fn(n, p.ncols(), |i, k| rows[i].iter().map(|&(j, a)| a * p[(j, k)]).sum::<f64>());
    DMatrix::from_fn(n, n, |i, k| rows[k].iter().map(|&(j, a)| fp[(i, j)] * a).sum::<f64>())
}

/// Forecast step: mean through f, covariance through its linearization.
pub fn forecast(
    belief: &GaussianBelief,
    model: &CtmModel,
    input: ForecastInput,
    noise: &NoiseConfig,
) -> Result<GaussianBelief> {
    let f = |x: &DVector<f64>| forecast_map(model, x, input);
    let mean = f(&belief.mean);
    let jac = numerical_jacobian(f, &belief.mean, &jacobian_steps(&belief.mean))?;
    let mut cov = sandwich(&jac, &belief.cov);
    let n = belief.cells();
    for i in 0..n {
        cov[(i, i)] += noise.q_density;
    }
    for (k, q) in noise.q_theta.iter().enumerate() {
        cov[(n + k, n + k)] += q;
    }
    let out = GaussianBelief {
        mean,
        cov: symmetrize(cov),
    };
    out.check_finite("forecast")?;
    Ok(out)
}

/// Measurement geometry shared by the emulator and the filter.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    pub stations: Vec<Station>,
    /// Vehicle length plus detector length, m.
    pub effective_length: f64,
}

/// h(x): equilibrium flow and occupancy of each station's cell.
pub fn measurement_model(
    state: &TrafficStateVector,
    obs: &ObservationModel,
    model: &CtmModel,
) -> MeasurementSet {
    let fd = model.fd(state.theta);
    let mut flow = Vec::with_capacity(obs.stations.len());
    let mut occupancy = Vec::with_capacity(obs.stations.len());
    for st in &obs.stations {
        let rho = state.rho[st.cell];
        let v = fd.speed_unchecked(rho, model.grid.cell_types[st.cell]);
        flow.push(rho * v * MPS_TO_KMH);
        occupancy.push(rho * obs.effective_length / 1000.0);
    }
    MeasurementSet { flow, occupancy }
}

fn measurement_vector(x: &DVector<f64>, obs: &ObservationModel, model: &CtmModel) -> DVector<f64> {
    measurement_model(&TrafficStateVector::from_vector(x), obs, model).to_vector()
}

/// Analysis step. The covariance update uses the Joseph form, which equals
/// `P − K H P` for the optimal gain and stays positive semi-definite.
pub fn analysis(
    belief: &GaussianBelief,
    y: &MeasurementSet,
    obs: &ObservationModel,
    model: &CtmModel,
    noise: &NoiseConfig,
    bounds: &ThetaBounds,
) -> Result<GaussianBelief> {
    if y.len() != obs.stations.len() || y.occupancy.len() != y.flow.len() {
        return Err(Error::FilterFault(format!(
            "expected {} stations, got {} flows / {} occupancies",
            obs.stations.len(),
            y.flow.len(),
            y.occupancy.len()
        )));
    }
    let h = |x: &DVector<f64>| measurement_vector(x, obs, model);
    let predicted = h(&belief.mean);
    let jac = numerical_jacobian(h, &belief.mean, &jacobian_steps(&belief.mean))?;
    let m = y.len();
    let r = DMatrix::from_diagonal(&DVector::from_iterator(
        2 * m,
        std::iter::repeat_n(noise.r_flow, m)
            .chain(std::iter::repeat_n(noise.r_occ, m)),
    ));
    let p_ht = &belief.cov * jac.transpose();
    let s = symmetrize(&jac * &p_ht + &r);
    let gain_t = match s.clone().cholesky() {
        Some(chol) => chol.solve(&p_ht.transpose()),
        None => s
            .lu()
            .solve(&p_ht.transpose())
            .ok_or_else(|| Error::FilterFault("singular innovation covariance".into()))?,
    };
    let gain = gain_t.transpose();

    let innovation = y.to_vector() - predicted;
    let mut mean = &belief.mean + &gain * innovation;

    let dim = belief.mean.len();
    let i_kh = DMatrix::identity(dim, dim) - &gain * &jac;
    let cov = &i_kh * &belief.cov * i_kh.transpose() + &gain * r * gain.transpose();

    let n = belief.cells();
    for i in 0..n {
        mean[i] = mean[i].clamp(0.0, model.rho_jam);
    }
    let theta = bounds.clamp(FdParams::from_slice(&mean.as_slice()[n..]));
    for (k, v) in theta.to_array().into_iter().enumerate() {
        mean[n + k] = v;
    }
    let out = GaussianBelief {
        mean,
        cov: symmetrize(cov),
    };
    out.check_finite("analysis")?;
    Ok(out)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Rolling estimator: forecasts every CTM step and optionally assimilates
/// detector windows.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub model: CtmModel,
    pub obs: ObservationModel,
    pub noise: NoiseConfig,
    pub bounds: ThetaBounds,
    belief: GaussianBelief,
    queue: UpstreamQueue,
}

impl Estimator {
    pub fn new(
        model: CtmModel,
        obs: ObservationModel,
        noise: NoiseConfig,
        initial: TrafficStateVector,
    ) -> Self {
        let bounds = ThetaBounds::for_model(&model);
        let belief = GaussianBelief::new(&initial, &noise);
        Self {
            model,
            obs,
            noise,
            bounds,
            belief,
            queue: UpstreamQueue::default(),
        }
    }

    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    /// Advances one CTM step with `inflow` veh/h arriving upstream.
    pub fn forecast(&mut self, inflow: f64) -> Result<()> {
        let input = ForecastInput {
            upstream_demand: self.queue.demand(inflow, self.model.dt),
        };
        let next = forecast(&self.belief, &self.model, input, &self.noise)?;
        let step = self.model.step(
            self.belief.densities(),
            &self.belief.theta(),
            input.upstream_demand,
        );
        self.queue.settle(inflow, step.inflow, self.model.dt);
        self.belief = next;
        Ok(())
    }

    pub fn assimilate(&mut self, y: &MeasurementSet) -> Result<()> {
        self.belief = analysis(
            &self.belief,
            y,
            &self.obs,
            &self.model,
            &self.noise,
            &self.bounds,
        )?;
        Ok(())
    }

    /// Equilibrium speed per cell under the current mean.
    pub fn speed_field(&self) -> Vec<f64> {
        self.model
            .speed_field(self.belief.densities(), &self.belief.theta())
    }

    /// Cells whose mean density exceeds their mean critical density.
    pub fn congested_cells(&self) -> impl Iterator<Item = usize> + '_ {
        let fd = self.model.fd(self.belief.theta());
        self.belief
            .densities()
            .iter()
            .enumerate()
            .filter(move |&(i, &rho)| rho > fd.critical_density(self.model.grid.cell_types[i]))
            .map(|(i, _)| i)
    }
}
