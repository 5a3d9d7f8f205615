//! Travel-time and fuel metrics, and the benefit of a JAD run over its
//! paired non-JAD run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ΔATT below this (s) counts as a significant deterioration.
pub const DETERIORATION_THRESHOLD_S: f64 = -6.0;

const BUNDLED_VT_MICRO: &str = include_str!("../data/vt_micro.toml");

/// VT-Micro coefficient tables, indexed `[speed power][acceleration power]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FuelModel {
    pub positive: [[f64; 4]; 4],
    pub negative: [[f64; 4]; 4],
}

impl FuelModel {
    pub fn bundled() -> Self {
        Self::from_toml_str(BUNDLED_VT_MICRO).expect("bundled VT-Micro table parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            positive: [[f64; 4]; 4],
            negative: [[f64; 4]; 4],
        }
        let f: File = toml::from_str(text).map_err(|e| Error::config("fuel_model", e.to_string()))?;
        Ok(Self {
            positive: f.positive,
            negative: f.negative,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("fuel_model", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fuel rate in ml/s at speed `v` (m/s) and acceleration `a` (m/s²).
    pub fn rate_ml_per_s(&self, v: f64, a: f64) -> f64 {
        let k = if a >= 0.0 { &self.positive } else { &self.negative };
        let mut exponent = 0.0;
        let mut vi = 1.0;
        for row in k {
            let mut aj = 1.0;
            for &kij in row {
                exponent += kij * vi * aj;
                aj *= a;
            }
            vi *= v;
        }
        exponent.exp() * 1000.0
    }

    pub fn idle_rate_ml_per_s(&self) -> f64 {
        self.rate_ml_per_s(0.0, 0.0)
    }
}

/// Fuel (ml) over `(v, a)` samples spaced `dt` apart.
pub fn vt_micro_fuel(model: &FuelModel, samples: &[(f64, f64)], dt: f64) -> f64 {
    samples.iter().map(|&(v, a)| model.rate_ml_per_s(v, a) * dt).sum()
}

/// Fuel (ml) over `(t, v, a)` rows with possibly uneven spacing; each row's
/// rate holds until the next row.
pub fn trajectory_fuel(model: &FuelModel, rows: &[(f64, f64, f64)]) -> f64 {
    rows.windows(2)
        .map(|w| model.rate_ml_per_s(w[0].1, w[0].2) * (w[1].0 - w[0].0))
        .sum()
}

/// One vehicle's trip through the section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub vehicle_id: u64,
    /// When the demand released the vehicle at the entrance, s.
    pub arrival_s: f64,
    /// When it was placed on the road, s.
    pub spawn_s: Option<f64>,
    /// When its front crossed the exit, s.
    pub exit_s: Option<f64>,
}

impl TripRecord {
    pub fn travel_time(&self) -> Option<f64> {
        self.exit_s.map(|e| e - self.arrival_s)
    }
}

/// Mean travel time of completed trips.
pub fn average_travel_time(trips: &[TripRecord]) -> Result<f64> {
    let times: Vec<f64> = trips.iter().filter_map(TripRecord::travel_time).collect();
    if times.is_empty() {
        return Err(Error::UndefinedMetric("average travel time of zero completed vehicles"));
    }
    Ok(times.iter().sum::<f64>() / times.len() as f64)
}

/// Identifies a run for pairing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunKey {
    pub scenario: String,
    /// Hash of the demand, road and driver inputs shared by paired runs.
    pub scenario_hash: String,
    pub mode: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub key: RunKey,
    /// s/veh
    pub att: f64,
    /// ml/veh
    pub afc: f64,
    pub vehicle_count: usize,
    pub delta_att: Option<f64>,
    pub delta_afc: Option<f64>,
    pub deterioration_flag: Option<bool>,
}

impl MetricsReport {
    pub fn single(key: RunKey, att: f64, afc: f64, vehicle_count: usize) -> Self {
        Self {
            key,
            att,
            afc,
            vehicle_count,
            delta_att: None,
            delta_afc: None,
            deterioration_flag: None,
        }
    }
}

/// Report for `jad` with deltas against `no_jad` (positive is a benefit).
pub fn benefit_metrics(jad: &MetricsReport, no_jad: &MetricsReport) -> Result<MetricsReport> {
    let (a, b) = (&jad.key, &no_jad.key);
    if a.scenario_hash != b.scenario_hash {
        return Err(Error::Pairing(format!(
            "scenario inputs differ ({} vs {})",
            a.scenario, b.scenario
        )));
    }
    if a.seed != b.seed {
        return Err(Error::Pairing(format!("seeds differ ({} vs {})", a.seed, b.seed)));
    }
    let delta_att = no_jad.att - jad.att;
    Ok(MetricsReport {
        delta_att: Some(delta_att),
        delta_afc: Some(no_jad.afc - jad.afc),
        deterioration_flag: Some(delta_att < DETERIORATION_THRESHOLD_S),
        ..jad.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(mode: &str, seed: u64) -> RunKey {
        RunKey {
            scenario: "baseline".into(),
            scenario_hash: "abc".into(),
            mode: mode.into(),
            seed,
        }
    }

    #[test]
    fn bundled_table_loads() {
        let m = FuelModel::bundled();
        assert_eq!(m.positive[0][0], -7.537);
        assert_eq!(m.negative[0][0], -7.537);
    }

    #[test]
    fn missing_table_is_config_error() {
        let err = FuelModel::load("/nonexistent/vt_micro.toml").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(FuelModel::from_toml_str("positive = 1").is_err());
    }

    #[test]
    fn fuel_cases() {
        let m = FuelModel::bundled();
        assert_eq!(vt_micro_fuel(&m, &[], 0.1), 0.0);
        let idle = vec![(0.0, 0.0); 1000];
        let expected = 100.0 * (-7.537f64).exp() * 1000.0;
        assert!((vt_micro_fuel(&m, &idle, 0.1) - expected).abs() < 1e-9);
        // Single-point oracle at 20 m/s cruising.
        let exponent: f64 = -7.537 + 0.0973 * 20.0 - 0.003 * 400.0 + 5.3e-5 * 8000.0;
        let cruise = vec![(20.0, 0.0); 1000];
        let expected = 100.0 * exponent.exp() * 1000.0;
        assert!((vt_micro_fuel(&m, &cruise, 0.1) - expected).abs() < 1e-9);
    }

    #[test]
    fn acceleration_costs_more_than_cruise() {
        let m = FuelModel::bundled();
        assert!(m.rate_ml_per_s(15.0, 1.0) > m.rate_ml_per_s(15.0, 0.0));
        assert_eq!(m.rate_ml_per_s(15.0, -1.0), m.rate_ml_per_s(15.0, 0.0));
    }

    #[test]
    fn uneven_rows_use_rectangle_rule() {
        let m = FuelModel::bundled();
        let rows = [(0.0, 10.0, 0.0), (0.5, 12.0, 0.5), (1.7, 12.0, 0.0)];
        let expected = m.rate_ml_per_s(10.0, 0.0) * 0.5 + m.rate_ml_per_s(12.0, 0.5) * 1.2;
        assert!((trajectory_fuel(&m, &rows) - expected).abs() < 1e-12);
    }

    fn trip(id: u64, arrival: f64, exit: Option<f64>) -> TripRecord {
        TripRecord {
            vehicle_id: id,
            arrival_s: arrival,
            spawn_s: Some(arrival),
            exit_s: exit,
        }
    }

    #[test]
    fn att_cases() {
        assert_eq!(average_travel_time(&[trip(1, 0.0, Some(400.0))]).unwrap(), 400.0);
        let trips = [trip(1, 0.0, Some(400.0)), trip(2, 10.0, Some(510.0)), trip(3, 20.0, None)];
        assert_eq!(average_travel_time(&trips).unwrap(), 450.0);
        assert!(matches!(
            average_travel_time(&[trip(1, 0.0, None)]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn benefit_cases() {
        let nj = MetricsReport::single(key("no_jad", 1), 450.0, 300.0, 10);
        let same = benefit_metrics(&nj, &nj).unwrap();
        assert_eq!(same.delta_att, Some(0.0));
        assert_eq!(same.delta_afc, Some(0.0));

        let j = MetricsReport::single(key("jad_da", 1), 430.0, 290.0, 10);
        let r = benefit_metrics(&j, &nj).unwrap();
        assert_eq!(r.delta_att, Some(20.0));
        assert_eq!(r.delta_afc, Some(10.0));
        assert_eq!(r.deterioration_flag, Some(false));

        let bad = MetricsReport::single(key("jad_da", 1), 457.0, 290.0, 10);
        assert_eq!(benefit_metrics(&bad, &nj).unwrap().deterioration_flag, Some(true));

        let other_seed = MetricsReport::single(key("jad_da", 2), 430.0, 290.0, 10);
        assert!(matches!(benefit_metrics(&other_seed, &nj), Err(Error::Pairing(_))));
    }

    proptest! {
        #[test]
        fn deltas_are_antisymmetric(a in 100.0..1000.0f64, b in 100.0..1000.0f64, fa in 0.0..500.0f64, fb in 0.0..500.0f64) {
            let x = MetricsReport::single(key("a", 3), a, fa, 5);
            let y = MetricsReport::single(key("b", 3), b, fb, 5);
            let xy = benefit_metrics(&x, &y).unwrap();
            let yx = benefit_metrics(&y, &x).unwrap();
            prop_assert_eq!(xy.delta_att.unwrap(), -yx.delta_att.unwrap());
            prop_assert_eq!(xy.delta_afc.unwrap(), -yx.delta_afc.unwrap());
        }

        #[test]
        fn fuel_is_non_negative(samples in prop::collection::vec((0.0..40.0f64, -5.0..3.0f64), 0..200)) {
            let m = FuelModel::bundled();
            prop_assert!(vt_micro_fuel(&m, &samples, 0.1) >= 0.0);
        }

        #[test]
        fn longer_idle_costs_more(n in 1usize..500, extra in 1usize..500) {
            let m = FuelModel::bundled();
            let short = vt_micro_fuel(&m, &vec![(0.0, 0.0); n], 0.1);
            let long = vt_micro_fuel(&m, &vec![(0.0, 0.0); n + extra], 0.1);
            prop_assert!(long > short);
        }
    }
}
