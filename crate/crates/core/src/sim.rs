//! Deterministic plant simulators for the three pilot domains.
//!
//! Every signal is `baseline + amplitude * sin(tau * tick / period) +
//! gaussian noise`, with an optional persistent step injected on one
//! designated signal from the anomaly tick onward. Simple enough to
//! recompute exactly in oracles, rich enough to exercise every detector.
//!
//! Simulated time advances a fixed 1000 ms per tick regardless of wall
//! pacing, so timestamps, merge keys and history windows are reproducible.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::agents::{AttributeMapping, DeviceProvision, Protocol, ValueType};
use crate::history::KpiName;
use crate::json::Json;
use crate::mathx;
use crate::model::EntityId;
use crate::rng::SplitMix64;
use crate::time::Timestamp;

/// 2024-01-01T00:00:00.000Z, the scenario epoch.
pub const SIM_EPOCH_MS: i64 = 1_704_067_200_000;

/// Simulated milliseconds per tick.
pub const TICK_PERIOD_MS: i64 = 1000;

pub fn tick_time(tick: u64) -> Timestamp {
    Timestamp::from_millis(SIM_EPOCH_MS + tick as i64 * TICK_PERIOD_MS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Asphalt,
    Steel,
    Pharma,
}

impl Domain {
    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "asphalt" => Some(Domain::Asphalt),
            "steel" => Some(Domain::Steel),
            "pharma" => Some(Domain::Pharma),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Asphalt => "asphalt",
            Domain::Steel => "steel",
            Domain::Pharma => "pharma",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalDef {
    pub short_name: &'static str,
    pub attribute: &'static str,
    pub unit: Option<&'static str>,
    pub baseline: f64,
    pub amplitude: f64,
    pub period_ticks: f64,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimDevice {
    pub device_id: &'static str,
    pub api_key: &'static str,
    pub entity_id: &'static str,
    pub entity_type: &'static str,
    pub protocol: Protocol,
    pub signals: Vec<SignalDef>,
    /// Short name of the signal that receives the anomaly step.
    pub anomaly_signal: &'static str,
}

impl SimDevice {
    pub fn topic(&self) -> String {
        let prefix = match self.protocol {
            Protocol::Line => "ul",
            Protocol::Json => "json",
        };
        alloc::format!("/{prefix}/{}/{}/attrs", self.api_key, self.device_id)
    }

    pub fn provision(&self) -> DeviceProvision {
        DeviceProvision {
            api_key: self.api_key.to_string(),
            device_id: self.device_id.to_string(),
            entity_id: EntityId::new(self.entity_id),
            entity_type: self.entity_type.to_string(),
            attributes: self
                .signals
                .iter()
                .map(|s| {
                    (
                        s.short_name.to_string(),
                        AttributeMapping::new(s.attribute, s.unit, ValueType::Number),
                    )
                })
                .collect(),
        }
    }

    /// Attribute name (long form) the anomaly lands on.
    pub fn anomaly_attribute(&self) -> &'static str {
        self.signals
            .iter()
            .find(|s| s.short_name == self.anomaly_signal)
            .expect("anomaly signal is declared")
            .attribute
    }
}

fn signal(
    short_name: &'static str,
    attribute: &'static str,
    unit: Option<&'static str>,
    baseline: f64,
    amplitude: f64,
    period_ticks: f64,
    noise_sigma: f64,
) -> SignalDef {
    SignalDef {
        short_name,
        attribute,
        unit,
        baseline,
        amplitude,
        period_ticks,
        noise_sigma,
    }
}

/// Fixed per-domain device set; one plant device carrying five signals.
pub fn devices_for(domain: Domain) -> Vec<SimDevice> {
    match domain {
        Domain::Asphalt => alloc::vec![SimDevice {
            device_id: "dryer01",
            api_key: "asphalt-k1",
            entity_id: "urn:cap:DryerDrum:dryer01",
            entity_type: "DryerDrum",
            protocol: Protocol::Line,
            // the detector watches temperature: its sine is kept shallow
            // and slow so trend never masquerades as an anomaly
            signals: alloc::vec![
                signal("t", "temperature", Some("CEL"), 182.0, 0.8, 600.0, 0.8),
                signal("fuel", "fuelRate", Some("LTR"), 55.0, 4.0, 90.0, 0.5),
                signal("moist", "aggregateMoisture", Some("PCT"), 3.2, 0.4, 150.0, 0.05),
                signal("out", "outputTons", Some("TNE"), 24.0, 2.0, 60.0, 0.3),
                signal("en", "energyKwh", Some("KWH"), 310.0, 12.0, 60.0, 2.0),
            ],
            anomaly_signal: "t",
        }],
        Domain::Steel => alloc::vec![SimDevice {
            device_id: "caster01",
            api_key: "steel-k1",
            entity_id: "urn:cap:CastingLine:caster01",
            entity_type: "CastingLine",
            protocol: Protocol::Line,
            signals: alloc::vec![
                signal("men", "meltEnergyKwh", Some("KWH"), 5200.0, 150.0, 80.0, 35.0),
                signal("spd", "castingSpeed", Some("MMN"), 1.9, 0.1, 70.0, 0.02),
                signal("st", "surfaceTemp", Some("CEL"), 900.0, 6.0, 600.0, 6.0),
                signal("def", "defectCount", None, 2.0, 1.0, 50.0, 0.4),
                signal("out", "outputTons", Some("TNE"), 18.0, 1.5, 60.0, 0.25),
            ],
            anomaly_signal: "st",
        }],
        Domain::Pharma => alloc::vec![SimDevice {
            device_id: "line01",
            api_key: "pharma-k1",
            entity_id: "urn:cap:GranulationLine:line01",
            entity_type: "GranulationLine",
            protocol: Protocol::Json,
            signals: alloc::vec![
                signal("lfr", "liquidFeedRate", Some("KGH"), 12.0, 0.8, 100.0, 0.15),
                signal("at", "airTemp", Some("CEL"), 60.0, 2.0, 130.0, 0.4),
                signal("gs", "granuleSize", Some("UM"), 450.0, 5.0, 600.0, 5.0),
                signal("tw", "tabletWeight", Some("MGM"), 250.0, 3.0, 75.0, 0.8),
                signal("wm", "wasteMass", Some("KGM"), 1.5, 0.3, 85.0, 0.05),
            ],
            anomaly_signal: "gs",
        }],
    }
}

/// KPI role bindings per domain. Pharma has no electrical-energy signal,
/// so the dryer air temperature stands in for the energy role; the KPI
/// arithmetic does not care and the report records the binding.
pub fn kpi_bindings(domain: Domain, name: KpiName) -> Option<BTreeMap<String, (EntityId, String)>> {
    let device = &devices_for(domain)[0];
    let entity = EntityId::new(device.entity_id);
    let bind = |pairs: &[(&str, &str)]| {
        Some(
            pairs
                .iter()
                .map(|(role, attr)| (role.to_string(), (entity.clone(), attr.to_string())))
                .collect(),
        )
    };
    match (domain, name) {
        (Domain::Asphalt, KpiName::EnergyPerUnit) => {
            bind(&[("energy", "energyKwh"), ("output", "outputTons")])
        }
        (Domain::Asphalt, KpiName::WastePercentage) => {
            bind(&[("waste", "aggregateMoisture"), ("total", "outputTons")])
        }
        (Domain::Steel, KpiName::EnergyPerUnit) => {
            bind(&[("energy", "meltEnergyKwh"), ("output", "outputTons")])
        }
        (Domain::Steel, KpiName::WastePercentage) => {
            bind(&[("waste", "defectCount"), ("total", "outputTons")])
        }
        (Domain::Steel, KpiName::DefectRatio) => {
            bind(&[("defects", "defectCount"), ("produced", "outputTons")])
        }
        (Domain::Pharma, KpiName::EnergyPerUnit) => {
            bind(&[("energy", "airTemp"), ("output", "tabletWeight")])
        }
        (Domain::Pharma, KpiName::WastePercentage) => {
            bind(&[("waste", "wasteMass"), ("total", "tabletWeight")])
        }
        _ => None,
    }
}

pub fn alert_type(domain: Domain) -> &'static str {
    match domain {
        Domain::Asphalt => "temp-anomaly",
        Domain::Steel => "surface-anomaly",
        Domain::Pharma => "granule-anomaly",
    }
}

/// Detector pipeline watching the domain's anomaly attribute.
pub fn detector_spec_json(domain: Domain) -> String {
    let device = &devices_for(domain)[0];
    alloc::format!(
        r#"{{"id":"{}-detector","source":{{"entityType":"{}","attribute":"{}"}},"processors":[{{"kind":"ZScoreDetector","n":30,"k":3.0,"epsilon":1e-6}}],"sink":{{"kind":"EmitAlert","alertType":"{}"}}}}"#,
        domain.as_str(),
        device.entity_type,
        device.anomaly_attribute(),
        alert_type(domain)
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub domain: Domain,
    pub seed: u64,
    pub duration_ticks: u64,
    /// Wall pacing between ticks; 0 runs flat out. Simulated time always
    /// advances [`TICK_PERIOD_MS`] per tick.
    pub tick_millis: u64,
    pub anomaly_at: Option<u64>,
    pub anomaly_magnitude_sigma: f64,
}

impl ScenarioConfig {
    pub fn new(domain: Domain, seed: u64, duration_ticks: u64) -> Self {
        ScenarioConfig {
            domain,
            seed,
            duration_ticks,
            tick_millis: 0,
            anomaly_at: None,
            anomaly_magnitude_sigma: 6.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.duration_ticks < 1 {
            return Err(ConfigError::ZeroDuration);
        }
        if let Some(at) = self.anomaly_at {
            if at >= self.duration_ticks {
                return Err(ConfigError::AnomalyOutOfRange);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfigError {
    ZeroDuration,
    AnomalyOutOfRange,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::ZeroDuration => f.write_str("duration must be >= 1 tick"),
            ConfigError::AnomalyOutOfRange => f.write_str("anomalyAtTick must be < duration"),
        }
    }
}

/// One tick of readings for one device, in declared signal order. The rng
/// is advanced exactly twice per signal (Box-Muller), whatever the
/// parameters, so streams stay aligned.
pub fn generate_tick(
    device: &SimDevice,
    cfg: &ScenarioConfig,
    tick: u64,
    rng: &mut SplitMix64,
) -> Vec<(&'static str, f64)> {
    device
        .signals
        .iter()
        .map(|s| {
            let phase = mathx::TAU * tick as f64 / s.period_ticks;
            let noise = rng.next_gaussian() * s.noise_sigma;
            let mut value = s.baseline + s.amplitude * mathx::sin(phase) + noise;
            if let Some(at) = cfg.anomaly_at {
                if tick >= at && s.short_name == device.anomaly_signal {
                    value += cfg.anomaly_magnitude_sigma * s.noise_sigma;
                }
            }
            (s.short_name, value)
        })
        .collect()
}

/// Telemetry log line: `tick<TAB>deviceId<TAB>shortName<TAB>value`.
pub fn telemetry_line(tick: u64, device_id: &str, short_name: &str, value: f64) -> String {
    alloc::format!("{tick}\t{device_id}\t{short_name}\t{value}\n")
}

/// Device frame payload for one tick, in the device's protocol.
pub fn encode_payload(device: &SimDevice, values: &[(&'static str, f64)]) -> String {
    match device.protocol {
        Protocol::Line => {
            let mut out = String::new();
            for (i, (short, v)) in values.iter().enumerate() {
                if i > 0 {
                    out.push('|');
                }
                out.push_str(short);
                out.push('|');
                out.push_str(&alloc::format!("{v}"));
            }
            out
        }
        Protocol::Json => Json::Obj(
            values
                .iter()
                .map(|(short, v)| (short.to_string(), Json::Num(*v)))
                .collect(),
        )
        .to_canonical()
        .expect("generated values are finite"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_without_noise_or_wave() {
        let device = SimDevice {
            device_id: "d",
            api_key: "k",
            entity_id: "urn:cap:T:d",
            entity_type: "T",
            protocol: Protocol::Line,
            signals: alloc::vec![signal("v", "value", None, 42.0, 0.0, 10.0, 0.0)],
            anomaly_signal: "v",
        };
        let cfg = ScenarioConfig::new(Domain::Asphalt, 1, 100);
        let mut rng = SplitMix64::new(1);
        for tick in 0..100 {
            let out = generate_tick(&device, &cfg, tick, &mut rng);
            assert_eq!(out, alloc::vec![("v", 42.0)]);
        }
    }

    #[test]
    fn fixed_seed_reproduces_byte_identical_telemetry() {
        let cfg = ScenarioConfig::new(Domain::Asphalt, 42, 50);
        let run = || {
            let mut rng = SplitMix64::new(cfg.seed);
            let devices = devices_for(cfg.domain);
            let mut log = String::new();
            for tick in 0..cfg.duration_ticks {
                for device in &devices {
                    for (short, v) in generate_tick(device, &cfg, tick, &mut rng) {
                        log.push_str(&telemetry_line(tick, device.device_id, short, v));
                    }
                }
            }
            log
        };
        assert_eq!(run(), run());
        assert_ne!(run(), {
            let mut other = cfg.clone();
            other.seed = 43;
            let mut rng = SplitMix64::new(other.seed);
            let devices = devices_for(other.domain);
            let mut log = String::new();
            for tick in 0..other.duration_ticks {
                for device in &devices {
                    for (short, v) in generate_tick(device, &other, tick, &mut rng) {
                        log.push_str(&telemetry_line(tick, device.device_id, short, v));
                    }
                }
            }
            log
        });
    }

    #[test]
    fn anomaly_steps_exactly_one_signal_from_its_tick() {
        let mut with = ScenarioConfig::new(Domain::Steel, 7, 40);
        with.anomaly_at = Some(20);
        let without = ScenarioConfig::new(Domain::Steel, 7, 40);
        let device = &devices_for(Domain::Steel)[0];
        let sigma = device
            .signals
            .iter()
            .find(|s| s.short_name == device.anomaly_signal)
            .unwrap()
            .noise_sigma;

        let mut rng_a = SplitMix64::new(7);
        let mut rng_b = SplitMix64::new(7);
        for tick in 0..40 {
            let a = generate_tick(device, &with, tick, &mut rng_a);
            let b = generate_tick(device, &without, tick, &mut rng_b);
            for ((short_a, va), (_, vb)) in a.iter().zip(&b) {
                let expected_step = if *short_a == device.anomaly_signal && tick >= 20 {
                    6.0 * sigma
                } else {
                    0.0
                };
                assert!(
                    (va - vb - expected_step).abs() < 1e-12,
                    "tick {tick} signal {short_a}: {va} vs {vb}"
                );
            }
        }
    }

    #[test]
    fn domain_signal_sets_are_complete() {
        for (domain, expected) in [
            (Domain::Asphalt, ["temperature", "fuelRate", "aggregateMoisture", "outputTons", "energyKwh"]),
            (Domain::Steel, ["meltEnergyKwh", "castingSpeed", "surfaceTemp", "defectCount", "outputTons"]),
            (Domain::Pharma, ["liquidFeedRate", "airTemp", "granuleSize", "tabletWeight", "wasteMass"]),
        ] {
            let devices = devices_for(domain);
            assert_eq!(devices.len(), 1);
            let attrs: Vec<&str> = devices[0].signals.iter().map(|s| s.attribute).collect();
            assert_eq!(attrs, expected, "{domain}");
            // anomaly signal is one of the declared signals
            devices[0].anomaly_attribute();
        }
    }

    #[test]
    fn kpi_bindings_reference_declared_attributes() {
        for domain in [Domain::Asphalt, Domain::Steel, Domain::Pharma] {
            let device = &devices_for(domain)[0];
            let declared: Vec<&str> = device.signals.iter().map(|s| s.attribute).collect();
            for name in [KpiName::EnergyPerUnit, KpiName::WastePercentage] {
                let bindings = kpi_bindings(domain, name).expect("both KPIs bound per domain");
                for (entity, attr) in bindings.values() {
                    assert_eq!(entity.as_str(), device.entity_id);
                    assert!(declared.contains(&attr.as_str()), "{domain} {attr}");
                }
            }
        }
    }

    #[test]
    fn detector_specs_parse() {
        for domain in [Domain::Asphalt, Domain::Steel, Domain::Pharma] {
            let spec = crate::pipeline::parse_spec(detector_spec_json(domain).as_bytes()).unwrap();
            assert_eq!(spec.processors.len(), 1);
        }
    }

    #[test]
    fn payload_encoding_round_trips_through_decoders() {
        let cfg = ScenarioConfig::new(Domain::Asphalt, 3, 1);
        let device = &devices_for(Domain::Asphalt)[0];
        let mut rng = SplitMix64::new(3);
        let values = generate_tick(device, &cfg, 0, &mut rng);
        let payload = encode_payload(device, &values);
        let decoded = crate::agents::decode_line(&payload).unwrap();
        assert_eq!(decoded.len(), values.len());
        for (short, v) in &values {
            assert_eq!(decoded[*short], alloc::format!("{v}"));
        }

        let pharma = &devices_for(Domain::Pharma)[0];
        let mut rng = SplitMix64::new(3);
        let values = generate_tick(pharma, &cfg, 0, &mut rng);
        let payload = encode_payload(pharma, &values);
        let decoded = crate::agents::decode_json_measure(payload.as_bytes()).unwrap();
        assert_eq!(decoded.len(), values.len());
    }

    // Offline oracle: generate the asphalt series with the anomaly, run a
    // naive mean/std detector over it, and pin the alert window the
    // end-to-end scenario must reproduce.
    #[test]
    fn asphalt_anomaly_detected_within_one_window() {
        let mut cfg = ScenarioConfig::new(Domain::Asphalt, 42, 400);
        cfg.anomaly_at = Some(300);
        let device = &devices_for(Domain::Asphalt)[0];
        let mut rng = SplitMix64::new(42);
        let mut series = Vec::new();
        for tick in 0..cfg.duration_ticks {
            let values = generate_tick(device, &cfg, tick, &mut rng);
            let (_, v) = values
                .iter()
                .find(|(s, _)| *s == device.anomaly_signal)
                .unwrap();
            series.push(*v);
        }
        // naive sliding z over the previous 30 samples
        let (n, k) = (30usize, 3.0);
        let mut first_alert = None;
        for i in n..series.len() {
            let window = &series[i - n..i];
            let mu = window.iter().sum::<f64>() / n as f64;
            let var = window.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n as f64 - 1.0);
            let s = var.sqrt().max(1e-6);
            let z = (series[i] - mu) / s;
            if z.abs() > k {
                first_alert = Some(i as u64);
                break;
            }
        }
        let first = first_alert.expect("6-sigma step must alert");
        assert!(
            (300..=330).contains(&first),
            "first alert at tick {first}, outside [300, 330]"
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = ScenarioConfig::new(Domain::Asphalt, 1, 0);
        assert_eq!(cfg.validate(), Err(ConfigError::ZeroDuration));
        cfg.duration_ticks = 10;
        cfg.anomaly_at = Some(10);
        assert_eq!(cfg.validate(), Err(ConfigError::AnomalyOutOfRange));
        cfg.anomaly_at = Some(9);
        assert!(cfg.validate().is_ok());
    }
}
