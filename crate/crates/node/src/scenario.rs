//! End-to-end plant scenarios: deterministic telemetry generation, device
//! ingestion, edge pipelines, edge-to-cloud sync, KPIs and a final
//! divergence report, with a machine-checkable exit contract.
//!
//! `--inproc` drives both nodes' core state directly on a simulated clock
//! (no sockets, no wall time, bit-reproducible). HTTP mode runs two real
//! nodes on localhost and feeds the same frames over the wire; both modes
//! share the generator and the report shape.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use cogplant_core::history::{KpiName, KpiReport};
use cogplant_core::json::{self, Json};
use cogplant_core::model::{canonical_parse, Entity, EntitySelector, Patch};
use cogplant_core::pipeline::{parse_spec, Pipeline};
use cogplant_core::rng::SplitMix64;
use cogplant_core::sim::{
    alert_type, detector_spec_json, devices_for, encode_payload, generate_tick, kpi_bindings,
    telemetry_line, tick_time, Domain, ScenarioConfig, SIM_EPOCH_MS, TICK_PERIOD_MS,
};
use cogplant_core::sync::{drain, CloudLink, DivergenceReport, ForwardBuffer, LinkError, reconcile};
use cogplant_core::time::Timestamp;

use crate::client;
use crate::config::NodeConfig;
use crate::node::{start, NodeHandle};
use crate::state::{AlertRoute, CoreState, HISTORY_CHANNEL, SYNC_CHANNEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    InProc,
    Http,
}

#[derive(Clone, Debug)]
pub struct ScenarioOptions {
    pub cfg: ScenarioConfig,
    /// Link down for ticks in `[from, to)`; in-process mode only.
    pub partition: Option<(u64, u64)>,
    pub telemetry_path: PathBuf,
    pub buffer_capacity: usize,
    pub mode: Mode,
}

impl ScenarioOptions {
    pub fn new(cfg: ScenarioConfig, mode: Mode) -> Self {
        let telemetry_path =
            PathBuf::from(format!("telemetry_{}_{}.tsv", cfg.domain.as_str(), cfg.seed));
        ScenarioOptions {
            cfg,
            partition: None,
            telemetry_path,
            buffer_capacity: 1_000_000,
            mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlertRecord {
    pub tick: u64,
    pub alert_type: String,
    pub score: f64,
}

#[derive(Debug)]
pub struct ScenarioReport {
    pub domain: Domain,
    pub seed: u64,
    pub duration_ticks: u64,
    pub alerts: Vec<AlertRecord>,
    pub kpis: Vec<KpiReport>,
    pub reconcile: DivergenceReport,
    pub loss_count: u64,
    pub telemetry_path: PathBuf,
    pub exit_ok: bool,
}

impl ScenarioReport {
    pub fn to_json(&self) -> Json {
        Json::Obj(vec![
            ("domain".to_string(), Json::str(self.domain.as_str())),
            ("seed".to_string(), Json::Num(self.seed as f64)),
            ("durationTicks".to_string(), Json::Num(self.duration_ticks as f64)),
            (
                "alerts".to_string(),
                Json::Arr(
                    self.alerts
                        .iter()
                        .map(|a| {
                            Json::Obj(vec![
                                ("tick".to_string(), Json::Num(a.tick as f64)),
                                ("alertType".to_string(), Json::str(a.alert_type.clone())),
                                ("score".to_string(), Json::Num(a.score)),
                            ])
                        })
                        .collect(),
                ),
            ),
            (
                "kpis".to_string(),
                Json::Arr(self.kpis.iter().map(|k| k.to_json()).collect()),
            ),
            ("reconcile".to_string(), self.reconcile.to_json()),
            ("lossCount".to_string(), Json::Num(self.loss_count as f64)),
            (
                "telemetryLog".to_string(),
                Json::str(self.telemetry_path.display().to_string()),
            ),
            ("ok".to_string(), Json::Bool(self.exit_ok)),
        ])
    }
}

fn alert_tick(observed_at: Timestamp) -> u64 {
    ((observed_at.millis() - SIM_EPOCH_MS) / TICK_PERIOD_MS).max(0) as u64
}

fn scenario_kpis(
    domain: Domain,
    duration_ticks: u64,
    compute: impl Fn(KpiName, Timestamp, Timestamp, &std::collections::BTreeMap<String, (cogplant_core::model::EntityId, String)>) -> Option<KpiReport>,
) -> Vec<KpiReport> {
    let from = tick_time(0);
    let to = tick_time(duration_ticks);
    [KpiName::EnergyPerUnit, KpiName::WastePercentage]
        .into_iter()
        .filter_map(|name| {
            let bindings = kpi_bindings(domain, name)?;
            compute(name, from, to, &bindings)
        })
        .collect()
}

fn exit_contract(cfg: &ScenarioConfig, alerts: &[AlertRecord], report: &DivergenceReport) -> bool {
    let expected_alert_ok = match cfg.anomaly_at {
        None => true,
        Some(at) => alerts
            .iter()
            .any(|a| a.alert_type == alert_type(cfg.domain) && a.tick >= at),
    };
    report.all_equal() && expected_alert_ok
}

pub fn run(options: &ScenarioOptions) -> std::io::Result<ScenarioReport> {
    options
        .cfg
        .validate()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    match options.mode {
        Mode::InProc => run_inproc(options),
        Mode::Http => run_http(options),
    }
}

struct InProcLink<'a> {
    cloud: &'a mut CoreState,
    clock: Timestamp,
}

impl CloudLink for InProcLink<'_> {
    fn send(&mut self, patch: &Patch) -> Result<(), LinkError> {
        self.cloud
            .apply_cascade(patch.clone(), self.clock)
            .map(|_| ())
            .map_err(|e| LinkError(e.to_string()))
    }
}

fn wire_edge(options: &ScenarioOptions) -> std::io::Result<CoreState> {
    use cogplant_core::broker::{Endpoint, Registration, RegistrationMode, Subscription};
    let mut edge = CoreState::new(AlertRoute::Broker);
    edge.sync_buffer = Some(ForwardBuffer::new(options.buffer_capacity));
    edge.broker
        .subscribe(Subscription::new(
            HISTORY_CHANNEL,
            EntitySelector::of_pattern("*"),
            0,
            Endpoint::Internal(HISTORY_CHANNEL.to_string()),
        ))
        .expect("fresh broker");
    edge.broker
        .subscribe(Subscription::new(
            SYNC_CHANNEL,
            EntitySelector::of_pattern("*"),
            0,
            Endpoint::Internal(SYNC_CHANNEL.to_string()),
        ))
        .expect("fresh broker");
    edge.broker
        .register_source(Registration {
            id: "cloud".into(),
            selector: EntitySelector::of_pattern("urn:cap:*"),
            provider: "inproc://cloud".into(),
            mode: RegistrationMode::ForwardChanges,
        })
        .expect("fresh broker");
    for device in devices_for(options.cfg.domain) {
        edge.registry
            .provision(device.provision())
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    }
    let spec = parse_spec(detector_spec_json(options.cfg.domain).as_bytes())
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    edge.add_pipeline(Pipeline::new(spec))
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    Ok(edge)
}

fn run_inproc(options: &ScenarioOptions) -> std::io::Result<ScenarioReport> {
    use cogplant_core::broker::{Endpoint, Subscription};
    let cfg = &options.cfg;
    let mut edge = wire_edge(options)?;
    let mut cloud = CoreState::new(AlertRoute::Broker);
    cloud
        .broker
        .subscribe(Subscription::new(
            HISTORY_CHANNEL,
            EntitySelector::of_pattern("*"),
            0,
            Endpoint::Internal(HISTORY_CHANNEL.to_string()),
        ))
        .expect("fresh broker");

    let mut telemetry = std::io::BufWriter::new(std::fs::File::create(&options.telemetry_path)?);
    let devices = devices_for(cfg.domain);
    let mut rng = SplitMix64::new(cfg.seed);

    for tick in 0..cfg.duration_ticks {
        let clock = tick_time(tick);
        for device in &devices {
            let values = generate_tick(device, cfg, tick, &mut rng);
            for (short, v) in &values {
                telemetry.write_all(telemetry_line(tick, device.device_id, short, *v).as_bytes())?;
            }
            let payload = encode_payload(device, &values);
            let (patch, _skipped) = edge
                .registry
                .handle_publish(&device.topic(), payload.as_bytes(), clock)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
            edge.apply_cascade(patch, clock)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        }
        let link_up = match options.partition {
            Some((from, to)) => !(from..to).contains(&tick),
            None => true,
        };
        if link_up {
            if let Some(buffer) = edge.sync_buffer.as_mut() {
                let mut link = InProcLink {
                    cloud: &mut cloud,
                    clock,
                };
                drain(buffer, &mut link);
            }
        }
    }
    telemetry.flush()?;

    // the link is restored at the end of every scenario
    let final_clock = tick_time(cfg.duration_ticks);
    if let Some(buffer) = edge.sync_buffer.as_mut() {
        let mut link = InProcLink {
            cloud: &mut cloud,
            clock: final_clock,
        };
        drain(buffer, &mut link);
    }

    let alerts: Vec<AlertRecord> = edge
        .alerts
        .iter()
        .map(|a| AlertRecord {
            tick: alert_tick(a.observed_at),
            alert_type: a.alert_type.clone(),
            score: a.score,
        })
        .collect();

    let kpis = scenario_kpis(cfg.domain, cfg.duration_ticks, |name, from, to, bindings| {
        cloud.history.compute_kpi(name, from, to, bindings).ok()
    });

    let selector = EntitySelector::of_pattern("urn:cap:*");
    let report = reconcile(&edge.broker.query(&selector), &cloud.broker.query(&selector));
    let loss_count = edge.sync_buffer.as_ref().map_or(0, |b| b.loss_count());
    let exit_ok = exit_contract(cfg, &alerts, &report);

    Ok(ScenarioReport {
        domain: cfg.domain,
        seed: cfg.seed,
        duration_ticks: cfg.duration_ticks,
        alerts,
        kpis,
        reconcile: report,
        loss_count,
        telemetry_path: options.telemetry_path.clone(),
        exit_ok,
    })
}

pub const SCENARIO_CLIENT_ID: &str = "cli";
pub const SCENARIO_CLIENT_SECRET: &str = "cli-secret-0123456789";
pub const SCENARIO_SYNC_SECRET: &str = "sync-secret-0123456789";

/// Config pair for a localhost edge+cloud deployment on ephemeral ports.
pub fn scenario_node_configs(domain: Domain, cloud_url: Option<String>) -> (NodeConfig, NodeConfig) {
    let base = Path::new(".");
    let policy_json = json::parse(
        br#"[
        {"id":"operators","effect":"Permit","subjectRole":"operator","resourcePattern":"*","action":"*"},
        {"id":"admins","effect":"Permit","subjectRole":"admin","resourcePattern":"*","action":"*"},
        {"id":"sync-writes","effect":"Permit","subjectRole":"sync","resourcePattern":"/entities*","action":"write"},
        {"id":"sync-reads","effect":"Permit","subjectRole":"sync","resourcePattern":"/entities*","action":"read"}
    ]"#,
    )
    .expect("static policy json");
    let clients_json = format!(
        r#"[
        {{"clientId":"{SCENARIO_CLIENT_ID}","secret":"{SCENARIO_CLIENT_SECRET}","roles":["operator","admin"]}},
        {{"clientId":"sync","secret":"{SCENARIO_SYNC_SECRET}","roles":["sync"]}}
    ]"#
    );
    let cloud_cfg = json::parse(
        format!(
            r#"{{"role":"cloud","listen":"127.0.0.1:0","issuerKey":"scenario-issuer-key-0123","clients":{clients_json}}}"#
        )
        .as_bytes(),
    )
    .expect("static cloud config");
    let mut cloud = NodeConfig::from_json(&cloud_cfg, base).expect("static cloud config");
    cloud.policies = cogplant_core::auth::policies_from_json(&policy_json).expect("static policies");

    let edge_cfg = json::parse(
        format!(
            r#"{{"role":"edge","listen":"127.0.0.1:0","peer":"{}","issuerKey":"scenario-issuer-key-0123","clients":{clients_json},"peerClientId":"sync","peerSecret":"{SCENARIO_SYNC_SECRET}"}}"#,
            cloud_url.unwrap_or_else(|| "http://127.0.0.1:0".to_string())
        )
        .as_bytes(),
    )
    .expect("static edge config");
    let mut edge = NodeConfig::from_json(&edge_cfg, base).expect("static edge config");
    edge.policies = cogplant_core::auth::policies_from_json(&policy_json).expect("static policies");
    for device in devices_for(domain) {
        edge.provisions.push(device.provision());
    }
    edge.pipelines
        .push(parse_spec(detector_spec_json(domain).as_bytes()).expect("detector spec"));
    edge.registrations.push(cogplant_core::broker::Registration {
        id: "cloud".into(),
        selector: EntitySelector::of_pattern("urn:cap:*"),
        provider: "peer".into(),
        mode: cogplant_core::broker::RegistrationMode::ForwardChanges,
    });
    (edge, cloud)
}

fn http_get_json(url: &str, token: &str) -> std::io::Result<Json> {
    let response = client::get(url, Some(token), Duration::from_secs(10))?;
    if !response.is_success() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::Other,
            format!("GET {url} -> {}", response.status),
        ));
    }
    json::parse(&response.body)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

fn obtain_token(base: &str) -> std::io::Result<String> {
    let body = format!(
        r#"{{"clientId":"{SCENARIO_CLIENT_ID}","secret":"{SCENARIO_CLIENT_SECRET}","ttl":86400}}"#
    );
    let response = client::post_json(
        &format!("{base}/token"),
        None,
        body.as_bytes(),
        Duration::from_secs(10),
    )?;
    if !response.is_success() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::PermissionDenied,
            format!("token request failed: {}", response.status),
        ));
    }
    let v = json::parse(&response.body)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    v.get("token")
        .and_then(Json::as_str)
        .map(String::from)
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "no token in response"))
}

fn parse_entities(v: &Json) -> Vec<Entity> {
    v.as_arr()
        .map(|items| {
            items
                .iter()
                .filter_map(|e| {
                    e.to_canonical()
                        .ok()
                        .and_then(|bytes| canonical_parse(bytes.as_bytes()).ok())
                })
                .collect()
        })
        .unwrap_or_default()
}

fn run_http(options: &ScenarioOptions) -> std::io::Result<ScenarioReport> {
    let cfg = &options.cfg;
    if options.partition.is_some() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "--partition requires --inproc (scripted link schedules need the simulated clock)",
        ));
    }

    let (_, cloud_cfg) = scenario_node_configs(cfg.domain, None);
    let cloud: NodeHandle = start(cloud_cfg)?;
    let cloud_url = cloud.base_url();
    let (mut edge_cfg, _) = scenario_node_configs(cfg.domain, Some(cloud_url.clone()));
    edge_cfg.peer = Some(cloud_url.clone());
    edge_cfg.buffer_capacity = options.buffer_capacity;
    let edge: NodeHandle = start(edge_cfg)?;
    let edge_url = edge.base_url();

    let token = obtain_token(&edge_url)?;
    let cloud_token = obtain_token(&cloud_url)?;

    let mut telemetry = std::io::BufWriter::new(std::fs::File::create(&options.telemetry_path)?);
    let devices = devices_for(cfg.domain);
    let mut rng = SplitMix64::new(cfg.seed);

    for tick in 0..cfg.duration_ticks {
        let clock = tick_time(tick);
        for device in &devices {
            let values = generate_tick(device, cfg, tick, &mut rng);
            for (short, v) in &values {
                telemetry.write_all(telemetry_line(tick, device.device_id, short, *v).as_bytes())?;
            }
            let payload = encode_payload(device, &values);
            let envelope = Json::Obj(vec![
                ("topic".to_string(), Json::str(device.topic())),
                ("payload".to_string(), Json::str(payload)),
                ("receivedAt".to_string(), Json::str(clock.format())),
            ])
            .to_canonical()
            .expect("scenario values are finite");
            let response = client::post_json(
                &format!("{edge_url}/publish"),
                Some(&token),
                envelope.as_bytes(),
                Duration::from_secs(10),
            )?;
            if !response.is_success() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::Other,
                    format!("publish failed with status {}", response.status),
                ));
            }
        }
        if cfg.tick_millis > 0 {
            std::thread::sleep(Duration::from_millis(cfg.tick_millis));
        }
    }
    telemetry.flush()?;

    // quiesce: wait for the forward buffer and delivery queue to empty
    let deadline = std::time::Instant::now() + Duration::from_secs(60);
    loop {
        let stats = http_get_json(&format!("{edge_url}/stats"), &token)?;
        let buffered = stats.get("bufferLen").and_then(Json::as_f64).unwrap_or(1.0);
        let pending = stats.get("deliveryPending").and_then(Json::as_f64).unwrap_or(1.0);
        if buffered == 0.0 && pending == 0.0 {
            break;
        }
        if std::time::Instant::now() > deadline {
            return Err(std::io::Error::new(
                std::io::ErrorKind::TimedOut,
                "scenario did not quiesce within 60s",
            ));
        }
        std::thread::sleep(Duration::from_millis(50));
    }

    let alerts_json = http_get_json(&format!("{edge_url}/entities?type=Alert"), &token)?;
    let mut alerts: Vec<AlertRecord> = parse_entities(&alerts_json)
        .iter()
        .filter_map(|e| {
            let alert_type = match e.attrs.get("alertType")?.value.clone()? {
                cogplant_core::model::Scalar::Str(s) => s,
                _ => return None,
            };
            let score_attr = e.attrs.get("score")?;
            Some(AlertRecord {
                tick: alert_tick(score_attr.observed_at?),
                alert_type,
                score: score_attr.numeric_value()?,
            })
        })
        .collect();
    alerts.sort_by_key(|a| a.tick);

    let kpis = scenario_kpis(cfg.domain, cfg.duration_ticks, |name, from, to, bindings| {
        let bindings_json: Vec<(String, Json)> = bindings
            .iter()
            .map(|(role, (entity, attr))| {
                (
                    role.clone(),
                    Json::Obj(vec![
                        ("entityId".to_string(), Json::str(entity.as_str())),
                        ("attribute".to_string(), Json::str(attr.clone())),
                    ]),
                )
            })
            .collect();
        let body = Json::Obj(vec![
            ("name".to_string(), Json::str(name.as_str())),
            ("from".to_string(), Json::str(from.format())),
            ("to".to_string(), Json::str(to.format())),
            ("bindings".to_string(), Json::Obj(bindings_json)),
        ])
        .to_canonical()
        .ok()?;
        let response = client::post_json(
            &format!("{cloud_url}/kpi"),
            Some(&cloud_token),
            body.as_bytes(),
            Duration::from_secs(10),
        )
        .ok()?;
        if !response.is_success() {
            return None;
        }
        let v = json::parse(&response.body).ok()?;
        Some(KpiReport {
            name,
            from,
            to,
            value: v.get("value").and_then(Json::as_f64)?,
            inputs: Default::default(),
        })
    });

    let edge_entities = parse_entities(&http_get_json(
        &format!("{edge_url}/entities?idPattern=urn:cap:*"),
        &token,
    )?);
    let cloud_entities = parse_entities(&http_get_json(
        &format!("{cloud_url}/entities?idPattern=urn:cap:*"),
        &cloud_token,
    )?);
    let report = reconcile(
        &edge_entities.iter().collect::<Vec<_>>(),
        &cloud_entities.iter().collect::<Vec<_>>(),
    );

    let stats = http_get_json(&format!("{edge_url}/stats"), &token)?;
    let loss_count = stats.get("lossCount").and_then(Json::as_f64).unwrap_or(0.0) as u64;

    edge.shutdown();
    cloud.shutdown();

    let exit_ok = exit_contract(cfg, &alerts, &report);
    Ok(ScenarioReport {
        domain: cfg.domain,
        seed: cfg.seed,
        duration_ticks: cfg.duration_ticks,
        alerts,
        kpis,
        reconcile: report,
        loss_count,
        telemetry_path: options.telemetry_path.clone(),
        exit_ok,
    })
}
