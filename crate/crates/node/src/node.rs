//! A running edge or cloud node: the HTTP API over the core state, with a
//! policy enforcement point on every endpoint, an async notification
//! delivery worker, and (on edge nodes) the store-and-forward drainer.
//!
//! Lock order is usage -> core; nothing takes them the other way around.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use cogplant_core::agents::provision_to_json;
use cogplant_core::auth::{pep_enforce, Action, Claims, CredentialStore, EnforceOutcome, Policy};
use cogplant_core::broker::{DeliveryQueue, Endpoint, Subscription};
use cogplant_core::history::{encode_record_line, Agg, KpiName, SeriesPoint, SeriesQuery, SeriesResult};
use cogplant_core::json::{self, Json};
use cogplant_core::model::{entity_to_json, patch_from_json, Entity, EntityId, EntitySelector};
use cogplant_core::pipeline::Pipeline;
use cogplant_core::sync::{drain, CloudLink, ForwardBuffer, LinkError};
use cogplant_core::time::Timestamp;
use cogplant_core::usage::{
    term_list_from_json, DataAccess, TransferOutcome, TransferQuery, UsageControl,
};

use crate::client;
use crate::config::{selector_from_json, NodeConfig, NodeRole};
use crate::httpd::{Handler, HttpServer, Request, Response};
use crate::state::{AlertRoute, CoreState, HISTORY_CHANNEL, SYNC_CHANNEL};

pub fn now_ts() -> Timestamp {
    let ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0);
    Timestamp::from_millis(ms)
}

pub struct Node {
    pub role: NodeRole,
    pub peer: Option<String>,
    peer_client: Option<(String, String)>,
    core: Mutex<CoreState>,
    usage: Mutex<UsageControl>,
    credentials: CredentialStore,
    policies: RwLock<Vec<Policy>>,
    delivery: Mutex<DeliveryQueue>,
    delivery_signal: Condvar,
    history_file: Option<Mutex<std::fs::File>>,
    shutdown: AtomicBool,
}

pub struct NodeHandle {
    pub node: Arc<Node>,
    server: HttpServer,
    workers: Vec<thread::JoinHandle<()>>,
}

impl NodeHandle {
    pub fn base_url(&self) -> String {
        self.server.base_url()
    }

    pub fn shutdown(mut self) {
        self.node.shutdown.store(true, Ordering::SeqCst);
        self.node.delivery_signal.notify_all();
        self.server.shutdown();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

pub fn start(cfg: NodeConfig) -> std::io::Result<NodeHandle> {
    let mut core = CoreState::new(cfg.alert_route.clone());

    core.broker
        .subscribe(Subscription::new(
            HISTORY_CHANNEL,
            EntitySelector::of_pattern("*"),
            0,
            Endpoint::Internal(HISTORY_CHANNEL.to_string()),
        ))
        .expect("fresh broker accepts the history subscription");
    if cfg.role == NodeRole::Edge {
        core.sync_buffer = Some(ForwardBuffer::new(cfg.buffer_capacity));
        core.broker
            .subscribe(Subscription::new(
                SYNC_CHANNEL,
                EntitySelector::of_pattern("*"),
                0,
                Endpoint::Internal(SYNC_CHANNEL.to_string()),
            ))
            .expect("fresh broker accepts the sync subscription");
    }
    for p in &cfg.provisions {
        core.registry
            .provision(p.clone())
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    }
    for spec in &cfg.pipelines {
        core.add_pipeline(Pipeline::new(spec.clone()))
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    }
    for r in &cfg.registrations {
        core.broker
            .register_source(r.clone())
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    }

    let mut usage = UsageControl::new();
    for (offer, min_terms) in &cfg.offers {
        usage.add_offer(offer.clone(), min_terms.clone());
    }

    let mut credentials = CredentialStore::new(cfg.issuer_key.clone());
    for c in &cfg.clients {
        credentials
            .register(c.clone())
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    }

    let history_file = match &cfg.history_file {
        Some(path) => Some(Mutex::new(
            std::fs::OpenOptions::new().create(true).append(true).open(path)?,
        )),
        None => None,
    };

    let node = Arc::new(Node {
        role: cfg.role,
        peer: cfg.peer.clone(),
        peer_client: cfg.peer_client.clone(),
        core: Mutex::new(core),
        usage: Mutex::new(usage),
        credentials,
        policies: RwLock::new(cfg.policies.clone()),
        delivery: Mutex::new(DeliveryQueue::new()),
        delivery_signal: Condvar::new(),
        history_file,
        shutdown: AtomicBool::new(false),
    });

    let handler: Handler = {
        let node = node.clone();
        Arc::new(move |request| route(&node, request))
    };
    let server = HttpServer::serve(&cfg.listen, handler)?;

    let mut workers = Vec::new();
    workers.push({
        let node = node.clone();
        thread::Builder::new()
            .name("delivery".into())
            .spawn(move || delivery_worker(&node))?
    });
    if cfg.role == NodeRole::Edge {
        workers.push({
            let node = node.clone();
            thread::Builder::new()
                .name("sync-drain".into())
                .spawn(move || drain_worker(&node))?
        });
    }

    Ok(NodeHandle {
        node,
        server,
        workers,
    })
}

impl Node {
    /// Ingest one patch through the full cascade and hand the side effects
    /// to the async workers.
    pub fn ingest(
        &self,
        patch: cogplant_core::model::Patch,
        clock: Timestamp,
    ) -> Result<bool, cogplant_core::broker::UpsertError> {
        let outcome = {
            let mut core = self.core.lock().expect("core lock");
            core.apply_cascade(patch, clock)?
        };
        if !outcome.http_notifications.is_empty() {
            let mut delivery = self.delivery.lock().expect("delivery lock");
            for (n, url) in outcome.http_notifications {
                delivery.push(n, Endpoint::Http(url), clock);
            }
            self.delivery_signal.notify_all();
        }
        if let Some(file) = &self.history_file {
            use std::io::Write;
            let mut file = file.lock().expect("history file lock");
            for p in &outcome.appended_points {
                let _ = file.write_all(encode_record_line(p).as_bytes());
            }
        }
        if let AlertRoute::Http(url) | AlertRoute::Both(url) = {
            let core = self.core.lock().expect("core lock");
            core.alert_route.clone()
        } {
            for alert in &outcome.alerts {
                let body = alert.to_json().to_canonical().unwrap_or_default();
                let url = url.clone();
                thread::spawn(move || {
                    let _ = client::post_json(&url, None, body.as_bytes(), Duration::from_secs(5));
                });
            }
        }
        Ok(outcome.created)
    }

    fn stats_json(&self) -> Json {
        let core = self.core.lock().expect("core lock");
        let delivery = self.delivery.lock().expect("delivery lock");
        Json::Obj(vec![
            ("entities".to_string(), Json::Num(core.broker.entity_count() as f64)),
            ("historyPoints".to_string(), Json::Num(core.history.len() as f64)),
            ("alerts".to_string(), Json::Num(core.alerts.len() as f64)),
            (
                "bufferLen".to_string(),
                Json::Num(core.sync_buffer.as_ref().map_or(0, |b| b.len()) as f64),
            ),
            (
                "lossCount".to_string(),
                Json::Num(core.sync_buffer.as_ref().map_or(0, |b| b.loss_count()) as f64),
            ),
            ("deliveryPending".to_string(), Json::Num(delivery.pending_len() as f64)),
            ("deadLetters".to_string(), Json::Num(delivery.dead_letters().len() as f64)),
            ("pipelineDrops".to_string(), Json::Num(core.total_pipeline_drops() as f64)),
            ("cascadeOverflows".to_string(), Json::Num(core.cascade_overflows as f64)),
        ])
    }
}

fn delivery_worker(node: &Node) {
    while !node.shutdown.load(Ordering::SeqCst) {
        let job = {
            let mut delivery = node.delivery.lock().expect("delivery lock");
            match delivery.next_due(now_ts()) {
                Some(job) => Some(job),
                None => {
                    let wait = delivery
                        .next_wakeup()
                        .map(|w| (w.millis() - now_ts().millis()).max(1) as u64)
                        .unwrap_or(200);
                    let _ = node
                        .delivery_signal
                        .wait_timeout(delivery, Duration::from_millis(wait.min(200)));
                    None
                }
            }
        };
        let Some(job) = job else { continue };
        let delivered = match &job.endpoint {
            Endpoint::Http(url) => client::post_json(
                url,
                None,
                &job.notification.body(),
                Duration::from_secs(5),
            )
            .map(|r| r.is_success())
            .unwrap_or(false),
            Endpoint::Internal(_) => true, // internal endpoints are handled in the cascade
        };
        let mut delivery = node.delivery.lock().expect("delivery lock");
        delivery.record_result(job, delivered, now_ts());
    }
}

struct PeerLink<'a> {
    peer: &'a str,
    token: &'a str,
}

impl CloudLink for PeerLink<'_> {
    fn send(&mut self, patch: &cogplant_core::model::Patch) -> Result<(), LinkError> {
        let body = cogplant_core::model::patch_to_bytes(patch)
            .map_err(|e| LinkError(e.to_string()))?;
        let url = format!("{}/entities", self.peer);
        match client::post_json(&url, Some(self.token), &body, Duration::from_secs(5)) {
            Ok(r) if r.is_success() => Ok(()),
            Ok(r) => Err(LinkError(format!("status {}", r.status))),
            Err(e) => Err(LinkError(e.to_string())),
        }
    }
}

fn peer_token(node: &Node) -> Option<String> {
    let (client_id, secret) = node.peer_client.clone()?;
    let peer = node.peer.clone()?;
    let body = Json::Obj(vec![
        ("clientId".to_string(), Json::str(client_id)),
        ("secret".to_string(), Json::str(secret)),
        ("ttl".to_string(), Json::Num(3600.0)),
    ])
    .to_canonical()
    .ok()?;
    let response = client::post_json(
        &format!("{peer}/token"),
        None,
        body.as_bytes(),
        Duration::from_secs(5),
    )
    .ok()?;
    if !response.is_success() {
        return None;
    }
    let v = json::parse(&response.body).ok()?;
    v.get("token").and_then(Json::as_str).map(String::from)
}

fn drain_worker(node: &Node) {
    let mut token: Option<String> = None;
    let mut backoff_ms: u64 = 0;
    while !node.shutdown.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(20 + backoff_ms.min(800)));
        let empty = {
            let core = node.core.lock().expect("core lock");
            core.sync_buffer.as_ref().map_or(true, |b| b.is_empty())
        };
        if empty {
            backoff_ms = 0;
            continue;
        }
        if token.is_none() {
            token = peer_token(node);
        }
        let Some(t) = token.clone() else {
            backoff_ms = next_backoff(backoff_ms);
            continue;
        };
        let Some(peer) = node.peer.clone() else { return };
        let progressed = {
            let mut core = node.core.lock().expect("core lock");
            let Some(buffer) = core.sync_buffer.as_mut() else {
                return;
            };
            let mut link = PeerLink {
                peer: &peer,
                token: &t,
            };
            let out = drain(buffer, &mut link);
            out.sent > 0
        };
        if progressed {
            backoff_ms = 0;
        } else {
            token = None; // refresh on next round, the cloud may have restarted
            backoff_ms = next_backoff(backoff_ms);
        }
    }
}

fn next_backoff(current: u64) -> u64 {
    match current {
        0 => 100,
        n => (n * 2).min(800),
    }
}

fn classify(method: &str, path: &str) -> Action {
    if path == "/policies" {
        return Action::Admin;
    }
    if path.starts_with("/contracts/") && path.ends_with("/log") {
        return Action::Admin;
    }
    match method {
        "GET" => Action::Read,
        _ => Action::Write,
    }
}

fn route(node: &Node, request: Request) -> Response {
    let now = now_ts();
    if request.method == "POST" && request.path == "/token" {
        return handle_token(node, &request, now);
    }

    let action = classify(&request.method, &request.path);
    let policies = node.policies.read().expect("policy lock").clone();
    let claims = match pep_enforce(
        request.bearer_token(),
        node.credentials.issuer_key(),
        now,
        &policies,
        &request.path,
        action,
    ) {
        EnforceOutcome::Pass(claims) => claims,
        EnforceOutcome::Unauthorized => return Response::error(401, "unauthorized"),
        EnforceOutcome::Forbidden => return Response::error(403, "forbidden"),
    };

    let segments: Vec<&str> = request.path.trim_matches('/').split('/').collect();
    match (request.method.as_str(), segments.as_slice()) {
        ("POST", ["entities"]) => handle_upsert(node, &request, now),
        ("GET", ["entities"]) => handle_query(node, &request),
        ("DELETE", ["entities", id]) => {
            let mut core = node.core.lock().expect("core lock");
            if core.broker.delete_entity(&EntityId::new(*id)) {
                Response::empty(204)
            } else {
                Response::error(404, "no such entity")
            }
        }
        ("POST", ["subscriptions"]) => handle_subscribe(node, &request),
        ("DELETE", ["subscriptions", id]) => {
            let mut core = node.core.lock().expect("core lock");
            if core.broker.unsubscribe(id) {
                Response::empty(204)
            } else {
                Response::error(404, "no such subscription")
            }
        }
        ("POST", ["registrations"]) => handle_register(node, &request),
        ("GET", ["temporal", entity_id, attribute]) => {
            handle_temporal(node, &request, entity_id, attribute)
        }
        ("POST", ["kpi"]) => handle_kpi(node, &request),
        ("POST", ["devices"]) => handle_provision(node, &request),
        ("GET", ["devices"]) => {
            let core = node.core.lock().expect("core lock");
            let list: Vec<Json> = core.registry.devices().map(provision_to_json).collect();
            Response::json(200, &Json::Arr(list))
        }
        ("POST", ["publish"]) => handle_publish(node, &request, now),
        ("GET", ["offers"]) => {
            let usage = node.usage.lock().expect("usage lock");
            let list: Vec<Json> = usage.offers().map(|o| o.to_json()).collect();
            Response::json(200, &Json::Arr(list))
        }
        ("POST", ["contracts"]) => handle_negotiate(node, &request),
        ("POST", ["transfer"]) => handle_transfer(node, &request, now),
        ("GET", ["contracts", id, "log"]) => {
            let usage = node.usage.lock().expect("usage lock");
            let entries: Vec<Json> = usage.log_for(id).iter().map(|e| e.to_json()).collect();
            Response::json(200, &Json::Arr(entries))
        }
        ("POST", ["policies"]) => handle_add_policy(node, &request, &claims),
        ("GET", ["stats"]) => Response::json(200, &node.stats_json()),
        _ => Response::error(404, "no such endpoint"),
    }
}

fn parse_body(request: &Request) -> Result<Json, Response> {
    json::parse(&request.body).map_err(|e| Response::error(400, &e.to_string()))
}

fn handle_token(node: &Node, request: &Request, now: Timestamp) -> Response {
    let v = match parse_body(request) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let client_id = v.get("clientId").and_then(Json::as_str).unwrap_or("");
    let secret = v.get("secret").and_then(Json::as_str).unwrap_or("");
    let ttl = v.get("ttl").and_then(Json::as_f64).unwrap_or(3600.0) as i64;
    match node.credentials.issue_token(client_id, secret, ttl, now) {
        Ok(token) => Response::json(
            200,
            &Json::Obj(vec![("token".to_string(), Json::str(token))]),
        ),
        Err(e) => Response::error(401, &e.to_string()),
    }
}

fn handle_upsert(node: &Node, request: &Request, now: Timestamp) -> Response {
    let v = match parse_body(request) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let patch = match patch_from_json(&v) {
        Ok(p) => p,
        Err(e) => return Response::error(400, &e.to_string()),
    };
    match node.ingest(patch, now) {
        Ok(true) => Response::empty(201),
        Ok(false) => Response::empty(204),
        Err(e) => Response::error(400, &e.to_string()),
    }
}

fn selector_from_query(request: &Request) -> Result<EntitySelector, Response> {
    let selector = EntitySelector {
        entity_type: request.query.get("type").cloned(),
        id_pattern: request.query.get("idPattern").cloned(),
        watched: Default::default(),
    };
    selector
        .validate()
        .map_err(|e| Response::error(400, &e.to_string()))?;
    Ok(selector)
}

fn handle_query(node: &Node, request: &Request) -> Response {
    let selector = match selector_from_query(request) {
        Ok(s) => s,
        Err(r) => return r,
    };
    let core = node.core.lock().expect("core lock");
    let list: Vec<Json> = core.broker.query(&selector).iter().map(|e| entity_to_json(e)).collect();
    Response::json(200, &Json::Arr(list))
}

fn handle_subscribe(node: &Node, request: &Request) -> Response {
    let v = match parse_body(request) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let id = match v.get("id").and_then(Json::as_str) {
        Some(id) => id.to_string(),
        None => return Response::error(400, "id missing"),
    };
    let selector = match v.get("selector").ok_or("selector missing").and_then(|s| {
        selector_from_json(s).map_err(|e| {
            Box::leak(e.into_boxed_str()) as &str
        })
    }) {
        Ok(s) => s,
        Err(e) => return Response::error(400, e),
    };
    let throttle_ms = v.get("throttleMs").and_then(Json::as_f64).unwrap_or(0.0) as i64;
    let endpoint = match v.get("endpoint") {
        Some(e) => match (e.get("kind").and_then(Json::as_str), e.get("url").and_then(Json::as_str)) {
            (Some("http"), Some(url)) => Endpoint::Http(url.to_string()),
            _ => return Response::error(400, "endpoint must be {\"kind\":\"http\",\"url\":...}"),
        },
        None => return Response::error(400, "endpoint missing"),
    };
    let mut core = node.core.lock().expect("core lock");
    match core
        .broker
        .subscribe(Subscription::new(id, selector, throttle_ms, endpoint))
    {
        Ok(()) => Response::empty(201),
        Err(e) => Response::error(409, &e.to_string()),
    }
}

fn handle_register(node: &Node, request: &Request) -> Response {
    let v = match parse_body(request) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let id = match v.get("id").and_then(Json::as_str) {
        Some(id) => id.to_string(),
        None => return Response::error(400, "id missing"),
    };
    let selector = match v.get("selector") {
        Some(s) => match selector_from_json(s) {
            Ok(sel) => sel,
            Err(e) => return Response::error(400, &e),
        },
        None => return Response::error(400, "selector missing"),
    };
    let provider = v.get("provider").and_then(Json::as_str).unwrap_or("").to_string();
    let mut core = node.core.lock().expect("core lock");
    match core.broker.register_source(cogplant_core::broker::Registration {
        id,
        selector,
        provider,
        mode: cogplant_core::broker::RegistrationMode::ForwardChanges,
    }) {
        Ok(()) => Response::empty(201),
        Err(e) => Response::error(409, &e.to_string()),
    }
}

fn handle_temporal(node: &Node, request: &Request, entity_id: &str, attribute: &str) -> Response {
    let parse_time = |key: &str| -> Result<Timestamp, Response> {
        request
            .query
            .get(key)
            .ok_or_else(|| Response::error(400, &format!("{key} missing")))
            .and_then(|s| {
                Timestamp::parse_lenient(s).map_err(|_| Response::error(400, &format!("bad {key}")))
            })
    };
    let from = match parse_time("from") {
        Ok(t) => t,
        Err(r) => return r,
    };
    let to = match parse_time("to") {
        Ok(t) => t,
        Err(r) => return r,
    };
    let agg = match request.query.get("agg").map(String::as_str) {
        None => Agg::Raw,
        Some(s) => match Agg::parse(s) {
            Some(a) => a,
            None => return Response::error(400, "bad agg"),
        },
    };
    let bucket_ms = match request.query.get("bucket") {
        None => None,
        Some(s) => match s.parse::<i64>() {
            Ok(ms) => Some(ms),
            Err(_) => return Response::error(400, "bad bucket"),
        },
    };
    let q = SeriesQuery {
        entity_id: EntityId::new(entity_id),
        attribute: attribute.to_string(),
        from,
        to,
        agg,
        bucket_ms,
    };
    let core = node.core.lock().expect("core lock");
    match core.history.query(&q) {
        Ok(SeriesResult::Points(points)) => {
            let arr: Vec<Json> = points
                .iter()
                .map(|p| {
                    Json::Obj(vec![
                        ("observedAt".to_string(), Json::str(p.observed_at.format())),
                        ("value".to_string(), Json::Num(p.value)),
                    ])
                })
                .collect();
            Response::json(200, &Json::Arr(arr))
        }
        Ok(SeriesResult::Buckets(buckets)) => {
            let arr: Vec<Json> = buckets
                .iter()
                .map(|b| {
                    Json::Obj(vec![
                        ("bucketStart".to_string(), Json::str(b.start.format())),
                        ("value".to_string(), Json::Num(b.value)),
                    ])
                })
                .collect();
            Response::json(200, &Json::Arr(arr))
        }
        Err(e) => Response::error(400, &e.to_string()),
    }
}

fn handle_kpi(node: &Node, request: &Request) -> Response {
    let v = match parse_body(request) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let name = match v.get("name").and_then(Json::as_str).and_then(KpiName::parse) {
        Some(n) => n,
        None => return Response::error(400, "bad kpi name"),
    };
    let parse_time = |key: &str| {
        v.get(key)
            .and_then(Json::as_str)
            .and_then(|s| Timestamp::parse_lenient(s).ok())
    };
    let (Some(from), Some(to)) = (parse_time("from"), parse_time("to")) else {
        return Response::error(400, "from/to missing or bad");
    };
    let mut bindings = std::collections::BTreeMap::new();
    if let Some(members) = v.get("bindings").and_then(Json::as_obj) {
        for (role, b) in members {
            let (Some(entity), Some(attr)) = (
                b.get("entityId").and_then(Json::as_str),
                b.get("attribute").and_then(Json::as_str),
            ) else {
                return Response::error(400, "binding needs entityId and attribute");
            };
            bindings.insert(role.clone(), (EntityId::new(entity), attr.to_string()));
        }
    }
    let core = node.core.lock().expect("core lock");
    match core.history.compute_kpi(name, from, to, &bindings) {
        Ok(report) => Response::json(200, &report.to_json()),
        Err(e) => Response::error(422, &e.to_string()),
    }
}

fn handle_provision(node: &Node, request: &Request) -> Response {
    let v = match parse_body(request) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let provision = match cogplant_core::agents::provision_from_json(&v) {
        Ok(p) => p,
        Err(e) => return Response::error(400, &e),
    };
    let mut core = node.core.lock().expect("core lock");
    match core.registry.provision(provision) {
        Ok(()) => Response::empty(201),
        Err(e) => Response::error(409, &e.to_string()),
    }
}

fn handle_publish(node: &Node, request: &Request, now: Timestamp) -> Response {
    let v = match parse_body(request) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let (Some(topic), Some(payload)) = (
        v.get("topic").and_then(Json::as_str),
        v.get("payload").and_then(Json::as_str),
    ) else {
        return Response::error(400, "topic and payload required");
    };
    // replay affordance of the local shim: measures may carry their own
    // receive time, e.g. when a scenario feeds recorded telemetry
    let received_at = match v.get("receivedAt").and_then(Json::as_str) {
        Some(s) => match Timestamp::parse_lenient(s) {
            Ok(t) => t,
            Err(_) => return Response::error(400, "bad receivedAt"),
        },
        None => now,
    };
    let patch = {
        let mut core = node.core.lock().expect("core lock");
        match core.registry.handle_publish(topic, payload.as_bytes(), received_at) {
            Ok((patch, _skipped)) => patch,
            Err(e) => {
                let status = match e {
                    cogplant_core::agents::IngestError::UnknownDevice => 404,
                    _ => 400,
                };
                return Response::error(status, &e.to_string());
            }
        }
    };
    match node.ingest(patch, received_at) {
        Ok(_) => Response::empty(204),
        Err(e) => Response::error(400, &e.to_string()),
    }
}

fn handle_negotiate(node: &Node, request: &Request) -> Response {
    let v = match parse_body(request) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let (Some(offer_id), Some(consumer_id)) = (
        v.get("offerId").and_then(Json::as_str),
        v.get("consumerId").and_then(Json::as_str),
    ) else {
        return Response::error(400, "offerId and consumerId required");
    };
    let terms = match v.get("terms") {
        Some(t) => match term_list_from_json(t) {
            Ok(terms) => terms,
            Err(e) => return Response::error(400, &e),
        },
        None => Vec::new(),
    };
    let mut usage = node.usage.lock().expect("usage lock");
    match usage.negotiate(offer_id, consumer_id, terms) {
        Ok(outcome) => {
            let mut members = vec![("contract".to_string(), outcome.contract.to_json())];
            if let Some(counter) = outcome.counter_terms {
                members.push((
                    "counterTerms".to_string(),
                    Json::Arr(counter.iter().map(|t| t.to_json()).collect()),
                ));
            }
            Response::json(201, &Json::Obj(members))
        }
        Err(e) => Response::error(404, &e.to_string()),
    }
}

struct NodeDataAccess<'a> {
    core: &'a CoreState,
}

impl DataAccess for NodeDataAccess<'_> {
    fn entities(&self, selector: &EntitySelector) -> Vec<Entity> {
        self.core.broker.query(selector).into_iter().cloned().collect()
    }

    fn series(&self, query: &SeriesQuery) -> Vec<SeriesPoint> {
        match self.core.history.query(query) {
            Ok(SeriesResult::Points(points)) => points,
            _ => Vec::new(),
        }
    }

    fn entity_type_of(&self, id: &EntityId) -> Option<String> {
        self.core.broker.get(id).map(|e| e.entity_type.clone())
    }
}

fn handle_transfer(node: &Node, request: &Request, now: Timestamp) -> Response {
    let v = match parse_body(request) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let Some(contract_id) = v.get("contractId").and_then(Json::as_str) else {
        return Response::error(400, "contractId required");
    };
    let purpose = v.get("purpose").and_then(Json::as_str);
    let Some(query_json) = v.get("query") else {
        return Response::error(400, "query required");
    };
    let query = if query_json.get("entityId").is_some() {
        let entity_id = query_json.get("entityId").and_then(Json::as_str).unwrap_or("");
        let Some(attribute) = query_json.get("attribute").and_then(Json::as_str) else {
            return Response::error(400, "series query needs attribute");
        };
        let parse_time = |key: &str| {
            query_json
                .get(key)
                .and_then(Json::as_str)
                .and_then(|s| Timestamp::parse_lenient(s).ok())
        };
        let (Some(from), Some(to)) = (parse_time("from"), parse_time("to")) else {
            return Response::error(400, "series query needs from/to");
        };
        TransferQuery::Series(SeriesQuery {
            entity_id: EntityId::new(entity_id),
            attribute: attribute.to_string(),
            from,
            to,
            agg: Agg::Raw,
            bucket_ms: None,
        })
    } else {
        match selector_from_json(query_json) {
            Ok(sel) => TransferQuery::Entities(sel),
            Err(e) => return Response::error(400, &e),
        }
    };

    // lock order: usage, then core
    let mut usage = node.usage.lock().expect("usage lock");
    let core = node.core.lock().expect("core lock");
    let access = NodeDataAccess { core: &core };
    match usage.transfer(contract_id, now, purpose, &query, &access) {
        Ok(TransferOutcome::Granted(payload)) => {
            let body = format!(
                r#"{{"contractId":{},"digest":"{}","data":{}}}"#,
                Json::str(contract_id).to_canonical().expect("string"),
                payload.digest,
                payload.data_json
            );
            Response::json_bytes(200, body.into_bytes())
        }
        Ok(TransferOutcome::Denied(reason)) => Response::error(403, reason.as_str()),
        Err(e) => Response::error(404, &e.to_string()),
    }
}

fn handle_add_policy(node: &Node, request: &Request, _claims: &Claims) -> Response {
    let v = match parse_body(request) {
        Ok(v) => v,
        Err(r) => return r,
    };
    match cogplant_core::auth::policy_from_json(&v) {
        Ok(policy) => {
            node.policies.write().expect("policy lock").push(policy);
            Response::empty(201)
        }
        Err(e) => Response::error(400, &e),
    }
}
