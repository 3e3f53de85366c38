//! Node configuration file: role, listen address, auth material, wired
//! policies/devices/pipelines/offers, and the edge's peer link.

use std::io;
use std::path::{Path, PathBuf};

use cogplant_core::agents::{provision_from_json, DeviceProvision};
use cogplant_core::auth::{policies_from_json, ClientCredential, Policy};
use cogplant_core::broker::{Registration, RegistrationMode};
use cogplant_core::json::{self, Json};
use cogplant_core::model::EntitySelector;
use cogplant_core::pipeline::{spec_from_json, PipelineSpec};
use cogplant_core::usage::{DataOffer, Term};

use crate::state::AlertRoute;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    Edge,
    Cloud,
}

impl NodeRole {
    pub fn parse(s: &str) -> Option<NodeRole> {
        match s {
            "edge" => Some(NodeRole::Edge),
            "cloud" => Some(NodeRole::Cloud),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Edge => "edge",
            NodeRole::Cloud => "cloud",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub role: NodeRole,
    pub listen: String,
    /// Cloud peer base URL; required for edge nodes.
    pub peer: Option<String>,
    pub issuer_key: Vec<u8>,
    pub clients: Vec<ClientCredential>,
    pub policies: Vec<Policy>,
    pub provisions: Vec<DeviceProvision>,
    pub pipelines: Vec<PipelineSpec>,
    pub registrations: Vec<Registration>,
    pub offers: Vec<(DataOffer, Vec<Term>)>,
    pub buffer_capacity: usize,
    pub history_file: Option<PathBuf>,
    /// Credentials this edge presents to the cloud peer.
    pub peer_client: Option<(String, String)>,
    pub alert_route: AlertRoute,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn selector_from_json(v: &Json) -> Result<EntitySelector, String> {
    let watched = match v.get("watchedAttributes").and_then(Json::as_arr) {
        Some(items) => items
            .iter()
            .map(|i| i.as_str().map(String::from).ok_or("watchedAttributes must be strings"))
            .collect::<Result<_, _>>()?,
        None => Default::default(),
    };
    let selector = EntitySelector {
        entity_type: v.get("entityType").and_then(Json::as_str).map(String::from),
        id_pattern: v.get("idPattern").and_then(Json::as_str).map(String::from),
        watched,
    };
    selector.validate().map_err(|e| e.to_string())?;
    Ok(selector)
}

pub fn selector_to_json(s: &EntitySelector) -> Json {
    let mut members = Vec::new();
    if let Some(t) = &s.entity_type {
        members.push(("entityType".to_string(), Json::str(t.clone())));
    }
    if let Some(p) = &s.id_pattern {
        members.push(("idPattern".to_string(), Json::str(p.clone())));
    }
    if !s.watched.is_empty() {
        members.push((
            "watchedAttributes".to_string(),
            Json::Arr(s.watched.iter().map(|w| Json::str(w.clone())).collect()),
        ));
    }
    Json::Obj(members)
}

pub fn offer_from_json(v: &Json) -> Result<DataOffer, String> {
    Ok(DataOffer {
        id: v
            .get("id")
            .and_then(Json::as_str)
            .ok_or("offer id missing")?
            .to_string(),
        selector: selector_from_json(v.get("selector").ok_or("offer selector missing")?)?,
        description: v
            .get("description")
            .and_then(Json::as_str)
            .unwrap_or("")
            .to_string(),
        provider_id: v
            .get("providerId")
            .and_then(Json::as_str)
            .ok_or("offer providerId missing")?
            .to_string(),
    })
}

impl NodeConfig {
    pub fn from_file(path: &Path) -> io::Result<NodeConfig> {
        let bytes = std::fs::read(path)?;
        let v = json::parse(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        NodeConfig::from_json(&v, base)
    }

    pub fn from_json(v: &Json, base: &Path) -> io::Result<NodeConfig> {
        let role = v
            .get("role")
            .and_then(Json::as_str)
            .and_then(NodeRole::parse)
            .ok_or_else(|| bad("role must be \"edge\" or \"cloud\""))?;
        let listen = v
            .get("listen")
            .and_then(Json::as_str)
            .ok_or_else(|| bad("listen missing"))?
            .to_string();
        let peer = v.get("peer").and_then(Json::as_str).map(String::from);
        if role == NodeRole::Edge && peer.is_none() {
            return Err(bad("edge nodes require a peer"));
        }
        let issuer_key = v
            .get("issuerKey")
            .and_then(Json::as_str)
            .ok_or_else(|| bad("issuerKey missing"))?
            .as_bytes()
            .to_vec();

        let mut clients = Vec::new();
        if let Some(items) = v.get("clients").and_then(Json::as_arr) {
            for c in items {
                clients.push(ClientCredential {
                    client_id: c
                        .get("clientId")
                        .and_then(Json::as_str)
                        .ok_or_else(|| bad("client clientId missing"))?
                        .to_string(),
                    secret: c
                        .get("secret")
                        .and_then(Json::as_str)
                        .ok_or_else(|| bad("client secret missing"))?
                        .to_string(),
                    roles: c
                        .get("roles")
                        .and_then(Json::as_arr)
                        .map(|r| r.iter().filter_map(Json::as_str).map(String::from).collect())
                        .unwrap_or_default(),
                });
            }
        }

        let mut policies = Vec::new();
        if let Some(inline) = v.get("policies") {
            policies.extend(policies_from_json(inline).map_err(bad)?);
        }
        if let Some(file) = v.get("policyFile").and_then(Json::as_str) {
            let bytes = std::fs::read(base.join(file))?;
            let parsed = json::parse(&bytes).map_err(|e| bad(format!("{file}: {e}")))?;
            policies.extend(policies_from_json(&parsed).map_err(bad)?);
        }

        let mut provisions = Vec::new();
        if let Some(items) = v.get("provisions").and_then(Json::as_arr) {
            for p in items {
                provisions.push(provision_from_json(p).map_err(bad)?);
            }
        }
        if let Some(file) = v.get("provisionFile").and_then(Json::as_str) {
            let bytes = std::fs::read(base.join(file))?;
            let parsed = json::parse(&bytes).map_err(|e| bad(format!("{file}: {e}")))?;
            for p in parsed.as_arr().ok_or_else(|| bad("provision file must be an array"))? {
                provisions.push(provision_from_json(p).map_err(bad)?);
            }
        }

        let mut pipelines = Vec::new();
        if let Some(items) = v.get("pipelines").and_then(Json::as_arr) {
            for p in items {
                pipelines.push(spec_from_json(p).map_err(|e| bad(e.to_string()))?);
            }
        }
        if let Some(files) = v.get("pipelineSpecs").and_then(Json::as_arr) {
            for f in files {
                let file = f.as_str().ok_or_else(|| bad("pipelineSpecs must be paths"))?;
                let bytes = std::fs::read(base.join(file))?;
                pipelines.push(
                    cogplant_core::pipeline::parse_spec(&bytes)
                        .map_err(|e| bad(format!("{file}: {e}")))?,
                );
            }
        }

        let mut registrations = Vec::new();
        if let Some(items) = v.get("registrations").and_then(Json::as_arr) {
            for r in items {
                registrations.push(Registration {
                    id: r
                        .get("id")
                        .and_then(Json::as_str)
                        .ok_or_else(|| bad("registration id missing"))?
                        .to_string(),
                    selector: selector_from_json(
                        r.get("selector").ok_or_else(|| bad("registration selector missing"))?,
                    )
                    .map_err(bad)?,
                    provider: r
                        .get("provider")
                        .and_then(Json::as_str)
                        .ok_or_else(|| bad("registration provider missing"))?
                        .to_string(),
                    mode: RegistrationMode::ForwardChanges,
                });
            }
        }

        let mut offers = Vec::new();
        if let Some(items) = v.get("offers").and_then(Json::as_arr) {
            for o in items {
                let offer = offer_from_json(o.get("offer").ok_or_else(|| bad("offer missing"))?)
                    .map_err(bad)?;
                let min_terms = match o.get("minTerms").and_then(Json::as_arr) {
                    Some(terms) => terms
                        .iter()
                        .map(Term::from_json)
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(bad)?,
                    None => Vec::new(),
                };
                offers.push((offer, min_terms));
            }
        }

        let alert_route = match (
            v.get("alertEndpoint").and_then(Json::as_str),
            v.get("alertToBroker").and_then(Json::as_bool).unwrap_or(true),
        ) {
            (Some(url), true) => AlertRoute::Both(url.to_string()),
            (Some(url), false) => AlertRoute::Http(url.to_string()),
            (None, _) => AlertRoute::Broker,
        };

        Ok(NodeConfig {
            role,
            listen,
            peer,
            issuer_key,
            clients,
            policies,
            provisions,
            pipelines,
            registrations,
            offers,
            buffer_capacity: v
                .get("bufferCapacity")
                .and_then(Json::as_f64)
                .map(|n| n as usize)
                .unwrap_or(100_000),
            history_file: v
                .get("historyFile")
                .and_then(Json::as_str)
                .map(|f| base.join(f)),
            peer_client: match (
                v.get("peerClientId").and_then(Json::as_str),
                v.get("peerSecret").and_then(Json::as_str),
            ) {
                (Some(id), Some(secret)) => Some((id.to_string(), secret.to_string())),
                _ => None,
            },
            alert_route,
        })
    }
}
