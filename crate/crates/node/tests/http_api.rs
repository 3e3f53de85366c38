//! Endpoint-level tests: every HTTP surface from the external interface,
//! including the enforcement point's 401/403 paths, notification delivery
//! with retry, and the edge-to-cloud registration forward.

use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use cogplant::client;
use cogplant::config::NodeConfig;
use cogplant::httpd::{HttpServer, Response};
use cogplant::node::{start, NodeHandle};
use cogplant_core::json::{self, Json};

fn cloud_config_json(listen: &str) -> String {
    format!(
        r#"{{
        "role": "cloud",
        "listen": "{listen}",
        "issuerKey": "test-issuer-key-0123456789",
        "clients": [
            {{"clientId":"op","secret":"operator-secret-0123","roles":["operator","admin"]}},
            {{"clientId":"viewer","secret":"viewer-secret-012345","roles":["viewer"]}},
            {{"clientId":"sync","secret":"sync-secret-0123456789","roles":["sync"]}}
        ],
        "policies": [
            {{"id":"op-all","effect":"Permit","subjectRole":"operator","resourcePattern":"*","action":"*"}},
            {{"id":"admin-all","effect":"Permit","subjectRole":"admin","resourcePattern":"*","action":"*"}},
            {{"id":"viewer-read","effect":"Permit","subjectRole":"viewer","resourcePattern":"*","action":"read"}},
            {{"id":"sync-entities","effect":"Permit","subjectRole":"sync","resourcePattern":"/entities*","action":"*"}}
        ],
        "offers": [
            {{"offer":{{"id":"offer-dryers","selector":{{"entityType":"DryerDrum"}},"description":"dryer telemetry","providerId":"plant"}},
             "minTerms":[{{"kind":"MaxCount","n":10}}]}}
        ]
    }}"#
    )
}

fn start_cloud() -> NodeHandle {
    let v = json::parse(cloud_config_json("127.0.0.1:0").as_bytes()).unwrap();
    let cfg = NodeConfig::from_json(&v, Path::new(".")).unwrap();
    start(cfg).unwrap()
}

fn token_for(base: &str, client_id: &str, secret: &str) -> String {
    let body = format!(r#"{{"clientId":"{client_id}","secret":"{secret}","ttl":3600}}"#);
    let r = client::post_json(
        &format!("{base}/token"),
        None,
        body.as_bytes(),
        Duration::from_secs(5),
    )
    .unwrap();
    assert_eq!(r.status, 200, "token issuance failed");
    let v = json::parse(&r.body).unwrap();
    v.get("token").and_then(Json::as_str).unwrap().to_string()
}

fn get_json(base: &str, path: &str, token: &str) -> (u16, Json) {
    let r = client::get(&format!("{base}{path}"), Some(token), Duration::from_secs(5)).unwrap();
    let v = json::parse(&r.body).unwrap_or(Json::Null);
    (r.status, v)
}

fn post(base: &str, path: &str, token: Option<&str>, body: &str) -> (u16, Json) {
    let r = client::post_json(
        &format!("{base}{path}"),
        token,
        body.as_bytes(),
        Duration::from_secs(5),
    )
    .unwrap();
    let v = json::parse(&r.body).unwrap_or(Json::Null);
    (r.status, v)
}

const DRYER_PATCH: &str = r#"{"id":"urn:cap:DryerDrum:d1","type":"DryerDrum","attrs":{"temperature":{"kind":"Property","value":182.5,"unit":"CEL","observedAt":"2024-01-01T00:00:00.000Z"}}}"#;

#[test]
fn entity_crud_and_auth_paths() {
    let node = start_cloud();
    let base = node.base_url();
    let token = token_for(&base, "op", "operator-secret-0123");

    // no token -> 401
    let r = client::post_json(
        &format!("{base}/entities"),
        None,
        DRYER_PATCH.as_bytes(),
        Duration::from_secs(5),
    )
    .unwrap();
    assert_eq!(r.status, 401);

    // viewer can read but not write -> 403
    let viewer = token_for(&base, "viewer", "viewer-secret-012345");
    let (status, _) = post(&base, "/entities", Some(&viewer), DRYER_PATCH);
    assert_eq!(status, 403);

    // bad credentials -> 401 invalid-client
    let r = client::post_json(
        &format!("{base}/token"),
        None,
        br#"{"clientId":"op","secret":"wrong-secret-000000"}"#,
        Duration::from_secs(5),
    )
    .unwrap();
    assert_eq!(r.status, 401);

    // create, then merge
    let (status, _) = post(&base, "/entities", Some(&token), DRYER_PATCH);
    assert_eq!(status, 201);
    let newer = DRYER_PATCH.replace("00.000Z\"", "01.000Z\"").replace("182.5", "190.0");
    let (status, _) = post(&base, "/entities", Some(&token), &newer);
    assert_eq!(status, 204);

    // query with the viewer token (read allowed)
    let (status, v) = get_json(&base, "/entities?type=DryerDrum", &viewer);
    assert_eq!(status, 200);
    let arr = v.as_arr().unwrap();
    assert_eq!(arr.len(), 1);
    let temp = arr[0].get("attrs").unwrap().get("temperature").unwrap();
    assert_eq!(temp.get("value").and_then(Json::as_f64), Some(190.0));

    // query without type or pattern is rejected
    let (status, _) = get_json(&base, "/entities", &token);
    assert_eq!(status, 400);

    // delete then 404 on repeat
    let r = client::request(
        "DELETE",
        &format!("{base}/entities/urn:cap:DryerDrum:d1"),
        Some(&token),
        None,
        Duration::from_secs(5),
    )
    .unwrap();
    assert_eq!(r.status, 204);
    let r = client::request(
        "DELETE",
        &format!("{base}/entities/urn:cap:DryerDrum:d1"),
        Some(&token),
        None,
        Duration::from_secs(5),
    )
    .unwrap();
    assert_eq!(r.status, 404);

    node.shutdown();
}

#[test]
fn subscription_notifications_are_delivered_with_retry() {
    let node = start_cloud();
    let base = node.base_url();
    let token = token_for(&base, "op", "operator-secret-0123");

    // sink that fails the first two deliveries
    let received: Arc<Mutex<Vec<Vec<u8>>>> = Arc::new(Mutex::new(Vec::new()));
    let failures = Arc::new(AtomicU32::new(2));
    let sink = {
        let received = received.clone();
        let failures = failures.clone();
        HttpServer::serve(
            "127.0.0.1:0",
            Arc::new(move |request| {
                if failures.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |f| f.checked_sub(1)).is_ok()
                {
                    return Response::error(500, "flaky");
                }
                received.lock().unwrap().push(request.body);
                Response::empty(204)
            }),
        )
        .unwrap()
    };

    let sub = format!(
        r#"{{"id":"s1","selector":{{"entityType":"DryerDrum","watchedAttributes":["temperature"]}},"throttleMs":0,"endpoint":{{"kind":"http","url":"{}/notify"}}}}"#,
        sink.base_url()
    );
    let (status, _) = post(&base, "/subscriptions", Some(&token), &sub);
    assert_eq!(status, 201);
    // duplicate id -> 409
    let (status, _) = post(&base, "/subscriptions", Some(&token), &sub);
    assert_eq!(status, 409);

    let (status, _) = post(&base, "/entities", Some(&token), DRYER_PATCH);
    assert_eq!(status, 201);

    // two failures then success: backoff delays 100 + 200 ms
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        if !received.lock().unwrap().is_empty() {
            break;
        }
        assert!(Instant::now() < deadline, "notification never delivered");
        std::thread::sleep(Duration::from_millis(20));
    }
    let bodies = received.lock().unwrap();
    assert_eq!(bodies.len(), 1);
    let v = json::parse(&bodies[0]).unwrap();
    assert_eq!(v.get("subscriptionId").and_then(Json::as_str), Some("s1"));
    assert_eq!(v.get("sequence").and_then(Json::as_f64), Some(1.0));
    assert_eq!(
        v.get("changed").and_then(Json::as_arr).map(|a| a.len()),
        Some(1)
    );
    drop(bodies);

    node.shutdown();
}

#[test]
fn temporal_and_kpi_endpoints() {
    let node = start_cloud();
    let base = node.base_url();
    let token = token_for(&base, "op", "operator-secret-0123");

    for (i, v) in [(0, 100.0), (1, 50.0)] {
        let patch = format!(
            r#"{{"id":"urn:cap:Plant:p1","type":"Plant","attrs":{{"energy":{{"kind":"Property","value":{v},"observedAt":"2024-01-01T00:00:0{i}.000Z"}},"output":{{"kind":"Property","value":{},"observedAt":"2024-01-01T00:00:0{i}.000Z"}}}}}}"#,
            v / 10.0
        );
        let (status, _) = post(&base, "/entities", Some(&token), &patch);
        assert!(status == 201 || status == 204);
    }

    let (status, v) = get_json(
        &base,
        "/temporal/urn:cap:Plant:p1/energy?from=2024-01-01T00:00:00Z&to=2024-01-01T00:01:00Z",
        &token,
    );
    assert_eq!(status, 200);
    let points = v.as_arr().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0].get("value").and_then(Json::as_f64), Some(100.0));

    let (status, v) = get_json(
        &base,
        "/temporal/urn:cap:Plant:p1/energy?from=2024-01-01T00:00:00Z&to=2024-01-01T00:01:00Z&agg=sum&bucket=60000",
        &token,
    );
    assert_eq!(status, 200);
    assert_eq!(
        v.as_arr().unwrap()[0].get("value").and_then(Json::as_f64),
        Some(150.0)
    );

    let kpi_body = r#"{"name":"energy_per_unit","from":"2024-01-01T00:00:00Z","to":"2024-01-01T00:01:00Z","bindings":{"energy":{"entityId":"urn:cap:Plant:p1","attribute":"energy"},"output":{"entityId":"urn:cap:Plant:p1","attribute":"output"}}}"#;
    let (status, v) = post(&base, "/kpi", Some(&token), kpi_body);
    assert_eq!(status, 200);
    assert_eq!(v.get("value").and_then(Json::as_f64), Some(10.0));

    // zero denominator -> undefined-kpi
    let empty_window = kpi_body
        .replace("2024-01-01T00:00:00Z", "2030-01-01T00:00:00Z")
        .replace("2024-01-01T00:01:00Z", "2030-01-01T00:01:00Z");
    let (status, v) = post(&base, "/kpi", Some(&token), &empty_window);
    assert_eq!(status, 422);
    assert_eq!(v.get("error").and_then(Json::as_str), Some("undefined-kpi"));

    node.shutdown();
}

#[test]
fn device_provisioning_and_publish_flow() {
    let node = start_cloud();
    let base = node.base_url();
    let token = token_for(&base, "op", "operator-secret-0123");

    let provision = r#"{"apiKey":"k1","deviceId":"dryer01","entityId":"urn:cap:DryerDrum:dryer01","entityType":"DryerDrum","attributes":{"t":{"name":"temperature","unit":"CEL","type":"number"},"rpm":{"name":"rotation","type":"number","scale":0.1,"offset":0}}}"#;
    let (status, _) = post(&base, "/devices", Some(&token), provision);
    assert_eq!(status, 201);
    let (status, _) = post(&base, "/devices", Some(&token), provision);
    assert_eq!(status, 409, "duplicate provision");

    let (status, v) = get_json(&base, "/devices", &token);
    assert_eq!(status, 200);
    assert_eq!(v.as_arr().unwrap().len(), 1);

    let publish = r#"{"topic":"/ul/k1/dryer01/attrs","payload":"t|182.5|rpm|70","receivedAt":"2024-01-01T00:00:00.000Z"}"#;
    let (status, _) = post(&base, "/publish", Some(&token), publish);
    assert_eq!(status, 204);

    let (_, v) = get_json(&base, "/entities?type=DryerDrum", &token);
    let entity = &v.as_arr().unwrap()[0];
    let attrs = entity.get("attrs").unwrap();
    assert_eq!(
        attrs.get("temperature").unwrap().get("value").and_then(Json::as_f64),
        Some(182.5)
    );
    // scale 0.1 applied
    assert_eq!(
        attrs.get("rotation").unwrap().get("value").and_then(Json::as_f64),
        Some(7.0)
    );

    // unknown device -> 404, unroutable -> 400
    let (status, _) = post(
        &base,
        "/publish",
        Some(&token),
        r#"{"topic":"/ul/k9/ghost/attrs","payload":"t|1"}"#,
    );
    assert_eq!(status, 404);
    let (status, _) = post(
        &base,
        "/publish",
        Some(&token),
        r#"{"topic":"/bogus","payload":"t|1"}"#,
    );
    assert_eq!(status, 400);

    node.shutdown();
}

#[test]
fn usage_control_over_http() {
    let node = start_cloud();
    let base = node.base_url();
    let token = token_for(&base, "op", "operator-secret-0123");

    let (status, _) = post(&base, "/entities", Some(&token), DRYER_PATCH);
    assert_eq!(status, 201);

    let (status, v) = get_json(&base, "/offers", &token);
    assert_eq!(status, 200);
    assert_eq!(v.as_arr().unwrap().len(), 1);

    // proposal below the minimum terms -> counter-terms
    let (status, v) = post(
        &base,
        "/contracts",
        Some(&token),
        r#"{"offerId":"offer-dryers","consumerId":"partner","terms":[{"kind":"MaxCount","n":50}]}"#,
    );
    assert_eq!(status, 201);
    assert_eq!(
        v.get("contract").unwrap().get("state").and_then(Json::as_str),
        Some("Proposed")
    );
    assert!(v.get("counterTerms").is_some());

    // acceptable proposal
    let (status, v) = post(
        &base,
        "/contracts",
        Some(&token),
        r#"{"offerId":"offer-dryers","consumerId":"partner","terms":[{"kind":"MaxCount","n":2}]}"#,
    );
    assert_eq!(status, 201);
    let contract = v.get("contract").unwrap();
    assert_eq!(contract.get("state").and_then(Json::as_str), Some("Agreed"));
    let contract_id = contract.get("id").and_then(Json::as_str).unwrap().to_string();

    let transfer = format!(
        r#"{{"contractId":"{contract_id}","purpose":"quality","query":{{"entityType":"DryerDrum"}}}}"#
    );
    let (status, v) = post(&base, "/transfer", Some(&token), &transfer);
    assert_eq!(status, 200);
    let digest = v.get("digest").and_then(Json::as_str).unwrap().to_string();
    assert_eq!(digest.len(), 64);
    assert_eq!(v.get("data").and_then(Json::as_arr).map(|a| a.len()), Some(1));

    // out-of-scope query -> 403 out-of-scope
    let bad = format!(
        r#"{{"contractId":"{contract_id}","query":{{"entityType":"Mixer"}}}}"#
    );
    let (status, v) = post(&base, "/transfer", Some(&token), &bad);
    assert_eq!(status, 403);
    assert_eq!(v.get("error").and_then(Json::as_str), Some("out-of-scope"));

    // second permitted transfer exhausts MaxCount(2)
    let (status, _) = post(&base, "/transfer", Some(&token), &transfer);
    assert_eq!(status, 200);
    let (status, v) = post(&base, "/transfer", Some(&token), &transfer);
    assert_eq!(status, 403);
    assert_eq!(v.get("error").and_then(Json::as_str), Some("exhausted"));

    // provider-only log; viewer lacks the admin action
    let viewer = token_for(&base, "viewer", "viewer-secret-012345");
    let (status, _) = get_json(&base, &format!("/contracts/{contract_id}/log"), &viewer);
    assert_eq!(status, 403);
    let (status, v) = get_json(&base, &format!("/contracts/{contract_id}/log"), &token);
    assert_eq!(status, 200);
    let log = v.as_arr().unwrap();
    assert_eq!(log.len(), 4);
    assert_eq!(
        log[0].get("digest").and_then(Json::as_str),
        Some(digest.as_str())
    );

    node.shutdown();
}

#[test]
fn runtime_policy_changes_apply() {
    let node = start_cloud();
    let base = node.base_url();
    let token = token_for(&base, "op", "operator-secret-0123");
    let viewer = token_for(&base, "viewer", "viewer-secret-012345");

    let (status, _) = get_json(&base, "/stats", &viewer);
    assert_eq!(status, 200);

    // viewer cannot add policies
    let deny = r#"{"id":"lockdown","effect":"Deny","subjectRole":"viewer","resourcePattern":"/stats","action":"read"}"#;
    let (status, _) = post(&base, "/policies", Some(&viewer), deny);
    assert_eq!(status, 403);

    // admin locks the viewer out of /stats; deny-overrides kicks in
    let (status, _) = post(&base, "/policies", Some(&token), deny);
    assert_eq!(status, 201);
    let (status, _) = get_json(&base, "/stats", &viewer);
    assert_eq!(status, 403);

    node.shutdown();
}

#[test]
fn registration_forwards_only_matching_changes() {
    // cloud first, then an edge whose registration selects SteelBillet only
    let cloud = start_cloud();
    let cloud_url = cloud.base_url();

    let edge_cfg = format!(
        r#"{{
        "role": "edge",
        "listen": "127.0.0.1:0",
        "peer": "{cloud_url}",
        "issuerKey": "test-issuer-key-0123456789",
        "clients": [{{"clientId":"op","secret":"operator-secret-0123","roles":["operator","admin"]}}],
        "policies": [{{"id":"op-all","effect":"Permit","subjectRole":"operator","resourcePattern":"*","action":"*"}}],
        "peerClientId": "sync",
        "peerSecret": "sync-secret-0123456789",
        "registrations": [{{"id":"steel","selector":{{"entityType":"SteelBillet"}},"provider":"{cloud_url}"}}]
    }}"#
    );
    let v = json::parse(edge_cfg.as_bytes()).unwrap();
    let edge = start(NodeConfig::from_json(&v, Path::new(".")).unwrap()).unwrap();
    let edge_url = edge.base_url();
    let token = token_for(&edge_url, "op", "operator-secret-0123");

    let billet = r#"{"id":"urn:cap:SteelBillet:b1","type":"SteelBillet","attrs":{"temp":{"kind":"Property","value":900,"observedAt":"2024-01-01T00:00:00.000Z"}}}"#;
    let mixer = r#"{"id":"urn:cap:Mixer:m1","type":"Mixer","attrs":{"speed":{"kind":"Property","value":3,"observedAt":"2024-01-01T00:00:00.000Z"}}}"#;
    let (status, _) = post(&edge_url, "/entities", Some(&token), billet);
    assert_eq!(status, 201);
    let (status, _) = post(&edge_url, "/entities", Some(&token), mixer);
    assert_eq!(status, 201);

    // wait for the drainer to forward the matching change
    let cloud_token = token_for(&cloud_url, "op", "operator-secret-0123");
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let (_, v) = get_json(&cloud_url, "/entities?type=SteelBillet", &cloud_token);
        if v.as_arr().map(|a| a.len()) == Some(1) {
            break;
        }
        assert!(Instant::now() < deadline, "billet never forwarded");
        std::thread::sleep(Duration::from_millis(20));
    }
    // the mixer is not covered by any registration and must not appear
    std::thread::sleep(Duration::from_millis(200));
    let (_, v) = get_json(&cloud_url, "/entities?type=Mixer", &cloud_token);
    assert_eq!(v.as_arr().map(|a| a.len()), Some(0));

    edge.shutdown();
    cloud.shutdown();
}
