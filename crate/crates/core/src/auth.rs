//! Token issuance/verification and the policy decision point.
//!
//! Tokens are three dot-separated base64url segments signed with
//! HMAC-SHA256 under a single issuer key; one trust domain, so symmetric
//! keys are enough. Decisions combine deny-overrides with default-deny.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::glob::glob_match;
use crate::hash::{base64url_decode, base64url_encode, constant_time_eq, hmac_sha256};
use crate::json::{self, Json};
use crate::time::Timestamp;

pub const TOKEN_HEADER: &str = r#"{"alg":"HS256","typ":"token"}"#;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientCredential {
    pub client_id: String,
    pub secret: String,
    pub roles: BTreeSet<String>,
}

/// Registered clients plus the issuer signing key.
#[derive(Clone, Debug, Default)]
pub struct CredentialStore {
    clients: BTreeMap<String, ClientCredential>,
    issuer_key: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CredentialError {
    DuplicateClient,
    /// Secrets must be at least 16 bytes.
    ShortSecret,
}

impl fmt::Display for CredentialError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CredentialError::DuplicateClient => f.write_str("duplicate-client"),
            CredentialError::ShortSecret => f.write_str("short-secret"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AuthError {
    /// Unknown client or bad secret; deliberately the same error for both.
    InvalidClient,
}

impl fmt::Display for AuthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid-client")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenError {
    Malformed,
    InvalidSignature,
    Expired,
}

impl fmt::Display for TokenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenError::Malformed => f.write_str("malformed-token"),
            TokenError::InvalidSignature => f.write_str("invalid-signature"),
            TokenError::Expired => f.write_str("expired"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Claims {
    pub sub: String,
    pub roles: BTreeSet<String>,
    pub iat: i64,
    pub exp: i64,
}

impl CredentialStore {
    pub fn new(issuer_key: impl Into<Vec<u8>>) -> Self {
        CredentialStore {
            clients: BTreeMap::new(),
            issuer_key: issuer_key.into(),
        }
    }

    pub fn register(&mut self, c: ClientCredential) -> Result<(), CredentialError> {
        if c.secret.len() < 16 {
            return Err(CredentialError::ShortSecret);
        }
        if self.clients.contains_key(&c.client_id) {
            return Err(CredentialError::DuplicateClient);
        }
        self.clients.insert(c.client_id.clone(), c);
        Ok(())
    }

    pub fn issuer_key(&self) -> &[u8] {
        &self.issuer_key
    }

    /// Client-credentials issuance. `ttl_seconds` of 0 yields an already
    /// expired token.
    pub fn issue_token(
        &self,
        client_id: &str,
        secret: &str,
        ttl_seconds: i64,
        now: Timestamp,
    ) -> Result<String, AuthError> {
        let client = self.clients.get(client_id).ok_or(AuthError::InvalidClient)?;
        if !constant_time_eq(client.secret.as_bytes(), secret.as_bytes()) {
            return Err(AuthError::InvalidClient);
        }
        let iat = now.unix_seconds();
        let exp = iat + ttl_seconds;
        let roles: Vec<Json> = client.roles.iter().map(|r| Json::str(r.clone())).collect();
        let payload = Json::Obj(alloc::vec![
            ("sub".to_string(), Json::str(client_id)),
            ("roles".to_string(), Json::Arr(roles)),
            ("iat".to_string(), Json::Num(iat as f64)),
            ("exp".to_string(), Json::Num(exp as f64)),
        ])
        .to_canonical()
        .expect("payload numbers are finite");
        Ok(sign_token(&self.issuer_key, &payload))
    }
}

fn sign_token(key: &[u8], payload_json: &str) -> String {
    let header_b64 = base64url_encode(TOKEN_HEADER.as_bytes());
    let payload_b64 = base64url_encode(payload_json.as_bytes());
    let signing_input = format!("{header_b64}.{payload_b64}");
    let sig = hmac_sha256(key, signing_input.as_bytes());
    format!("{signing_input}.{}", base64url_encode(&sig))
}

/// Checks signature then expiry; `now == exp` is already expired.
pub fn verify_token(token: &str, issuer_key: &[u8], now: Timestamp) -> Result<Claims, TokenError> {
    let mut parts = token.split('.');
    let (h, p, s) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(h), Some(p), Some(s), None) => (h, p, s),
        _ => return Err(TokenError::Malformed),
    };
    let sig = base64url_decode(s).ok_or(TokenError::Malformed)?;
    let signing_input = format!("{h}.{p}");
    let expected = hmac_sha256(issuer_key, signing_input.as_bytes());
    if !constant_time_eq(&sig, &expected) {
        return Err(TokenError::InvalidSignature);
    }
    let header = base64url_decode(h).ok_or(TokenError::Malformed)?;
    if header != TOKEN_HEADER.as_bytes() {
        return Err(TokenError::Malformed);
    }
    let payload = base64url_decode(p).ok_or(TokenError::Malformed)?;
    let v = json::parse(&payload).map_err(|_| TokenError::Malformed)?;
    let sub = v
        .get("sub")
        .and_then(Json::as_str)
        .ok_or(TokenError::Malformed)?
        .to_string();
    let roles = v
        .get("roles")
        .and_then(Json::as_arr)
        .ok_or(TokenError::Malformed)?
        .iter()
        .map(|r| r.as_str().map(String::from).ok_or(TokenError::Malformed))
        .collect::<Result<BTreeSet<_>, _>>()?;
    let iat = v
        .get("iat")
        .and_then(Json::as_f64)
        .ok_or(TokenError::Malformed)? as i64;
    let exp = v
        .get("exp")
        .and_then(Json::as_f64)
        .ok_or(TokenError::Malformed)? as i64;
    if now.unix_seconds() >= exp {
        return Err(TokenError::Expired);
    }
    Ok(Claims {
        sub,
        roles,
        iat,
        exp,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Action {
    Read,
    Write,
    Admin,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Read => "read",
            Action::Write => "write",
            Action::Admin => "admin",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        match s {
            "read" => Some(Action::Read),
            "write" => Some(Action::Write),
            "admin" => Some(Action::Admin),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionPattern {
    Exact(Action),
    Any,
}

impl ActionPattern {
    fn matches(self, a: Action) -> bool {
        match self {
            ActionPattern::Any => true,
            ActionPattern::Exact(x) => x == a,
        }
    }

    pub fn parse(s: &str) -> Option<ActionPattern> {
        if s == "*" {
            Some(ActionPattern::Any)
        } else {
            Action::parse(s).map(ActionPattern::Exact)
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionPattern::Any => "*",
            ActionPattern::Exact(a) => a.as_str(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Effect {
    Permit,
    Deny,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Policy {
    pub id: String,
    pub effect: Effect,
    /// Role name or `*`.
    pub subject_role: String,
    /// Glob over request paths.
    pub resource_pattern: String,
    pub action: ActionPattern,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthRequest {
    pub roles: BTreeSet<String>,
    pub resource: String,
    pub action: Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Permit,
    Deny,
}

fn policy_matches(p: &Policy, r: &AuthRequest) -> bool {
    let role_ok = p.subject_role == "*" || r.roles.contains(&p.subject_role);
    role_ok && glob_match(&p.resource_pattern, &r.resource) && p.action.matches(r.action)
}

/// Deny-overrides combining with default deny; order-free.
pub fn pdp_decide(policies: &[Policy], r: &AuthRequest) -> Decision {
    let mut any_permit = false;
    for p in policies {
        if policy_matches(p, r) {
            match p.effect {
                Effect::Deny => return Decision::Deny,
                Effect::Permit => any_permit = true,
            }
        }
    }
    if any_permit {
        Decision::Permit
    } else {
        Decision::Deny
    }
}

/// Outcome of guarding one request at an enforcement point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EnforceOutcome {
    Pass(Claims),
    /// Missing or invalid token: HTTP 401.
    Unauthorized,
    /// Valid token, denied by policy: HTTP 403.
    Forbidden,
}

pub fn pep_enforce(
    token: Option<&str>,
    issuer_key: &[u8],
    now: Timestamp,
    policies: &[Policy],
    resource: &str,
    action: Action,
) -> EnforceOutcome {
    let claims = match token.and_then(|t| verify_token(t, issuer_key, now).ok()) {
        Some(c) => c,
        None => return EnforceOutcome::Unauthorized,
    };
    let request = AuthRequest {
        roles: claims.roles.clone(),
        resource: resource.to_string(),
        action,
    };
    match pdp_decide(policies, &request) {
        Decision::Permit => EnforceOutcome::Pass(claims),
        Decision::Deny => EnforceOutcome::Forbidden,
    }
}

/// Policy list wire format: JSON array of
/// `{"id","effect","subjectRole","resourcePattern","action"}`.
pub fn policies_from_json(v: &Json) -> Result<Vec<Policy>, String> {
    let arr = v.as_arr().ok_or("policy file must be a JSON array")?;
    arr.iter().map(policy_from_json).collect()
}

pub fn policy_from_json(v: &Json) -> Result<Policy, String> {
    let get_str = |k: &str| -> Result<&str, String> {
        v.get(k)
            .and_then(Json::as_str)
            .ok_or(format!("policy field {k} missing or not a string"))
    };
    let effect = match get_str("effect")? {
        "Permit" => Effect::Permit,
        "Deny" => Effect::Deny,
        other => return Err(format!("bad effect {other}")),
    };
    let resource_pattern = get_str("resourcePattern")?.to_string();
    if resource_pattern.is_empty() {
        return Err("resourcePattern must be non-empty".to_string());
    }
    Ok(Policy {
        id: get_str("id")?.to_string(),
        effect,
        subject_role: get_str("subjectRole")?.to_string(),
        resource_pattern,
        action: ActionPattern::parse(get_str("action")?).ok_or("bad action")?,
    })
}

pub fn policy_to_json(p: &Policy) -> Json {
    Json::Obj(alloc::vec![
        ("id".to_string(), Json::str(p.id.clone())),
        (
            "effect".to_string(),
            Json::str(match p.effect {
                Effect::Permit => "Permit",
                Effect::Deny => "Deny",
            }),
        ),
        ("subjectRole".to_string(), Json::str(p.subject_role.clone())),
        (
            "resourcePattern".to_string(),
            Json::str(p.resource_pattern.clone()),
        ),
        ("action".to_string(), Json::str(p.action.as_str())),
    ])
}
