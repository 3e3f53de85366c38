//! Contract-mediated data egress with technical enforcement of usage
//! terms: expiry, transfer count and purpose binding, with a complete
//! append-only decision log.
//!
//! Term checks, the count increment and the log append happen in one call
//! on `&mut UsageControl`; the host serializes per-contract access, so
//! permits can never exceed MaxCount under concurrency.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::glob::{glob_match, is_literal};
use crate::hash::{hex_lower, sha256};
use crate::history::{SeriesPoint, SeriesQuery};
use crate::json::Json;
use crate::model::{entity_to_json, Entity, EntityId, EntitySelector};
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Term {
    /// Transfers permitted strictly before this instant.
    NotAfter(Timestamp),
    /// At most `n` permitted transfers, `n >= 1`.
    MaxCount(u64),
    /// Transfers bound to one declared purpose tag.
    Purpose(String),
}

impl Term {
    fn kind(&self) -> &'static str {
        match self {
            Term::NotAfter(_) => "NotAfter",
            Term::MaxCount(_) => "MaxCount",
            Term::Purpose(_) => "Purpose",
        }
    }

    /// Does `proposed` bind the consumer at least as tightly as `self`?
    fn satisfied_by(&self, proposed: &Term) -> bool {
        match (self, proposed) {
            (Term::NotAfter(min), Term::NotAfter(p)) => p <= min,
            (Term::MaxCount(min), Term::MaxCount(p)) => p <= min,
            (Term::Purpose(min), Term::Purpose(p)) => p == min,
            _ => false,
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            Term::NotAfter(t) => Json::Obj(alloc::vec![
                ("kind".to_string(), Json::str("NotAfter")),
                ("at".to_string(), Json::str(t.format())),
            ]),
            Term::MaxCount(n) => Json::Obj(alloc::vec![
                ("kind".to_string(), Json::str("MaxCount")),
                ("n".to_string(), Json::Num(*n as f64)),
            ]),
            Term::Purpose(p) => Json::Obj(alloc::vec![
                ("kind".to_string(), Json::str("Purpose")),
                ("tag".to_string(), Json::str(p.clone())),
            ]),
        }
    }

    pub fn from_json(v: &Json) -> Result<Term, String> {
        match v.get("kind").and_then(Json::as_str) {
            Some("NotAfter") => {
                let at = v
                    .get("at")
                    .and_then(Json::as_str)
                    .ok_or("NotAfter.at missing")?;
                Ok(Term::NotAfter(
                    Timestamp::parse_lenient(at).map_err(|e| format!("{e}"))?,
                ))
            }
            Some("MaxCount") => {
                let n = v.get("n").and_then(Json::as_f64).ok_or("MaxCount.n missing")?;
                if n < 1.0 {
                    return Err("MaxCount.n must be >= 1".into());
                }
                Ok(Term::MaxCount(n as u64))
            }
            Some("Purpose") => Ok(Term::Purpose(
                v.get("tag")
                    .and_then(Json::as_str)
                    .ok_or("Purpose.tag missing")?
                    .to_string(),
            )),
            _ => Err("unknown term kind".into()),
        }
    }
}

/// Parse a JSON array of terms.
pub fn term_list_from_json(v: &Json) -> Result<Vec<Term>, String> {
    v.as_arr()
        .ok_or("terms must be an array")?
        .iter()
        .map(Term::from_json)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContractState {
    Proposed,
    Agreed,
    Exhausted,
    Expired,
}

impl ContractState {
    pub fn as_str(self) -> &'static str {
        match self {
            ContractState::Proposed => "Proposed",
            ContractState::Agreed => "Agreed",
            ContractState::Exhausted => "Exhausted",
            ContractState::Expired => "Expired",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Contract {
    pub id: String,
    pub offer_id: String,
    pub consumer_id: String,
    pub terms: Vec<Term>,
    pub state: ContractState,
    pub permits_used: u64,
}

impl Contract {
    fn term_not_after(&self) -> Option<Timestamp> {
        self.terms.iter().find_map(|t| match t {
            Term::NotAfter(at) => Some(*at),
            _ => None,
        })
    }

    fn term_max_count(&self) -> Option<u64> {
        self.terms.iter().find_map(|t| match t {
            Term::MaxCount(n) => Some(*n),
            _ => None,
        })
    }

    fn term_purpose(&self) -> Option<&str> {
        self.terms.iter().find_map(|t| match t {
            Term::Purpose(p) => Some(p.as_str()),
            _ => None,
        })
    }

    pub fn to_json(&self) -> Json {
        Json::Obj(alloc::vec![
            ("id".to_string(), Json::str(self.id.clone())),
            ("offerId".to_string(), Json::str(self.offer_id.clone())),
            ("consumerId".to_string(), Json::str(self.consumer_id.clone())),
            (
                "terms".to_string(),
                Json::Arr(self.terms.iter().map(Term::to_json).collect()),
            ),
            ("state".to_string(), Json::str(self.state.as_str())),
            ("permitsUsed".to_string(), Json::Num(self.permits_used as f64)),
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataOffer {
    pub id: String,
    pub selector: EntitySelector,
    pub description: String,
    pub provider_id: String,
}

impl DataOffer {
    pub fn to_json(&self) -> Json {
        let mut selector = Vec::new();
        if let Some(t) = &self.selector.entity_type {
            selector.push(("entityType".to_string(), Json::str(t.clone())));
        }
        if let Some(p) = &self.selector.id_pattern {
            selector.push(("idPattern".to_string(), Json::str(p.clone())));
        }
        Json::Obj(alloc::vec![
            ("id".to_string(), Json::str(self.id.clone())),
            ("selector".to_string(), Json::Obj(selector)),
            ("description".to_string(), Json::str(self.description.clone())),
            ("providerId".to_string(), Json::str(self.provider_id.clone())),
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenyReason {
    Expired,
    Exhausted,
    WrongPurpose,
    NotAgreed,
    OutOfScope,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::Expired => "expired",
            DenyReason::Exhausted => "exhausted",
            DenyReason::WrongPurpose => "wrong-purpose",
            DenyReason::NotAgreed => "not-agreed",
            DenyReason::OutOfScope => "out-of-scope",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferDecision {
    Permit,
    Deny(DenyReason),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UsageLogEntry {
    pub contract_id: String,
    pub at: Timestamp,
    pub resource: String,
    pub decision: TransferDecision,
    /// SHA-256 hex of the payload, present on permitted transfers.
    pub digest: Option<String>,
}

impl UsageLogEntry {
    pub fn to_json(&self) -> Json {
        let decision = match self.decision {
            TransferDecision::Permit => "permit".to_string(),
            TransferDecision::Deny(reason) => format!("deny:{}", reason.as_str()),
        };
        let mut members = alloc::vec![
            ("contractId".to_string(), Json::str(self.contract_id.clone())),
            ("at".to_string(), Json::str(self.at.format())),
            ("resource".to_string(), Json::str(self.resource.clone())),
            ("decision".to_string(), Json::str(decision)),
        ];
        if let Some(d) = &self.digest {
            members.push(("digest".to_string(), Json::str(d.clone())));
        }
        Json::Obj(members)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UsageError {
    NoSuchOffer,
    NoSuchContract,
    /// More than one term of the same kind proposed.
    DuplicateTermKind,
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UsageError::NoSuchOffer => f.write_str("no-such-offer"),
            UsageError::NoSuchContract => f.write_str("no-such-contract"),
            UsageError::DuplicateTermKind => f.write_str("duplicate-term-kind"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegotiationOutcome {
    pub contract: Contract,
    /// Provider minimum terms, returned when the proposal falls short.
    pub counter_terms: Option<Vec<Term>>,
}

/// What a transfer may read; implemented over the broker and history
/// stores by the hosting node.
pub trait DataAccess {
    fn entities(&self, selector: &EntitySelector) -> Vec<Entity>;
    fn series(&self, query: &SeriesQuery) -> Vec<SeriesPoint>;
    fn entity_type_of(&self, id: &EntityId) -> Option<String>;
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransferQuery {
    Entities(EntitySelector),
    Series(SeriesQuery),
}

impl TransferQuery {
    fn resource_summary(&self) -> String {
        match self {
            TransferQuery::Entities(sel) => format!(
                "entities:{}{}",
                sel.entity_type.as_deref().unwrap_or("*"),
                sel.id_pattern
                    .as_deref()
                    .map(|p| format!(":{p}"))
                    .unwrap_or_default()
            ),
            TransferQuery::Series(q) => {
                format!("series:{}:{}", q.entity_id.as_str(), q.attribute)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferPayload {
    /// Canonical JSON array of the transferred data.
    pub data_json: String,
    /// SHA-256 hex of `data_json`.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransferOutcome {
    Granted(TransferPayload),
    Denied(DenyReason),
}

#[derive(Debug, Default)]
pub struct UsageControl {
    offers: BTreeMap<String, (DataOffer, Vec<Term>)>,
    contracts: BTreeMap<String, Contract>,
    log: Vec<UsageLogEntry>,
    next_contract: u64,
}

impl UsageControl {
    pub fn new() -> Self {
        UsageControl::default()
    }

    pub fn add_offer(&mut self, offer: DataOffer, min_terms: Vec<Term>) {
        self.offers.insert(offer.id.clone(), (offer, min_terms));
    }

    pub fn offers(&self) -> impl Iterator<Item = &DataOffer> {
        self.offers.values().map(|(o, _)| o)
    }

    pub fn contract(&self, id: &str) -> Option<&Contract> {
        self.contracts.get(id)
    }

    pub fn log(&self) -> &[UsageLogEntry] {
        &self.log
    }

    pub fn log_for(&self, contract_id: &str) -> Vec<&UsageLogEntry> {
        self.log
            .iter()
            .filter(|e| e.contract_id == contract_id)
            .collect()
    }

    /// Provider-side rule: agree iff every minimum term is met by an
    /// equally or more restrictive proposed term of the same kind.
    pub fn negotiate(
        &mut self,
        offer_id: &str,
        consumer_id: &str,
        proposed: Vec<Term>,
    ) -> Result<NegotiationOutcome, UsageError> {
        let (_, min_terms) = self.offers.get(offer_id).ok_or(UsageError::NoSuchOffer)?;
        for (i, t) in proposed.iter().enumerate() {
            if proposed[..i].iter().any(|o| o.kind() == t.kind()) {
                return Err(UsageError::DuplicateTermKind);
            }
        }
        let acceptable = min_terms
            .iter()
            .all(|min| proposed.iter().any(|p| min.satisfied_by(p)));
        let agreed = acceptable && !proposed.is_empty();

        self.next_contract += 1;
        let contract = Contract {
            id: format!("contract-{}", self.next_contract),
            offer_id: offer_id.to_string(),
            consumer_id: consumer_id.to_string(),
            terms: proposed,
            state: if agreed {
                ContractState::Agreed
            } else {
                ContractState::Proposed
            },
            permits_used: 0,
        };
        let counter_terms = (!agreed).then(|| min_terms.clone());
        self.contracts.insert(contract.id.clone(), contract.clone());
        Ok(NegotiationOutcome {
            contract,
            counter_terms,
        })
    }

    fn evaluate_terms(
        contract: &Contract,
        now: Timestamp,
        purpose: Option<&str>,
    ) -> Result<(), DenyReason> {
        match contract.state {
            ContractState::Proposed => return Err(DenyReason::NotAgreed),
            ContractState::Exhausted => return Err(DenyReason::Exhausted),
            ContractState::Expired => return Err(DenyReason::Expired),
            ContractState::Agreed => {}
        }
        if let Some(limit) = contract.term_not_after() {
            if now >= limit {
                return Err(DenyReason::Expired);
            }
        }
        if let Some(n) = contract.term_max_count() {
            if contract.permits_used >= n {
                return Err(DenyReason::Exhausted);
            }
        }
        if let Some(required) = contract.term_purpose() {
            if purpose != Some(required) {
                return Err(DenyReason::WrongPurpose);
            }
        }
        Ok(())
    }

    fn apply_decision(
        &mut self,
        contract_id: &str,
        now: Timestamp,
        resource: String,
        decision: Result<(), DenyReason>,
        digest: Option<String>,
    ) -> TransferDecision {
        let contract = self.contracts.get_mut(contract_id).expect("checked by caller");
        let decision = match decision {
            Ok(()) => {
                contract.permits_used += 1;
                if let Some(n) = contract.term_max_count() {
                    if contract.permits_used >= n {
                        contract.state = ContractState::Exhausted;
                    }
                }
                TransferDecision::Permit
            }
            Err(reason) => {
                match reason {
                    DenyReason::Expired => contract.state = ContractState::Expired,
                    DenyReason::Exhausted => contract.state = ContractState::Exhausted,
                    _ => {}
                }
                TransferDecision::Deny(reason)
            }
        };
        self.log.push(UsageLogEntry {
            contract_id: contract_id.to_string(),
            at: now,
            resource,
            decision,
            digest: if decision == TransferDecision::Permit {
                digest
            } else {
                None
            },
        });
        decision
    }

    /// Term check + count increment + log append, atomically per call.
    pub fn authorize_transfer(
        &mut self,
        contract_id: &str,
        now: Timestamp,
        purpose: Option<&str>,
        resource: &str,
    ) -> Result<TransferDecision, UsageError> {
        let contract = self
            .contracts
            .get(contract_id)
            .ok_or(UsageError::NoSuchContract)?;
        let evaluation = Self::evaluate_terms(contract, now, purpose);
        Ok(self.apply_decision(contract_id, now, resource.to_string(), evaluation, None))
    }

    /// Scope-checked, term-checked data egress. On permit, returns the
    /// payload plus its SHA-256 digest, both also recorded in the log.
    pub fn transfer(
        &mut self,
        contract_id: &str,
        now: Timestamp,
        purpose: Option<&str>,
        query: &TransferQuery,
        access: &dyn DataAccess,
    ) -> Result<TransferOutcome, UsageError> {
        let contract = self
            .contracts
            .get(contract_id)
            .ok_or(UsageError::NoSuchContract)?;
        let resource = query.resource_summary();
        let offer_selector = self
            .offers
            .get(&contract.offer_id)
            .map(|(o, _)| o.selector.clone())
            .ok_or(UsageError::NoSuchOffer)?;

        if !scope_within_offer(&offer_selector, query, access) {
            let decision = self.apply_decision(
                contract_id,
                now,
                resource,
                Err(DenyReason::OutOfScope),
                None,
            );
            let TransferDecision::Deny(reason) = decision else {
                unreachable!()
            };
            return Ok(TransferOutcome::Denied(reason));
        }

        let evaluation = Self::evaluate_terms(contract, now, purpose);
        if let Err(reason) = evaluation {
            self.apply_decision(contract_id, now, resource, Err(reason), None);
            return Ok(TransferOutcome::Denied(reason));
        }

        let data_json = match query {
            TransferQuery::Entities(sel) => {
                let entities = access.entities(sel);
                Json::Arr(entities.iter().map(entity_to_json).collect())
            }
            TransferQuery::Series(q) => {
                let points = access.series(q);
                Json::Arr(
                    points
                        .iter()
                        .map(|p| {
                            Json::Obj(alloc::vec![
                                (
                                    "observedAt".to_string(),
                                    Json::str(p.observed_at.format())
                                ),
                                ("value".to_string(), Json::Num(p.value)),
                            ])
                        })
                        .collect(),
                )
            }
        }
        .to_canonical()
        .expect("stored values are finite");
        let digest = hex_lower(&sha256(data_json.as_bytes()));
        self.apply_decision(contract_id, now, resource, Ok(()), Some(digest.clone()));
        Ok(TransferOutcome::Granted(TransferPayload { data_json, digest }))
    }
}

/// Structural scope check: the requested type/pattern must be covered by
/// the offer selector.
fn scope_within_offer(
    offer: &EntitySelector,
    query: &TransferQuery,
    access: &dyn DataAccess,
) -> bool {
    match query {
        TransferQuery::Entities(sel) => {
            if let Some(offer_type) = &offer.entity_type {
                if sel.entity_type.as_deref() != Some(offer_type.as_str()) {
                    return false;
                }
            }
            if let Some(offer_pattern) = &offer.id_pattern {
                match &sel.id_pattern {
                    None => return false, // request is broader than the offer
                    Some(p) if p == offer_pattern => {}
                    Some(p) if is_literal(p) => {
                        if !glob_match(offer_pattern, p) {
                            return false;
                        }
                    }
                    Some(_) => return false,
                }
            }
            true
        }
        TransferQuery::Series(q) => {
            if let Some(offer_pattern) = &offer.id_pattern {
                if !glob_match(offer_pattern, q.entity_id.as_str()) {
                    return false;
                }
            }
            if let Some(offer_type) = &offer.entity_type {
                if access.entity_type_of(&q.entity_id).as_deref() != Some(offer_type.as_str()) {
                    return false;
                }
            }
            true
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::Agg;
    use crate::model::Attribute;

    fn ts(ms: i64) -> Timestamp {
        Timestamp::from_millis(1_704_067_200_000 + ms)
    }

    fn dryer_offer() -> DataOffer {
        DataOffer {
            id: "offer-dryers".into(),
            selector: EntitySelector::of_type("DryerDrum"),
            description: "dryer drum telemetry".into(),
            provider_id: "asphalt-plant".into(),
        }
    }

    fn control_with_offer(min_terms: Vec<Term>) -> UsageControl {
        let mut u = UsageControl::new();
        u.add_offer(dryer_offer(), min_terms);
        u
    }

    #[test]
    fn negotiation_meets_minimum() {
        let mut u = control_with_offer(alloc::vec![Term::NotAfter(ts(10_000))]);
        let out = u
            .negotiate("offer-dryers", "consumer-a", alloc::vec![Term::NotAfter(ts(10_000))])
            .unwrap();
        assert_eq!(out.contract.state, ContractState::Agreed);
        assert!(out.counter_terms.is_none());
    }

    #[test]
    fn stricter_terms_accepted_weaker_rejected() {
        let mut u = control_with_offer(alloc::vec![
            Term::NotAfter(ts(10_000)),
            Term::MaxCount(10)
        ]);
        let stricter = u
            .negotiate(
                "offer-dryers",
                "c",
                alloc::vec![Term::NotAfter(ts(5_000)), Term::MaxCount(3)],
            )
            .unwrap();
        assert_eq!(stricter.contract.state, ContractState::Agreed);

        let weaker = u
            .negotiate(
                "offer-dryers",
                "c",
                alloc::vec![Term::NotAfter(ts(99_000)), Term::MaxCount(3)],
            )
            .unwrap();
        assert_eq!(weaker.contract.state, ContractState::Proposed);
        assert_eq!(
            weaker.counter_terms,
            Some(alloc::vec![Term::NotAfter(ts(10_000)), Term::MaxCount(10)])
        );
    }

    #[test]
    fn missing_required_term_yields_counter_terms() {
        let mut u = control_with_offer(alloc::vec![Term::NotAfter(ts(10_000))]);
        let out = u
            .negotiate("offer-dryers", "c", alloc::vec![Term::MaxCount(5)])
            .unwrap();
        assert_eq!(out.contract.state, ContractState::Proposed);
        assert_eq!(out.counter_terms, Some(alloc::vec![Term::NotAfter(ts(10_000))]));
    }

    #[test]
    fn unknown_offer_and_duplicate_terms() {
        let mut u = control_with_offer(alloc::vec![]);
        assert_eq!(
            u.negotiate("ghost", "c", alloc::vec![Term::MaxCount(1)]),
            Err(UsageError::NoSuchOffer)
        );
        assert_eq!(
            u.negotiate(
                "offer-dryers",
                "c",
                alloc::vec![Term::MaxCount(1), Term::MaxCount(2)]
            ),
            Err(UsageError::DuplicateTermKind)
        );
    }

    fn agreed_contract(u: &mut UsageControl, terms: Vec<Term>) -> String {
        let out = u.negotiate("offer-dryers", "consumer-a", terms).unwrap();
        assert_eq!(out.contract.state, ContractState::Agreed);
        out.contract.id
    }

    #[test]
    fn max_count_permits_exactly_n() {
        let mut u = control_with_offer(alloc::vec![]);
        let id = agreed_contract(&mut u, alloc::vec![Term::MaxCount(2)]);
        assert_eq!(
            u.authorize_transfer(&id, ts(0), None, "r").unwrap(),
            TransferDecision::Permit
        );
        assert_eq!(
            u.authorize_transfer(&id, ts(1), None, "r").unwrap(),
            TransferDecision::Permit
        );
        assert_eq!(
            u.authorize_transfer(&id, ts(2), None, "r").unwrap(),
            TransferDecision::Deny(DenyReason::Exhausted)
        );
        assert_eq!(u.contract(&id).unwrap().state, ContractState::Exhausted);
        assert_eq!(u.contract(&id).unwrap().permits_used, 2);
    }

    #[test]
    fn not_after_boundary_denies_at_the_instant() {
        let mut u = control_with_offer(alloc::vec![]);
        let id = agreed_contract(&mut u, alloc::vec![Term::NotAfter(ts(1000))]);
        assert_eq!(
            u.authorize_transfer(&id, ts(999), None, "r").unwrap(),
            TransferDecision::Permit
        );
        assert_eq!(
            u.authorize_transfer(&id, ts(1000), None, "r").unwrap(),
            TransferDecision::Deny(DenyReason::Expired)
        );
        assert_eq!(u.contract(&id).unwrap().state, ContractState::Expired);
    }

    #[test]
    fn purpose_binding() {
        let mut u = control_with_offer(alloc::vec![]);
        let id = agreed_contract(&mut u, alloc::vec![Term::Purpose("quality".into())]);
        assert_eq!(
            u.authorize_transfer(&id, ts(0), Some("marketing"), "r").unwrap(),
            TransferDecision::Deny(DenyReason::WrongPurpose)
        );
        assert_eq!(
            u.authorize_transfer(&id, ts(1), Some("quality"), "r").unwrap(),
            TransferDecision::Permit
        );
        assert_eq!(
            u.authorize_transfer(&id, ts(2), None, "r").unwrap(),
            TransferDecision::Deny(DenyReason::WrongPurpose)
        );
    }

    #[test]
    fn proposed_contract_cannot_transfer() {
        let mut u = control_with_offer(alloc::vec![Term::NotAfter(ts(1))]);
        let out = u
            .negotiate("offer-dryers", "c", alloc::vec![Term::MaxCount(1)])
            .unwrap();
        assert_eq!(
            u.authorize_transfer(&out.contract.id, ts(0), None, "r").unwrap(),
            TransferDecision::Deny(DenyReason::NotAgreed)
        );
    }

    #[test]
    fn terminal_states_never_permit_again() {
        let mut u = control_with_offer(alloc::vec![]);
        let id = agreed_contract(&mut u, alloc::vec![Term::MaxCount(1)]);
        u.authorize_transfer(&id, ts(0), None, "r").unwrap();
        for i in 0..10 {
            assert_eq!(
                u.authorize_transfer(&id, ts(i), None, "r").unwrap(),
                TransferDecision::Deny(DenyReason::Exhausted)
            );
        }
        let permits = u
            .log_for(&id)
            .iter()
            .filter(|e| e.decision == TransferDecision::Permit)
            .count();
        assert_eq!(permits, 1);
    }

    #[test]
    fn log_is_complete_one_entry_per_decision() {
        let mut u = control_with_offer(alloc::vec![]);
        let id = agreed_contract(&mut u, alloc::vec![Term::MaxCount(3)]);
        for i in 0..5 {
            u.authorize_transfer(&id, ts(i), None, "r").unwrap();
        }
        assert_eq!(u.log_for(&id).len(), 5);
        assert_eq!(u.log().len(), 5);
    }

    struct FixtureAccess {
        entity: Entity,
        points: Vec<SeriesPoint>,
    }

    impl DataAccess for FixtureAccess {
        fn entities(&self, selector: &EntitySelector) -> Vec<Entity> {
            let all = alloc::collections::BTreeSet::new();
            if crate::model::match_selector(selector, &self.entity, &all) {
                alloc::vec![self.entity.clone()]
            } else {
                Vec::new()
            }
        }

        fn series(&self, _query: &SeriesQuery) -> Vec<SeriesPoint> {
            self.points.clone()
        }

        fn entity_type_of(&self, id: &EntityId) -> Option<String> {
            (id == &self.entity.id).then(|| self.entity.entity_type.clone())
        }
    }

    fn fixture() -> FixtureAccess {
        FixtureAccess {
            entity: Entity::new("urn:cap:DryerDrum:d1", "DryerDrum").with_attr(
                "temperature",
                Attribute::number(182.5).with_unit("CEL").at(ts(0)),
            ),
            points: alloc::vec![SeriesPoint {
                entity_id: "urn:cap:DryerDrum:d1".into(),
                attribute: "temperature".into(),
                observed_at: ts(0),
                value: 182.5,
                unit: Some("CEL".into()),
            }],
        }
    }

    #[test]
    fn transfer_returns_payload_and_logs_digest() {
        let mut u = control_with_offer(alloc::vec![]);
        let id = agreed_contract(&mut u, alloc::vec![Term::MaxCount(5)]);
        let query = TransferQuery::Entities(EntitySelector::of_type("DryerDrum"));
        let out = u.transfer(&id, ts(0), None, &query, &fixture()).unwrap();
        let TransferOutcome::Granted(payload) = out else {
            panic!("expected grant");
        };
        assert!(payload.data_json.starts_with('['));
        // independent recomputation of the payload hash
        assert_eq!(
            payload.digest,
            hex_lower(&sha256(payload.data_json.as_bytes()))
        );
        let log = u.log_for(&id);
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].digest.as_deref(), Some(payload.digest.as_str()));
    }

    #[test]
    fn out_of_scope_is_denied_and_logged_without_consuming() {
        let mut u = control_with_offer(alloc::vec![]);
        let id = agreed_contract(&mut u, alloc::vec![Term::MaxCount(1)]);
        let query = TransferQuery::Entities(EntitySelector::of_type("Mixer"));
        let out = u.transfer(&id, ts(0), None, &query, &fixture()).unwrap();
        assert_eq!(out, TransferOutcome::Denied(DenyReason::OutOfScope));
        assert_eq!(u.contract(&id).unwrap().permits_used, 0);
        assert_eq!(
            u.log_for(&id)[0].decision,
            TransferDecision::Deny(DenyReason::OutOfScope)
        );
        // the permit is still available for an in-scope query
        let ok = u
            .transfer(
                &id,
                ts(1),
                None,
                &TransferQuery::Entities(EntitySelector::of_type("DryerDrum")),
                &fixture(),
            )
            .unwrap();
        assert!(matches!(ok, TransferOutcome::Granted(_)));
    }

    #[test]
    fn series_scope_checks_type_and_pattern() {
        let mut u = UsageControl::new();
        u.add_offer(
            DataOffer {
                id: "offer-dryers".into(),
                selector: EntitySelector {
                    entity_type: Some("DryerDrum".into()),
                    id_pattern: Some("urn:cap:DryerDrum:*".into()),
                    watched: Default::default(),
                },
                description: String::new(),
                provider_id: "p".into(),
            },
            alloc::vec![],
        );
        let id = agreed_contract(&mut u, alloc::vec![Term::MaxCount(10)]);
        let series_query = |entity: &str| {
            TransferQuery::Series(SeriesQuery {
                entity_id: entity.into(),
                attribute: "temperature".into(),
                from: ts(0),
                to: ts(1000),
                agg: Agg::Raw,
                bucket_ms: None,
            })
        };
        let ok = u
            .transfer(&id, ts(0), None, &series_query("urn:cap:DryerDrum:d1"), &fixture())
            .unwrap();
        assert!(matches!(ok, TransferOutcome::Granted(_)));
        let bad = u
            .transfer(&id, ts(1), None, &series_query("urn:cap:Mixer:m1"), &fixture())
            .unwrap();
        assert_eq!(bad, TransferOutcome::Denied(DenyReason::OutOfScope));
    }

    #[test]
    fn replay_under_max_count_one() {
        let mut u = control_with_offer(alloc::vec![]);
        let id = agreed_contract(&mut u, alloc::vec![Term::MaxCount(1)]);
        let query = TransferQuery::Entities(EntitySelector::of_type("DryerDrum"));
        let first = u.transfer(&id, ts(0), None, &query, &fixture()).unwrap();
        assert!(matches!(first, TransferOutcome::Granted(_)));
        let second = u.transfer(&id, ts(1), None, &query, &fixture()).unwrap();
        assert_eq!(second, TransferOutcome::Denied(DenyReason::Exhausted));
    }
}
