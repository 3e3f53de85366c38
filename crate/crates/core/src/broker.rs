//! The context broker: entity store with upsert/query/delete, subscription
//! registry with per-entity throttling, change fan-out and context-source
//! registrations consumed by the sync layer.
//!
//! Upsert and notification generation are one atomic step on `&mut Broker`;
//! delivery is a separate state machine ([`DeliveryQueue`]) driven by the
//! hosting runtime, at-least-once with exponential backoff.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::json::Json;
use crate::model::{
    entity_to_json, match_selector, merge_patch, validate_entity, Entity, EntityId,
    EntitySelector, MergeError, Patch, SelectorError, Violation,
};
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Endpoint {
    /// In-process channel, drained by the hosting runtime.
    Internal(String),
    /// POST the notification body to this URL.
    Http(String),
}

#[derive(Clone, Debug)]
pub struct Subscription {
    pub id: String,
    pub selector: EntitySelector,
    pub throttle_ms: i64,
    pub endpoint: Endpoint,
    last_fired: BTreeMap<EntityId, Timestamp>,
    next_sequence: u64,
}

impl Subscription {
    pub fn new(
        id: impl Into<String>,
        selector: EntitySelector,
        throttle_ms: i64,
        endpoint: Endpoint,
    ) -> Self {
        Subscription {
            id: id.into(),
            selector,
            throttle_ms,
            endpoint,
            last_fired: BTreeMap::new(),
            next_sequence: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Notification {
    pub subscription_id: String,
    /// Entity snapshot after the merge that caused this notification.
    pub entity: Entity,
    pub changed: BTreeSet<String>,
    pub fired_at: Timestamp,
    /// Strictly increasing per subscription, gapless at generation.
    pub sequence: u64,
}

impl Notification {
    /// Canonical notification body used on the wire.
    pub fn body(&self) -> Vec<u8> {
        let changed: Vec<Json> = self.changed.iter().map(|c| Json::str(c.clone())).collect();
        Json::Obj(alloc::vec![
            (
                "subscriptionId".to_string(),
                Json::str(self.subscription_id.clone())
            ),
            ("sequence".to_string(), Json::Num(self.sequence as f64)),
            ("changed".to_string(), Json::Arr(changed)),
            ("entity".to_string(), entity_to_json(&self.entity)),
        ])
        .to_canonical()
        .expect("entity was validated on upsert")
        .into_bytes()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegistrationMode {
    ForwardChanges,
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub id: String,
    pub selector: EntitySelector,
    /// Peer broker address, e.g. `http://127.0.0.1:9000`.
    pub provider: String,
    pub mode: RegistrationMode,
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpsertError {
    EmptyPatch,
    /// Stored entity has a different type.
    TypeMismatch,
    /// Merged entity would violate invariants; state unchanged.
    InvalidPatch(Vec<Violation>),
}

impl fmt::Display for UpsertError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpsertError::EmptyPatch => f.write_str("empty-patch"),
            UpsertError::TypeMismatch => f.write_str("type-mismatch"),
            UpsertError::InvalidPatch(v) => {
                f.write_str("invalid-patch:")?;
                for violation in v {
                    write!(f, " {violation}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RegistryError {
    DuplicateSubscription,
    DuplicateRegistration,
    EmptyProvider,
    BadSelector(SelectorError),
}

impl fmt::Display for RegistryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegistryError::DuplicateSubscription => f.write_str("duplicate-subscription"),
            RegistryError::DuplicateRegistration => f.write_str("duplicate-registration"),
            RegistryError::EmptyProvider => f.write_str("empty-provider"),
            RegistryError::BadSelector(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpsertOutcome {
    pub created: bool,
    pub applied: BTreeSet<String>,
    pub notifications: Vec<Notification>,
}

/// Hard cap on query results.
pub const QUERY_RESULT_CAP: usize = 10_000;

#[derive(Default, Debug)]
pub struct Broker {
    entities: BTreeMap<EntityId, Entity>,
    subscriptions: BTreeMap<String, Subscription>,
    registrations: BTreeMap<String, Registration>,
}

impl Broker {
    pub fn new() -> Self {
        Broker::default()
    }

    /// Merge the patch (created if absent), then produce exactly one
    /// notification per matching subscription outside its throttle window.
    /// Changes lacking `observedAt` are stamped with `clock` first.
    pub fn upsert(
        &mut self,
        mut patch: Patch,
        clock: Timestamp,
    ) -> Result<UpsertOutcome, UpsertError> {
        if patch.changes.is_empty() {
            return Err(UpsertError::EmptyPatch);
        }
        patch.stamp(clock);
        let (merged, applied, created) = match self.entities.get(&patch.entity_id) {
            Some(existing) => {
                if existing.entity_type != patch.entity_type {
                    return Err(UpsertError::TypeMismatch);
                }
                let (merged, applied) = match merge_patch(existing, &patch) {
                    Ok(v) => v,
                    Err(MergeError::WrongEntity | MergeError::UnstampedChange { .. }) => {
                        unreachable!("patch was stamped and keyed by its own id")
                    }
                };
                (merged, applied, false)
            }
            None => {
                let empty = Entity::new(patch.entity_id.clone(), patch.entity_type.clone());
                let (merged, applied) = merge_patch(&empty, &patch).expect("fresh entity merge");
                (merged, applied, true)
            }
        };
        let violations = validate_entity(&merged);
        if !violations.is_empty() {
            return Err(UpsertError::InvalidPatch(violations));
        }

        let mut notifications = Vec::new();
        if !applied.is_empty() {
            for sub in self.subscriptions.values_mut() {
                if !match_selector(&sub.selector, &merged, &applied) {
                    continue;
                }
                let throttled = match sub.last_fired.get(&merged.id) {
                    Some(last) => clock.millis() - last.millis() < sub.throttle_ms,
                    None => false,
                };
                if throttled {
                    continue;
                }
                sub.last_fired.insert(merged.id.clone(), clock);
                sub.next_sequence += 1;
                notifications.push(Notification {
                    subscription_id: sub.id.clone(),
                    entity: merged.clone(),
                    changed: applied.clone(),
                    fired_at: clock,
                    sequence: sub.next_sequence,
                });
            }
        }
        self.entities.insert(merged.id.clone(), merged);
        Ok(UpsertOutcome {
            created,
            applied,
            notifications,
        })
    }

    /// Entities matching type/id pattern, id-sorted, capped at
    /// [`QUERY_RESULT_CAP`]. Watched attributes are ignored for queries.
    pub fn query(&self, selector: &EntitySelector) -> Vec<&Entity> {
        let flat = EntitySelector {
            entity_type: selector.entity_type.clone(),
            id_pattern: selector.id_pattern.clone(),
            watched: BTreeSet::new(),
        };
        self.entities
            .values()
            .filter(|e| match_selector(&flat, e, &BTreeSet::new()))
            .take(QUERY_RESULT_CAP)
            .collect()
    }

    pub fn get(&self, id: &EntityId) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn delete_entity(&mut self, id: &EntityId) -> bool {
        self.entities.remove(id).is_some()
    }

    /// Registers the subscription; takes effect on the next upsert, past
    /// changes are never replayed.
    pub fn subscribe(&mut self, sub: Subscription) -> Result<(), RegistryError> {
        sub.selector.validate().map_err(RegistryError::BadSelector)?;
        if self.subscriptions.contains_key(&sub.id) {
            return Err(RegistryError::DuplicateSubscription);
        }
        self.subscriptions.insert(sub.id.clone(), sub);
        Ok(())
    }

    pub fn unsubscribe(&mut self, id: &str) -> bool {
        self.subscriptions.remove(id).is_some()
    }

    pub fn subscription(&self, id: &str) -> Option<&Subscription> {
        self.subscriptions.get(id)
    }

    pub fn register_source(&mut self, r: Registration) -> Result<(), RegistryError> {
        r.selector.validate().map_err(RegistryError::BadSelector)?;
        if r.provider.is_empty() {
            return Err(RegistryError::EmptyProvider);
        }
        if self.registrations.contains_key(&r.id) {
            return Err(RegistryError::DuplicateRegistration);
        }
        self.registrations.insert(r.id.clone(), r);
        Ok(())
    }

    pub fn registrations(&self) -> impl Iterator<Item = &Registration> {
        self.registrations.values()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }
}

/// Retry schedule shared by notification delivery and edge-sync drains:
/// base 100 ms, factor 2.
pub const BACKOFF_BASE_MS: i64 = 100;
pub const MAX_DELIVERY_ATTEMPTS: u32 = 5;

/// Delay after the `attempts_so_far`-th failed attempt (1-based).
pub fn backoff_delay_ms(attempts_so_far: u32) -> i64 {
    BACKOFF_BASE_MS << (attempts_so_far.saturating_sub(1)).min(16)
}

#[derive(Clone, Debug)]
pub struct DeliveryJob {
    pub job: u64,
    pub notification: Notification,
    pub endpoint: Endpoint,
    pub attempts: u32,
    not_before: Timestamp,
}

#[derive(Clone, Debug)]
pub struct DeadLetter {
    pub subscription_id: String,
    pub sequence: u64,
    pub endpoint: Endpoint,
    pub attempts: u32,
    /// Payload preserved for the log.
    pub body: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeliveryDisposition {
    Delivered,
    RetryAt(Timestamp),
    DeadLettered,
}

/// At-least-once delivery state machine; the host supplies the clock and
/// performs the actual sends.
#[derive(Default, Debug)]
pub struct DeliveryQueue {
    pending: VecDeque<DeliveryJob>,
    dead: Vec<DeadLetter>,
    next_job: u64,
}

impl DeliveryQueue {
    pub fn new() -> Self {
        DeliveryQueue::default()
    }

    pub fn push(&mut self, notification: Notification, endpoint: Endpoint, now: Timestamp) {
        self.next_job += 1;
        self.pending.push_back(DeliveryJob {
            job: self.next_job,
            notification,
            endpoint,
            attempts: 0,
            not_before: now,
        });
    }

    /// Pop the first job whose retry time has come, FIFO among due jobs.
    pub fn next_due(&mut self, now: Timestamp) -> Option<DeliveryJob> {
        let idx = self.pending.iter().position(|j| j.not_before <= now)?;
        self.pending.remove(idx)
    }

    /// Report the result of one attempted send.
    pub fn record_result(
        &mut self,
        mut job: DeliveryJob,
        delivered: bool,
        now: Timestamp,
    ) -> DeliveryDisposition {
        job.attempts += 1;
        if delivered {
            return DeliveryDisposition::Delivered;
        }
        if job.attempts >= MAX_DELIVERY_ATTEMPTS {
            self.dead.push(DeadLetter {
                subscription_id: job.notification.subscription_id.clone(),
                sequence: job.notification.sequence,
                endpoint: job.endpoint,
                attempts: job.attempts,
                body: job.notification.body(),
            });
            return DeliveryDisposition::DeadLettered;
        }
        let at = now.add_millis(backoff_delay_ms(job.attempts));
        job.not_before = at;
        self.pending.push_back(job);
        DeliveryDisposition::RetryAt(at)
    }

    pub fn next_wakeup(&self) -> Option<Timestamp> {
        self.pending.iter().map(|j| j.not_before).min()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn dead_letters(&self) -> &[DeadLetter] {
        &self.dead
    }
}
