//! One node's mutable core: broker, history, device registry, pipelines
//! and the edge forward buffer, advanced atomically per ingested patch.
//!
//! `apply_cascade` is the single write path: an upsert's notifications fan
//! out to the history sink, the pipelines and the sync capture in-process,
//! and any patches the pipelines emit are applied in the same atomic step,
//! so downstream state can never observe a half-applied tick.

use std::collections::VecDeque;

use cogplant_core::agents::DeviceRegistry;
use cogplant_core::broker::{Broker, Endpoint, Notification, Registration, UpsertError};
use cogplant_core::history::{SeriesPoint, SeriesStore};
use cogplant_core::model::Patch;
use cogplant_core::pipeline::{Alert, Effect, Pipeline};
use cogplant_core::sync::{capture, ForwardBuffer};
use cogplant_core::time::Timestamp;

/// Where pipeline alerts go besides the scenario report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AlertRoute {
    /// Upsert an `Alert`-typed entity into the local broker.
    Broker,
    /// POST the alert JSON to an endpoint (handled by the node runtime).
    Http(String),
    Both(String),
}

pub const HISTORY_CHANNEL: &str = "history";
pub const SYNC_CHANNEL: &str = "sync";
pub const PIPELINE_CHANNEL_PREFIX: &str = "pipeline:";

/// Safety bound on pipeline-written patches triggered by one ingest.
const MAX_CASCADE_STEPS: usize = 1000;

pub struct CoreState {
    pub broker: Broker,
    pub history: SeriesStore,
    pub registry: DeviceRegistry,
    pub pipelines: Vec<Pipeline>,
    pub sync_buffer: Option<ForwardBuffer>,
    pub alerts: Vec<Alert>,
    pub alert_route: AlertRoute,
    alert_seq: u64,
    pub cascade_overflows: u64,
}

/// Everything a cascade produced that the caller must route onward.
#[derive(Debug, Default)]
pub struct CascadeOutcome {
    pub created: bool,
    /// Notifications aimed at HTTP subscription endpoints.
    pub http_notifications: Vec<(Notification, String)>,
    /// Alerts raised this step (also retained in `CoreState::alerts`).
    pub alerts: Vec<Alert>,
    /// History points appended this step, for persistence.
    pub appended_points: Vec<SeriesPoint>,
}

impl CoreState {
    pub fn new(alert_route: AlertRoute) -> Self {
        CoreState {
            broker: Broker::new(),
            history: SeriesStore::new(),
            registry: DeviceRegistry::new(),
            pipelines: Vec::new(),
            sync_buffer: None,
            alerts: Vec::new(),
            alert_route,
            alert_seq: 0,
            cascade_overflows: 0,
        }
    }

    /// Apply one patch and everything it triggers. The first upsert's
    /// error propagates; errors from pipeline-written patches only count.
    pub fn apply_cascade(
        &mut self,
        patch: Patch,
        clock: Timestamp,
    ) -> Result<CascadeOutcome, UpsertError> {
        let mut outcome = CascadeOutcome::default();
        let mut queue = VecDeque::new();
        queue.push_back(patch);
        let mut first = true;
        let mut steps = 0usize;
        while let Some(next) = queue.pop_front() {
            steps += 1;
            if steps > MAX_CASCADE_STEPS {
                self.cascade_overflows += 1;
                break;
            }
            let upsert = match self.broker.upsert(next, clock) {
                Ok(u) => u,
                Err(e) if first => return Err(e),
                Err(_) => {
                    self.cascade_overflows += 1;
                    continue;
                }
            };
            if first {
                outcome.created = upsert.created;
                first = false;
            }
            for n in upsert.notifications {
                self.route_notification(n, clock, &mut queue, &mut outcome);
            }
        }
        Ok(outcome)
    }

    fn route_notification(
        &mut self,
        n: Notification,
        clock: Timestamp,
        queue: &mut VecDeque<Patch>,
        outcome: &mut CascadeOutcome,
    ) {
        let endpoint = match self.broker.subscription(&n.subscription_id) {
            Some(s) => s.endpoint.clone(),
            None => return,
        };
        match endpoint {
            Endpoint::Http(url) => outcome.http_notifications.push((n, url)),
            Endpoint::Internal(channel) => {
                if channel == HISTORY_CHANNEL {
                    let before = self.history.len();
                    self.history.ingest(&n);
                    for p in &self.history.log()[before..] {
                        outcome.appended_points.push(p.clone());
                    }
                } else if channel == SYNC_CHANNEL {
                    if let Some(buffer) = &mut self.sync_buffer {
                        let registrations: Vec<Registration> =
                            self.broker.registrations().cloned().collect();
                        capture(buffer, &registrations, &n);
                    }
                } else if let Some(pipeline_id) = channel.strip_prefix(PIPELINE_CHANNEL_PREFIX) {
                    let Some(pipeline) = self
                        .pipelines
                        .iter_mut()
                        .find(|p| p.spec.id == pipeline_id)
                    else {
                        return;
                    };
                    for effect in pipeline.run_tick(&n) {
                        match effect {
                            Effect::Upsert(p) => queue.push_back(p),
                            Effect::Alert(alert) => {
                                self.alert_seq += 1;
                                if matches!(self.alert_route, AlertRoute::Broker | AlertRoute::Both(_))
                                {
                                    queue.push_back(alert.to_patch(self.alert_seq));
                                }
                                self.alerts.push(alert.clone());
                                outcome.alerts.push(alert);
                            }
                        }
                    }
                }
                let _ = clock;
            }
        }
    }

    /// Wire a pipeline: store the instance and subscribe it to its source.
    pub fn add_pipeline(&mut self, pipeline: Pipeline) -> Result<(), cogplant_core::broker::RegistryError> {
        let channel = format!("{PIPELINE_CHANNEL_PREFIX}{}", pipeline.spec.id);
        self.broker.subscribe(cogplant_core::broker::Subscription::new(
            channel.clone(),
            pipeline.spec.source.selector.clone(),
            0,
            Endpoint::Internal(channel),
        ))?;
        self.pipelines.push(pipeline);
        Ok(())
    }

    pub fn total_pipeline_drops(&self) -> u64 {
        self.pipelines.iter().map(|p| p.drop_count()).sum()
    }
}
