//! Declarative pipelines of windowed processors over broker change
//! streams, plus batch model fitting.
//!
//! Streaming side ("fast"): thresholds, EWMA, sliding stats, z-score
//! detection, rate of change, soft sensors. Batch side ("slow"): ordinary
//! least squares whose coefficients deploy directly as a soft-sensor
//! processor, closing the loop between the two.
//!
//! Warm-up emits nothing rather than partial statistics; spurious alerts at
//! pipeline start are the dominant false-positive source.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::broker::Notification;
use crate::json::{self, Json};
use crate::mathx;
use crate::model::{match_selector, Attribute, EntityId, EntitySelector, Patch};
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Above,
    Below,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProcessorSpec {
    /// Alert when the value crosses `limit`; the value passes through.
    Threshold { limit: f64, direction: Direction },
    /// `y_t = alpha * x + (1 - alpha) * y_{t-1}`, seeded with the first x.
    Ewma { alpha: f64 },
    /// Mean of the last `<= n` values.
    SlidingStats { n: usize },
    /// z-score of x against the previous `n` values; sample standard
    /// deviation floored at `epsilon`, alert when `|z| > k`.
    ZScoreDetector { n: usize, k: f64, epsilon: f64 },
    /// First difference per second of the source timestamps.
    RateOfChange,
    /// `y = intercept + sum(coefficient * latest(attribute))`, joined on
    /// the latest value per input attribute. Only valid as first processor.
    SoftSensor {
        intercept: f64,
        terms: Vec<(String, f64)>,
    },
}

impl ProcessorSpec {
    fn kind_name(&self) -> &'static str {
        match self {
            ProcessorSpec::Threshold { .. } => "Threshold",
            ProcessorSpec::Ewma { .. } => "Ewma",
            ProcessorSpec::SlidingStats { .. } => "SlidingStats",
            ProcessorSpec::ZScoreDetector { .. } => "ZScoreDetector",
            ProcessorSpec::RateOfChange => "RateOfChange",
            ProcessorSpec::SoftSensor { .. } => "SoftSensor",
        }
    }

    pub fn initial_state(&self) -> ProcessorState {
        match self {
            ProcessorSpec::Threshold { .. } => ProcessorState::Stateless,
            ProcessorSpec::Ewma { .. } => ProcessorState::Ewma { prev: None },
            ProcessorSpec::SlidingStats { .. } | ProcessorSpec::ZScoreDetector { .. } => {
                ProcessorState::Window {
                    values: VecDeque::new(),
                }
            }
            ProcessorSpec::RateOfChange => ProcessorState::Rate { prev: None },
            ProcessorSpec::SoftSensor { .. } => ProcessorState::Latest {
                values: BTreeMap::new(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProcessorState {
    Stateless,
    Ewma { prev: Option<f64> },
    Window { values: VecDeque<f64> },
    Rate { prev: Option<(f64, Timestamp)> },
    Latest { values: BTreeMap<String, f64> },
}

/// Result of one processor step: a value to pass on, an optional alert
/// score, or a dropped sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub output: Option<f64>,
    pub alert: Option<f64>,
    pub dropped: bool,
}

impl StepOutcome {
    fn value(v: f64) -> Self {
        StepOutcome {
            output: Some(v),
            alert: None,
            dropped: false,
        }
    }

    fn silent() -> Self {
        StepOutcome {
            output: None,
            alert: None,
            dropped: false,
        }
    }

    fn dropped() -> Self {
        StepOutcome {
            output: None,
            alert: None,
            dropped: true,
        }
    }
}

fn mean(values: &VecDeque<f64>) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &VecDeque<f64>, mu: f64) -> f64 {
    let ss: f64 = values.iter().map(|v| (v - mu) * (v - mu)).sum();
    mathx::sqrt(ss / (values.len() - 1) as f64)
}

/// Advance one processor by one sample. Pure in (state, spec, x, t);
/// non-finite samples are dropped with the state untouched.
pub fn step(state: &mut ProcessorState, spec: &ProcessorSpec, x: f64, t: Timestamp) -> StepOutcome {
    if !x.is_finite() {
        return StepOutcome::dropped();
    }
    match (spec, state) {
        (ProcessorSpec::Threshold { limit, direction }, ProcessorState::Stateless) => {
            let crossed = match direction {
                Direction::Above => x > *limit,
                Direction::Below => x < *limit,
            };
            StepOutcome {
                output: Some(x),
                alert: crossed.then_some(x),
                dropped: false,
            }
        }
        (ProcessorSpec::Ewma { alpha }, ProcessorState::Ewma { prev }) => {
            let y = match *prev {
                None => x,
                Some(p) => alpha * x + (1.0 - alpha) * p,
            };
            *prev = Some(y);
            StepOutcome::value(y)
        }
        (ProcessorSpec::SlidingStats { n }, ProcessorState::Window { values }) => {
            values.push_back(x);
            if values.len() > *n {
                values.pop_front();
            }
            StepOutcome::value(mean(values))
        }
        (ProcessorSpec::ZScoreDetector { n, k, epsilon }, ProcessorState::Window { values }) => {
            if values.len() < *n {
                values.push_back(x);
                return StepOutcome::silent();
            }
            let mu = mean(values);
            let s = sample_std(values, mu);
            let z = (x - mu) / s.max(*epsilon);
            values.push_back(x);
            values.pop_front();
            StepOutcome {
                output: Some(x),
                alert: (mathx::abs(z) > *k).then_some(z),
                dropped: false,
            }
        }
        (ProcessorSpec::RateOfChange, ProcessorState::Rate { prev }) => {
            let out = match *prev {
                Some((px, pt)) => {
                    let dt = (t.millis() - pt.millis()) as f64 / 1000.0;
                    (dt > 0.0).then(|| (x - px) / dt)
                }
                None => None,
            };
            *prev = Some((x, t));
            match out {
                Some(v) => StepOutcome::value(v),
                None => StepOutcome::silent(),
            }
        }
        (ProcessorSpec::SoftSensor { intercept, terms }, ProcessorState::Latest { values }) => {
            let mut y = *intercept;
            for (attr, coef) in terms {
                match values.get(attr) {
                    Some(v) => y += coef * v,
                    None => return StepOutcome::silent(),
                }
            }
            if y.is_finite() {
                StepOutcome::value(y)
            } else {
                StepOutcome::dropped()
            }
        }
        _ => unreachable!("state constructed from spec"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpec {
    pub selector: EntitySelector,
    pub attribute: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SinkSpec {
    WriteAttribute {
        entity_id: EntityId,
        entity_type: String,
        attribute: String,
    },
    EmitAlert {
        alert_type: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSpec {
    pub id: String,
    pub source: SourceSpec,
    pub processors: Vec<ProcessorSpec>,
    pub sink: SinkSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecError(pub String);

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parse and validate the JSON pipeline format.
pub fn parse_spec(bytes: &[u8]) -> Result<PipelineSpec, SpecError> {
    let v = json::parse(bytes).map_err(|e| SpecError(format!("{e}")))?;
    spec_from_json(&v)
}

pub fn spec_from_json(v: &Json) -> Result<PipelineSpec, SpecError> {
    let id = v
        .get("id")
        .and_then(Json::as_str)
        .ok_or(SpecError("id missing".into()))?
        .to_string();
    if id.is_empty() {
        return Err(SpecError("id empty".into()));
    }
    let source = v.get("source").ok_or(SpecError("source missing".into()))?;
    let attribute = source
        .get("attribute")
        .and_then(Json::as_str)
        .ok_or(SpecError("source.attribute missing".into()))?
        .to_string();
    let selector = EntitySelector {
        entity_type: source
            .get("entityType")
            .and_then(Json::as_str)
            .map(String::from),
        id_pattern: source
            .get("idPattern")
            .and_then(Json::as_str)
            .map(String::from),
        watched: [attribute.clone()].into(),
    };
    selector
        .validate()
        .map_err(|e| SpecError(format!("source selector: {e}")))?;

    let processors_json = v
        .get("processors")
        .and_then(Json::as_arr)
        .ok_or(SpecError("processors missing".into()))?;
    if processors_json.is_empty() {
        return Err(SpecError("processors empty".into()));
    }
    let mut processors = Vec::new();
    for (i, p) in processors_json.iter().enumerate() {
        let spec = processor_from_json(p)?;
        if matches!(spec, ProcessorSpec::SoftSensor { .. }) && i != 0 {
            return Err(SpecError("soft-sensor-not-first".into()));
        }
        processors.push(spec);
    }

    let sink_json = v.get("sink").ok_or(SpecError("sink missing".into()))?;
    let sink = match sink_json.get("kind").and_then(Json::as_str) {
        Some("EmitAlert") => SinkSpec::EmitAlert {
            alert_type: sink_json
                .get("alertType")
                .and_then(Json::as_str)
                .ok_or(SpecError("sink.alertType missing".into()))?
                .to_string(),
        },
        Some("WriteAttribute") => SinkSpec::WriteAttribute {
            entity_id: EntityId::new(
                sink_json
                    .get("entityId")
                    .and_then(Json::as_str)
                    .ok_or(SpecError("sink.entityId missing".into()))?,
            ),
            entity_type: sink_json
                .get("entityType")
                .and_then(Json::as_str)
                .ok_or(SpecError("sink.entityType missing".into()))?
                .to_string(),
            attribute: sink_json
                .get("attribute")
                .and_then(Json::as_str)
                .ok_or(SpecError("sink.attribute missing".into()))?
                .to_string(),
        },
        _ => return Err(SpecError("unknown sink kind".into())),
    };

    Ok(PipelineSpec {
        id,
        source: SourceSpec {
            selector,
            attribute,
        },
        processors,
        sink,
    })
}

fn processor_from_json(p: &Json) -> Result<ProcessorSpec, SpecError> {
    let num = |k: &str| -> Result<f64, SpecError> {
        p.get(k)
            .and_then(Json::as_f64)
            .ok_or(SpecError(format!("{k} missing or not a number")))
    };
    match p.get("kind").and_then(Json::as_str) {
        Some("Threshold") => {
            let direction = match p.get("direction").and_then(Json::as_str) {
                Some("above") | None => Direction::Above,
                Some("below") => Direction::Below,
                Some(other) => return Err(SpecError(format!("bad direction {other}"))),
            };
            Ok(ProcessorSpec::Threshold {
                limit: num("limit")?,
                direction,
            })
        }
        Some("Ewma") => {
            let alpha = num("alpha")?;
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(SpecError("alpha-out-of-range".into()));
            }
            Ok(ProcessorSpec::Ewma { alpha })
        }
        Some("SlidingStats") => {
            let n = num("n")? as usize;
            if n < 2 {
                return Err(SpecError("n-too-small".into()));
            }
            Ok(ProcessorSpec::SlidingStats { n })
        }
        Some("ZScoreDetector") => {
            let n = num("n")? as usize;
            let k = num("k")?;
            let epsilon = num("epsilon")?;
            if n < 2 {
                return Err(SpecError("n-too-small".into()));
            }
            if k <= 0.0 {
                return Err(SpecError("k-out-of-range".into()));
            }
            if epsilon <= 0.0 {
                return Err(SpecError("epsilon-out-of-range".into()));
            }
            Ok(ProcessorSpec::ZScoreDetector { n, k, epsilon })
        }
        Some("RateOfChange") => Ok(ProcessorSpec::RateOfChange),
        Some("SoftSensor") => {
            let intercept = num("intercept")?;
            let terms_json = p
                .get("terms")
                .and_then(Json::as_arr)
                .ok_or(SpecError("terms missing".into()))?;
            let mut terms = Vec::new();
            for t in terms_json {
                let attr = t
                    .get("attribute")
                    .and_then(Json::as_str)
                    .ok_or(SpecError("term attribute missing".into()))?;
                let coef = t
                    .get("coefficient")
                    .and_then(Json::as_f64)
                    .ok_or(SpecError("term coefficient missing".into()))?;
                terms.push((attr.to_string(), coef));
            }
            if terms.is_empty() {
                return Err(SpecError("terms empty".into()));
            }
            Ok(ProcessorSpec::SoftSensor { intercept, terms })
        }
        Some(other) => Err(SpecError(format!("unknown kind {other}"))),
        None => Err(SpecError("kind missing".into())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alert {
    pub pipeline_id: String,
    pub alert_type: String,
    pub entity_id: EntityId,
    pub attribute: String,
    pub observed_at: Timestamp,
    pub score: f64,
    pub details: String,
}

impl Alert {
    pub fn to_json(&self) -> Json {
        Json::Obj(alloc::vec![
            ("pipelineId".to_string(), Json::str(self.pipeline_id.clone())),
            ("alertType".to_string(), Json::str(self.alert_type.clone())),
            ("entityId".to_string(), Json::str(self.entity_id.as_str())),
            ("attribute".to_string(), Json::str(self.attribute.clone())),
            ("observedAt".to_string(), Json::str(self.observed_at.format())),
            ("score".to_string(), Json::Num(self.score)),
            ("details".to_string(), Json::str(self.details.clone())),
        ])
    }

    /// Alert as an `Alert`-typed entity patch for broker upsert.
    pub fn to_patch(&self, sequence: u64) -> Patch {
        Patch::new(
            EntityId::new(format!("urn:cap:Alert:{}-{sequence}", self.pipeline_id)),
            "Alert",
        )
        .with_change(
            "alertType",
            Attribute::string(self.alert_type.clone()).at(self.observed_at),
        )
        .with_change("score", Attribute::number(self.score).at(self.observed_at))
        .with_change(
            "sourceEntity",
            Attribute::relationship(self.entity_id.clone()).at(self.observed_at),
        )
        .with_change(
            "sourceAttribute",
            Attribute::string(self.attribute.clone()).at(self.observed_at),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    Upsert(Patch),
    Alert(Alert),
}

/// One running pipeline instance: spec plus per-processor state.
#[derive(Debug)]
pub struct Pipeline {
    pub spec: PipelineSpec,
    states: Vec<ProcessorState>,
    drop_count: u64,
}

impl Pipeline {
    pub fn new(spec: PipelineSpec) -> Self {
        let states = spec.processors.iter().map(|p| p.initial_state()).collect();
        Pipeline {
            spec,
            states,
            drop_count: 0,
        }
    }

    pub fn drop_count(&self) -> u64 {
        self.drop_count
    }

    /// Feed one notification through the processor chain. Deterministic
    /// given the ordered notification sequence.
    pub fn run_tick(&mut self, n: &Notification) -> Vec<Effect> {
        if !match_selector(&self.spec.source.selector, &n.entity, &n.changed) {
            return Vec::new();
        }
        let Some(attr) = n.entity.attrs.get(&self.spec.source.attribute) else {
            return Vec::new(); // source attribute absent: tick skipped
        };
        let Some(x) = attr.numeric_value() else {
            return Vec::new();
        };
        let observed_at = attr.observed_at.unwrap_or(n.fired_at);

        // soft sensors join on the latest notified value per input
        for (state, spec) in self.states.iter_mut().zip(&self.spec.processors) {
            if let (ProcessorState::Latest { values }, ProcessorSpec::SoftSensor { terms, .. }) =
                (state, spec)
            {
                for (attr_name, _) in terms {
                    if let Some(v) = n.entity.attrs.get(attr_name).and_then(|a| a.numeric_value())
                    {
                        values.insert(attr_name.clone(), v);
                    }
                }
            }
        }

        let mut value = x;
        let mut alert_score: Option<(f64, &'static str)> = None;
        let mut completed = true;
        for (state, spec) in self.states.iter_mut().zip(&self.spec.processors) {
            let outcome = step(state, spec, value, observed_at);
            if outcome.dropped {
                self.drop_count += 1;
                return Vec::new();
            }
            if alert_score.is_none() {
                if let Some(score) = outcome.alert {
                    alert_score = Some((score, spec.kind_name()));
                }
            }
            match outcome.output {
                Some(v) => value = v,
                None => {
                    completed = false;
                    break;
                }
            }
        }

        let mut effects = Vec::new();
        match &self.spec.sink {
            SinkSpec::EmitAlert { alert_type } => {
                if let Some((score, kind)) = alert_score {
                    effects.push(Effect::Alert(Alert {
                        pipeline_id: self.spec.id.clone(),
                        alert_type: alert_type.clone(),
                        entity_id: n.entity.id.clone(),
                        attribute: self.spec.source.attribute.clone(),
                        observed_at,
                        score,
                        details: format!("{kind} score {score}"),
                    }));
                }
            }
            SinkSpec::WriteAttribute {
                entity_id,
                entity_type,
                attribute,
            } => {
                if completed {
                    effects.push(Effect::Upsert(
                        Patch::new(entity_id.clone(), entity_type.clone())
                            .with_change(attribute.clone(), Attribute::number(value).at(observed_at)),
                    ));
                }
            }
        }
        effects
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    /// `b0..bm`: intercept first, then one coefficient per input.
    pub coefficients: Vec<f64>,
    pub inputs: Vec<String>,
    pub target: String,
    pub residual_rmse: f64,
    pub fitted_at: Timestamp,
    pub sample_count: usize,
}

impl FittedModel {
    /// Deploy the fit as a streaming soft sensor (the slow-to-fast handoff).
    pub fn to_soft_sensor(&self) -> ProcessorSpec {
        ProcessorSpec::SoftSensor {
            intercept: self.coefficients[0],
            terms: self
                .inputs
                .iter()
                .cloned()
                .zip(self.coefficients[1..].iter().copied())
                .collect(),
        }
    }

    pub fn to_json(&self) -> Json {
        Json::Obj(alloc::vec![
            (
                "coefficients".to_string(),
                Json::Arr(self.coefficients.iter().map(|c| Json::Num(*c)).collect()),
            ),
            (
                "inputs".to_string(),
                Json::Arr(self.inputs.iter().map(|i| Json::str(i.clone())).collect()),
            ),
            ("target".to_string(), Json::str(self.target.clone())),
            ("residualRmse".to_string(), Json::Num(self.residual_rmse)),
            ("fittedAt".to_string(), Json::str(self.fitted_at.format())),
            ("sampleCount".to_string(), Json::Num(self.sample_count as f64)),
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FitError {
    TooFewSamples,
    DimensionMismatch,
    /// Pivot below 1e-10 during elimination.
    DegenerateDesign,
}

impl fmt::Display for FitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitError::TooFewSamples => f.write_str("too-few-samples"),
            FitError::DimensionMismatch => f.write_str("dimension-mismatch"),
            FitError::DegenerateDesign => f.write_str("degenerate-design"),
        }
    }
}

const PIVOT_FLOOR: f64 = 1e-10;

/// Ordinary least squares via normal equations with Gaussian elimination
/// and partial pivoting.
pub fn fit_linear(
    rows: &[(Vec<f64>, f64)],
    inputs: &[String],
    target: &str,
    fitted_at: Timestamp,
) -> Result<FittedModel, FitError> {
    let m = inputs.len();
    if rows.iter().any(|(x, _)| x.len() != m) {
        return Err(FitError::DimensionMismatch);
    }
    let dim = m + 1;
    if rows.len() < dim {
        return Err(FitError::TooFewSamples);
    }

    // normal equations: (X^T X) b = X^T y with X = [1 | x1 .. xm]
    let mut a = alloc::vec![alloc::vec![0.0f64; dim]; dim];
    let mut rhs = alloc::vec![0.0f64; dim];
    for (x, y) in rows {
        let mut xi = alloc::vec![1.0f64; dim];
        xi[1..].copy_from_slice(x);
        for r in 0..dim {
            for c in 0..dim {
                a[r][c] += xi[r] * xi[c];
            }
            rhs[r] += xi[r] * y;
        }
    }

    let b = solve_with_partial_pivoting(&mut a, &mut rhs)?;

    let mut ss = 0.0;
    for (x, y) in rows {
        let mut pred = b[0];
        for (i, v) in x.iter().enumerate() {
            pred += b[i + 1] * v;
        }
        let r = y - pred;
        ss += r * r;
    }
    Ok(FittedModel {
        coefficients: b,
        inputs: inputs.to_vec(),
        target: target.to_string(),
        residual_rmse: mathx::sqrt(ss / rows.len() as f64),
        fitted_at,
        sample_count: rows.len(),
    })
}

fn solve_with_partial_pivoting(
    a: &mut Vec<Vec<f64>>,
    rhs: &mut Vec<f64>,
) -> Result<Vec<f64>, FitError> {
    let dim = rhs.len();
    for col in 0..dim {
        let pivot_row = (col..dim)
            .max_by(|&r1, &r2| {
                mathx::abs(a[r1][col])
                    .partial_cmp(&mathx::abs(a[r2][col]))
                    .expect("finite pivots")
            })
            .expect("non-empty range");
        if mathx::abs(a[pivot_row][col]) < PIVOT_FLOOR {
            return Err(FitError::DegenerateDesign);
        }
        a.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        for row in col + 1..dim {
            let factor = a[row][col] / a[col][col];
            for c in col..dim {
                a[row][c] -= factor * a[col][c];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut b = alloc::vec![0.0f64; dim];
    for row in (0..dim).rev() {
        let mut acc = rhs[row];
        for c in row + 1..dim {
            acc -= a[row][c] * b[c];
        }
        b[row] = acc / a[row][row];
    }
    Ok(b)
}
