//! Subscription-driven historical store: appends numeric attribute changes
//! as time series, answers range/aggregation queries and computes KPIs.
//!
//! The store is an append-only log plus an in-memory index. The dedupe key
//! `(entityId, attribute, observedAt)` equals the merge tie key, so
//! at-least-once delivery from the broker is harmless here.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::broker::Notification;
use crate::json::Json;
use crate::model::EntityId;
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPoint {
    pub entity_id: EntityId,
    pub attribute: String,
    pub observed_at: Timestamp,
    pub value: f64,
    pub unit: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Agg {
    Raw,
    Min,
    Max,
    Avg,
    Sum,
    Count,
}

impl Agg {
    pub fn parse(s: &str) -> Option<Agg> {
        match s {
            "raw" => Some(Agg::Raw),
            "min" => Some(Agg::Min),
            "max" => Some(Agg::Max),
            "avg" => Some(Agg::Avg),
            "sum" => Some(Agg::Sum),
            "count" => Some(Agg::Count),
            _ => None,
        }
    }
}

/// Half-open window `[from, to)`; `bucket` divides it starting at `from`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesQuery {
    pub entity_id: EntityId,
    pub attribute: String,
    pub from: Timestamp,
    pub to: Timestamp,
    pub agg: Agg,
    pub bucket_ms: Option<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub start: Timestamp,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SeriesResult {
    Points(Vec<SeriesPoint>),
    Buckets(Vec<Bucket>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QueryError {
    /// `from >= to`.
    EmptyWindow,
    BadBucket,
}

impl fmt::Display for QueryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryError::EmptyWindow => f.write_str("empty-window"),
            QueryError::BadBucket => f.write_str("bad-bucket"),
        }
    }
}

#[derive(Default, Debug)]
pub struct SeriesStore {
    log: Vec<SeriesPoint>,
    index: BTreeMap<(EntityId, String), BTreeMap<Timestamp, usize>>,
}

impl SeriesStore {
    pub fn new() -> Self {
        SeriesStore::default()
    }

    /// Appends one point per numeric changed attribute; duplicates by
    /// `(entityId, attribute, observedAt)` are silently ignored.
    pub fn ingest(&mut self, n: &Notification) -> usize {
        let mut appended = 0;
        for name in &n.changed {
            let Some(attr) = n.entity.attrs.get(name) else {
                continue;
            };
            let Some(value) = attr.numeric_value() else {
                continue; // only numeric properties are historized
            };
            let Some(observed_at) = attr.observed_at else {
                continue;
            };
            if self.append_point(SeriesPoint {
                entity_id: n.entity.id.clone(),
                attribute: name.clone(),
                observed_at,
                value,
                unit: attr.unit.clone(),
            }) {
                appended += 1;
            }
        }
        appended
    }

    /// Returns false when the dedupe key already exists.
    pub fn append_point(&mut self, p: SeriesPoint) -> bool {
        let key = (p.entity_id.clone(), p.attribute.clone());
        let series = self.index.entry(key).or_default();
        if series.contains_key(&p.observed_at) {
            return false;
        }
        series.insert(p.observed_at, self.log.len());
        self.log.push(p);
        true
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    pub fn log(&self) -> &[SeriesPoint] {
        &self.log
    }

    fn range(
        &self,
        entity_id: &EntityId,
        attribute: &str,
        from: Timestamp,
        to: Timestamp,
    ) -> Vec<&SeriesPoint> {
        match self.index.get(&(entity_id.clone(), attribute.to_string())) {
            Some(series) => series.range(from..to).map(|(_, &i)| &self.log[i]).collect(),
            None => Vec::new(),
        }
    }

    pub fn query(&self, q: &SeriesQuery) -> Result<SeriesResult, QueryError> {
        if q.from >= q.to {
            return Err(QueryError::EmptyWindow);
        }
        let points = self.range(&q.entity_id, &q.attribute, q.from, q.to);
        if q.agg == Agg::Raw {
            return Ok(SeriesResult::Points(points.into_iter().cloned().collect()));
        }
        let bucket_ms = match q.bucket_ms {
            Some(b) if b > 0 => b,
            Some(_) => return Err(QueryError::BadBucket),
            // no bucket: one aggregate over the whole window
            None => q.to.millis() - q.from.millis(),
        };
        // points arrive ascending; group by bucket index, fold in order
        let mut buckets: Vec<(i64, AggState)> = Vec::new();
        for p in points {
            let idx = (p.observed_at.millis() - q.from.millis()) / bucket_ms;
            match buckets.last_mut() {
                Some((last_idx, state)) if *last_idx == idx => state.push(p.value),
                _ => {
                    let mut state = AggState::new();
                    state.push(p.value);
                    buckets.push((idx, state));
                }
            }
        }
        Ok(SeriesResult::Buckets(
            buckets
                .into_iter()
                .map(|(idx, state)| Bucket {
                    start: Timestamp::from_millis(q.from.millis() + idx * bucket_ms),
                    value: state.finish(q.agg),
                })
                .collect(),
        ))
    }

    /// Ascending-order sum over the window; used by KPI formulas.
    pub fn window_sum(
        &self,
        entity_id: &EntityId,
        attribute: &str,
        from: Timestamp,
        to: Timestamp,
    ) -> f64 {
        self.range(entity_id, attribute, from, to)
            .iter()
            .fold(0.0, |acc, p| acc + p.value)
    }

    pub fn compute_kpi(
        &self,
        name: KpiName,
        from: Timestamp,
        to: Timestamp,
        bindings: &BTreeMap<String, (EntityId, String)>,
    ) -> Result<KpiReport, KpiError> {
        if from >= to {
            return Err(KpiError::EmptyWindow);
        }
        let mut sums = BTreeMap::new();
        let mut inputs = BTreeMap::new();
        for role in name.required_roles() {
            let (entity_id, attribute) = bindings
                .get(*role)
                .ok_or(KpiError::MissingBinding { role })?;
            let sum = self.window_sum(entity_id, attribute, from, to);
            sums.insert(*role, sum);
            inputs.insert(
                role.to_string(),
                KpiInput {
                    entity_id: entity_id.clone(),
                    attribute: attribute.clone(),
                    aggregate: "sum",
                    value: sum,
                },
            );
        }
        let value = match name {
            KpiName::EnergyPerUnit => ratio(sums["energy"], sums["output"])?,
            KpiName::WastePercentage => 100.0 * ratio(sums["waste"], sums["total"])?,
            KpiName::DefectRatio => ratio(sums["defects"], sums["produced"])?,
            KpiName::Productivity => ratio(sums["output"], sums["hours"])?,
        };
        if !value.is_finite() {
            return Err(KpiError::Undefined);
        }
        Ok(KpiReport {
            name,
            from,
            to,
            value,
            inputs,
        })
    }
}

fn ratio(num: f64, den: f64) -> Result<f64, KpiError> {
    if den == 0.0 {
        return Err(KpiError::Undefined);
    }
    Ok(num / den)
}

struct AggState {
    min: f64,
    max: f64,
    sum: f64,
    count: u64,
}

impl AggState {
    fn new() -> Self {
        AggState {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            sum: 0.0,
            count: 0,
        }
    }

    fn push(&mut self, v: f64) {
        if v < self.min {
            self.min = v;
        }
        if v > self.max {
            self.max = v;
        }
        self.sum += v;
        self.count += 1;
    }

    fn finish(&self, agg: Agg) -> f64 {
        match agg {
            Agg::Min => self.min,
            Agg::Max => self.max,
            Agg::Sum => self.sum,
            Agg::Count => self.count as f64,
            Agg::Avg => self.sum / self.count as f64,
            Agg::Raw => unreachable!("raw handled by caller"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KpiName {
    EnergyPerUnit,
    WastePercentage,
    DefectRatio,
    Productivity,
}

impl KpiName {
    pub fn required_roles(self) -> &'static [&'static str] {
        match self {
            KpiName::EnergyPerUnit => &["energy", "output"],
            KpiName::WastePercentage => &["waste", "total"],
            KpiName::DefectRatio => &["defects", "produced"],
            KpiName::Productivity => &["output", "hours"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KpiName::EnergyPerUnit => "energy_per_unit",
            KpiName::WastePercentage => "waste_percentage",
            KpiName::DefectRatio => "defect_ratio",
            KpiName::Productivity => "productivity",
        }
    }

    pub fn parse(s: &str) -> Option<KpiName> {
        match s {
            "energy_per_unit" => Some(KpiName::EnergyPerUnit),
            "waste_percentage" => Some(KpiName::WastePercentage),
            "defect_ratio" => Some(KpiName::DefectRatio),
            "productivity" => Some(KpiName::Productivity),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KpiInput {
    pub entity_id: EntityId,
    pub attribute: String,
    pub aggregate: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KpiReport {
    pub name: KpiName,
    pub from: Timestamp,
    pub to: Timestamp,
    pub value: f64,
    /// What went into the formula, for auditability.
    pub inputs: BTreeMap<String, KpiInput>,
}

impl KpiReport {
    pub fn to_json(&self) -> Json {
        let inputs: Vec<(String, Json)> = self
            .inputs
            .iter()
            .map(|(role, input)| {
                (
                    role.clone(),
                    Json::Obj(alloc::vec![
                        ("entityId".to_string(), Json::str(input.entity_id.as_str())),
                        ("attribute".to_string(), Json::str(input.attribute.clone())),
                        ("aggregate".to_string(), Json::str(input.aggregate)),
                        ("value".to_string(), Json::Num(input.value)),
                    ]),
                )
            })
            .collect();
        Json::Obj(alloc::vec![
            ("name".to_string(), Json::str(self.name.as_str())),
            ("from".to_string(), Json::str(self.from.format())),
            ("to".to_string(), Json::str(self.to.format())),
            ("value".to_string(), Json::Num(self.value)),
            ("inputs".to_string(), Json::Obj(inputs)),
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KpiError {
    MissingBinding { role: &'static str },
    /// Zero denominator; no report is emitted.
    Undefined,
    EmptyWindow,
}

impl fmt::Display for KpiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KpiError::MissingBinding { role } => write!(f, "missing-binding: {role}"),
            KpiError::Undefined => f.write_str("undefined-kpi"),
            KpiError::EmptyWindow => f.write_str("empty-window"),
        }
    }
}

/// On-disk record line:
/// `<entityId>\t<attr>\t<observedAt>\t<value>\t<unit>\n` (empty unit field
/// when absent).
pub fn encode_record_line(p: &SeriesPoint) -> String {
    alloc::format!(
        "{}\t{}\t{}\t{}\t{}\n",
        p.entity_id.as_str(),
        p.attribute,
        p.observed_at.format(),
        p.value,
        p.unit.as_deref().unwrap_or("")
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BadRecordLine;

impl fmt::Display for BadRecordLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("bad-record-line")
    }
}

pub fn parse_record_line(line: &str) -> Result<SeriesPoint, BadRecordLine> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let mut fields = line.split('\t');
    let (id, attr, at, value, unit) = match (
        fields.next(),
        fields.next(),
        fields.next(),
        fields.next(),
        fields.next(),
        fields.next(),
    ) {
        (Some(a), Some(b), Some(c), Some(d), Some(e), None) => (a, b, c, d, e),
        _ => return Err(BadRecordLine),
    };
    Ok(SeriesPoint {
        entity_id: EntityId::new(id),
        attribute: attr.to_string(),
        observed_at: Timestamp::parse(at).map_err(|_| BadRecordLine)?,
        value: value.parse().map_err(|_| BadRecordLine)?,
        unit: if unit.is_empty() {
            None
        } else {
            Some(unit.to_string())
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Attribute, Entity};

    fn ts(ms: i64) -> Timestamp {
        Timestamp::from_millis(1_704_067_200_000 + ms)
    }

    fn notif(changed: &[(&str, Attribute)]) -> Notification {
        let mut e = Entity::new("urn:cap:DryerDrum:d1", "DryerDrum");
        let mut names = alloc::collections::BTreeSet::new();
        for (name, attr) in changed {
            e = e.with_attr(*name, attr.clone());
            names.insert(name.to_string());
        }
        Notification {
            subscription_id: "history".into(),
            entity: e,
            changed: names,
            fired_at: ts(0),
            sequence: 1,
        }
    }

    #[test]
    fn ingest_appends_numeric_changed_attrs() {
        let mut s = SeriesStore::new();
        let n = notif(&[
            ("temperature", Attribute::number(182.5).with_unit("CEL").at(ts(0))),
            ("rotation", Attribute::number(7.0).at(ts(0))),
        ]);
        assert_eq!(s.ingest(&n), 2);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn ingest_is_idempotent() {
        let mut s = SeriesStore::new();
        let n = notif(&[("temperature", Attribute::number(1.0).at(ts(0)))]);
        assert_eq!(s.ingest(&n), 1);
        assert_eq!(s.ingest(&n), 0);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn non_numeric_changes_are_skipped() {
        let mut s = SeriesStore::new();
        let n = notif(&[
            ("plant", Attribute::relationship("urn:cap:Plant:g".into()).at(ts(0))),
            ("label", Attribute::string("hot").at(ts(0))),
            ("temperature", Attribute::number(1.0).at(ts(0))),
        ]);
        assert_eq!(s.ingest(&n), 1);
    }

    #[test]
    fn raw_query_is_sorted_and_half_open() {
        let mut s = SeriesStore::new();
        for (i, at) in [30, 10, 20, 40].iter().enumerate() {
            s.append_point(SeriesPoint {
                entity_id: "urn:cap:T:x".into(),
                attribute: "v".into(),
                observed_at: ts(*at),
                value: i as f64,
                unit: None,
            });
        }
        let q = SeriesQuery {
            entity_id: "urn:cap:T:x".into(),
            attribute: "v".into(),
            from: ts(10),
            to: ts(40),
            agg: Agg::Raw,
            bucket_ms: None,
        };
        match s.query(&q).unwrap() {
            SeriesResult::Points(pts) => {
                let times: Vec<i64> =
                    pts.iter().map(|p| p.observed_at.millis() - ts(0).millis()).collect();
                assert_eq!(times, alloc::vec![10, 20, 30]); // 40 excluded
            }
            other => panic!("expected points, got {other:?}"),
        }
    }

    #[test]
    fn empty_window_is_an_error() {
        let s = SeriesStore::new();
        let q = SeriesQuery {
            entity_id: "urn:cap:T:x".into(),
            attribute: "v".into(),
            from: ts(10),
            to: ts(10),
            agg: Agg::Raw,
            bucket_ms: None,
        };
        assert_eq!(s.query(&q), Err(QueryError::EmptyWindow));
    }

    #[test]
    fn single_bucket_avg_example() {
        let mut s = SeriesStore::new();
        for at in [1, 2, 3] {
            s.append_point(SeriesPoint {
                entity_id: "urn:cap:T:x".into(),
                attribute: "v".into(),
                observed_at: ts(at),
                value: 10.0,
                unit: None,
            });
        }
        let q = SeriesQuery {
            entity_id: "urn:cap:T:x".into(),
            attribute: "v".into(),
            from: ts(0),
            to: ts(10),
            agg: Agg::Avg,
            bucket_ms: Some(10),
        };
        assert_eq!(
            s.query(&q).unwrap(),
            SeriesResult::Buckets(alloc::vec![Bucket {
                start: ts(0),
                value: 10.0
            }])
        );
    }

    #[test]
    fn empty_buckets_are_omitted() {
        let mut s = SeriesStore::new();
        for at in [5, 25] {
            s.append_point(SeriesPoint {
                entity_id: "urn:cap:T:x".into(),
                attribute: "v".into(),
                observed_at: ts(at),
                value: at as f64,
                unit: None,
            });
        }
        let q = SeriesQuery {
            entity_id: "urn:cap:T:x".into(),
            attribute: "v".into(),
            from: ts(0),
            to: ts(30),
            agg: Agg::Sum,
            bucket_ms: Some(10),
        };
        match s.query(&q).unwrap() {
            SeriesResult::Buckets(b) => {
                assert_eq!(b.len(), 2);
                assert_eq!(b[0].start, ts(0));
                assert_eq!(b[1].start, ts(20));
            }
            other => panic!("{other:?}"),
        }
    }

    // 1,000 random points, random bucketed queries vs a naive full-scan
    // aggregator.
    #[test]
    fn bucketed_queries_match_naive_aggregator() {
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(0xB0CA);
        let mut s = SeriesStore::new();
        let mut raw: Vec<(i64, f64)> = Vec::new();
        for _ in 0..1000 {
            let at = rng.next_below(100_000) as i64;
            let value = (rng.next_below(2_000_000) as f64 / 1000.0) - 1000.0;
            if s.append_point(SeriesPoint {
                entity_id: "urn:cap:T:x".into(),
                attribute: "v".into(),
                observed_at: ts(at),
                value,
                unit: None,
            }) {
                raw.push((at, value));
            }
        }
        raw.sort_by_key(|(at, _)| *at);

        for aggr in [Agg::Min, Agg::Max, Agg::Avg, Agg::Sum, Agg::Count] {
            for _ in 0..20 {
                let from = rng.next_below(90_000) as i64;
                let to = from + 1 + rng.next_below(20_000) as i64;
                let bucket = 1 + rng.next_below(5_000) as i64;

                // naive: walk every raw point, group by bucket index
                let mut expected: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
                for &(at, v) in &raw {
                    if at >= from && at < to {
                        expected.entry((at - from) / bucket).or_default().push(v);
                    }
                }
                let expected: Vec<Bucket> = expected
                    .into_iter()
                    .map(|(idx, vs)| {
                        let value = match aggr {
                            Agg::Min => vs.iter().cloned().fold(f64::INFINITY, f64::min),
                            Agg::Max => vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                            Agg::Sum => vs.iter().sum(),
                            Agg::Count => vs.len() as f64,
                            Agg::Avg => vs.iter().sum::<f64>() / vs.len() as f64,
                            Agg::Raw => unreachable!(),
                        };
                        Bucket {
                            start: ts(from + idx * bucket),
                            value,
                        }
                    })
                    .collect();

                let q = SeriesQuery {
                    entity_id: "urn:cap:T:x".into(),
                    attribute: "v".into(),
                    from: ts(from),
                    to: ts(to),
                    agg: aggr,
                    bucket_ms: Some(bucket),
                };
                assert_eq!(
                    s.query(&q).unwrap(),
                    SeriesResult::Buckets(expected),
                    "agg={aggr:?} from={from} to={to} bucket={bucket}"
                );
            }
        }
    }

    #[test]
    fn window_partition_sums_add_up() {
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(5);
        let mut s = SeriesStore::new();
        for _ in 0..500 {
            s.append_point(SeriesPoint {
                entity_id: "urn:cap:T:x".into(),
                attribute: "v".into(),
                observed_at: ts(rng.next_below(10_000) as i64),
                value: rng.next_f64(),
                unit: None,
            });
        }
        let id: EntityId = "urn:cap:T:x".into();
        let whole = s.window_sum(&id, "v", ts(0), ts(10_000));
        let mid = 3_333;
        let parts = s.window_sum(&id, "v", ts(0), ts(mid)) + s.window_sum(&id, "v", ts(mid), ts(10_000));
        assert!((whole - parts).abs() < 1e-9);
    }

    #[test]
    fn kpi_energy_per_unit() {
        let mut s = SeriesStore::new();
        for (at, v) in [(0, 100.0), (10, 50.0)] {
            s.append_point(SeriesPoint {
                entity_id: "urn:cap:Plant:p".into(),
                attribute: "energy".into(),
                observed_at: ts(at),
                value: v,
                unit: Some("KWH".into()),
            });
        }
        for (at, v) in [(0, 10.0), (10, 5.0)] {
            s.append_point(SeriesPoint {
                entity_id: "urn:cap:Plant:p".into(),
                attribute: "output".into(),
                observed_at: ts(at),
                value: v,
                unit: Some("TNE".into()),
            });
        }
        let bindings: BTreeMap<String, (EntityId, String)> = [
            ("energy".to_string(), ("urn:cap:Plant:p".into(), "energy".to_string())),
            ("output".to_string(), ("urn:cap:Plant:p".into(), "output".to_string())),
        ]
        .into();
        let r = s
            .compute_kpi(KpiName::EnergyPerUnit, ts(0), ts(100), &bindings)
            .unwrap();
        assert_eq!(r.value, 10.0);
        assert_eq!(r.inputs["energy"].value, 150.0);
    }

    #[test]
    fn kpi_waste_percentage_and_undefined() {
        let mut s = SeriesStore::new();
        s.append_point(SeriesPoint {
            entity_id: "urn:cap:Plant:p".into(),
            attribute: "waste".into(),
            observed_at: ts(0),
            value: 5.0,
            unit: None,
        });
        s.append_point(SeriesPoint {
            entity_id: "urn:cap:Plant:p".into(),
            attribute: "total".into(),
            observed_at: ts(0),
            value: 100.0,
            unit: None,
        });
        let bindings: BTreeMap<String, (EntityId, String)> = [
            ("waste".to_string(), ("urn:cap:Plant:p".into(), "waste".to_string())),
            ("total".to_string(), ("urn:cap:Plant:p".into(), "total".to_string())),
        ]
        .into();
        let r = s
            .compute_kpi(KpiName::WastePercentage, ts(0), ts(100), &bindings)
            .unwrap();
        assert_eq!(r.value, 5.0);

        // zero denominator outside the data window
        assert_eq!(
            s.compute_kpi(KpiName::WastePercentage, ts(1000), ts(2000), &bindings),
            Err(KpiError::Undefined)
        );
    }

    #[test]
    fn kpi_missing_binding() {
        let s = SeriesStore::new();
        assert_eq!(
            s.compute_kpi(KpiName::Productivity, ts(0), ts(1), &BTreeMap::new()),
            Err(KpiError::MissingBinding { role: "output" })
        );
    }

    #[test]
    fn record_line_exact_bytes_and_round_trip() {
        let p = SeriesPoint {
            entity_id: "urn:cap:DryerDrum:dryer01".into(),
            attribute: "temperature".into(),
            observed_at: Timestamp::parse("2024-01-01T00:00:00.000Z").unwrap(),
            value: 182.5,
            unit: Some("CEL".into()),
        };
        let line = encode_record_line(&p);
        assert_eq!(
            line,
            "urn:cap:DryerDrum:dryer01\ttemperature\t2024-01-01T00:00:00.000Z\t182.5\tCEL\n"
        );
        assert_eq!(parse_record_line(&line).unwrap(), p);

        let no_unit = SeriesPoint { unit: None, ..p };
        let line = encode_record_line(&no_unit);
        assert!(line.ends_with("\t182.5\t\n"));
        assert_eq!(parse_record_line(&line).unwrap(), no_unit);
    }

    #[test]
    fn raw_query_equals_log_scan() {
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(77);
        let mut s = SeriesStore::new();
        for i in 0..300 {
            s.append_point(SeriesPoint {
                entity_id: if i % 2 == 0 { "urn:cap:T:a" } else { "urn:cap:T:b" }.into(),
                attribute: "v".into(),
                observed_at: ts(rng.next_below(1000) as i64),
                value: i as f64,
                unit: None,
            });
        }
        let q = SeriesQuery {
            entity_id: "urn:cap:T:a".into(),
            attribute: "v".into(),
            from: ts(100),
            to: ts(600),
            agg: Agg::Raw,
            bucket_ms: None,
        };
        let got = match s.query(&q).unwrap() {
            SeriesResult::Points(p) => p,
            _ => unreachable!(),
        };
        let mut expected: Vec<SeriesPoint> = s
            .log()
            .iter()
            .filter(|p| {
                p.entity_id.as_str() == "urn:cap:T:a"
                    && p.attribute == "v"
                    && p.observed_at >= ts(100)
                    && p.observed_at < ts(600)
            })
            .cloned()
            .collect();
        expected.sort_by_key(|p| p.observed_at);
        assert_eq!(got, expected);
    }
}
