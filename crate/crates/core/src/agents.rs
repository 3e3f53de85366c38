//! South-bound ingestion: a provisioned device registry plus decoders that
//! translate device frames (pipe-delimited line protocol, flat JSON) into
//! broker patches.
//!
//! Bad readings skip, good readings proceed: plants emit partially corrupt
//! frames, and dropping whole frames would starve downstream detectors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::json::{self, Json};
use crate::model::{Attribute, EntityId, Patch, Scalar};
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueType {
    Number,
    Text,
    Boolean,
}

impl ValueType {
    pub fn parse(s: &str) -> Option<ValueType> {
        match s {
            "number" => Some(ValueType::Number),
            "string" => Some(ValueType::Text),
            "boolean" => Some(ValueType::Boolean),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ValueType::Number => "number",
            ValueType::Text => "string",
            ValueType::Boolean => "boolean",
        }
    }
}

/// Where one short reading name lands in the context model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeMapping {
    pub attribute: String,
    pub unit: Option<String>,
    pub value_type: ValueType,
    /// Linear transform for numeric readings: `value = raw * scale + offset`.
    pub scale: f64,
    pub offset: f64,
}

impl AttributeMapping {
    pub fn new(attribute: impl Into<String>, unit: Option<&str>, value_type: ValueType) -> Self {
        AttributeMapping {
            attribute: attribute.into(),
            unit: unit.map(String::from),
            value_type,
            scale: 1.0,
            offset: 0.0,
        }
    }

    pub fn transformed(mut self, scale: f64, offset: f64) -> Self {
        self.scale = scale;
        self.offset = offset;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceProvision {
    pub api_key: String,
    pub device_id: String,
    pub entity_id: EntityId,
    pub entity_type: String,
    pub attributes: BTreeMap<String, AttributeMapping>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawValue {
    Text(String),
    Num(f64),
    Bool(bool),
}

/// One decoded device frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Measure {
    pub device_id: String,
    pub readings: BTreeMap<String, RawValue>,
    pub received_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProvisionError {
    DuplicateDevice,
    EmptyAttributeMap,
    ZeroScale { attr: String },
    EmptyField { field: &'static str },
}

impl fmt::Display for ProvisionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProvisionError::DuplicateDevice => f.write_str("duplicate-device"),
            ProvisionError::EmptyAttributeMap => f.write_str("empty-attribute-map"),
            ProvisionError::ZeroScale { attr } => write!(f, "zero-scale: {attr}"),
            ProvisionError::EmptyField { field } => write!(f, "empty-field: {field}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeError {
    MalformedLine,
    EmptyKey,
    NonFlatMeasure,
    EmptyMeasure,
    BadJson { offset: usize },
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::MalformedLine => f.write_str("malformed-line"),
            DecodeError::EmptyKey => f.write_str("empty-key"),
            DecodeError::NonFlatMeasure => f.write_str("non-flat-measure"),
            DecodeError::EmptyMeasure => f.write_str("empty-measure"),
            DecodeError::BadJson { offset } => write!(f, "bad-json at byte {offset}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Line,
    Json,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnroutableTopic;

impl fmt::Display for UnroutableTopic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("unroutable-topic")
    }
}

/// `/ul/<apiKey>/<deviceId>/attrs` carries the line protocol,
/// `/json/<apiKey>/<deviceId>/attrs` flat JSON.
pub fn route_topic(topic: &str) -> Result<(Protocol, &str, &str), UnroutableTopic> {
    let mut parts = topic.split('/');
    match (
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
    ) {
        (Some(""), Some("ul"), Some(key), Some(dev), Some("attrs"), None)
            if !key.is_empty() && !dev.is_empty() =>
        {
            Ok((Protocol::Line, key, dev))
        }
        (Some(""), Some("json"), Some(key), Some(dev), Some("attrs"), None)
            if !key.is_empty() && !dev.is_empty() =>
        {
            Ok((Protocol::Json, key, dev))
        }
        _ => Err(UnroutableTopic),
    }
}

/// Parse `k1|v1|k2|v2|...` into raw string readings.
pub fn decode_line(payload: &str) -> Result<BTreeMap<String, String>, DecodeError> {
    let tokens: Vec<&str> = payload.split('|').collect();
    if tokens.len() % 2 != 0 {
        return Err(DecodeError::MalformedLine);
    }
    let mut out = BTreeMap::new();
    for pair in tokens.chunks(2) {
        if pair[0].is_empty() {
            return Err(DecodeError::EmptyKey);
        }
        out.insert(pair[0].to_string(), pair[1].to_string());
    }
    Ok(out)
}

/// Encode readings back into the line protocol (used by simulators).
pub fn encode_line(readings: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (i, (k, v)) in readings.iter().enumerate() {
        if i > 0 {
            out.push('|');
        }
        out.push_str(k);
        out.push('|');
        out.push_str(v);
    }
    out
}

/// Parse a flat JSON object of scalars; nested values are rejected.
pub fn decode_json_measure(payload: &[u8]) -> Result<BTreeMap<String, RawValue>, DecodeError> {
    let v = json::parse(payload).map_err(|e| DecodeError::BadJson { offset: e.offset })?;
    let members = v.as_obj().ok_or(DecodeError::NonFlatMeasure)?;
    if members.is_empty() {
        return Err(DecodeError::EmptyMeasure);
    }
    let mut out = BTreeMap::new();
    for (k, val) in members {
        let raw = match val {
            Json::Num(n) => RawValue::Num(*n),
            Json::Str(s) => RawValue::Text(s.clone()),
            Json::Bool(b) => RawValue::Bool(*b),
            Json::Null | Json::Arr(_) | Json::Obj(_) => return Err(DecodeError::NonFlatMeasure),
        };
        out.insert(k.clone(), raw);
    }
    Ok(out)
}

/// Why a reading did not make it into the patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SkipReason {
    /// Short name not in the provision's attribute map; warning, not error.
    Unknown,
    /// Value could not be coerced to the mapped type; counted per device.
    Coercion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedReading {
    pub short_name: String,
    pub reason: SkipReason,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmptyPatch;

impl fmt::Display for EmptyPatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("empty-patch")
    }
}

fn coerce(raw: &RawValue, mapping: &AttributeMapping) -> Option<Scalar> {
    match mapping.value_type {
        ValueType::Number => {
            let n = match raw {
                RawValue::Num(n) => *n,
                RawValue::Text(s) => s.trim().parse::<f64>().ok()?,
                RawValue::Bool(_) => return None,
            };
            if !n.is_finite() {
                return None;
            }
            let v = n * mapping.scale + mapping.offset;
            if v.is_finite() {
                Some(Scalar::Num(v))
            } else {
                None
            }
        }
        ValueType::Text => Some(Scalar::Str(match raw {
            RawValue::Text(s) => s.clone(),
            RawValue::Num(n) => format!("{n}"),
            RawValue::Bool(b) => format!("{b}"),
        })),
        ValueType::Boolean => match raw {
            RawValue::Bool(b) => Some(Scalar::Bool(*b)),
            RawValue::Text(s) => match s.as_str() {
                "true" => Some(Scalar::Bool(true)),
                "false" => Some(Scalar::Bool(false)),
                _ => None,
            },
            RawValue::Num(_) => None,
        },
    }
}

/// Map a measure onto the provisioned entity. Unknown short names drop with
/// a warning, coercion failures skip the reading; a patch is produced from
/// whatever survives, `observedAt` = receive time.
pub fn measure_to_patch(
    p: &DeviceProvision,
    m: &Measure,
) -> Result<(Patch, Vec<SkippedReading>), EmptyPatch> {
    let mut patch = Patch::new(p.entity_id.clone(), p.entity_type.clone());
    let mut skipped = Vec::new();
    for (short, raw) in &m.readings {
        let Some(mapping) = p.attributes.get(short) else {
            skipped.push(SkippedReading {
                short_name: short.clone(),
                reason: SkipReason::Unknown,
            });
            continue;
        };
        let Some(value) = coerce(raw, mapping) else {
            skipped.push(SkippedReading {
                short_name: short.clone(),
                reason: SkipReason::Coercion,
            });
            continue;
        };
        let mut attr = Attribute::property(value).at(m.received_at);
        attr.unit = mapping.unit.clone();
        patch = patch.with_change(mapping.attribute.clone(), attr);
    }
    if patch.changes.is_empty() {
        return Err(EmptyPatch);
    }
    Ok((patch, skipped))
}

/// Registry of provisioned devices, keyed by `(apiKey, deviceId)`, with a
/// per-device coercion error counter.
#[derive(Default, Debug)]
pub struct DeviceRegistry {
    devices: BTreeMap<(String, String), DeviceProvision>,
    error_counts: BTreeMap<(String, String), u64>,
}

impl DeviceRegistry {
    pub fn new() -> Self {
        DeviceRegistry::default()
    }

    pub fn provision(&mut self, p: DeviceProvision) -> Result<(), ProvisionError> {
        if p.api_key.is_empty() {
            return Err(ProvisionError::EmptyField { field: "apiKey" });
        }
        if p.device_id.is_empty() {
            return Err(ProvisionError::EmptyField { field: "deviceId" });
        }
        if p.attributes.is_empty() {
            return Err(ProvisionError::EmptyAttributeMap);
        }
        for (short, mapping) in &p.attributes {
            if mapping.scale == 0.0 {
                return Err(ProvisionError::ZeroScale {
                    attr: short.clone(),
                });
            }
        }
        let key = (p.api_key.clone(), p.device_id.clone());
        if self.devices.contains_key(&key) {
            return Err(ProvisionError::DuplicateDevice);
        }
        self.devices.insert(key, p);
        Ok(())
    }

    pub fn lookup(&self, api_key: &str, device_id: &str) -> Option<&DeviceProvision> {
        self.devices
            .get(&(api_key.to_string(), device_id.to_string()))
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceProvision> {
        self.devices.values()
    }

    /// Full ingestion step for one published frame: route, decode, map.
    /// Returns the patch plus any skipped readings; coercion skips bump the
    /// device's error counter.
    pub fn handle_publish(
        &mut self,
        topic: &str,
        payload: &[u8],
        received_at: Timestamp,
    ) -> Result<(Patch, Vec<SkippedReading>), IngestError> {
        let (protocol, api_key, device_id) =
            route_topic(topic).map_err(|_| IngestError::Unroutable)?;
        let readings: BTreeMap<String, RawValue> = match protocol {
            Protocol::Line => {
                let text = core::str::from_utf8(payload).map_err(|_| IngestError::BadPayload)?;
                decode_line(text)
                    .map_err(IngestError::Decode)?
                    .into_iter()
                    .map(|(k, v)| (k, RawValue::Text(v)))
                    .collect()
            }
            Protocol::Json => decode_json_measure(payload).map_err(IngestError::Decode)?,
        };
        if readings.is_empty() {
            return Err(IngestError::Decode(DecodeError::EmptyMeasure));
        }
        let provision = self
            .devices
            .get(&(api_key.to_string(), device_id.to_string()))
            .ok_or(IngestError::UnknownDevice)?
            .clone();
        let measure = Measure {
            device_id: device_id.to_string(),
            readings,
            received_at,
        };
        let (patch, skipped) =
            measure_to_patch(&provision, &measure).map_err(|_| IngestError::EmptyPatch)?;
        let coercion_errors = skipped
            .iter()
            .filter(|s| s.reason == SkipReason::Coercion)
            .count() as u64;
        if coercion_errors > 0 {
            *self
                .error_counts
                .entry((api_key.to_string(), device_id.to_string()))
                .or_insert(0) += coercion_errors;
        }
        Ok((patch, skipped))
    }

    pub fn error_count(&self, api_key: &str, device_id: &str) -> u64 {
        self.error_counts
            .get(&(api_key.to_string(), device_id.to_string()))
            .copied()
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IngestError {
    Unroutable,
    UnknownDevice,
    BadPayload,
    Decode(DecodeError),
    EmptyPatch,
}

impl fmt::Display for IngestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IngestError::Unroutable => f.write_str("unroutable-topic"),
            IngestError::UnknownDevice => f.write_str("unknown-device"),
            IngestError::BadPayload => f.write_str("bad-payload"),
            IngestError::Decode(e) => write!(f, "{e}"),
            IngestError::EmptyPatch => f.write_str("empty-patch"),
        }
    }
}

/// Provision wire format:
/// `{"apiKey","deviceId","entityId","entityType","attributes":{short:{"name","unit"?,"type","scale"?,"offset"?}}}`
pub fn provision_from_json(v: &Json) -> Result<DeviceProvision, String> {
    let get_str = |k: &str| -> Result<&str, String> {
        v.get(k)
            .and_then(Json::as_str)
            .ok_or(format!("provision field {k} missing or not a string"))
    };
    let attrs_obj = v
        .get("attributes")
        .and_then(Json::as_obj)
        .ok_or("provision field attributes missing or not an object")?;
    let mut attributes = BTreeMap::new();
    for (short, m) in attrs_obj {
        let name = m
            .get("name")
            .and_then(Json::as_str)
            .ok_or(format!("attribute {short}: name missing"))?;
        let value_type = m
            .get("type")
            .and_then(Json::as_str)
            .and_then(ValueType::parse)
            .ok_or(format!("attribute {short}: bad type"))?;
        let unit = m.get("unit").and_then(Json::as_str);
        let scale = m.get("scale").and_then(Json::as_f64).unwrap_or(1.0);
        let offset = m.get("offset").and_then(Json::as_f64).unwrap_or(0.0);
        attributes.insert(
            short.clone(),
            AttributeMapping::new(name, unit, value_type).transformed(scale, offset),
        );
    }
    Ok(DeviceProvision {
        api_key: get_str("apiKey")?.to_string(),
        device_id: get_str("deviceId")?.to_string(),
        entity_id: EntityId::new(get_str("entityId")?),
        entity_type: get_str("entityType")?.to_string(),
        attributes,
    })
}

pub fn provision_to_json(p: &DeviceProvision) -> Json {
    let attrs: Vec<(String, Json)> = p
        .attributes
        .iter()
        .map(|(short, m)| {
            let mut members = alloc::vec![
                ("name".to_string(), Json::str(m.attribute.clone())),
                ("type".to_string(), Json::str(m.value_type.as_str())),
                ("scale".to_string(), Json::Num(m.scale)),
                ("offset".to_string(), Json::Num(m.offset)),
            ];
            if let Some(u) = &m.unit {
                members.push(("unit".to_string(), Json::str(u.clone())));
            }
            (short.clone(), Json::Obj(members))
        })
        .collect();
    Json::Obj(alloc::vec![
        ("apiKey".to_string(), Json::str(p.api_key.clone())),
        ("deviceId".to_string(), Json::str(p.device_id.clone())),
        ("entityId".to_string(), Json::str(p.entity_id.as_str())),
        ("entityType".to_string(), Json::str(p.entity_type.clone())),
        ("attributes".to_string(), Json::Obj(attrs)),
    ])
}
