//! The shared context information model: entities with timestamped
//! attributes, canonical serialization, selector matching and merge
//! semantics. Every other module speaks these types.
//!
//! Conflict rule: last-write-wins keyed on `observedAt`, ties overwrite.
//! That makes replay idempotent and order-insensitive, which the sync and
//! history layers lean on.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::glob::glob_match;
use crate::json::{self, Json};
use crate::time::Timestamp;

/// URN-style entity identifier. Validation is reported by
/// [`validate_entity`], not enforced at construction.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(String);

impl EntityId {
    pub fn new(value: impl Into<String>) -> Self {
        EntityId(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EntityId({})", self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        EntityId::new(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scalar {
    Num(f64),
    Str(String),
    Bool(bool),
}

impl Scalar {
    fn to_json(&self) -> Json {
        match self {
            Scalar::Num(n) => Json::Num(*n),
            Scalar::Str(s) => Json::str(s.clone()),
            Scalar::Bool(b) => Json::Bool(*b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributeKind {
    Property,
    Relationship,
}

/// One timestamped attribute. `value` belongs to properties, `object` to
/// relationships; incoherent combinations are representable so that
/// [`validate_entity`] can report them instead of a parser eating them.
#[derive(Clone, Debug, PartialEq)]
pub struct Attribute {
    pub kind: AttributeKind,
    pub value: Option<Scalar>,
    pub object: Option<EntityId>,
    pub unit: Option<String>,
    pub observed_at: Option<Timestamp>,
}

impl Attribute {
    pub fn number(v: f64) -> Self {
        Attribute::property(Scalar::Num(v))
    }

    pub fn string(v: impl Into<String>) -> Self {
        Attribute::property(Scalar::Str(v.into()))
    }

    pub fn boolean(v: bool) -> Self {
        Attribute::property(Scalar::Bool(v))
    }

    pub fn property(value: Scalar) -> Self {
        Attribute {
            kind: AttributeKind::Property,
            value: Some(value),
            object: None,
            unit: None,
            observed_at: None,
        }
    }

    pub fn relationship(target: EntityId) -> Self {
        Attribute {
            kind: AttributeKind::Relationship,
            value: None,
            object: Some(target),
            unit: None,
            observed_at: None,
        }
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = Some(unit.into());
        self
    }

    pub fn at(mut self, t: Timestamp) -> Self {
        self.observed_at = Some(t);
        self
    }

    /// Numeric property value, if this is one.
    pub fn numeric_value(&self) -> Option<f64> {
        match (&self.kind, &self.value) {
            (AttributeKind::Property, Some(Scalar::Num(n))) => Some(*n),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub id: EntityId,
    pub entity_type: String,
    pub attrs: BTreeMap<String, Attribute>,
}

impl Entity {
    pub fn new(id: impl Into<EntityId2>, entity_type: impl Into<String>) -> Self {
        Entity {
            id: id.into().0,
            entity_type: entity_type.into(),
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, name: impl Into<String>, attr: Attribute) -> Self {
        self.attrs.insert(name.into(), attr);
        self
    }
}

/// Conversion shim so `Entity::new` takes either an `EntityId` or `&str`.
pub struct EntityId2(EntityId);

impl From<EntityId> for EntityId2 {
    fn from(id: EntityId) -> Self {
        EntityId2(id)
    }
}

impl From<&str> for EntityId2 {
    fn from(s: &str) -> Self {
        EntityId2(EntityId::new(s))
    }
}

/// Selector over entities: exact type, glob id pattern, watched attributes
/// (empty set = watch all).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EntitySelector {
    pub entity_type: Option<String>,
    pub id_pattern: Option<String>,
    pub watched: BTreeSet<String>,
}

impl EntitySelector {
    pub fn of_type(entity_type: impl Into<String>) -> Self {
        EntitySelector {
            entity_type: Some(entity_type.into()),
            ..Default::default()
        }
    }

    pub fn of_pattern(pattern: impl Into<String>) -> Self {
        EntitySelector {
            id_pattern: Some(pattern.into()),
            ..Default::default()
        }
    }

    pub fn watching<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.watched = names.into_iter().map(Into::into).collect();
        self
    }

    /// At least one of type / id pattern must be present.
    pub fn validate(&self) -> Result<(), SelectorError> {
        if self.entity_type.is_none() && self.id_pattern.is_none() {
            Err(SelectorError::Empty)
        } else {
            Ok(())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectorError {
    Empty,
}

impl fmt::Display for SelectorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("empty-selector")
    }
}

/// Unit of upsert: attribute changes aimed at one entity. Changes may lack
/// `observedAt` until [`Patch::stamp`] fills it at ingestion.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub entity_id: EntityId,
    pub entity_type: String,
    pub changes: BTreeMap<String, Attribute>,
}

impl Patch {
    pub fn new(id: impl Into<EntityId2>, entity_type: impl Into<String>) -> Self {
        Patch {
            entity_id: id.into().0,
            entity_type: entity_type.into(),
            changes: BTreeMap::new(),
        }
    }

    pub fn with_change(mut self, name: impl Into<String>, attr: Attribute) -> Self {
        self.changes.insert(name.into(), attr);
        self
    }

    pub fn stamp(&mut self, clock: Timestamp) {
        for attr in self.changes.values_mut() {
            if attr.observed_at.is_none() {
                attr.observed_at = Some(clock);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViolationCode {
    EmptyId,
    BadIdPrefix,
    IdWhitespace,
    EmptyType,
    EmptyAttrName,
    PropertyHasObject,
    PropertyMissingValue,
    RelationshipHasValue,
    RelationshipHasUnit,
    RelationshipMissingObject,
    MissingObservedAt,
    NonFiniteValue,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::EmptyId => "empty-id",
            ViolationCode::BadIdPrefix => "bad-id-prefix",
            ViolationCode::IdWhitespace => "id-whitespace",
            ViolationCode::EmptyType => "empty-type",
            ViolationCode::EmptyAttrName => "empty-attr-name",
            ViolationCode::PropertyHasObject => "property-has-object",
            ViolationCode::PropertyMissingValue => "property-missing-value",
            ViolationCode::RelationshipHasValue => "relationship-has-value",
            ViolationCode::RelationshipHasUnit => "relationship-has-unit",
            ViolationCode::RelationshipMissingObject => "relationship-missing-object",
            ViolationCode::MissingObservedAt => "missing-observed-at",
            ViolationCode::NonFiniteValue => "non-finite-value",
        }
    }
}

/// One invariant breach; violations are data, not errors.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub code: ViolationCode,
    pub attr: Option<String>,
}

impl Violation {
    fn entity(code: ViolationCode) -> Self {
        Violation { code, attr: None }
    }

    fn attr(code: ViolationCode, name: &str) -> Self {
        Violation {
            code,
            attr: Some(name.to_string()),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.attr {
            Some(a) => write!(f, "{}({})", self.code.as_str(), a),
            None => f.write_str(self.code.as_str()),
        }
    }
}

/// Returns the exact list of invariant violations; empty iff well-formed.
pub fn validate_entity(e: &Entity) -> Vec<Violation> {
    let mut out = Vec::new();
    if e.id.as_str().is_empty() {
        out.push(Violation::entity(ViolationCode::EmptyId));
    } else {
        if !e.id.as_str().starts_with("urn:") {
            out.push(Violation::entity(ViolationCode::BadIdPrefix));
        }
        if e.id.as_str().bytes().any(|b| b.is_ascii_whitespace()) {
            out.push(Violation::entity(ViolationCode::IdWhitespace));
        }
    }
    if e.entity_type.is_empty() {
        out.push(Violation::entity(ViolationCode::EmptyType));
    }
    for (name, attr) in &e.attrs {
        if name.is_empty() {
            out.push(Violation::entity(ViolationCode::EmptyAttrName));
        }
        match attr.kind {
            AttributeKind::Property => {
                if attr.object.is_some() {
                    out.push(Violation::attr(ViolationCode::PropertyHasObject, name));
                }
                match &attr.value {
                    None => out.push(Violation::attr(ViolationCode::PropertyMissingValue, name)),
                    Some(Scalar::Num(n)) if !n.is_finite() => {
                        out.push(Violation::attr(ViolationCode::NonFiniteValue, name))
                    }
                    Some(_) => {}
                }
            }
            AttributeKind::Relationship => {
                if attr.value.is_some() {
                    out.push(Violation::attr(ViolationCode::RelationshipHasValue, name));
                }
                if attr.unit.is_some() {
                    out.push(Violation::attr(ViolationCode::RelationshipHasUnit, name));
                }
                if attr.object.is_none() {
                    out.push(Violation::attr(
                        ViolationCode::RelationshipMissingObject,
                        name,
                    ));
                }
            }
        }
        if attr.observed_at.is_none() {
            out.push(Violation::attr(ViolationCode::MissingObservedAt, name));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum CanonicalError {
    Syntax { offset: usize, message: String },
    DuplicateAttr { name: String },
    DuplicateKey { name: String },
    UnknownKey { name: String },
    MissingKey { name: &'static str },
    BadValue { what: String },
    NonFinite,
}

impl fmt::Display for CanonicalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanonicalError::Syntax { offset, message } => {
                write!(f, "{message} at byte {offset}")
            }
            CanonicalError::DuplicateAttr { name } => write!(f, "duplicate-attr: {name}"),
            CanonicalError::DuplicateKey { name } => write!(f, "duplicate-key: {name}"),
            CanonicalError::UnknownKey { name } => write!(f, "unknown-key: {name}"),
            CanonicalError::MissingKey { name } => write!(f, "missing-key: {name}"),
            CanonicalError::BadValue { what } => write!(f, "bad-value: {what}"),
            CanonicalError::NonFinite => f.write_str("non-finite"),
        }
    }
}

impl From<json::ParseError> for CanonicalError {
    fn from(e: json::ParseError) -> Self {
        CanonicalError::Syntax {
            offset: e.offset,
            message: e.message,
        }
    }
}

fn attribute_to_json(attr: &Attribute) -> Json {
    let mut members: Vec<(String, Json)> = Vec::new();
    members.push((
        "kind".to_string(),
        Json::str(match attr.kind {
            AttributeKind::Property => "Property",
            AttributeKind::Relationship => "Relationship",
        }),
    ));
    if let Some(v) = &attr.value {
        members.push(("value".to_string(), v.to_json()));
    }
    if let Some(o) = &attr.object {
        members.push(("object".to_string(), Json::str(o.as_str())));
    }
    if let Some(u) = &attr.unit {
        members.push(("unit".to_string(), Json::str(u.clone())));
    }
    if let Some(t) = &attr.observed_at {
        members.push(("observedAt".to_string(), Json::str(t.format())));
    }
    Json::Obj(members)
}

fn shape_to_json(id: &EntityId, entity_type: &str, attrs: &BTreeMap<String, Attribute>) -> Json {
    let attr_members: Vec<(String, Json)> = attrs
        .iter()
        .map(|(name, attr)| (name.clone(), attribute_to_json(attr)))
        .collect();
    Json::Obj(alloc::vec![
        ("id".to_string(), Json::str(id.as_str())),
        ("type".to_string(), Json::str(entity_type)),
        ("attrs".to_string(), Json::Obj(attr_members)),
    ])
}

/// Entity as a canonical JSON value (sorted keys when written).
pub fn entity_to_json(e: &Entity) -> Json {
    shape_to_json(&e.id, &e.entity_type, &e.attrs)
}

/// Deterministic canonical bytes for `e`.
pub fn canonical_serialize(e: &Entity) -> Result<Vec<u8>, CanonicalError> {
    entity_to_json(e)
        .to_canonical()
        .map(String::into_bytes)
        .map_err(|_| CanonicalError::NonFinite)
}

/// Patch canonical bytes; same shape as an entity, `observedAt` may be
/// absent per change.
pub fn patch_to_bytes(p: &Patch) -> Result<Vec<u8>, CanonicalError> {
    shape_to_json(&p.entity_id, &p.entity_type, &p.changes)
        .to_canonical()
        .map(String::into_bytes)
        .map_err(|_| CanonicalError::NonFinite)
}

fn attribute_from_json(name: &str, v: &Json) -> Result<Attribute, CanonicalError> {
    let members = v.as_obj().ok_or_else(|| CanonicalError::BadValue {
        what: alloc::format!("attribute {name} must be an object"),
    })?;
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut kind = None;
    let mut value = None;
    let mut object = None;
    let mut unit = None;
    let mut observed_at = None;
    for (key, val) in members {
        if !seen.insert(key.as_str()) {
            return Err(CanonicalError::DuplicateKey { name: key.clone() });
        }
        match key.as_str() {
            "kind" => {
                kind = Some(match val.as_str() {
                    Some("Property") => AttributeKind::Property,
                    Some("Relationship") => AttributeKind::Relationship,
                    _ => {
                        return Err(CanonicalError::BadValue {
                            what: alloc::format!("kind of {name}"),
                        })
                    }
                });
            }
            "value" => {
                value = Some(match val {
                    Json::Num(n) => Scalar::Num(*n),
                    Json::Str(s) => Scalar::Str(s.clone()),
                    Json::Bool(b) => Scalar::Bool(*b),
                    _ => {
                        return Err(CanonicalError::BadValue {
                            what: alloc::format!("value of {name} must be a scalar"),
                        })
                    }
                });
            }
            "object" => {
                let s = val.as_str().ok_or_else(|| CanonicalError::BadValue {
                    what: alloc::format!("object of {name}"),
                })?;
                object = Some(EntityId::new(s));
            }
            "unit" => {
                let s = val.as_str().ok_or_else(|| CanonicalError::BadValue {
                    what: alloc::format!("unit of {name}"),
                })?;
                unit = Some(s.to_string());
            }
            "observedAt" => {
                let s = val.as_str().ok_or_else(|| CanonicalError::BadValue {
                    what: alloc::format!("observedAt of {name}"),
                })?;
                let t = Timestamp::parse(s).map_err(|_| CanonicalError::BadValue {
                    what: alloc::format!("observedAt of {name}"),
                })?;
                observed_at = Some(t);
            }
            other => {
                return Err(CanonicalError::UnknownKey {
                    name: other.to_string(),
                })
            }
        }
    }
    Ok(Attribute {
        kind: kind.ok_or(CanonicalError::MissingKey { name: "kind" })?,
        value,
        object,
        unit,
        observed_at,
    })
}

fn shape_from_json(
    v: &Json,
) -> Result<(EntityId, String, BTreeMap<String, Attribute>), CanonicalError> {
    let members = v.as_obj().ok_or_else(|| CanonicalError::BadValue {
        what: "top-level value must be an object".to_string(),
    })?;
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut id = None;
    let mut entity_type = None;
    let mut attrs: Option<BTreeMap<String, Attribute>> = None;
    for (key, val) in members {
        if !seen.insert(key.as_str()) {
            return Err(CanonicalError::DuplicateKey { name: key.clone() });
        }
        match key.as_str() {
            "id" => {
                id = Some(EntityId::new(val.as_str().ok_or_else(|| {
                    CanonicalError::BadValue {
                        what: "id".to_string(),
                    }
                })?));
            }
            "type" => {
                entity_type = Some(
                    val.as_str()
                        .ok_or_else(|| CanonicalError::BadValue {
                            what: "type".to_string(),
                        })?
                        .to_string(),
                );
            }
            "attrs" => {
                let attr_members = val.as_obj().ok_or_else(|| CanonicalError::BadValue {
                    what: "attrs must be an object".to_string(),
                })?;
                let mut map = BTreeMap::new();
                for (attr_name, attr_val) in attr_members {
                    let attr = attribute_from_json(attr_name, attr_val)?;
                    if map.insert(attr_name.clone(), attr).is_some() {
                        return Err(CanonicalError::DuplicateAttr {
                            name: attr_name.clone(),
                        });
                    }
                }
                attrs = Some(map);
            }
            other => {
                return Err(CanonicalError::UnknownKey {
                    name: other.to_string(),
                })
            }
        }
    }
    Ok((
        id.ok_or(CanonicalError::MissingKey { name: "id" })?,
        entity_type.ok_or(CanonicalError::MissingKey { name: "type" })?,
        attrs.ok_or(CanonicalError::MissingKey { name: "attrs" })?,
    ))
}

/// Inverse of [`canonical_serialize`]; also accepts non-canonical member
/// order and whitespace, so it doubles as the wire parser.
pub fn canonical_parse(bytes: &[u8]) -> Result<Entity, CanonicalError> {
    let v = json::parse(bytes)?;
    let (id, entity_type, attrs) = shape_from_json(&v)?;
    Ok(Entity {
        id,
        entity_type,
        attrs,
    })
}

/// Parse a patch body (entity shape, `observedAt` optional per change).
pub fn patch_from_bytes(bytes: &[u8]) -> Result<Patch, CanonicalError> {
    let v = json::parse(bytes)?;
    patch_from_json(&v)
}

pub fn patch_from_json(v: &Json) -> Result<Patch, CanonicalError> {
    let (entity_id, entity_type, changes) = shape_from_json(v)?;
    Ok(Patch {
        entity_id,
        entity_type,
        changes,
    })
}

/// True iff the selector matches the entity for this change set.
pub fn match_selector(s: &EntitySelector, e: &Entity, changed: &BTreeSet<String>) -> bool {
    if let Some(t) = &s.entity_type {
        if *t != e.entity_type {
            return false;
        }
    }
    if let Some(p) = &s.id_pattern {
        if !glob_match(p, e.id.as_str()) {
            return false;
        }
    }
    if s.watched.is_empty() {
        return true;
    }
    s.watched.iter().any(|w| changed.contains(w))
}

#[derive(Clone, Debug, PartialEq)]
pub enum MergeError {
    /// Patch aimed at a different entity.
    WrongEntity,
    /// A change still lacks `observedAt`; stamp the patch first.
    UnstampedChange { attr: String },
}

impl fmt::Display for MergeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeError::WrongEntity => f.write_str("wrong-entity"),
            MergeError::UnstampedChange { attr } => write!(f, "unstamped-change: {attr}"),
        }
    }
}

/// Last-write-wins merge: a change applies iff its `observedAt` is not
/// older than the stored one (ties overwrite). Returns the merged entity
/// and the set of applied attribute names.
pub fn merge_patch(e: &Entity, p: &Patch) -> Result<(Entity, BTreeSet<String>), MergeError> {
    if p.entity_id != e.id {
        return Err(MergeError::WrongEntity);
    }
    let mut merged = e.clone();
    let mut applied = BTreeSet::new();
    for (name, change) in &p.changes {
        let incoming = change
            .observed_at
            .ok_or_else(|| MergeError::UnstampedChange { attr: name.clone() })?;
        let apply = match merged.attrs.get(name).and_then(|a| a.observed_at) {
            Some(existing) => incoming >= existing,
            None => true,
        };
        if apply {
            merged.attrs.insert(name.clone(), change.clone());
            applied.insert(name.clone());
        }
    }
    Ok((merged, applied))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ts(s: &str) -> Timestamp {
        Timestamp::parse(s).unwrap()
    }

    fn dryer() -> Entity {
        Entity::new("urn:cap:DryerDrum:dryer01", "DryerDrum").with_attr(
            "temperature",
            Attribute::number(182.5)
                .with_unit("CEL")
                .at(ts("2024-01-01T00:00:00.000Z")),
        )
    }

    #[test]
    fn well_formed_entity_validates() {
        assert!(validate_entity(&dryer()).is_empty());
    }

    #[test]
    fn property_with_object_is_reported() {
        let mut e = dryer();
        e.attrs.get_mut("temperature").unwrap().object = Some("urn:x:Y:z".into());
        let v = validate_entity(&e);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code, ViolationCode::PropertyHasObject);
        assert_eq!(v[0].to_string(), "property-has-object(temperature)");
    }

    #[test]
    fn missing_urn_prefix_is_reported() {
        let mut e = dryer();
        e.id = EntityId::new("dryer01");
        let v = validate_entity(&e);
        assert_eq!(v, vec![Violation::entity(ViolationCode::BadIdPrefix)]);
    }

    #[test]
    fn relationship_coherence() {
        let e = Entity::new("urn:cap:DryerDrum:d1", "DryerDrum").with_attr(
            "plant",
            Attribute::relationship("urn:cap:Plant:gerena".into())
                .at(ts("2024-01-01T00:00:00.000Z")),
        );
        assert!(validate_entity(&e).is_empty());

        let mut bad = e.clone();
        bad.attrs.get_mut("plant").unwrap().unit = Some("CEL".into());
        bad.attrs.get_mut("plant").unwrap().object = None;
        let codes: Vec<_> = validate_entity(&bad).into_iter().map(|v| v.code).collect();
        assert!(codes.contains(&ViolationCode::RelationshipHasUnit));
        assert!(codes.contains(&ViolationCode::RelationshipMissingObject));
    }

    #[test]
    fn canonical_bytes_match_wire_format() {
        let bytes = canonical_serialize(&dryer()).unwrap();
        assert_eq!(
            core::str::from_utf8(&bytes).unwrap(),
            r#"{"attrs":{"temperature":{"kind":"Property","observedAt":"2024-01-01T00:00:00.000Z","unit":"CEL","value":182.5}},"id":"urn:cap:DryerDrum:dryer01","type":"DryerDrum"}"#
        );
    }

    #[test]
    fn serialization_is_deterministic_and_order_independent() {
        let a = Entity::new("urn:cap:T:x", "T")
            .with_attr("a", Attribute::number(1.0).at(ts("2024-01-01T00:00:00.000Z")))
            .with_attr("b", Attribute::number(2.0).at(ts("2024-01-01T00:00:00.000Z")));
        let b = Entity::new("urn:cap:T:x", "T")
            .with_attr("b", Attribute::number(2.0).at(ts("2024-01-01T00:00:00.000Z")))
            .with_attr("a", Attribute::number(1.0).at(ts("2024-01-01T00:00:00.000Z")));
        assert_eq!(canonical_serialize(&a).unwrap(), canonical_serialize(&b).unwrap());
        assert_eq!(canonical_serialize(&a).unwrap(), canonical_serialize(&a).unwrap());
    }

    #[test]
    fn shortest_round_trip_decimal() {
        let e = Entity::new("urn:cap:T:x", "T")
            .with_attr("v", Attribute::number(182.50).at(ts("2024-01-01T00:00:00.000Z")));
        let s = String::from_utf8(canonical_serialize(&e).unwrap()).unwrap();
        assert!(s.contains(r#""value":182.5}"#), "{s}");
    }

    #[test]
    fn non_finite_serialization_fails() {
        let e = Entity::new("urn:cap:T:x", "T")
            .with_attr("v", Attribute::number(f64::NAN).at(ts("2024-01-01T00:00:00.000Z")));
        assert_eq!(canonical_serialize(&e), Err(CanonicalError::NonFinite));
    }

    #[test]
    fn parse_round_trip() {
        let e = dryer().with_attr(
            "plant",
            Attribute::relationship("urn:cap:Plant:gerena".into())
                .at(ts("2024-01-02T03:04:05.678Z")),
        );
        let bytes = canonical_serialize(&e).unwrap();
        assert_eq!(canonical_parse(&bytes).unwrap(), e);
    }

    #[test]
    fn truncated_input_reports_offset() {
        let bytes = canonical_serialize(&dryer()).unwrap();
        let err = canonical_parse(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            CanonicalError::Syntax { offset, .. } => assert!(offset > 0),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_attr_rejected() {
        let raw = br#"{"attrs":{"t":{"kind":"Property","value":1},"t":{"kind":"Property","value":2}},"id":"urn:x:Y:z","type":"Y"}"#;
        assert_eq!(
            canonical_parse(raw),
            Err(CanonicalError::DuplicateAttr { name: "t".into() })
        );
    }

    #[test]
    fn unknown_key_rejected() {
        let raw = br#"{"attrs":{},"id":"urn:x:Y:z","type":"Y","extra":1}"#;
        assert!(matches!(
            canonical_parse(raw),
            Err(CanonicalError::UnknownKey { .. })
        ));
    }

    #[test]
    fn patch_parse_allows_missing_observed_at() {
        let raw = br#"{"attrs":{"t":{"kind":"Property","value":1.5,"unit":"CEL"}},"id":"urn:x:Y:z","type":"Y"}"#;
        let mut p = patch_from_bytes(raw).unwrap();
        assert!(p.changes["t"].observed_at.is_none());
        p.stamp(ts("2024-01-01T00:00:00.000Z"));
        assert_eq!(p.changes["t"].observed_at, Some(ts("2024-01-01T00:00:00.000Z")));
    }

    #[test]
    fn selector_matching_basics() {
        let e = dryer();
        let changed: BTreeSet<String> = ["temperature".to_string()].into();
        let s = EntitySelector {
            entity_type: Some("DryerDrum".into()),
            id_pattern: Some("urn:*:dryer*".into()),
            watched: ["temperature".to_string()].into(),
        };
        // note: the example pattern has to match the full URN
        let s_full = EntitySelector {
            id_pattern: Some("urn:*dryer*".into()),
            ..s.clone()
        };
        assert!(match_selector(&s_full, &e, &changed));

        let watching_pressure = EntitySelector::of_type("DryerDrum").watching(["pressure"]);
        assert!(!match_selector(&watching_pressure, &e, &changed));

        let wrong_type = EntitySelector::of_type("Mixer");
        assert!(!match_selector(&wrong_type, &e, &changed));

        let watch_all = EntitySelector::of_type("DryerDrum");
        assert!(match_selector(&watch_all, &e, &changed));
    }

    #[test]
    fn selector_requires_type_or_pattern() {
        assert_eq!(
            EntitySelector::default().validate(),
            Err(SelectorError::Empty)
        );
        assert!(EntitySelector::of_type("T").validate().is_ok());
    }

    // Brute-force matcher written independently of `match_selector`;
    // randomized agreement check.
    #[test]
    fn selector_agrees_with_naive_matcher() {
        use crate::rng::SplitMix64;

        fn naive(s: &EntitySelector, e: &Entity, changed: &BTreeSet<String>) -> bool {
            let type_ok = match &s.entity_type {
                None => true,
                Some(t) => t == &e.entity_type,
            };
            let pattern_ok = match &s.id_pattern {
                None => true,
                Some(p) => crate::glob::glob_match(p, e.id.as_str()),
            };
            let watched_ok = if s.watched.is_empty() {
                true
            } else {
                let mut hit = false;
                for w in &s.watched {
                    for c in changed {
                        if w == c {
                            hit = true;
                        }
                    }
                }
                hit
            };
            type_ok && pattern_ok && watched_ok
        }

        let mut rng = SplitMix64::new(0xC0FFEE);
        let types = ["DryerDrum", "Mixer", "Press"];
        let attrs = ["temperature", "pressure", "speed", "level"];
        let patterns = [
            None,
            Some("urn:cap:*"),
            Some("urn:cap:DryerDrum:*"),
            Some("*dryer*"),
            Some("urn:cap:?????:d1"),
        ];
        for _ in 0..50 {
            let sel = EntitySelector {
                entity_type: if rng.next_below(2) == 0 {
                    Some(types[rng.next_below(3) as usize].to_string())
                } else {
                    None
                },
                id_pattern: patterns[rng.next_below(5) as usize].map(String::from),
                watched: attrs
                    .iter()
                    .filter(|_| rng.next_below(3) == 0)
                    .map(|s| s.to_string())
                    .collect(),
            };
            for _ in 0..50 {
                let ty = types[rng.next_below(3) as usize];
                let local = ["d1", "dryer01", "m7", "x"][rng.next_below(4) as usize];
                let mut e = Entity::new(
                    alloc::format!("urn:cap:{ty}:{local}").as_str(),
                    ty,
                );
                let mut changed = BTreeSet::new();
                for a in attrs.iter().filter(|_| rng.next_below(2) == 0) {
                    e = e.with_attr(*a, Attribute::number(1.0).at(Timestamp::from_millis(0)));
                    changed.insert(a.to_string());
                }
                assert_eq!(
                    match_selector(&sel, &e, &changed),
                    naive(&sel, &e, &changed),
                    "sel={sel:?} id={} changed={changed:?}",
                    e.id
                );
            }
        }
    }

    #[test]
    fn merge_applies_newer_and_ties() {
        let e = dryer();
        let newer = Patch::new("urn:cap:DryerDrum:dryer01", "DryerDrum").with_change(
            "temperature",
            Attribute::number(190.0)
                .with_unit("CEL")
                .at(ts("2024-01-01T00:00:01.000Z")),
        );
        let (merged, applied) = merge_patch(&e, &newer).unwrap();
        assert_eq!(applied.len(), 1);
        assert_eq!(merged.attrs["temperature"].numeric_value(), Some(190.0));

        let older = Patch::new("urn:cap:DryerDrum:dryer01", "DryerDrum").with_change(
            "temperature",
            Attribute::number(100.0)
                .with_unit("CEL")
                .at(ts("2023-12-31T23:59:59.999Z")),
        );
        let (unchanged, applied) = merge_patch(&e, &older).unwrap();
        assert!(applied.is_empty());
        assert_eq!(unchanged, e);

        let tie = Patch::new("urn:cap:DryerDrum:dryer01", "DryerDrum").with_change(
            "temperature",
            Attribute::number(17.0)
                .with_unit("CEL")
                .at(ts("2024-01-01T00:00:00.000Z")),
        );
        let (tied, applied) = merge_patch(&e, &tie).unwrap();
        assert_eq!(applied.len(), 1);
        assert_eq!(tied.attrs["temperature"].numeric_value(), Some(17.0));
    }

    #[test]
    fn merge_rejects_wrong_entity() {
        let e = dryer();
        let p = Patch::new("urn:cap:DryerDrum:other", "DryerDrum")
            .with_change("t", Attribute::number(1.0).at(ts("2024-01-01T00:00:00.000Z")));
        assert_eq!(merge_patch(&e, &p), Err(MergeError::WrongEntity));
    }

    #[test]
    fn merge_is_idempotent() {
        let e = dryer();
        let p = Patch::new("urn:cap:DryerDrum:dryer01", "DryerDrum").with_change(
            "temperature",
            Attribute::number(200.0)
                .with_unit("CEL")
                .at(ts("2024-01-01T00:01:00.000Z")),
        );
        let (once, _) = merge_patch(&e, &p).unwrap();
        let (twice, _) = merge_patch(&once, &p).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn merge_commutes_on_disjoint_attrs() {
        let e = dryer();
        let p1 = Patch::new("urn:cap:DryerDrum:dryer01", "DryerDrum")
            .with_change("speed", Attribute::number(7.0).at(ts("2024-01-01T00:01:00.000Z")));
        let p2 = Patch::new("urn:cap:DryerDrum:dryer01", "DryerDrum")
            .with_change("level", Attribute::number(0.4).at(ts("2024-01-01T00:02:00.000Z")));
        let (a, _) = merge_patch(&merge_patch(&e, &p1).unwrap().0, &p2).unwrap();
        let (b, _) = merge_patch(&merge_patch(&e, &p2).unwrap().0, &p1).unwrap();
        assert_eq!(a, b);
    }
}
