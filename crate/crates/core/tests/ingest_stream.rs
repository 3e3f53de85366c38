//! Every successfully routed, decoded and mapped measure produces exactly
//! one broker upsert: count test over a scripted message stream with
//! corrupt frames mixed in.

use cogplant_core::agents::{AttributeMapping, DeviceProvision, DeviceRegistry, ValueType};
use cogplant_core::broker::Broker;
use cogplant_core::rng::SplitMix64;
use cogplant_core::time::Timestamp;

#[test]
fn one_upsert_per_good_measure() {
    let mut registry = DeviceRegistry::new();
    registry
        .provision(DeviceProvision {
            api_key: "k1".into(),
            device_id: "dryer01".into(),
            entity_id: "urn:cap:DryerDrum:dryer01".into(),
            entity_type: "DryerDrum".into(),
            attributes: [
                (
                    "t".to_string(),
                    AttributeMapping::new("temperature", Some("CEL"), ValueType::Number),
                ),
                (
                    "rpm".to_string(),
                    AttributeMapping::new("rotation", None, ValueType::Number),
                ),
            ]
            .into(),
        })
        .unwrap();
    let mut broker = Broker::new();
    let mut rng = SplitMix64::new(17);

    let mut expected_upserts = 0u64;
    let mut performed_upserts = 0u64;
    for i in 0..1000i64 {
        let clock = Timestamp::from_millis(1_704_067_200_000 + i * 1000);
        let (topic, payload, should_succeed): (&str, String, bool) = match rng.next_below(10) {
            0 => ("/nope/k1/dryer01/attrs", "t|1".into(), false), // unroutable
            1 => ("/ul/k9/ghost/attrs", "t|1".into(), false),     // unknown device
            2 => ("/ul/k1/dryer01/attrs", "t|1|rpm".into(), false), // malformed line
            3 => ("/ul/k1/dryer01/attrs", "t|abc".into(), false), // all readings fail
            _ => (
                "/ul/k1/dryer01/attrs",
                format!("t|{}|rpm|{}", rng.next_f64() * 200.0, rng.next_below(20)),
                true,
            ),
        };
        if should_succeed {
            expected_upserts += 1;
        }
        if let Ok((patch, _)) = registry.handle_publish(topic, payload.as_bytes(), clock) {
            broker.upsert(patch, clock).unwrap();
            performed_upserts += 1;
        }
    }
    assert_eq!(performed_upserts, expected_upserts);
    assert!(expected_upserts > 500, "stream generator mis-weighted");
}
