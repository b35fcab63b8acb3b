use serde_json::Value;
use viplab::repro::{run_suite, Check};

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/report.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn type_matches(ty: &str, v: &Value) -> bool {
    match ty {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "integer" => v.is_u64() || v.is_i64(),
        "number" => v.is_number(),
        "null" => v.is_null(),
        other => panic!("schema type {other}"),
    }
}

/// Checks types, required keys and closed objects; enough for the report's flat shape.
fn conforms(schema: &Value, v: &Value, at: &str) {
    match &schema["type"] {
        Value::String(t) => assert!(type_matches(t, v), "{at}: expected {t}, got {v}"),
        Value::Array(ts) => assert!(
            ts.iter().any(|t| type_matches(t.as_str().unwrap(), v)),
            "{at}: expected one of {ts:?}, got {v}"
        ),
        _ => {}
    }
    if let Some(req) = schema["required"].as_array() {
        for key in req {
            assert!(v.get(key.as_str().unwrap()).is_some(), "{at}: missing {key}");
        }
    }
    if let (Some(props), Some(obj)) = (schema["properties"].as_object(), v.as_object()) {
        for (k, val) in obj {
            let sub = props.get(k).unwrap_or_else(|| panic!("{at}: unexpected key {k}"));
            conforms(sub, val, &format!("{at}.{k}"));
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, item) in arr.iter().enumerate() {
            conforms(items, item, &format!("{at}[{i}]"));
        }
    }
}

#[test]
fn report_matches_published_schema() {
    let report = run_suite(&[Check::A6], 0, |_| {});
    let v = serde_json::to_value(&report).unwrap();
    conforms(&schema(), &v, "report");
    assert_eq!(v["checks"][0]["id"], "A6");
}
