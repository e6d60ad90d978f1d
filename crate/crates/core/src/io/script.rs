//! Edit scripts.
//!
//! ```json
//! {"ops": [
//!   {"select": {"kind": "rect", "min": [0.1, 0.1], "max": [0.4, 0.5]},
//!    "transform": {"kind": "translate", "v": [0.05, 0.0]}}
//! ]}
//! ```
//!
//! Selection kinds: `all`, `indices {indices}`, `rect {min, max}`,
//! `polygon {vertices}`. Transform kinds: `translate {v}`,
//! `rotate {center, angle}`, `scale {center, sx, sy}`,
//! `displace {offsets}`. Points are `[x, y]` pairs. Unknown kinds and
//! unknown keys are rejected.

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::edit::{EditOp, Selection, Transform};
use crate::types::Coord;

#[derive(Debug, Error, PartialEq)]
pub enum ScriptError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("op {op}: {message}")]
    Semantic { op: usize, message: String },
    #[error("script must be an object with an \"ops\" array: {0}")]
    Structure(String),
}

type Obj = Map<String, Value>;

fn err(op: usize, message: impl Into<String>) -> ScriptError {
    ScriptError::Semantic { op, message: message.into() }
}

fn expect_keys(op: usize, what: &str, obj: &Obj, allowed: &[&str]) -> Result<(), ScriptError> {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(err(op, format!("{what}: unknown key {k:?}")));
        }
    }
    Ok(())
}

fn field<'a>(op: usize, what: &str, obj: &'a Obj, key: &str) -> Result<&'a Value, ScriptError> {
    obj.get(key).ok_or_else(|| err(op, format!("{what}: missing {key:?}")))
}

fn number(op: usize, what: &str, v: &Value) -> Result<f64, ScriptError> {
    v.as_f64().ok_or_else(|| err(op, format!("{what}: expected a number")))
}

fn point(op: usize, what: &str, v: &Value) -> Result<Coord, ScriptError> {
    match v.as_array().map(Vec::as_slice) {
        Some([x, y]) => Ok(Coord::new(number(op, what, x)?, number(op, what, y)?)),
        _ => Err(err(op, format!("{what}: expected an [x, y] pair"))),
    }
}

fn points(op: usize, what: &str, v: &Value) -> Result<Vec<Coord>, ScriptError> {
    v.as_array()
        .ok_or_else(|| err(op, format!("{what}: expected an array of [x, y] pairs")))?
        .iter()
        .map(|p| point(op, what, p))
        .collect()
}

fn kind<'a>(op: usize, what: &str, v: &'a Value) -> Result<(&'a Obj, &'a str), ScriptError> {
    let obj = v.as_object().ok_or_else(|| err(op, format!("{what} must be an object")))?;
    let k = field(op, what, obj, "kind")?
        .as_str()
        .ok_or_else(|| err(op, format!("{what}: \"kind\" must be a string")))?;
    Ok((obj, k))
}

fn parse_selection(op: usize, v: &Value) -> Result<Selection, ScriptError> {
    let (obj, k) = kind(op, "select", v)?;
    let what = format!("select {k}");
    let sel = match k {
        "all" => {
            expect_keys(op, &what, obj, &["kind"])?;
            Selection::All
        }
        "indices" => {
            expect_keys(op, &what, obj, &["kind", "indices"])?;
            let ix = field(op, &what, obj, "indices")?
                .as_array()
                .ok_or_else(|| err(op, "select indices: expected an array"))?
                .iter()
                .map(|i| {
                    i.as_u64()
                        .map(|i| i as usize)
                        .ok_or_else(|| err(op, "select indices: expected non-negative integers"))
                })
                .collect::<Result<_, _>>()?;
            Selection::Indices(ix)
        }
        "rect" => {
            expect_keys(op, &what, obj, &["kind", "min", "max"])?;
            Selection::Rect {
                min: point(op, &what, field(op, &what, obj, "min")?)?,
                max: point(op, &what, field(op, &what, obj, "max")?)?,
            }
        }
        "polygon" => {
            expect_keys(op, &what, obj, &["kind", "vertices"])?;
            Selection::Polygon(points(op, &what, field(op, &what, obj, "vertices")?)?)
        }
        other => return Err(err(op, format!("unknown selection kind {other:?}"))),
    };
    sel.validate().map_err(|e| err(op, e.to_string()))?;
    Ok(sel)
}

fn parse_transform(op: usize, v: &Value) -> Result<Transform, ScriptError> {
    let (obj, k) = kind(op, "transform", v)?;
    let what = format!("transform {k}");
    let t = match k {
        "translate" => {
            expect_keys(op, &what, obj, &["kind", "v"])?;
            Transform::Translate(point(op, &what, field(op, &what, obj, "v")?)?)
        }
        "rotate" => {
            expect_keys(op, &what, obj, &["kind", "center", "angle"])?;
            Transform::Rotate {
                center: point(op, &what, field(op, &what, obj, "center")?)?,
                angle: number(op, &what, field(op, &what, obj, "angle")?)?,
            }
        }
        "scale" => {
            expect_keys(op, &what, obj, &["kind", "center", "sx", "sy"])?;
            Transform::Scale {
                center: point(op, &what, field(op, &what, obj, "center")?)?,
                sx: number(op, &what, field(op, &what, obj, "sx")?)?,
                sy: number(op, &what, field(op, &what, obj, "sy")?)?,
            }
        }
        "displace" => {
            expect_keys(op, &what, obj, &["kind", "offsets"])?;
            Transform::Displace(points(op, &what, field(op, &what, obj, "offsets")?)?)
        }
        other => return Err(err(op, format!("unknown transform kind {other:?}"))),
    };
    t.validate().map_err(|e| err(op, e.to_string()))?;
    Ok(t)
}

/// Parses an already-decoded script value.
pub fn parse_edit_value(doc: &Value) -> Result<Vec<EditOp>, ScriptError> {
    let root = doc.as_object().ok_or_else(|| ScriptError::Structure("root is not an object".into()))?;
    if let Some(k) = root.keys().find(|k| *k != "ops") {
        return Err(ScriptError::Structure(format!("unknown key {k:?}")));
    }
    let ops = root
        .get("ops")
        .ok_or_else(|| ScriptError::Structure("missing \"ops\"".into()))?
        .as_array()
        .ok_or_else(|| ScriptError::Structure("\"ops\" is not an array".into()))?;
    ops.iter()
        .enumerate()
        .map(|(i, op)| {
            let obj = op.as_object().ok_or_else(|| err(i, "op must be an object"))?;
            expect_keys(i, "op", obj, &["select", "transform"])?;
            Ok(EditOp {
                select: parse_selection(i, field(i, "op", obj, "select")?)?,
                transform: parse_transform(i, field(i, "op", obj, "transform")?)?,
            })
        })
        .collect()
}

pub fn parse_edit_script(text: &str) -> Result<Vec<EditOp>, ScriptError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| ScriptError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    parse_edit_value(&doc)
}

fn pt(c: Coord) -> Value {
    json!([c.x, c.y])
}

/// Inverse of [`parse_edit_value`].
pub fn edit_ops_to_value(ops: &[EditOp]) -> Value {
    let ops: Vec<Value> = ops
        .iter()
        .map(|op| {
            let select = match &op.select {
                Selection::All => json!({"kind": "all"}),
                Selection::Indices(ix) => json!({"kind": "indices", "indices": ix}),
                Selection::Rect { min, max } => json!({"kind": "rect", "min": pt(*min), "max": pt(*max)}),
                Selection::Polygon(v) => {
                    json!({"kind": "polygon", "vertices": v.iter().map(|c| pt(*c)).collect::<Vec<_>>()})
                }
            };
            let transform = match &op.transform {
                Transform::Translate(v) => json!({"kind": "translate", "v": pt(*v)}),
                Transform::Rotate { center, angle } => {
                    json!({"kind": "rotate", "center": pt(*center), "angle": angle})
                }
                Transform::Scale { center, sx, sy } => {
                    json!({"kind": "scale", "center": pt(*center), "sx": sx, "sy": sy})
                }
                Transform::Displace(off) => {
                    json!({"kind": "displace", "offsets": off.iter().map(|c| pt(*c)).collect::<Vec<_>>()})
                }
            };
            json!({"select": select, "transform": transform})
        })
        .collect();
    json!({ "ops": ops })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_translate_all() {
        assert_eq!(parse_edit_script(r#"{"ops":[]}"#).unwrap(), vec![]);
        let ops = parse_edit_script(
            r#"{"ops":[{"select":{"kind":"all"},"transform":{"kind":"translate","v":[0.1,-0.2]}}]}"#,
        )
        .unwrap();
        assert_eq!(
            ops,
            vec![EditOp {
                select: Selection::All,
                transform: Transform::Translate(Coord::new(0.1, -0.2))
            }]
        );
    }

    #[test]
    fn rotate_missing_center_is_semantic_at_op_0() {
        let e = parse_edit_script(
            r#"{"ops":[{"select":{"kind":"all"},"transform":{"kind":"rotate","angle":1.0}}]}"#,
        )
        .unwrap_err();
        match e {
            ScriptError::Semantic { op: 0, message } => assert!(message.contains("center")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_has_position() {
        let e = parse_edit_script("{\"ops\": [\n  {\"select\": }\n]}").unwrap_err();
        assert!(matches!(e, ScriptError::Parse { line: 2, .. }), "{e:?}");
    }

    #[test]
    fn rejects_malformed() {
        let ok_sel = r#"{"kind":"all"}"#;
        let ok_tr = r#"{"kind":"translate","v":[0,0]}"#;
        let script = |s: &str, t: &str| format!(r#"{{"ops":[{{"select":{ok_sel},"transform":{ok_tr}}},{{"select":{s},"transform":{t}}}]}}"#);
        let cases = [
            script(r#"{"kind":"lasso"}"#, ok_tr),
            script(ok_sel, r#"{"kind":"shear","k":1}"#),
            script(r#"{"kind":"all","extra":1}"#, ok_tr),
            script(r#"{"kind":"rect","min":[0.5,0.5],"max":[0.1,0.1]}"#, ok_tr),
            script(r#"{"kind":"polygon","vertices":[[0,0],[1,0]]}"#, ok_tr),
            script(r#"{"kind":"indices","indices":[-1]}"#, ok_tr),
            script(ok_sel, r#"{"kind":"scale","center":[0,0],"sx":0,"sy":1}"#),
            script(ok_sel, r#"{"kind":"translate","v":[1]}"#),
            script(ok_sel, r#"{"kind":"translate","v":"x"}"#),
            script(r#"[]"#, ok_tr),
        ];
        for c in &cases {
            match parse_edit_script(c) {
                Err(ScriptError::Semantic { op: 1, .. }) => {}
                other => panic!("{c}: {other:?}"),
            }
        }
        for c in [r#"[]"#, r#"{}"#, r#"{"ops":{}}"#, r#"{"ops":[],"x":1}"#] {
            assert!(matches!(parse_edit_script(c), Err(ScriptError::Structure(_))), "{c}");
        }
    }

    #[test]
    fn value_round_trip() {
        let ops = vec![
            EditOp { select: Selection::Indices(vec![3, 1]), transform: Transform::Displace(vec![Coord::new(0.5, 0.25); 2]) },
            EditOp {
                select: Selection::Polygon(vec![Coord::new(0.0, 0.0), Coord::new(1.0, 0.0), Coord::new(0.0, 1.0)]),
                transform: Transform::Rotate { center: Coord::new(0.5, 0.5), angle: 0.3 },
            },
            EditOp {
                select: Selection::Rect { min: Coord::new(0.0, 0.1), max: Coord::new(0.2, 0.3) },
                transform: Transform::Scale { center: Coord::new(0.5, 0.5), sx: 2.0, sy: -1.0 },
            },
        ];
        let text = edit_ops_to_value(&ops).to_string();
        assert_eq!(parse_edit_script(&text).unwrap(), ops);
    }
}
