use super::bad_args;
use crate::model::{ErrorKind, Observation, ToolCall};
use crate::value::Value;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type Record = BTreeMap<String, Value>;
pub type Table = BTreeMap<String, Record>;
pub type Tables = BTreeMap<String, Table>;

/// Rule-based retail backend: `orders` and `users` tables plus a hidden goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetailWorld {
    pub tables: Tables,
    pub goal_state: Tables,
}

fn canonical_tables(t: &Tables) -> Tables {
    t.iter()
        .map(|(name, table)| {
            let table = table
                .iter()
                .map(|(k, rec)| {
                    (
                        k.clone(),
                        rec.iter()
                            .map(|(f, v)| (f.clone(), v.canonical()))
                            .collect(),
                    )
                })
                .collect();
            (name.clone(), table)
        })
        .collect()
}

fn record_text(rec: &Record) -> String {
    Value::Map(rec.clone()).canonical_text()
}

impl RetailWorld {
    pub fn new(tables: Tables, goal_state: Tables) -> Self {
        Self {
            tables: canonical_tables(&tables),
            goal_state: canonical_tables(&goal_state),
        }
    }

    /// True iff the tables deep-equal the goal after canonicalization.
    pub fn verify_db(&self) -> bool {
        canonical_tables(&self.tables) == canonical_tables(&self.goal_state)
    }

    /// Canonical JSON of the tables (the goal is not part of the state).
    pub fn canonical_state(&self) -> String {
        let tables: BTreeMap<String, Value> = canonical_tables(&self.tables)
            .into_iter()
            .map(|(n, t)| {
                (
                    n,
                    Value::Map(t.into_iter().map(|(k, r)| (k, Value::Map(r))).collect()),
                )
            })
            .collect();
        Value::Map(tables).canonical_text()
    }

    fn record(&self, table: &str, key: &str) -> Option<&Record> {
        self.tables.get(table)?.get(key)
    }

    fn with_field(&self, table: &str, key: &str, field: &str, value: Value) -> RetailWorld {
        let mut next = self.clone();
        let rec = next
            .tables
            .get_mut(table)
            .and_then(|t| t.get_mut(key))
            .expect("caller checked existence");
        rec.insert(field.to_owned(), value.canonical());
        next
    }

    /// Applies one call. Errors leave the world unchanged.
    pub fn execute(&self, call: &ToolCall) -> (RetailWorld, Observation) {
        let tool = call.tool_name.as_str();
        let err = |kind, msg: String| (self.clone(), Observation::error(tool, kind, msg));
        let order_id = || call.arg_str("order_id");
        match tool {
            "get_order" | "get_user" => {
                let (table, key_arg) = if tool == "get_order" {
                    ("orders", "order_id")
                } else {
                    ("users", "user_id")
                };
                let Some(key) = call.arg_str(key_arg) else {
                    return bad_args(self, tool, key_arg);
                };
                match self.record(table, key) {
                    Some(rec) => (self.clone(), Observation::ok(tool, record_text(rec))),
                    None => err(ErrorKind::NotFound, format!("{key} not found")),
                }
            }
            "list_orders" => {
                let Some(user) = call.arg_str("user_id") else {
                    return bad_args(self, tool, "user_id");
                };
                if self.record("users", user).is_none() {
                    return err(ErrorKind::NotFound, format!("{user} not found"));
                }
                let ids: Vec<Value> = self
                    .tables
                    .get("orders")
                    .into_iter()
                    .flatten()
                    .filter(|(_, r)| r.get("user_id").and_then(Value::as_str) == Some(user))
                    .map(|(k, _)| Value::str(k.clone()))
                    .collect();
                (
                    self.clone(),
                    Observation::ok(tool, Value::List(ids).canonical_text()),
                )
            }
            "cancel_order" | "refund_order" => {
                let Some(id) = order_id() else {
                    return bad_args(self, tool, "order_id");
                };
                let Some(rec) = self.record("orders", id) else {
                    return err(ErrorKind::NotFound, format!("{id} not found"));
                };
                let (from, to) = if tool == "cancel_order" {
                    ("pending", "cancelled")
                } else {
                    ("delivered", "refunded")
                };
                let status = rec.get("status").and_then(Value::as_str).unwrap_or("");
                if status != from {
                    return err(ErrorKind::InvalidInput, format!("{id} is {status}"));
                }
                (
                    self.with_field("orders", id, "status", Value::str(to)),
                    Observation::ok(tool, format!("{id} {to}")),
                )
            }
            "update_order" => {
                let (Some(id), Some(field)) = (order_id(), call.arg_str("field")) else {
                    return bad_args(self, tool, "order_id, field");
                };
                let Some(value) = call.args.get("value") else {
                    return bad_args(self, tool, "value");
                };
                let Some(rec) = self.record("orders", id) else {
                    return err(ErrorKind::NotFound, format!("{id} not found"));
                };
                if field == "status" || field == "user_id" || !rec.contains_key(field) {
                    return err(
                        ErrorKind::InvalidInput,
                        format!("field {field} cannot be updated"),
                    );
                }
                if rec.get("status").and_then(Value::as_str) != Some("pending") {
                    return err(ErrorKind::InvalidInput, format!("{id} is not pending"));
                }
                (
                    self.with_field("orders", id, field, value.clone()),
                    Observation::ok(tool, format!("{id} {field} updated")),
                )
            }
            _ => err(ErrorKind::InvalidInput, format!("unknown tool {tool}")),
        }
    }
}
