use super::bad_args;
use super::calc;
use crate::model::{ErrorKind, Observation, ToolCall};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenTest {
    pub input: i64,
    pub expected_output: String,
}

/// Files plus hidden tests run against the entry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeWorkspace {
    pub files: BTreeMap<String, String>,
    pub entry: String,
    pub hidden_tests: Vec<HiddenTest>,
    pub step_budget: usize,
}

/// Normalizes a relative path; rejects absolute paths and `..` escapes.
pub fn normalize_path(path: &str) -> Option<String> {
    if path.starts_with('/') {
        return None;
    }
    let mut parts = Vec::new();
    for part in path.split('/') {
        match part {
            "" | "." => {}
            ".." => return None,
            p => parts.push(p),
        }
    }
    (!parts.is_empty()).then(|| parts.join("/"))
}

impl CodeWorkspace {
    pub fn new(
        files: BTreeMap<String, String>,
        entry: &str,
        hidden_tests: Vec<HiddenTest>,
        step_budget: usize,
    ) -> Option<Self> {
        let mut normalized = BTreeMap::new();
        for (p, text) in files {
            normalized.insert(normalize_path(&p)?, text);
        }
        Some(Self {
            files: normalized,
            entry: normalize_path(entry)?,
            hidden_tests,
            step_budget,
        })
    }

    /// Fraction of hidden tests whose output matches exactly.
    pub fn run_tests(&self) -> f64 {
        if self.hidden_tests.is_empty() {
            return 0.0;
        }
        let Some(src) = self.files.get(&self.entry) else {
            return 0.0;
        };
        let passed = self
            .hidden_tests
            .iter()
            .filter(|t| calc::run_program(src, t.input).is_ok_and(|out| out == t.expected_output))
            .count();
        passed as f64 / self.hidden_tests.len() as f64
    }

    pub fn str_replace_edit(
        &self,
        path: &str,
        old_str: &str,
        new_str: &str,
    ) -> (CodeWorkspace, Observation) {
        const TOOL: &str = "str_replace_edit";
        let err = |kind, msg: String| (self.clone(), Observation::error(TOOL, kind, msg));
        let Some(path) = normalize_path(path) else {
            return err(ErrorKind::InvalidInput, format!("bad path {path}"));
        };
        let Some(text) = self.files.get(&path) else {
            return err(ErrorKind::NotFound, format!("{path} not found"));
        };
        if old_str.is_empty() {
            return err(ErrorKind::InvalidInput, "old_str is empty".into());
        }
        match text.matches(old_str).count() {
            0 => err(ErrorKind::NotFound, format!("old_str not found in {path}")),
            1 => {
                let mut next = self.clone();
                next.files
                    .insert(path.clone(), text.replacen(old_str, new_str, 1));
                (next, Observation::ok(TOOL, format!("edited {path}")))
            }
            n => err(
                ErrorKind::InvalidInput,
                format!("old_str occurs {n} times in {path}"),
            ),
        }
    }

    fn bash(&self, command: &str) -> Result<String, (ErrorKind, String)> {
        let words: Vec<&str> = command.split_whitespace().collect();
        let file = |p: &str| -> Result<(String, &String), (ErrorKind, String)> {
            let path =
                normalize_path(p).ok_or((ErrorKind::InvalidInput, format!("bad path {p}")))?;
            let text = self
                .files
                .get(&path)
                .ok_or((ErrorKind::NotFound, format!("{path} not found")))?;
            Ok((path, text))
        };
        match words.as_slice() {
            ["ls"] => Ok(self.files.keys().cloned().collect::<Vec<_>>().join("\n")),
            ["ls", dir] => {
                let dir = normalize_path(dir)
                    .ok_or((ErrorKind::InvalidInput, format!("bad path {dir}")))?;
                let prefix = format!("{dir}/");
                let hits: Vec<&str> = self
                    .files
                    .keys()
                    .filter(|k| k.starts_with(&prefix))
                    .map(String::as_str)
                    .collect();
                if hits.is_empty() {
                    return Err((ErrorKind::NotFound, format!("{dir} not found")));
                }
                Ok(hits.join("\n"))
            }
            ["cat", p] => file(p).map(|(_, t)| t.clone()),
            ["grep", pat, p] => {
                let (_, text) = file(p)?;
                let hits: Vec<String> = text
                    .lines()
                    .enumerate()
                    .filter(|(_, l)| l.contains(pat))
                    .map(|(i, l)| format!("{}:{l}", i + 1))
                    .collect();
                Ok(hits.join("\n"))
            }
            _ => Err((
                ErrorKind::InvalidInput,
                format!("unsupported command: {command}"),
            )),
        }
    }

    /// Applies one call. Errors leave the workspace unchanged.
    pub fn execute(&self, call: &ToolCall) -> (CodeWorkspace, Observation) {
        match call.tool_name.as_str() {
            "bash" => {
                let Some(cmd) = call.arg_str("command") else {
                    return bad_args(self, "bash", "command");
                };
                match self.bash(cmd) {
                    Ok(out) => (self.clone(), Observation::ok("bash", out)),
                    Err((kind, msg)) => (self.clone(), Observation::error("bash", kind, msg)),
                }
            }
            "str_replace_edit" => {
                let (Some(p), Some(o), Some(n)) = (
                    call.arg_str("path"),
                    call.arg_str("old_str"),
                    call.arg_str("new_str"),
                ) else {
                    return bad_args(self, "str_replace_edit", "path, old_str, new_str");
                };
                self.str_replace_edit(p, o, n)
            }
            other => (
                self.clone(),
                Observation::error(
                    other,
                    ErrorKind::InvalidInput,
                    format!("unknown tool {other}"),
                ),
            ),
        }
    }
}
