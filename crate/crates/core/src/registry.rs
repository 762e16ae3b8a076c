//! Tool signatures and the token grammar of tool calls.
//!
//! A call is rendered as `BEGIN_CALL, tool-slot, (value-chars ARG_END | ARG_SKIP)*, END_CALL`
//! with arguments in declared-schema order. [`CallDecoder`] walks the same
//! grammar one token at a time and is what constrained decoding consults.

use crate::model::ToolCall;
use crate::value::{parse_arg, render_arg, Value, ValueType};
use crate::vocab::{self, Token};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// Longest string argument the sampler may produce.
pub const MAX_STRING_ARG: usize = 24;
const MAX_INT_DIGITS: usize = 18;
const MAX_EXP_DIGITS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ValueType,
    pub required: bool,
    /// Enumerated domain. When present, only these values are admissible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Value>>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, ty: ValueType, required: bool) -> Self {
        Self {
            name: name.into(),
            ty,
            required,
            choices: None,
        }
    }

    pub fn with_choices(mut self, choices: impl IntoIterator<Item = Value>) -> Self {
        self.choices = Some(choices.into_iter().map(|v| v.canonical()).collect());
        self
    }

    pub fn admits(&self, v: &Value) -> bool {
        let v = v.canonical();
        self.ty.admits(&v) && self.choices.as_ref().is_none_or(|c| c.contains(&v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub returns: String,
}

impl ToolSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            params: Vec::new(),
            returns: String::new(),
        }
    }

    pub fn param(mut self, p: ParamSpec) -> Self {
        self.params.push(p);
        self
    }

    pub fn returns(mut self, r: impl Into<String>) -> Self {
        self.returns = r.into();
        self
    }

    pub fn param_spec(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("tool {0:?} is already registered")]
    DuplicateTool(String),
    #[error("registry holds at most {} tools", vocab::MAX_TOOLS)]
    TooManyTools,
    #[error("tool {tool:?}: {reason}")]
    InvalidSpec { tool: String, reason: String },
    #[error("tool {0:?} is not registered")]
    UnknownTool(String),
    #[error("call to {tool:?} does not fit its signature: {reason}")]
    CallMismatch { tool: String, reason: String },
}

/// Ordered set of tool signatures; the order fixes each tool's vocabulary slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToolRegistry {
    tools: Vec<ToolSpec>,
    index: HashMap<String, usize>,
}

impl Serialize for ToolRegistry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tools.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ToolRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let specs = Vec::<ToolSpec>::deserialize(d)?;
        ToolRegistry::from_specs(specs).map_err(serde::de::Error::custom)
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: impl IntoIterator<Item = ToolSpec>) -> Result<Self, RegistryError> {
        specs
            .into_iter()
            .try_fold(Self::new(), |reg, spec| reg.register_tool(spec))
    }

    /// Returns the registry extended with `spec`.
    pub fn register_tool(mut self, spec: ToolSpec) -> Result<Self, RegistryError> {
        if self.index.contains_key(&spec.name) {
            return Err(RegistryError::DuplicateTool(spec.name));
        }
        if self.tools.len() == vocab::MAX_TOOLS {
            return Err(RegistryError::TooManyTools);
        }
        validate_spec(&spec)?;
        self.index.insert(spec.name.clone(), self.tools.len());
        self.tools.push(spec);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.index.get(name).map(|&i| &self.tools[i])
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.tools
    }

    /// Token rendering of a call that fits its signature.
    pub fn serialize_call(&self, call: &ToolCall) -> Result<Vec<Token>, RegistryError> {
        let slot = self
            .slot_of(&call.tool_name)
            .ok_or_else(|| RegistryError::UnknownTool(call.tool_name.clone()))?;
        let spec = &self.tools[slot];
        let mismatch = |reason: String| RegistryError::CallMismatch {
            tool: call.tool_name.clone(),
            reason,
        };
        if let Some(extra) = call.args.keys().find(|k| spec.param_spec(k).is_none()) {
            return Err(mismatch(format!("unknown argument {extra:?}")));
        }
        let mut out = vec![vocab::BEGIN_CALL, vocab::tool_slot(slot)];
        for p in &spec.params {
            match call.args.get(&p.name) {
                Some(v) => {
                    if !p.admits(v) {
                        return Err(mismatch(format!(
                            "argument {:?} outside its declared domain",
                            p.name
                        )));
                    }
                    let text = render_arg(v, p.ty).map_err(|e| mismatch(e.to_string()))?;
                    out.extend(text.bytes().map(vocab::char_token));
                    out.push(vocab::ARG_END);
                }
                None if p.required => {
                    return Err(mismatch(format!("missing argument {:?}", p.name)))
                }
                None => out.push(vocab::ARG_SKIP),
            }
        }
        out.push(vocab::END_CALL);
        Ok(out)
    }

    pub fn decoder(&self) -> CallDecoder<'_> {
        CallDecoder::new(self)
    }

    /// Parses a complete token rendering back into a call.
    pub fn decode_call(&self, tokens: &[Token]) -> Result<ToolCall, DecodeError> {
        let (first, rest) = tokens.split_first().ok_or(DecodeError::Incomplete)?;
        if *first != vocab::BEGIN_CALL {
            return Err(DecodeError::Disallowed { token: *first });
        }
        let mut dec = self.decoder();
        for (i, t) in rest.iter().enumerate() {
            if let Some(call) = dec.push(*t)? {
                return if i + 1 == rest.len() {
                    Ok(call)
                } else {
                    Err(DecodeError::TrailingTokens)
                };
            }
        }
        Err(DecodeError::Incomplete)
    }
}

fn validate_spec(spec: &ToolSpec) -> Result<(), RegistryError> {
    let invalid = |reason: String| RegistryError::InvalidSpec {
        tool: spec.name.clone(),
        reason,
    };
    if spec.name.is_empty() {
        return Err(invalid("empty tool name".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for p in &spec.params {
        if !seen.insert(p.name.as_str()) {
            return Err(invalid(format!("duplicate parameter {:?}", p.name)));
        }
        if let Some(choices) = &p.choices {
            if choices.is_empty() {
                return Err(invalid(format!(
                    "parameter {:?} has an empty domain",
                    p.name
                )));
            }
            for c in choices {
                render_arg(c, p.ty).map_err(|e| invalid(format!("parameter {:?}: {e}", p.name)))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecodeError {
    #[error("token {token:?} is not allowed at this position")]
    Disallowed { token: Token },
    #[error("argument text does not parse: {0}")]
    BadValue(String),
    #[error("call is incomplete")]
    Incomplete,
    #[error("tokens follow the end of the call")]
    TrailingTokens,
}

/// Per-parameter value grammar.
#[derive(Debug, Clone)]
enum ValueGrammar {
    /// One of a fixed set of renderings.
    Enumerated(Vec<String>),
    Int,
    Real,
    String,
}

impl ValueGrammar {
    fn for_param(p: &ParamSpec) -> Self {
        if let Some(choices) = &p.choices {
            let texts = choices
                .iter()
                .filter_map(|c| render_arg(c, p.ty).ok())
                .collect();
            return ValueGrammar::Enumerated(texts);
        }
        match p.ty {
            ValueType::Bool => ValueGrammar::Enumerated(vec!["true".into(), "false".into()]),
            // Free-form containers are not sampled; only the empty value is reachable.
            ValueType::List => ValueGrammar::Enumerated(vec!["[]".into()]),
            ValueType::Map => ValueGrammar::Enumerated(vec!["{}".into()]),
            ValueType::Int => ValueGrammar::Int,
            ValueType::Real => ValueGrammar::Real,
            ValueType::String => ValueGrammar::String,
        }
    }

    /// Bytes that may extend `prefix`, and whether `prefix` may end here.
    fn next(&self, prefix: &str) -> (Vec<u8>, bool) {
        match self {
            ValueGrammar::Enumerated(texts) => {
                let mut bytes: Vec<u8> = texts
                    .iter()
                    .filter(|t| t.len() > prefix.len() && t.starts_with(prefix))
                    .map(|t| t.as_bytes()[prefix.len()])
                    .collect();
                bytes.sort_unstable();
                bytes.dedup();
                (bytes, texts.iter().any(|t| t == prefix))
            }
            ValueGrammar::String => {
                let bytes = if prefix.len() < MAX_STRING_ARG {
                    (vocab::PRINTABLE_FIRST..=vocab::PRINTABLE_LAST)
                        .filter(|&b| b != b'\\')
                        .collect()
                } else {
                    Vec::new()
                };
                (bytes, true)
            }
            ValueGrammar::Int => {
                let digits = prefix.trim_start_matches('-');
                match (prefix.is_empty(), digits) {
                    (true, _) => ((b'0'..=b'9').chain(*b"-").collect(), false),
                    (false, "") => ((b'1'..=b'9').collect(), false),
                    (false, "0") => (Vec::new(), true),
                    (false, d) if d.len() >= MAX_INT_DIGITS => (Vec::new(), true),
                    _ => ((b'0'..=b'9').collect(), true),
                }
            }
            ValueGrammar::Real => real_next(prefix),
        }
    }
}

/// Grammar of `{:.16e}` renderings: `-?d.dddddddddddddddde-?x{1,3}`.
fn real_next(prefix: &str) -> (Vec<u8>, bool) {
    let digits = || (b'0'..=b'9').collect::<Vec<u8>>();
    let body = prefix.strip_prefix('-').unwrap_or(prefix);
    let n = body.len();
    match n {
        0 => {
            let mut d = digits();
            if prefix.is_empty() {
                d.push(b'-');
            }
            (d, false)
        }
        1 => (vec![b'.'], false),
        2..=17 => (digits(), false),
        18 => (vec![b'e'], false),
        _ => {
            let exp = &body[19..];
            let exp_digits = exp.trim_start_matches('-');
            if exp.is_empty() {
                let mut d = digits();
                d.push(b'-');
                (d, false)
            } else if exp_digits.is_empty() {
                ((b'1'..=b'9').collect(), false)
            } else if exp_digits == "0" || exp_digits.len() >= MAX_EXP_DIGITS {
                (Vec::new(), true)
            } else {
                (digits(), true)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum DecodeState {
    ToolName,
    ArgStart,
    InArg,
    EndCall,
    Done,
}

/// Incremental decoder for the tokens following `BEGIN_CALL`.
#[derive(Debug, Clone)]
pub struct CallDecoder<'r> {
    registry: &'r ToolRegistry,
    state: DecodeState,
    tool: usize,
    param: usize,
    grammar: Option<ValueGrammar>,
    buf: String,
    args: BTreeMap<String, Value>,
}

impl<'r> CallDecoder<'r> {
    fn new(registry: &'r ToolRegistry) -> Self {
        Self {
            registry,
            state: DecodeState::ToolName,
            tool: 0,
            param: 0,
            grammar: None,
            buf: String::new(),
            args: BTreeMap::new(),
        }
    }

    fn spec(&self) -> &'r ToolSpec {
        &self.registry.tools[self.tool]
    }

    /// Tokens admissible at the current position.
    pub fn allowed(&self) -> Vec<Token> {
        match self.state {
            DecodeState::ToolName => (0..self.registry.len()).map(vocab::tool_slot).collect(),
            DecodeState::ArgStart => {
                let p = &self.spec().params[self.param];
                let grammar = ValueGrammar::for_param(p);
                let (bytes, can_end) = grammar.next("");
                let mut out: Vec<Token> = bytes.into_iter().map(vocab::char_token).collect();
                if can_end {
                    out.push(vocab::ARG_END);
                }
                if !p.required {
                    out.push(vocab::ARG_SKIP);
                }
                out
            }
            DecodeState::InArg => {
                let (bytes, can_end) = self
                    .grammar
                    .as_ref()
                    .map(|g| g.next(&self.buf))
                    .unwrap_or_default();
                let mut out: Vec<Token> = bytes.into_iter().map(vocab::char_token).collect();
                if can_end {
                    out.push(vocab::ARG_END);
                }
                out
            }
            DecodeState::EndCall => vec![vocab::END_CALL],
            DecodeState::Done => Vec::new(),
        }
    }

    /// Consumes one token; returns the call once `END_CALL` is accepted.
    pub fn push(&mut self, token: Token) -> Result<Option<ToolCall>, DecodeError> {
        if !self.allowed().contains(&token) {
            return Err(DecodeError::Disallowed { token });
        }
        match self.state {
            DecodeState::ToolName => {
                self.tool = vocab::tool_index(token).expect("allowed tool slot");
                self.after_param();
            }
            DecodeState::ArgStart | DecodeState::InArg => {
                if matches!(self.state, DecodeState::ArgStart) {
                    self.grammar = Some(ValueGrammar::for_param(&self.spec().params[self.param]));
                    self.buf.clear();
                }
                if token == vocab::ARG_SKIP {
                    self.param += 1;
                    self.after_param();
                } else if token == vocab::ARG_END {
                    let p = &self.spec().params[self.param];
                    let v = parse_arg(&self.buf, p.ty)
                        .map_err(|e| DecodeError::BadValue(e.to_string()))?;
                    self.args.insert(p.name.clone(), v);
                    self.param += 1;
                    self.after_param();
                } else {
                    self.buf.push(token.0 as u8 as char);
                    self.state = DecodeState::InArg;
                }
            }
            DecodeState::EndCall => {
                self.state = DecodeState::Done;
                let spec = self.spec();
                return Ok(Some(ToolCall::new(
                    spec.name.clone(),
                    std::mem::take(&mut self.args),
                )));
            }
            DecodeState::Done => unreachable!("no token is allowed after END_CALL"),
        }
        Ok(None)
    }

    fn after_param(&mut self) {
        self.state = if self.param < self.spec().params.len() {
            DecodeState::ArgStart
        } else {
            DecodeState::EndCall
        };
    }

    /// Fewest tokens that can still complete the call, `END_CALL` included.
    pub fn min_remaining(&self) -> usize {
        let spec_min = |from: usize, spec: &ToolSpec| -> usize {
            spec.params[from..]
                .iter()
                .map(|p| min_arg_len(p) + 1)
                .sum::<usize>()
                + 1
        };
        match self.state {
            DecodeState::ToolName => {
                1 + self
                    .registry
                    .tools
                    .iter()
                    .map(|s| spec_min(0, s))
                    .min()
                    .unwrap_or(1)
            }
            DecodeState::ArgStart => spec_min(self.param, self.spec()),
            DecodeState::InArg => {
                let g = self.grammar.as_ref().expect("grammar in argument");
                min_completion(g, &self.buf) + 1 + spec_min(self.param + 1, self.spec())
            }
            DecodeState::EndCall => 1,
            DecodeState::Done => 0,
        }
    }
}

fn min_arg_len(p: &ParamSpec) -> usize {
    if !p.required {
        return 0;
    }
    min_completion(&ValueGrammar::for_param(p), "")
}

fn min_completion(g: &ValueGrammar, prefix: &str) -> usize {
    match g {
        ValueGrammar::Enumerated(texts) => texts
            .iter()
            .filter(|t| t.starts_with(prefix))
            .map(|t| t.len() - prefix.len())
            .min()
            .unwrap_or(0),
        ValueGrammar::String => 0,
        ValueGrammar::Int => usize::from(prefix.is_empty() || prefix == "-"),
        ValueGrammar::Real => {
            let body = prefix.strip_prefix('-').unwrap_or(prefix);
            if body.len() <= 19 {
                20 - body.len()
            } else {
                usize::from(body[19..].trim_start_matches('-').is_empty())
            }
        }
    }
}
