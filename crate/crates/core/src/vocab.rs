//! Synthetic vocabulary layout.
//!
//! Ids `0..32` are control tokens, `16..32` of which name registry slots for
//! tools. Printable ASCII (`32..=126`) maps one byte to one token, so any
//! canonical argument text or observation payload has a direct token
//! rendering. Agentic use therefore requires `V >= 128`; the pure math
//! operations work with any `V >= 2`.

use serde::{Deserialize, Serialize};

/// Default vocabulary size.
pub const DEFAULT_VOCAB: usize = 128;

/// Smallest vocabulary that can render tool calls and observations.
pub const MIN_AGENT_VOCAB: usize = 128;

/// A vocabulary index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub const fn id(self) -> usize {
        self.0 as usize
    }
}

/// Ends a free-text (think) action.
pub const END_ACTION: Token = Token(1);
/// Ends an answer action; an answer is the trajectory's submit action.
pub const ANSWER: Token = Token(2);
pub const BEGIN_CALL: Token = Token(3);
pub const END_CALL: Token = Token(4);
/// Terminates one argument value.
pub const ARG_END: Token = Token(5);
/// Stands in for an omitted optional argument.
pub const ARG_SKIP: Token = Token(6);
pub const OBS_OK: Token = Token(7);
pub const OBS_ERR: Token = Token(8);
pub const END_OBS: Token = Token(9);
/// Closes the prompt segment of the history.
pub const PROMPT_END: Token = Token(10);

pub const TOOL_SLOT_BASE: u32 = 16;
pub const MAX_TOOLS: usize = 16;

pub const PRINTABLE_FIRST: u8 = 32;
pub const PRINTABLE_LAST: u8 = 126;

/// Observation payloads are clipped to this many characters in the token stream.
pub const OBS_PAYLOAD_CAP: usize = 48;

pub fn tool_slot(index: usize) -> Token {
    debug_assert!(index < MAX_TOOLS);
    Token(TOOL_SLOT_BASE + index as u32)
}

pub fn tool_index(token: Token) -> Option<usize> {
    let id = token.0;
    (TOOL_SLOT_BASE..TOOL_SLOT_BASE + MAX_TOOLS as u32)
        .contains(&id)
        .then(|| (id - TOOL_SLOT_BASE) as usize)
}

pub fn is_printable(token: Token) -> bool {
    (PRINTABLE_FIRST as u32..=PRINTABLE_LAST as u32).contains(&token.0)
}

pub fn char_token(byte: u8) -> Token {
    debug_assert!((PRINTABLE_FIRST..=PRINTABLE_LAST).contains(&byte));
    Token(byte as u32)
}

/// Maps text to printable tokens; characters outside printable ASCII become `?`.
pub fn text_tokens(text: &str) -> Vec<Token> {
    text.chars()
        .map(|c| {
            let b = if c.is_ascii() && (PRINTABLE_FIRST..=PRINTABLE_LAST).contains(&(c as u8)) {
                c as u8
            } else {
                b'?'
            };
            Token(b as u32)
        })
        .collect()
}

/// Inverse of [`text_tokens`] for printable tokens; others render as `?`.
pub fn tokens_text(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| {
            if is_printable(*t) {
                t.0 as u8 as char
            } else {
                '?'
            }
        })
        .collect()
}

/// Prompt rendering: the prompt text followed by [`PROMPT_END`].
pub fn prompt_tokens(text: &str) -> Vec<Token> {
    let mut out = text_tokens(text);
    out.push(PROMPT_END);
    out
}
