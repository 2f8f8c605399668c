//! Compact parameter strings carried by application entries, e.g.
//! `{peers:[liqo1,liqo2]}`.
//!
//! Grammar (ASCII whitespace is tolerated between tokens):
//!
//! ```text
//! params := "{" "}" | "{" pair ("," pair)* "}"
//! pair   := key ":" value
//! value  := atom | "[" atom ("," atom)* "]"
//! atom   := [A-Za-z0-9_.-]+
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A single parameter value: either a scalar or an ordered list of items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(String),
    List(Vec<String>),
}

impl ParamValue {
    pub fn as_list(&self) -> Option<&[String]> {
        match self {
            ParamValue::List(items) => Some(items),
            ParamValue::Scalar(_) => None,
        }
    }
}

pub type Parameters = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parameter syntax error at byte {offset}: {message}")]
pub struct ParameterSyntaxError {
    pub offset: usize,
    pub message: String,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn error(&self, message: impl Into<String>) -> ParameterSyntaxError {
        ParameterSyntaxError {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn expect(&mut self, byte: u8) -> Result<(), ParameterSyntaxError> {
        match self.peek() {
            Some(b) if b == byte => {
                self.pos += 1;
                Ok(())
            }
            Some(b) => Err(self.error(format!(
                "expected '{}', found '{}'",
                byte as char, b as char
            ))),
            None => Err(self.error(format!("expected '{}', found end of input", byte as char))),
        }
    }

    fn atom(&mut self) -> Result<String, ParameterSyntaxError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && is_atom_byte(self.bytes[self.pos]) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected an identifier"));
        }
        // atom bytes are ASCII, so the slice is valid UTF-8
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn value(&mut self) -> Result<ParamValue, ParameterSyntaxError> {
        if self.peek() == Some(b'[') {
            self.pos += 1;
            let mut items = vec![self.atom()?];
            loop {
                match self.peek() {
                    Some(b',') => {
                        self.pos += 1;
                        items.push(self.atom()?);
                    }
                    Some(b']') => {
                        self.pos += 1;
                        return Ok(ParamValue::List(items));
                    }
                    _ => return Err(self.error("expected ',' or ']' in list")),
                }
            }
        }
        self.atom().map(ParamValue::Scalar)
    }
}

fn is_atom_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-')
}

/// Parse a compact parameter string into an ordered map.
pub fn parse_parameters(raw: &str) -> Result<Parameters, ParameterSyntaxError> {
    let mut cur = Cursor {
        bytes: raw.as_bytes(),
        pos: 0,
    };
    let mut out = Parameters::new();
    cur.expect(b'{')?;
    if cur.peek() == Some(b'}') {
        cur.pos += 1;
    } else {
        loop {
            let key_at = {
                cur.skip_ws();
                cur.pos
            };
            let key = cur.atom()?;
            cur.expect(b':')?;
            let value = cur.value()?;
            if out.insert(key.clone(), value).is_some() {
                return Err(ParameterSyntaxError {
                    offset: key_at,
                    message: format!("duplicate key '{key}'"),
                });
            }
            match cur.peek() {
                Some(b',') => cur.pos += 1,
                Some(b'}') => {
                    cur.pos += 1;
                    break;
                }
                _ => return Err(cur.error("expected ',' or '}'")),
            }
        }
    }
    if cur.peek().is_some() {
        return Err(cur.error("trailing characters after '}'"));
    }
    Ok(out)
}

/// Render a map back into the compact form accepted by [`parse_parameters`].
pub fn render_parameters(params: &Parameters) -> String {
    let mut out = String::from("{");
    for (i, (key, value)) in params.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(key);
        out.push(':');
        out.push_str(&value.to_string());
    }
    out.push('}');
    out
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Scalar(s) => f.write_str(s),
            ParamValue::List(items) => write!(f, "[{}]", items.join(",")),
        }
    }
}
