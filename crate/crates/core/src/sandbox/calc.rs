//! Line-expression calculator used by hidden tests.
//!
//! Each non-blank line not starting with `#` is one integer expression over
//! the variable `x`: literals, `+ - * / %`, unary minus and parentheses.
//! The program's output is the value of every expression line, newline
//! separated. Division truncates toward zero; overflow and division by zero
//! are evaluation errors.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CalcError {
    #[error("line {line}: unexpected {found:?}")]
    Syntax { line: usize, found: String },
    #[error("line {line}: arithmetic overflow")]
    Overflow { line: usize },
    #[error("line {line}: division by zero")]
    DivisionByZero { line: usize },
    #[error("program has no expression lines")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Num(i64),
    X,
    Op(u8),
    Open,
    Close,
}

fn lex(src: &str, line: usize) -> Result<Vec<Tok>, CalcError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' => i += 1,
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let n = src[start..i]
                    .parse()
                    .map_err(|_| CalcError::Overflow { line })?;
                out.push(Tok::Num(n));
            }
            b'x' => {
                out.push(Tok::X);
                i += 1;
            }
            b'+' | b'-' | b'*' | b'/' | b'%' => {
                out.push(Tok::Op(c));
                i += 1;
            }
            b'(' => {
                out.push(Tok::Open);
                i += 1;
            }
            b')' => {
                out.push(Tok::Close);
                i += 1;
            }
            _ => {
                return Err(CalcError::Syntax {
                    line,
                    found: (c as char).to_string(),
                })
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [Tok],
    pos: usize,
    x: i64,
    line: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.pos).copied()
    }

    fn unexpected(&self) -> CalcError {
        let found = match self.peek() {
            None => "end of line".to_owned(),
            Some(t) => format!("{t:?}"),
        };
        CalcError::Syntax {
            line: self.line,
            found,
        }
    }

    fn expr(&mut self) -> Result<i64, CalcError> {
        let mut acc = self.term()?;
        while let Some(Tok::Op(op @ (b'+' | b'-'))) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            let r = if op == b'+' {
                acc.checked_add(rhs)
            } else {
                acc.checked_sub(rhs)
            };
            acc = r.ok_or(CalcError::Overflow { line: self.line })?;
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<i64, CalcError> {
        let mut acc = self.unary()?;
        while let Some(Tok::Op(op @ (b'*' | b'/' | b'%'))) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            if op != b'*' && rhs == 0 {
                return Err(CalcError::DivisionByZero { line: self.line });
            }
            let r = match op {
                b'*' => acc.checked_mul(rhs),
                b'/' => acc.checked_div(rhs),
                _ => acc.checked_rem(rhs),
            };
            acc = r.ok_or(CalcError::Overflow { line: self.line })?;
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<i64, CalcError> {
        if let Some(Tok::Op(b'-')) = self.peek() {
            self.pos += 1;
            let v = self.unary()?;
            return v
                .checked_neg()
                .ok_or(CalcError::Overflow { line: self.line });
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<i64, CalcError> {
        match self.peek() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(n)
            }
            Some(Tok::X) => {
                self.pos += 1;
                Ok(self.x)
            }
            Some(Tok::Open) => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(Tok::Close) {
                    return Err(self.unexpected());
                }
                self.pos += 1;
                Ok(v)
            }
            _ => Err(self.unexpected()),
        }
    }
}

/// Evaluates one expression with `x` bound.
pub fn eval_line(src: &str, x: i64, line: usize) -> Result<i64, CalcError> {
    let toks = lex(src, line)?;
    let mut p = Parser {
        toks: &toks,
        pos: 0,
        x,
        line,
    };
    let v = p.expr()?;
    if p.pos != toks.len() {
        return Err(p.unexpected());
    }
    Ok(v)
}

/// Runs a program with `x` bound and returns its output text.
pub fn run_program(src: &str, x: i64) -> Result<String, CalcError> {
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(eval_line(t, x, i + 1)?.to_string());
    }
    if out.is_empty() {
        return Err(CalcError::Empty);
    }
    Ok(out.join("\n"))
}
