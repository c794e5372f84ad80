//! Tokenizer and recursive-descent parser.

use super::ast::*;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseError {
    /// Input ends inside a quote or after an operator that needs more.
    Incomplete,
    Syntax(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(Word),
    Redir { fd: Option<u8>, op: &'static str },
    Pipe,
    AndIf,
    OrIf,
    Amp,
    Semi,
    Newline,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Word(w) => w.to_string(),
        Tok::Redir { op, .. } => (*op).to_owned(),
        Tok::Pipe => "|".into(),
        Tok::AndIf => "&&".into(),
        Tok::OrIf => "||".into(),
        Tok::Amp => "&".into(),
        Tok::Semi => ";".into(),
        Tok::Newline => "newline".into(),
    }
}

fn is_meta(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | ';' | '&' | '|' | '<' | '>' | '(' | ')' | '\'' | '"' | '\\' | '$' | '`')
}

struct WordBuilder {
    parts: Vec<Part>,
    started: bool,
}

impl WordBuilder {
    fn new() -> Self {
        WordBuilder { parts: Vec::new(), started: false }
    }

    fn lit(&mut self, s: &str, quoted: bool) {
        self.started = true;
        if let Some(Part::Lit { text, quoted: q }) = self.parts.last_mut() {
            if *q == quoted {
                text.push_str(s);
                return;
            }
        }
        self.parts.push(Part::Lit { text: s.to_owned(), quoted });
    }

    fn param(&mut self, name: String, quoted: bool) {
        self.started = true;
        self.parts.push(Part::Param { name, quoted });
    }
}

struct Lexer {
    chars: Vec<char>,
    pos: usize,
}

impl Lexer {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek_at(&self, n: usize) -> Option<char> {
        self.chars.get(self.pos + n).copied()
    }

    /// Parses `$...` after the dollar sign.
    fn dollar(&mut self, w: &mut WordBuilder, quoted: bool) -> Result<(), ParseError> {
        match self.peek() {
            Some('{') => {
                let start = self.pos + 1;
                let end = (start..self.chars.len()).find(|&i| self.chars[i] == '}').ok_or(ParseError::Incomplete)?;
                let name: String = self.chars[start..end].iter().collect();
                if !is_name(&name) && !is_special_param(&name) {
                    return Err(ParseError::Syntax(format!("${{{name}}}: bad substitution")));
                }
                self.pos = end + 1;
                w.param(name, quoted);
            }
            Some(c) if c == '_' || c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.peek().is_some_and(|c| c == '_' || c.is_ascii_alphanumeric()) {
                    self.pos += 1;
                }
                w.param(self.chars[start..self.pos].iter().collect(), quoted);
            }
            Some(c) if is_special_param(&c.to_string()) => {
                self.pos += 1;
                w.param(c.to_string(), quoted);
            }
            Some('(') => return Err(ParseError::Syntax("command substitution is not supported".into())),
            _ => w.lit("$", quoted),
        }
        Ok(())
    }

    fn word(&mut self) -> Result<Word, ParseError> {
        let mut w = WordBuilder::new();
        while let Some(c) = self.peek() {
            match c {
                '\'' => {
                    self.pos += 1;
                    let start = self.pos;
                    let end = (start..self.chars.len()).find(|&i| self.chars[i] == '\'').ok_or(ParseError::Incomplete)?;
                    let s: String = self.chars[start..end].iter().collect();
                    w.lit(&s, true);
                    self.pos = end + 1;
                }
                '"' => {
                    self.pos += 1;
                    let mut closed = false;
                    w.lit("", true);
                    while let Some(d) = self.peek() {
                        self.pos += 1;
                        match d {
                            '"' => {
                                closed = true;
                                break;
                            }
                            '\\' => match self.peek() {
                                Some(e @ ('$' | '`' | '"' | '\\')) => {
                                    self.pos += 1;
                                    w.lit(&e.to_string(), true);
                                }
                                Some('\n') => self.pos += 1,
                                Some(_) => w.lit("\\", true),
                                None => return Err(ParseError::Incomplete),
                            },
                            '$' => self.dollar(&mut w, true)?,
                            '`' => return Err(ParseError::Syntax("command substitution is not supported".into())),
                            other => w.lit(&other.to_string(), true),
                        }
                    }
                    if !closed {
                        return Err(ParseError::Incomplete);
                    }
                }
                '\\' => {
                    self.pos += 1;
                    match self.peek() {
                        None => return Err(ParseError::Incomplete),
                        Some('\n') => self.pos += 1,
                        Some(e) => {
                            self.pos += 1;
                            w.lit(&e.to_string(), true);
                        }
                    }
                }
                '$' => {
                    self.pos += 1;
                    self.dollar(&mut w, false)?;
                }
                '`' => return Err(ParseError::Syntax("command substitution is not supported".into())),
                '(' | ')' => return Err(ParseError::Syntax(format!("\"{c}\" unexpected"))),
                c if is_meta(c) => break,
                other => {
                    self.pos += 1;
                    w.lit(&other.to_string(), false);
                }
            }
        }
        // A word like `""` is an empty literal, kept so it yields a field.
        if w.parts.iter().all(|p| matches!(p, Part::Lit { text, .. } if text.is_empty())) && w.started {
            return Ok(Word(vec![Part::Lit { text: String::new(), quoted: true }]));
        }
        w.parts.retain(|p| !matches!(p, Part::Lit { text, .. } if text.is_empty()));
        Ok(Word(merge(w.parts)))
    }

    fn tokens(&mut self) -> Result<Vec<Tok>, ParseError> {
        let mut out = Vec::new();
        while let Some(c) = self.peek() {
            match c {
                ' ' | '\t' => self.pos += 1,
                '\\' if self.peek_at(1) == Some('\n') => self.pos += 2,
                '#' => {
                    while self.peek().is_some_and(|c| c != '\n') {
                        self.pos += 1;
                    }
                }
                '\n' => {
                    self.pos += 1;
                    out.push(Tok::Newline);
                }
                ';' => {
                    self.pos += 1;
                    if self.peek() == Some(';') {
                        return Err(ParseError::Syntax("\";;\" unexpected".into()));
                    }
                    out.push(Tok::Semi);
                }
                '&' => {
                    self.pos += 1;
                    if self.peek() == Some('&') {
                        self.pos += 1;
                        out.push(Tok::AndIf);
                    } else {
                        out.push(Tok::Amp);
                    }
                }
                '|' => {
                    self.pos += 1;
                    if self.peek() == Some('|') {
                        self.pos += 1;
                        out.push(Tok::OrIf);
                    } else {
                        out.push(Tok::Pipe);
                    }
                }
                '<' | '>' => out.push(self.redir_op(None)),
                d if d.is_ascii_digit() && matches!(self.peek_at(1), Some('<' | '>')) => {
                    self.pos += 1;
                    let fd = d as u8 - b'0';
                    if fd > 2 {
                        return Err(ParseError::Syntax(format!("redirection of fd {fd} is not supported")));
                    }
                    out.push(self.redir_op(Some(fd)));
                }
                _ => out.push(Tok::Word(self.word()?)),
            }
        }
        Ok(out)
    }

    fn redir_op(&mut self, fd: Option<u8>) -> Tok {
        let c = self.peek().expect("operator");
        self.pos += 1;
        let op = match (c, self.peek()) {
            ('>', Some('>')) => {
                self.pos += 1;
                ">>"
            }
            ('>', Some('&')) => {
                self.pos += 1;
                ">&"
            }
            ('<', Some('&')) => {
                self.pos += 1;
                "<&"
            }
            ('>', Some('|')) => {
                self.pos += 1;
                ">"
            }
            ('>', _) => ">",
            _ => "<",
        };
        Tok::Redir { fd, op }
    }
}

fn merge(parts: Vec<Part>) -> Vec<Part> {
    let mut out: Vec<Part> = Vec::with_capacity(parts.len());
    for p in parts {
        if let (Some(Part::Lit { text, quoted }), Part::Lit { text: t2, quoted: q2 }) = (out.last_mut(), &p) {
            if quoted == q2 {
                text.push_str(t2);
                continue;
            }
        }
        out.push(p);
    }
    out
}

/// Splits a leading `NAME=` off an unquoted word.
fn as_assignment(w: &Word) -> Option<(String, Word)> {
    let Some(Part::Lit { text, quoted: false }) = w.0.first() else {
        return None;
    };
    let (name, rest) = text.split_once('=')?;
    if !is_name(name) {
        return None;
    }
    let mut value = Vec::new();
    if !rest.is_empty() {
        value.push(Part::Lit { text: rest.to_owned(), quoted: false });
    }
    value.extend(w.0[1..].iter().cloned());
    Some((name.to_owned(), Word(value)))
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn unexpected(&self) -> ParseError {
        match self.peek() {
            Some(t) => ParseError::Syntax(format!("\"{}\" unexpected", describe(t))),
            None => ParseError::Incomplete,
        }
    }

    fn skip_newlines(&mut self) {
        while self.peek() == Some(&Tok::Newline) {
            self.pos += 1;
        }
    }

    fn command(&mut self) -> Result<Command, ParseError> {
        let mut cmd = Command::default();
        loop {
            match self.peek().cloned() {
                Some(Tok::Word(w)) => {
                    self.pos += 1;
                    match as_assignment(&w) {
                        Some(a) if cmd.words.is_empty() => cmd.assignments.push(a),
                        _ => cmd.words.push(w),
                    }
                }
                Some(Tok::Redir { fd, op }) => {
                    self.pos += 1;
                    let target = match self.peek().cloned() {
                        Some(Tok::Word(w)) => w,
                        _ => return Err(self.unexpected()),
                    };
                    self.pos += 1;
                    cmd.redirs.push(match op {
                        ">&" | "<&" => {
                            let default = if op == ">&" { 1 } else { 0 };
                            let to = match target.0.as_slice() {
                                [Part::Lit { text, quoted: false }] if matches!(text.as_str(), "0" | "1" | "2") => {
                                    text.as_bytes()[0] - b'0'
                                }
                                _ => return Err(ParseError::Syntax(format!("{target}: bad fd number"))),
                            };
                            Redir::Dup { fd: fd.unwrap_or(default), to }
                        }
                        ">" => Redir::File { fd: fd.unwrap_or(1), mode: FileMode::Write, path: target },
                        ">>" => Redir::File { fd: fd.unwrap_or(1), mode: FileMode::Append, path: target },
                        _ => Redir::File { fd: fd.unwrap_or(0), mode: FileMode::Read, path: target },
                    });
                }
                _ => break,
            }
        }
        if cmd.assignments.is_empty() && cmd.words.is_empty() && cmd.redirs.is_empty() {
            return Err(self.unexpected());
        }
        Ok(cmd)
    }

    fn pipeline(&mut self) -> Result<Pipeline, ParseError> {
        let mut commands = vec![self.command()?];
        while self.peek() == Some(&Tok::Pipe) {
            self.pos += 1;
            self.skip_newlines();
            commands.push(self.command()?);
        }
        Ok(Pipeline { commands })
    }

    fn and_or(&mut self) -> Result<AndOr, ParseError> {
        let first = self.pipeline()?;
        let mut rest = Vec::new();
        loop {
            let c = match self.peek() {
                Some(Tok::AndIf) => Connector::And,
                Some(Tok::OrIf) => Connector::Or,
                _ => break,
            };
            self.pos += 1;
            self.skip_newlines();
            rest.push((c, self.pipeline()?));
        }
        Ok(AndOr { first, rest })
    }

    fn script(&mut self) -> Result<Script, ParseError> {
        let mut jobs = Vec::new();
        loop {
            self.skip_newlines();
            if self.peek().is_none() {
                break;
            }
            let list = self.and_or()?;
            let background = match self.peek() {
                Some(Tok::Amp) => {
                    self.pos += 1;
                    true
                }
                Some(Tok::Semi) => {
                    self.pos += 1;
                    false
                }
                Some(Tok::Newline) | None => false,
                Some(_) => return Err(self.unexpected()),
            };
            jobs.push(Job { list, background });
        }
        Ok(Script { jobs })
    }
}

pub fn parse(src: &str) -> Result<Script, ParseError> {
    let mut lx = Lexer { chars: src.chars().collect(), pos: 0 };
    let toks = lx.tokens()?;
    let mut p = Parser { toks, pos: 0 };
    p.script()
}
