//! Syntax tree of the shell language, and its canonical text form.
//!
//! `parse(&unparse(s)) == s` for every tree the parser can produce.

use std::fmt::{self, Write};

/// Piece of a word. Adjacent literals with the same quoting are merged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    /// Unquoted literals never contain blanks, quotes or operator bytes.
    Lit { text: String, quoted: bool },
    /// `$NAME`, `$?`, `$$`, `$!`, `$#` or `$0`..`$9`.
    Param { name: String, quoted: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Word(pub Vec<Part>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileMode {
    Read,
    Write,
    Append,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Redir {
    /// `fd< path`, `fd> path`, `fd>> path`.
    File { fd: u8, mode: FileMode, path: Word },
    /// `fd>&to`: fd becomes a copy of `to`.
    Dup { fd: u8, to: u8 },
}

/// A simple command: `NAME=value`... words... with redirections; at least
/// one of the three is non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Command {
    pub assignments: Vec<(String, Word)>,
    pub words: Vec<Word>,
    pub redirs: Vec<Redir>,
}

/// Commands joined by `|`; never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pipeline {
    pub commands: Vec<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connector {
    And,
    Or,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AndOr {
    pub first: Pipeline,
    pub rest: Vec<(Connector, Pipeline)>,
}

/// An and-or list, run in the background when followed by `&`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub list: AndOr,
    pub background: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Script {
    pub jobs: Vec<Job>,
}

pub fn is_name(s: &str) -> bool {
    let mut b = s.bytes();
    matches!(b.next(), Some(c) if c == b'_' || c.is_ascii_alphabetic()) && b.all(|c| c == b'_' || c.is_ascii_alphanumeric())
}

pub fn is_special_param(s: &str) -> bool {
    matches!(s, "?" | "$" | "!" | "#") || (s.len() == 1 && s.as_bytes()[0].is_ascii_digit())
}

fn quote(text: &str, out: &mut String) {
    if !text.contains('\'') {
        out.push('\'');
        out.push_str(text);
        out.push('\'');
        return;
    }
    out.push('"');
    for c in text.chars() {
        if matches!(c, '$' | '`' | '"' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        for part in &self.0 {
            match part {
                Part::Lit { text, quoted: false } => s.push_str(text),
                Part::Lit { text, quoted: true } => quote(text, &mut s),
                Part::Param { name, quoted: false } => write!(s, "${{{name}}}")?,
                Part::Param { name, quoted: true } => write!(s, "\"${{{name}}}\"")?,
            }
        }
        f.write_str(&s)
    }
}

impl fmt::Display for Redir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Redir::File { fd, mode, path } => {
                let op = match mode {
                    FileMode::Read => "<",
                    FileMode::Write => ">",
                    FileMode::Append => ">>",
                };
                write!(f, "{fd}{op}{path}")
            }
            Redir::Dup { fd, to } => write!(f, "{fd}>&{to}"),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut items: Vec<String> = self.assignments.iter().map(|(k, v)| format!("{k}={v}")).collect();
        items.extend(self.words.iter().map(Word::to_string));
        items.extend(self.redirs.iter().map(Redir::to_string));
        f.write_str(&items.join(" "))
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cmds: Vec<String> = self.commands.iter().map(Command::to_string).collect();
        f.write_str(&cmds.join(" | "))
    }
}

impl fmt::Display for AndOr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.first)?;
        for (c, p) in &self.rest {
            let op = match c {
                Connector::And => "&&",
                Connector::Or => "||",
            };
            write!(f, " {op} {p}")?;
        }
        Ok(())
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, job) in self.jobs.iter().enumerate() {
            if i > 0 {
                f.write_str(if self.jobs[i - 1].background { " " } else { "; " })?;
            }
            write!(f, "{}", job.list)?;
            if job.background {
                f.write_str(" &")?;
            }
        }
        Ok(())
    }
}

/// Canonical source text of a script.
pub fn unparse(script: &Script) -> String {
    script.to_string()
}
