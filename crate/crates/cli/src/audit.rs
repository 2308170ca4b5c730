//! `fedhtl protocol-audit`: a readable account of a communication log.

use std::fmt::Write as _;
use std::path::Path;

use fedhtl::runtime::{communication_summary, parse_log, LogEntry};

use crate::CliError;

pub struct Audit {
    pub entries: Vec<LogEntry>,
    pub text: String,
}

impl Audit {
    pub fn violations(&self) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter().filter(|e| e.is_violation())
    }
}

pub fn audit_text(log: &str) -> Result<Audit, CliError> {
    let entries = parse_log(log).map_err(|e| CliError::config(format!("communication log: {e}")))?;
    let summary = communication_summary(&entries);
    let mut t = String::new();
    let _ = writeln!(t, "messages");
    for e in &entries {
        let _ = writeln!(
            t,
            "  round {:>4}  sender {:>4}  {:<20} declared {:>8}  bytes {:>10}  {}",
            e.round, e.sender, e.kind, e.declared, e.bytes, e.verdict
        );
    }
    let _ = writeln!(t, "bytes per round");
    for (round, kinds) in &summary.per_round {
        let parts: Vec<String> = kinds.iter().map(|(k, b)| format!("{k}={b}")).collect();
        let _ = writeln!(t, "  round {round:>4}  {}", parts.join("  "));
    }
    let violations: Vec<&LogEntry> = entries.iter().filter(|e| e.is_violation()).collect();
    let _ = writeln!(t, "violations: {}", violations.len());
    for e in &violations {
        let _ = writeln!(t, "  round {} sender {} kind {}: {}", e.round, e.sender, e.kind, e.verdict);
    }
    Ok(Audit { entries, text: t })
}

pub fn cmd_audit(path: &Path) -> Result<Audit, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    audit_text(&text)
}
