//! Plain-text run reports: `key: value` lines followed by aligned tables.
//!
//! Wall-clock timings are kept apart from the body so that the body is a
//! pure function of seed and config.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, header: &[&str]) -> Self {
        Self {
            title: title.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// First column left-aligned, the rest right-aligned.
    pub fn render(&self) -> String {
        let mut width: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, cell) in width.iter_mut().zip(r) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, &w)) in cells.iter().zip(&width).enumerate() {
                let pad = w - c.chars().count();
                if i == 0 {
                    s.push_str(c);
                    s.push_str(&" ".repeat(pad));
                } else {
                    s.push_str("  ");
                    s.push_str(&" ".repeat(pad));
                    s.push_str(c);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = format!("[{}]\n{}\n", self.title, line(&self.header));
        let total = width.iter().sum::<usize>() + 2 * width.len().saturating_sub(1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub entries: Vec<(String, String)>,
    pub tables: Vec<Table>,
    pub timings: Vec<(String, Duration)>,
}

impl RunReport {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut r = Self::default();
        r.kv("command", command);
        r.kv("seed", seed);
        r
    }

    pub fn kv(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn time(&mut self, phase: &str, d: Duration) {
        self.timings.push((phase.into(), d));
    }

    /// Appends another report's entries under `prefix.` and its tables.
    pub fn absorb(&mut self, prefix: &str, other: RunReport) {
        for (k, v) in other.entries {
            if k != "command" && k != "seed" {
                self.entries.push((format!("{prefix}.{k}"), v));
            }
        }
        self.tables.extend(other.tables);
        self.timings
            .extend(other.timings.into_iter().map(|(k, d)| (format!("{prefix}.{k}"), d)));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            if v.contains('\n') {
                let _ = writeln!(out, "{k}: |");
                for l in v.lines() {
                    let _ = writeln!(out, "  {l}");
                }
            } else {
                let _ = writeln!(out, "{k}: {v}");
            }
        }
        for t in &self.tables {
            out.push('\n');
            out.push_str(&t.render());
        }
        out
    }

    pub fn render_timings(&self) -> String {
        let mut t = Table::new("wall clock", &["phase", "seconds"]);
        for (k, d) in &self.timings {
            t.push(vec![k.clone(), format!("{:.3}", d.as_secs_f64())]);
        }
        t.render()
    }

    /// Writes `<name>.txt` and `<name>.timings.txt` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, name: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{name}.txt")), self.render())?;
        fs::write(dir.join(format!("{name}.timings.txt")), self.render_timings())?;
        Ok(())
    }
}

pub fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_alignment() {
        let mut t = Table::new("t", &["name", "v"]);
        t.push(vec!["a".into(), "10".into()]);
        t.push(vec!["long".into(), "2".into()]);
        assert_eq!(t.render(), "[t]\nname   v\n--------\na     10\nlong   2\n");
    }

    #[test]
    fn multiline_values_are_indented() {
        let mut r = RunReport::new("x", 3);
        r.kv("config", "a = 1\nb = 2");
        r.time("train", Duration::from_millis(5));
        let s = r.render();
        assert!(s.starts_with("command: x\nseed: 3\nconfig: |\n  a = 1\n  b = 2\n"));
        assert!(!s.contains("train"));
        assert!(r.render_timings().contains("0.005"));
    }
}
