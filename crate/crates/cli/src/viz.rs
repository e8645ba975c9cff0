//! Static renderings of one instance's latent grounding.

use std::fmt::Write as _;

use eta_grounding::{EtaError, Result};

const CELL: usize = 36;
const CHAR_W: usize = 7;

pub struct Heatmap<'a> {
    pub title: &'a str,
    pub tokens: &'a [String],
    pub concepts: &'a [String],
    /// Row-major, one row per token.
    pub alpha: &'a [Vec<f64>],
}

impl<'a> Heatmap<'a> {
    pub fn new(title: &'a str, tokens: &'a [String], concepts: &'a [String], alpha: &'a [Vec<f64>]) -> Result<Self> {
        if alpha.len() != tokens.len() || alpha.iter().any(|r| r.len() != concepts.len()) {
            return Err(EtaError::Shape(format!(
                "alpha must be {}x{} to match the labels",
                tokens.len(),
                concepts.len()
            )));
        }
        Ok(Self {
            title,
            tokens,
            concepts,
            alpha,
        })
    }

    /// Tokens down the side, concepts across the top, two decimals per cell.
    pub fn text_grid(&self) -> String {
        let tw = self.tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0).max(5);
        let cw = self
            .concepts
            .iter()
            .map(|c| c.chars().count())
            .max()
            .unwrap_or(0)
            .max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let _ = write!(out, "{:tw$}", "");
        for c in self.concepts {
            let _ = write!(out, " {c:>cw$}");
        }
        out.push('\n');
        for (t, row) in self.tokens.iter().zip(self.alpha) {
            let _ = write!(out, "{t:<tw$}");
            for v in row {
                let _ = write!(out, " {:>cw$.2}", v);
            }
            out.push('\n');
        }
        out
    }

    pub fn svg(&self) -> String {
        let left = 16 + CHAR_W * self.tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        let top = 40 + CHAR_W * self.concepts.iter().map(|c| c.chars().count()).max().unwrap_or(0);
        let width = left + CELL * self.concepts.len() + 16;
        let height = top + CELL * self.tokens.len() + 16;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="8" y="18" font-size="14">{}</text>"#, escape(self.title));
        for (k, c) in self.concepts.iter().enumerate() {
            let x = left + k * CELL + CELL / 2;
            let y = top - 6;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{y}" transform="rotate(-60 {x} {y})">{}</text>"#,
                escape(c)
            );
        }
        for (n, (t, row)) in self.tokens.iter().zip(self.alpha).enumerate() {
            let y = top + n * CELL;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                left - 6,
                y + CELL / 2 + 4,
                escape(t)
            );
            for (k, &v) in row.iter().enumerate() {
                let x = left + k * CELL;
                let v = v.clamp(0.0, 1.0);
                // white to dark blue
                let r = (255.0 * (1.0 - v) + 8.0 * v) as u8;
                let g = (255.0 * (1.0 - v) + 48.0 * v) as u8;
                let b = (255.0 * (1.0 - v) + 107.0 * v) as u8;
                let ink = if v > 0.5 { "white" } else { "black" };
                let _ = writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}" stroke="#ccc"/><text x="{}" y="{}" text-anchor="middle" font-size="10" fill="{ink}">{v:.2}</text>"##,
                    x + CELL / 2,
                    y + CELL / 2 + 4
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
