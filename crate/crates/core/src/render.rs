//! Saliency maps as colored text: ANSI for terminals, standalone HTML files.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::attribution::SaliencyMap;
use crate::error::{Error, Result};

/// Bucket 5 holds `|v| < 0.05` and is left unhighlighted.
pub const NEUTRAL_BUCKET: usize = 5;

/// Nine symmetric buckets over [-1, 1]: 1 is deep red (strongly against the
/// prediction), 5 is neutral, 9 is deep blue (strongly for it).
#[derive(Debug, Clone, PartialEq)]
pub struct ColorScale {
    boundaries: [f64; 8],
    colors: [(u8, u8, u8); 9],
}

impl Default for ColorScale {
    fn default() -> Self {
        Self::new(
            [-0.5, -0.3, -0.15, -0.05, 0.05, 0.15, 0.3, 0.5],
            [
                (165, 0, 38),
                (215, 48, 39),
                (244, 109, 67),
                (253, 174, 97),
                (255, 255, 255),
                (171, 217, 233),
                (116, 173, 209),
                (69, 117, 180),
                (49, 54, 149),
            ],
        )
        .expect("default scale is valid")
    }
}

impl ColorScale {
    pub fn new(boundaries: [f64; 8], colors: [(u8, u8, u8); 9]) -> Result<Self> {
        if boundaries.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::contract("bucket boundaries must be strictly increasing"));
        }
        if (0..4).any(|i| boundaries[i] != -boundaries[7 - i]) {
            return Err(Error::contract("bucket boundaries must be symmetric about 0"));
        }
        if boundaries[4] <= 0.0 {
            return Err(Error::contract("neutral bucket must contain 0"));
        }
        Ok(ColorScale { boundaries, colors })
    }

    pub fn boundaries(&self) -> &[f64; 8] {
        &self.boundaries
    }

    /// Bucket in 1..=9. A value exactly on a boundary falls in the bucket
    /// further from zero, so +0.05 and -0.05 are both highlighted.
    pub fn bucket(&self, value: f64) -> usize {
        if value.is_nan() {
            return NEUTRAL_BUCKET;
        }
        let level = self.boundaries[4..]
            .iter()
            .filter(|&&b| value.abs() >= b)
            .count();
        if value >= 0.0 {
            NEUTRAL_BUCKET + level
        } else {
            NEUTRAL_BUCKET - level
        }
    }

    pub fn color(&self, bucket: usize) -> (u8, u8, u8) {
        self.colors[bucket.clamp(1, 9) - 1]
    }

    fn dark(&self, bucket: usize) -> bool {
        matches!(bucket, 1 | 2 | 8 | 9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ansi,
    Html,
    Json,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(Format::Ansi),
            "html" => Ok(Format::Html),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown format {s:?} (expected ansi|html|json)"))),
        }
    }
}

/// One line of text with 24-bit background colors on highlighted words.
pub fn render_ansi(map: &SaliencyMap, scale: &ColorScale) -> String {
    let words: Vec<String> = map
        .words
        .iter()
        .zip(&map.normalized)
        .map(|(w, &v)| {
            let b = scale.bucket(v);
            if b == NEUTRAL_BUCKET {
                return w.clone();
            }
            let (r, g, bl) = scale.color(b);
            let fg = if scale.dark(b) { "97" } else { "30" };
            format!("\x1b[48;2;{r};{g};{bl}m\x1b[{fg}m{w}\x1b[0m")
        })
        .collect();
    let mut out = format!("[{} | {} {:.4}] ", map.method.tag(), map.predicted_label, map.base_score);
    out.push_str(&words.join(" "));
    out
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(ch),
        }
    }
    out
}

/// A standalone HTML page with one block per map and a color legend.
pub fn render_html(maps: &[SaliencyMap], title: &str, scale: &ColorScale) -> String {
    let mut css = String::new();
    for b in 1..=9 {
        if b == NEUTRAL_BUCKET {
            continue;
        }
        let (r, g, bl) = scale.color(b);
        let fg = if scale.dark(b) { "#fff" } else { "#000" };
        let _ = writeln!(css, "    .b{b} {{ background: rgb({r},{g},{bl}); color: {fg}; }}");
    }
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n");
    html.push_str("  <meta charset=\"utf-8\">\n");
    let _ = writeln!(html, "  <title>{}</title>", escape_html(title));
    html.push_str("  <style>\n");
    html.push_str("    body { font-family: sans-serif; margin: 2em; }\n");
    html.push_str("    .map { margin-bottom: 1.5em; }\n");
    html.push_str("    .meta { color: #555; font-size: 0.85em; margin: 0; }\n");
    html.push_str("    .words span { padding: 0 2px; border-radius: 2px; }\n");
    html.push_str(&css);
    html.push_str("  </style>\n</head>\n<body>\n");
    let _ = writeln!(html, "  <h1>{}</h1>", escape_html(title));
    for map in maps {
        html.push_str("  <div class=\"map\">\n");
        let _ = writeln!(
            html,
            "    <p class=\"meta\">{} &middot; predicted {} ({:.4})</p>",
            escape_html(map.method.tag()),
            escape_html(&map.predicted_label),
            map.base_score
        );
        html.push_str("    <p class=\"words\">");
        for (i, (w, &v)) in map.words.iter().zip(&map.normalized).enumerate() {
            if i > 0 {
                html.push(' ');
            }
            let b = scale.bucket(v);
            let _ = write!(
                html,
                "<span class=\"b{b}\" title=\"{v:.4}\">{}</span>",
                escape_html(w)
            );
        }
        html.push_str("</p>\n  </div>\n");
    }
    html.push_str("  <div class=\"legend\">\n    <p class=\"meta\">Legend</p>\n    <p class=\"words\">");
    let labels = [
        (1, "strong negative"),
        (3, "negative"),
        (4, "weak negative"),
        (6, "weak positive"),
        (7, "positive"),
        (9, "strong positive"),
    ];
    for (i, (b, label)) in labels.iter().enumerate() {
        if i > 0 {
            html.push(' ');
        }
        let _ = write!(html, "<span class=\"b{b}\">{label}</span>");
    }
    html.push_str("</p>\n  </div>\n</body>\n</html>\n");
    html
}
