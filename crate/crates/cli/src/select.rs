//! Index lists such as `0,2,5-7`.

use anyhow::{bail, Context, Result};

#[derive(Clone, Copy, Debug)]
pub enum Selection {
    /// Camera indices `0..n`.
    Cameras(usize),
    /// Frame numbers `1..=n`.
    Frames(usize),
}

impl Selection {
    fn bounds(self) -> (usize, usize, &'static str) {
        match self {
            Selection::Cameras(n) => (0, n.saturating_sub(1), "camera"),
            Selection::Frames(n) => (1, n, "frame"),
        }
    }
}

/// Parse `spec`, or everything in range when `None`.
pub fn parse_list(spec: Option<&str>, sel: Selection) -> Result<Vec<usize>> {
    let (lo, hi, what) = sel.bounds();
    let Some(spec) = spec else {
        return Ok((lo..=hi).collect());
    };
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .with_context(|| format!("bad {what} number `{s}`"))
    };
    let mut out = Vec::new();
    for part in spec.split(',') {
        let (a, b) = match part.split_once('-') {
            Some((a, b)) => (num(a)?, num(b)?),
            None => (num(part)?, num(part)?),
        };
        if a > b || a < lo || b > hi {
            bail!("{what} range `{part}` is outside {lo}-{hi}");
        }
        out.extend(a..=b);
    }
    Ok(out)
}
