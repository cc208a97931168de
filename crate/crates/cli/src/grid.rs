//! Parsing of `--grid` and `--seeds` lists.

use anyhow::{bail, Result};

/// Comma-separated numbers. `a,b,...,c` expands geometrically when `c` is a
/// power-of-ratio step from `a`, otherwise arithmetically.
pub fn parse_grid(raw: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    let num = |s: &str| -> Result<f64> {
        let v: f64 = s
            .parse()
            .map_err(|_| anyhow::anyhow!("not a number: {s:?}"))?;
        if !v.is_finite() || v <= 0.0 {
            bail!("epsilon must be positive and finite, got {s}");
        }
        Ok(v)
    };
    let out = match parts.iter().position(|p| *p == "...") {
        None => parts.iter().map(|p| num(p)).collect::<Result<Vec<_>>>()?,
        Some(2) if parts.len() == 4 => expand(num(parts[0])?, num(parts[1])?, num(parts[3])?)?,
        Some(_) => bail!("ellipsis form is a,b,...,c"),
    };
    if out.is_empty() {
        bail!("empty grid");
    }
    if out.windows(2).any(|w| w[1] <= w[0]) {
        bail!("grid must be strictly increasing");
    }
    Ok(out)
}

fn expand(a: f64, b: f64, c: f64) -> Result<Vec<f64>> {
    if b <= a || c < b {
        bail!("a,b,...,c needs a < b <= c");
    }
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * y.abs().max(1.0);
    let ratio = b / a;
    let n = ((c / a).ln() / ratio.ln()).round();
    if close(a * ratio.powf(n), c) {
        return Ok((0..=n as u32).map(|i| a * ratio.powi(i as i32)).collect());
    }
    let step = b - a;
    let n = ((c - a) / step).round();
    if close(a + step * n, c) {
        return Ok((0..=n as u32).map(|i| a + step * f64::from(i)).collect());
    }
    bail!("{c} is not reachable from {a},{b} by a constant ratio or step")
}

pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let seeds = raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| anyhow::anyhow!("not a seed: {s:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("no seeds");
    }
    Ok(seeds)
}
